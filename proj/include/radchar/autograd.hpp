#ifndef RADCHAR_AUTOGRAD_HPP
#define RADCHAR_AUTOGRAD_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <unordered_set>
#include <vector>

#include "radchar/tensor.hpp"

namespace radchar::nn {

// Reverse-mode tape over a small fixed op set. Each op builds a Node whose
// backward closure scatters the node's gradient into its parents.

template <typename T>
class Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
class Node {
public:
    Tensor<T> value;
    Tensor<T> grad; // allocated lazily, same shape as value
    std::vector<Var<T>> parents;
    std::function<void(Node<T>&)> backward_op;
    bool requires_grad = false;

    explicit Node(Tensor<T> v) : value(std::move(v)) {}

    Tensor<T>& ensure_grad() {
        if (grad.numel() == 0) grad = Tensor<T>::zeros(value.shape);
        return grad;
    }
    void zero_grad() {
        std::fill(grad.data.begin(), grad.data.end(), T(0));
    }
};

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>(std::move(value));
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backward_op) {
    auto n = std::make_shared<Node<T>>(std::move(value));
    n->parents = std::move(parents);
    for (const auto& p : n->parents) n->requires_grad = n->requires_grad || p->requires_grad;
    if (n->requires_grad) n->backward_op = std::move(backward_op);
    return n;
}

// Propagates d(loss)/d(node) to every reachable node that requires a
// gradient. `loss` must be a scalar.
template <typename T>
void backward(const Var<T>& loss) {
    if (loss->parents.empty())
        throw NumericError("backward called before any recorded forward computation");
    if (loss->value.numel() != 1)
        throw ShapeError("backward requires a scalar loss, got " +
                         shape_str(loss->value.shape));

    // Reverse DFS finishing order: every node precedes its parents.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.get(), 0}};
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad().data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_op) node->backward_op(*node);
    }
}

// ---------------------------------------------------------------------------
// Eigen helpers

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
    return MatMap<T>(t.data.data(), rows, cols);
}
template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
    return ConstMatMap<T>(t.data.data(), rows, cols);
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting ops

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a->value.same_shape(b->value))
        throw ShapeError("add: shape mismatch " + shape_str(a->value.shape) + " vs " +
                         shape_str(b->value.shape));
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = n.parents[std::size_t(k)];
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
    Tensor<T> out = x->value;
    for (auto& v : out.data) v *= c;
    return make_node<T>(std::move(out), {x}, [c](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += c * n.grad.data[i];
    });
}

// Elementwise product with a constant tensor (no gradient to the mask).
template <typename T>
Var<T> mul_mask(const Var<T>& x, Tensor<T> mask) {
    if (x->value.shape != mask.shape) throw ShapeError("mul_mask: shape mismatch");
    Tensor<T> out = x->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask.data[i];
    auto m = std::make_shared<Tensor<T>>(std::move(mask));
    return make_node<T>(std::move(out), {x}, [m](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i)
            g.data[i] += m->data[i] * n.grad.data[i];
    });
}

// x [..., D] + b [D], broadcast over leading dims.
template <typename T>
Var<T> add_lastdim(const Var<T>& x, const Var<T>& b) {
    const std::int64_t d = x->value.shape.back();
    if (b->value.shape != Shape{d}) throw ShapeError("add_lastdim: bias shape mismatch");
    const std::int64_t rows = x->value.numel() / d;
    Tensor<T> out = x->value;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < d; ++c)
            out.data[std::size_t(r * d + c)] += b->value.data[std::size_t(c)];
    return make_node<T>(std::move(out), {x, b}, [rows, d](Node<T>& n) {
        if (n.parents[0]->requires_grad) {
            auto& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < d; ++c)
                    g.data[std::size_t(c)] += n.grad.data[std::size_t(r * d + c)];
        }
    });
}

// x [B, rest...] + p [rest...], broadcast over the batch dim.
template <typename T>
Var<T> add_batched(const Var<T>& x, const Var<T>& p) {
    const std::int64_t batch = x->value.shape.front();
    const std::int64_t inner = x->value.numel() / batch;
    if (p->value.numel() != inner) throw ShapeError("add_batched: shape mismatch");
    Tensor<T> out = x->value;
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t i = 0; i < inner; ++i)
            out.data[std::size_t(b * inner + i)] += p->value.data[std::size_t(i)];
    return make_node<T>(std::move(out), {x, p}, [batch, inner](Node<T>& n) {
        if (n.parents[0]->requires_grad) {
            auto& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::int64_t b = 0; b < batch; ++b)
                for (std::int64_t i = 0; i < inner; ++i)
                    g.data[std::size_t(i)] += n.grad.data[std::size_t(b * inner + i)];
        }
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x->value;
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    auto saved = std::make_shared<Tensor<T>>(x->value);
    return make_node<T>(std::move(out), {x}, [saved](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i)
            if (saved->data[i] > T(0)) g.data[i] += n.grad.data[i];
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    // Exact form: 0.5 * x * (1 + erf(x / sqrt(2)))
    Tensor<T> out = x->value;
    for (auto& v : out.data) {
        const double xv = double(v);
        v = T(0.5 * xv * (1.0 + std::erf(xv / std::numbers::sqrt2)));
    }
    auto saved = std::make_shared<Tensor<T>>(x->value);
    return make_node<T>(std::move(out), {x}, [saved](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double xv = double(saved->data[i]);
            const double cdf = 0.5 * (1.0 + std::erf(xv / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv * xv);
            g.data[i] += T((cdf + xv * pdf)) * n.grad.data[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Var<T> reshape(const Var<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x->value.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x->value.shape) + " as " +
                         shape_str(new_shape));
    Tensor<T> out(std::move(new_shape), x->value.data);
    return make_node<T>(std::move(out), {x}, [](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    });
}

// [A, B, C, D] -> [A, C, B, D]
template <typename T>
Var<T> permute_0213(const Var<T>& x) {
    if (x->value.ndim() != 4) throw ShapeError("permute_0213 expects a 4-d tensor");
    const auto a = x->value.dim(0), b = x->value.dim(1), c = x->value.dim(2),
               d = x->value.dim(3);
    Tensor<T> out({a, c, b, d});
    for (std::int64_t ia = 0; ia < a; ++ia)
        for (std::int64_t ib = 0; ib < b; ++ib)
            for (std::int64_t ic = 0; ic < c; ++ic) {
                const T* src = x->value.data.data() + ((ia * b + ib) * c + ic) * d;
                T* dst = out.data.data() + ((ia * c + ic) * b + ib) * d;
                std::copy(src, src + d, dst);
            }
    return make_node<T>(std::move(out), {x}, [a, b, c, d](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::int64_t ia = 0; ia < a; ++ia)
            for (std::int64_t ib = 0; ib < b; ++ib)
                for (std::int64_t ic = 0; ic < c; ++ic) {
                    const T* src = n.grad.data.data() + ((ia * c + ic) * b + ib) * d;
                    T* dst = g.data.data() + ((ia * b + ib) * c + ic) * d;
                    for (std::int64_t id = 0; id < d; ++id) dst[id] += src[id];
                }
    });
}

// Selects index `idx` along axis 1 of [B, S, D] -> [B, D].
template <typename T>
Var<T> select_axis1(const Var<T>& x, std::int64_t idx) {
    if (x->value.ndim() != 3) throw ShapeError("select_axis1 expects a 3-d tensor");
    const auto b = x->value.dim(0), s = x->value.dim(1), d = x->value.dim(2);
    if (idx < 0 || idx >= s) throw ShapeError("select_axis1: index out of range");
    Tensor<T> out({b, d});
    for (std::int64_t ib = 0; ib < b; ++ib)
        std::copy(x->value.data.data() + (ib * s + idx) * d,
                  x->value.data.data() + (ib * s + idx) * d + d,
                  out.data.data() + ib * d);
    return make_node<T>(std::move(out), {x}, [b, s, d, idx](Node<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::int64_t ib = 0; ib < b; ++ib)
            for (std::int64_t id = 0; id < d; ++id)
                g.data[std::size_t((ib * s + idx) * d + id)] +=
                    n.grad.data[std::size_t(ib * d + id)];
    });
}

// Prepends a shared token [D] to every sequence of x [B, S, D] -> [B, S+1, D].
template <typename T>
Var<T> prepend_token(const Var<T>& x, const Var<T>& token) {
    if (x->value.ndim() != 3) throw ShapeError("prepend_token expects a 3-d tensor");
    const auto b = x->value.dim(0), s = x->value.dim(1), d = x->value.dim(2);
    if (token->value.shape != Shape{d}) throw ShapeError("prepend_token: token shape mismatch");
    Tensor<T> out({b, s + 1, d});
    for (std::int64_t ib = 0; ib < b; ++ib) {
        std::copy(token->value.data.begin(), token->value.data.end(),
                  out.data.data() + ib * (s + 1) * d);
        std::copy(x->value.data.data() + ib * s * d, x->value.data.data() + (ib + 1) * s * d,
                  out.data.data() + ib * (s + 1) * d + d);
    }
    return make_node<T>(std::move(out), {x, token}, [b, s, d](Node<T>& n) {
        if (n.parents[0]->requires_grad) {
            auto& g = n.parents[0]->ensure_grad();
            for (std::int64_t ib = 0; ib < b; ++ib)
                for (std::int64_t i = 0; i < s * d; ++i)
                    g.data[std::size_t(ib * s * d + i)] +=
                        n.grad.data[std::size_t(ib * (s + 1) * d + d + i)];
        }
        if (n.parents[1]->requires_grad) {
            auto& g = n.parents[1]->ensure_grad();
            for (std::int64_t ib = 0; ib < b; ++ib)
                for (std::int64_t id = 0; id < d; ++id)
                    g.data[std::size_t(id)] += n.grad.data[std::size_t(ib * (s + 1) * d + id)];
        }
    });
}

// Concatenates scalars-per-sample columns: inputs each [B, 1] -> [B, N].
template <typename T>
Var<T> concat_columns(const std::vector<Var<T>>& xs) {
    const std::int64_t b = xs.at(0)->value.dim(0);
    const auto n = static_cast<std::int64_t>(xs.size());
    Tensor<T> out({b, n});
    for (std::int64_t k = 0; k < n; ++k) {
        if (xs[std::size_t(k)]->value.shape != Shape{b, 1})
            throw ShapeError("concat_columns expects [B,1] inputs");
        for (std::int64_t ib = 0; ib < b; ++ib)
            out.data[std::size_t(ib * n + k)] = xs[std::size_t(k)]->value.data[std::size_t(ib)];
    }
    return make_node<T>(std::move(out), xs, [b, n](Node<T>& nd) {
        for (std::int64_t k = 0; k < n; ++k) {
            auto& p = nd.parents[std::size_t(k)];
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::int64_t ib = 0; ib < b; ++ib)
                g.data[std::size_t(ib)] += nd.grad.data[std::size_t(ib * n + k)];
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix ops

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a->value.shape) +
                         " x " + shape_str(b->value.shape));
    const auto m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor<T> out({m, n});
    as_matrix(out, m, n).noalias() = as_matrix(a->value, m, k) * as_matrix(b->value, k, n);
    return make_node<T>(std::move(out), {a, b}, [m, k, n](Node<T>& nd) {
        auto dy = as_matrix(nd.grad, m, n);
        if (nd.parents[0]->requires_grad) {
            auto& ga = nd.parents[0]->ensure_grad();
            as_matrix(ga, m, k).noalias() +=
                dy * as_matrix(nd.parents[1]->value, k, n).transpose();
        }
        if (nd.parents[1]->requires_grad) {
            auto& gb = nd.parents[1]->ensure_grad();
            as_matrix(gb, k, n).noalias() +=
                as_matrix(nd.parents[0]->value, m, k).transpose() * dy;
        }
    });
}

// x [..., K] -> [..., M] through weights [K, M] plus bias [M]. Leading dims
// are flattened into one GEMM.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const std::int64_t k = x->value.shape.back();
    if (w->value.ndim() != 2 || w->value.dim(0) != k)
        throw ShapeError("linear: weight shape " + shape_str(w->value.shape) +
                         " does not accept input " + shape_str(x->value.shape));
    const std::int64_t m = w->value.dim(1);
    if (b->value.shape != Shape{m}) throw ShapeError("linear: bias shape mismatch");
    const std::int64_t rows = x->value.numel() / k;
    Shape out_shape = x->value.shape;
    out_shape.back() = m;
    Tensor<T> out(std::move(out_shape));
    auto y = as_matrix(out, rows, m);
    y.noalias() = as_matrix(x->value, rows, k) * as_matrix(w->value, k, m);
    y.rowwise() += Eigen::Map<const Eigen::RowVector<T, Eigen::Dynamic>>(b->value.data.data(), m);
    return make_node<T>(std::move(out), {x, w, b}, [rows, k, m](Node<T>& nd) {
        auto dy = as_matrix(nd.grad, rows, m);
        if (nd.parents[0]->requires_grad) {
            auto& gx = nd.parents[0]->ensure_grad();
            as_matrix(gx, rows, k).noalias() +=
                dy * as_matrix(nd.parents[1]->value, k, m).transpose();
        }
        if (nd.parents[1]->requires_grad) {
            auto& gw = nd.parents[1]->ensure_grad();
            as_matrix(gw, k, m).noalias() +=
                as_matrix(nd.parents[0]->value, rows, k).transpose() * dy;
        }
        if (nd.parents[2]->requires_grad) {
            auto& gb = nd.parents[2]->ensure_grad();
            Eigen::Map<Eigen::RowVector<T, Eigen::Dynamic>>(gb.data.data(), m) +=
                dy.colwise().sum();
        }
    });
}

// Batched matmul over leading group dim: a [G,M,K] x b [G,K,N] (-> [G,M,N]),
// or a [G,M,K] x b [G,N,K] transposed when trans_b.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b = false) {
    if (a->value.ndim() != 3 || b->value.ndim() != 3 || a->value.dim(0) != b->value.dim(0))
        throw ShapeError("bmm: incompatible shapes");
    const auto g = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2);
    const auto n = trans_b ? b->value.dim(1) : b->value.dim(2);
    if ((trans_b ? b->value.dim(2) : b->value.dim(1)) != k)
        throw ShapeError("bmm: inner dimension mismatch");
    Tensor<T> out({g, m, n});
    for (std::int64_t i = 0; i < g; ++i) {
        ConstMatMap<T> am(a->value.data.data() + i * m * k, m, k);
        MatMap<T> ym(out.data.data() + i * m * n, m, n);
        if (trans_b) {
            ConstMatMap<T> bm(b->value.data.data() + i * n * k, n, k);
            ym.noalias() = am * bm.transpose();
        } else {
            ConstMatMap<T> bm(b->value.data.data() + i * k * n, k, n);
            ym.noalias() = am * bm;
        }
    }
    return make_node<T>(std::move(out), {a, b}, [g, m, k, n, trans_b](Node<T>& nd) {
        for (std::int64_t i = 0; i < g; ++i) {
            ConstMatMap<T> dy(nd.grad.data.data() + i * m * n, m, n);
            ConstMatMap<T> am(nd.parents[0]->value.data.data() + i * m * k, m, k);
            if (nd.parents[0]->requires_grad) {
                MatMap<T> ga(nd.parents[0]->ensure_grad().data.data() + i * m * k, m, k);
                if (trans_b) {
                    ConstMatMap<T> bm(nd.parents[1]->value.data.data() + i * n * k, n, k);
                    ga.noalias() += dy * bm;
                } else {
                    ConstMatMap<T> bm(nd.parents[1]->value.data.data() + i * k * n, k, n);
                    ga.noalias() += dy * bm.transpose();
                }
            }
            if (nd.parents[1]->requires_grad) {
                if (trans_b) {
                    MatMap<T> gb(nd.parents[1]->ensure_grad().data.data() + i * n * k, n, k);
                    gb.noalias() += dy.transpose() * am;
                } else {
                    MatMap<T> gb(nd.parents[1]->ensure_grad().data.data() + i * k * n, k, n);
                    gb.noalias() += am.transpose() * dy;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions (stride 1, no padding) via im2col + GEMM

template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x->value.ndim() != 3 || w->value.ndim() != 3)
        throw ShapeError("conv1d expects x [B,C,L], w [O,C,K]");
    const auto batch = x->value.dim(0), c = x->value.dim(1), l = x->value.dim(2);
    const auto o = w->value.dim(0), k = w->value.dim(2);
    if (w->value.dim(1) != c)
        throw ShapeError("conv1d: channel mismatch " + shape_str(x->value.shape) + " vs " +
                         shape_str(w->value.shape));
    if (b->value.shape != Shape{o}) throw ShapeError("conv1d: bias shape mismatch");
    const auto lo = l - k + 1;
    if (lo < 1) throw ShapeError("conv1d: kernel longer than input");

    auto cols = std::make_shared<Tensor<T>>(Shape{batch * lo, c * k});
    for (std::int64_t ib = 0; ib < batch; ++ib)
        for (std::int64_t j = 0; j < lo; ++j) {
            T* row = cols->data.data() + (ib * lo + j) * c * k;
            for (std::int64_t ic = 0; ic < c; ++ic) {
                const T* src = x->value.data.data() + (ib * c + ic) * l + j;
                std::copy(src, src + k, row + ic * k);
            }
        }
    // rows [B*Lo, O] then scatter to [B, O, Lo]
    EigenMat<T> rows_out = as_matrix(*cols, batch * lo, c * k) *
                           as_matrix(w->value, o, c * k).transpose();
    Tensor<T> out({batch, o, lo});
    for (std::int64_t ib = 0; ib < batch; ++ib)
        for (std::int64_t io = 0; io < o; ++io)
            for (std::int64_t j = 0; j < lo; ++j)
                out.data[std::size_t((ib * o + io) * lo + j)] =
                    rows_out(ib * lo + j, io) + b->value.data[std::size_t(io)];

    return make_node<T>(std::move(out), {x, w, b},
                        [batch, c, l, o, k, lo, cols](Node<T>& nd) {
        EigenMat<T> drows(batch * lo, o);
        for (std::int64_t ib = 0; ib < batch; ++ib)
            for (std::int64_t io = 0; io < o; ++io)
                for (std::int64_t j = 0; j < lo; ++j)
                    drows(ib * lo + j, io) = nd.grad.data[std::size_t((ib * o + io) * lo + j)];
        if (nd.parents[1]->requires_grad) {
            auto& gw = nd.parents[1]->ensure_grad();
            as_matrix(gw, o, c * k).noalias() +=
                drows.transpose() * as_matrix(*cols, batch * lo, c * k);
        }
        if (nd.parents[2]->requires_grad) {
            auto& gb = nd.parents[2]->ensure_grad();
            Eigen::Map<Eigen::RowVector<T, Eigen::Dynamic>>(gb.data.data(), o) +=
                drows.colwise().sum();
        }
        if (nd.parents[0]->requires_grad) {
            EigenMat<T> dcols = drows * as_matrix(nd.parents[1]->value, o, c * k);
            auto& gx = nd.parents[0]->ensure_grad();
            for (std::int64_t ib = 0; ib < batch; ++ib)
                for (std::int64_t j = 0; j < lo; ++j)
                    for (std::int64_t ic = 0; ic < c; ++ic)
                        for (std::int64_t ik = 0; ik < k; ++ik)
                            gx.data[std::size_t((ib * c + ic) * l + j + ik)] +=
                                dcols(ib * lo + j, ic * k + ik);
        }
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x->value.ndim() != 4 || w->value.ndim() != 4)
        throw ShapeError("conv2d expects x [B,C,H,W], w [O,C,KH,KW]");
    const auto batch = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
               wd = x->value.dim(3);
    const auto o = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != c) throw ShapeError("conv2d: channel mismatch");
    if (b->value.shape != Shape{o}) throw ShapeError("conv2d: bias shape mismatch");
    const auto ho = h - kh + 1, wo = wd - kw + 1;
    if (ho < 1 || wo < 1) throw ShapeError("conv2d: kernel larger than input");
    const auto patch = c * kh * kw, np = ho * wo;

    auto cols = std::make_shared<Tensor<T>>(Shape{batch * np, patch});
    for (std::int64_t ib = 0; ib < batch; ++ib)
        for (std::int64_t y = 0; y < ho; ++y)
            for (std::int64_t xx = 0; xx < wo; ++xx) {
                T* row = cols->data.data() + (ib * np + y * wo + xx) * patch;
                for (std::int64_t ic = 0; ic < c; ++ic)
                    for (std::int64_t iy = 0; iy < kh; ++iy) {
                        const T* src =
                            x->value.data.data() + ((ib * c + ic) * h + y + iy) * wd + xx;
                        std::copy(src, src + kw, row + (ic * kh + iy) * kw);
                    }
            }
    EigenMat<T> rows_out =
        as_matrix(*cols, batch * np, patch) * as_matrix(w->value, o, patch).transpose();
    Tensor<T> out({batch, o, ho, wo});
    for (std::int64_t ib = 0; ib < batch; ++ib)
        for (std::int64_t io = 0; io < o; ++io)
            for (std::int64_t j = 0; j < np; ++j)
                out.data[std::size_t((ib * o + io) * np + j)] =
                    rows_out(ib * np + j, io) + b->value.data[std::size_t(io)];

    return make_node<T>(std::move(out), {x, w, b},
                        [batch, c, h, wd, o, kh, kw, ho, wo, patch, np, cols](Node<T>& nd) {
        EigenMat<T> drows(batch * np, o);
        for (std::int64_t ib = 0; ib < batch; ++ib)
            for (std::int64_t io = 0; io < o; ++io)
                for (std::int64_t j = 0; j < np; ++j)
                    drows(ib * np + j, io) = nd.grad.data[std::size_t((ib * o + io) * np + j)];
        if (nd.parents[1]->requires_grad) {
            auto& gw = nd.parents[1]->ensure_grad();
            as_matrix(gw, o, patch).noalias() +=
                drows.transpose() * as_matrix(*cols, batch * np, patch);
        }
        if (nd.parents[2]->requires_grad) {
            auto& gb = nd.parents[2]->ensure_grad();
            Eigen::Map<Eigen::RowVector<T, Eigen::Dynamic>>(gb.data.data(), o) +=
                drows.colwise().sum();
        }
        if (nd.parents[0]->requires_grad) {
            EigenMat<T> dcols = drows * as_matrix(nd.parents[1]->value, o, patch);
            auto& gx = nd.parents[0]->ensure_grad();
            for (std::int64_t ib = 0; ib < batch; ++ib)
                for (std::int64_t y = 0; y < ho; ++y)
                    for (std::int64_t xx = 0; xx < wo; ++xx) {
                        const auto row = ib * np + y * wo + xx;
                        for (std::int64_t ic = 0; ic < c; ++ic)
                            for (std::int64_t iy = 0; iy < kh; ++iy)
                                for (std::int64_t ix = 0; ix < kw; ++ix)
                                    gx.data[std::size_t(((ib * c + ic) * h + y + iy) * wd +
                                                        xx + ix)] +=
                                        dcols(row, (ic * kh + iy) * kw + ix);
                    }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
Var<T> maxpool1d(const Var<T>& x, std::int64_t k) {
    if (x->value.ndim() != 3) throw ShapeError("maxpool1d expects [B,C,L]");
    const auto batch = x->value.dim(0), c = x->value.dim(1), l = x->value.dim(2);
    const auto lo = l / k;
    if (lo < 1) throw ShapeError("maxpool1d: window larger than input");
    Tensor<T> out({batch, c, lo});
    auto arg = std::make_shared<std::vector<std::int64_t>>(std::size_t(batch * c * lo));
    for (std::int64_t bc = 0; bc < batch * c; ++bc)
        for (std::int64_t j = 0; j < lo; ++j) {
            const T* src = x->value.data.data() + bc * l + j * k;
            std::int64_t best = 0;
            for (std::int64_t i = 1; i < k; ++i)
                if (src[i] > src[best]) best = i;
            out.data[std::size_t(bc * lo + j)] = src[best];
            (*arg)[std::size_t(bc * lo + j)] = bc * l + j * k + best;
        }
    return make_node<T>(std::move(out), {x}, [arg](Node<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < arg->size(); ++i)
            g.data[std::size_t((*arg)[i])] += nd.grad.data[i];
    });
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x, std::int64_t k) {
    if (x->value.ndim() != 4) throw ShapeError("maxpool2d expects [B,C,H,W]");
    const auto batch = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
               w = x->value.dim(3);
    const auto ho = h / k, wo = w / k;
    if (ho < 1 || wo < 1) throw ShapeError("maxpool2d: window larger than input");
    Tensor<T> out({batch, c, ho, wo});
    auto arg = std::make_shared<std::vector<std::int64_t>>(std::size_t(batch * c * ho * wo));
    for (std::int64_t bc = 0; bc < batch * c; ++bc)
        for (std::int64_t y = 0; y < ho; ++y)
            for (std::int64_t xx = 0; xx < wo; ++xx) {
                std::int64_t best = bc * h * w + (y * k) * w + xx * k;
                for (std::int64_t iy = 0; iy < k; ++iy)
                    for (std::int64_t ix = 0; ix < k; ++ix) {
                        const auto cand = bc * h * w + (y * k + iy) * w + xx * k + ix;
                        if (x->value.data[std::size_t(cand)] > x->value.data[std::size_t(best)])
                            best = cand;
                    }
                const auto j = (bc * ho + y) * wo + xx;
                out.data[std::size_t(j)] = x->value.data[std::size_t(best)];
                (*arg)[std::size_t(j)] = best;
            }
    return make_node<T>(std::move(out), {x}, [arg](Node<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < arg->size(); ++i)
            g.data[std::size_t((*arg)[i])] += nd.grad.data[i];
    });
}

// ---------------------------------------------------------------------------
// Normalisation and softmax

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
    const std::int64_t d = x->value.shape.back();
    const std::int64_t rows = x->value.numel() / d;
    Tensor<T> out = x->value;
    for (std::int64_t r = 0; r < rows; ++r) {
        T* row = out.data.data() + r * d;
        T mx = row[0];
        for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        double z = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            row[i] = T(std::exp(double(row[i] - mx)));
            z += double(row[i]);
        }
        for (std::int64_t i = 0; i < d; ++i) row[i] = T(double(row[i]) / z);
    }
    auto saved = std::make_shared<Tensor<T>>(out);
    return make_node<T>(std::move(out), {x}, [rows, d, saved](Node<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* y = saved->data.data() + r * d;
            const T* dy = nd.grad.data.data() + r * d;
            double dot = 0;
            for (std::int64_t i = 0; i < d; ++i) dot += double(y[i]) * double(dy[i]);
            T* gx = g.data.data() + r * d;
            for (std::int64_t i = 0; i < d; ++i)
                gx[i] += T((double(dy[i]) - dot) * double(y[i]));
        }
    });
}

// Layer normalisation over the last dim with affine parameters.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5)) {
    const std::int64_t d = x->value.shape.back();
    if (gamma->value.shape != Shape{d} || beta->value.shape != Shape{d})
        throw ShapeError("layer_norm: affine parameter shape mismatch");
    const std::int64_t rows = x->value.numel() / d;
    Tensor<T> out(x->value.shape);
    auto xhat = std::make_shared<Tensor<T>>(x->value.shape);
    auto inv_std = std::make_shared<std::vector<T>>(std::size_t(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = x->value.data.data() + r * d;
        double mean = 0;
        for (std::int64_t i = 0; i < d; ++i) mean += double(row[i]);
        mean /= double(d);
        double var = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double c = double(row[i]) - mean;
            var += c * c;
        }
        var /= double(d);
        const double istd = 1.0 / std::sqrt(var + double(eps));
        (*inv_std)[std::size_t(r)] = T(istd);
        for (std::int64_t i = 0; i < d; ++i) {
            const T xh = T((double(row[i]) - mean) * istd);
            xhat->data[std::size_t(r * d + i)] = xh;
            out.data[std::size_t(r * d + i)] =
                gamma->value.data[std::size_t(i)] * xh + beta->value.data[std::size_t(i)];
        }
    }
    return make_node<T>(std::move(out), {x, gamma, beta},
                        [rows, d, xhat, inv_std](Node<T>& nd) {
        const auto& gamma_v = nd.parents[1]->value;
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* dy = nd.grad.data.data() + r * d;
            const T* xh = xhat->data.data() + r * d;
            if (nd.parents[0]->requires_grad) {
                double sum_dyg = 0, sum_dyg_xh = 0;
                for (std::int64_t i = 0; i < d; ++i) {
                    const double dyg = double(dy[i]) * double(gamma_v.data[std::size_t(i)]);
                    sum_dyg += dyg;
                    sum_dyg_xh += dyg * double(xh[i]);
                }
                auto& gx = nd.parents[0]->ensure_grad();
                const double istd = double((*inv_std)[std::size_t(r)]);
                for (std::int64_t i = 0; i < d; ++i) {
                    const double dyg = double(dy[i]) * double(gamma_v.data[std::size_t(i)]);
                    gx.data[std::size_t(r * d + i)] +=
                        T(istd * (dyg - sum_dyg / d - double(xh[i]) * sum_dyg_xh / d));
                }
            }
            if (nd.parents[1]->requires_grad) {
                auto& gg = nd.parents[1]->ensure_grad();
                for (std::int64_t i = 0; i < d; ++i)
                    gg.data[std::size_t(i)] += dy[i] * xh[i];
            }
            if (nd.parents[2]->requires_grad) {
                auto& gb = nd.parents[2]->ensure_grad();
                for (std::int64_t i = 0; i < d; ++i) gb.data[std::size_t(i)] += dy[i];
            }
        }
    });
}

// Batch normalisation over axis 1 (channels); remaining axes are pooled.
// Train mode normalises with batch statistics and reports them to the caller
// for the running-average update; eval mode uses the provided statistics.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  bool use_batch_stats, const std::vector<T>& running_mean,
                  const std::vector<T>& running_var,
                  std::vector<T>* batch_mean_out = nullptr,
                  std::vector<T>* batch_var_out = nullptr, T eps = T(1e-5)) {
    if (x->value.ndim() < 2) throw ShapeError("batch_norm expects at least 2 dims");
    const auto batch = x->value.dim(0), c = x->value.dim(1);
    const std::int64_t inner = x->value.numel() / (batch * c);
    if (gamma->value.shape != Shape{c} || beta->value.shape != Shape{c})
        throw ShapeError("batch_norm: affine parameter shape mismatch");

    std::vector<double> mean(std::size_t(c), 0.0), var(std::size_t(c), 0.0);
    const double n_per_c = double(batch * inner);
    if (use_batch_stats) {
        for (std::int64_t ib = 0; ib < batch; ++ib)
            for (std::int64_t ic = 0; ic < c; ++ic) {
                const T* src = x->value.data.data() + (ib * c + ic) * inner;
                for (std::int64_t i = 0; i < inner; ++i) mean[std::size_t(ic)] += double(src[i]);
            }
        for (auto& m : mean) m /= n_per_c;
        for (std::int64_t ib = 0; ib < batch; ++ib)
            for (std::int64_t ic = 0; ic < c; ++ic) {
                const T* src = x->value.data.data() + (ib * c + ic) * inner;
                for (std::int64_t i = 0; i < inner; ++i) {
                    const double d = double(src[i]) - mean[std::size_t(ic)];
                    var[std::size_t(ic)] += d * d;
                }
            }
        for (auto& v : var) v /= n_per_c;
        if (batch_mean_out) {
            batch_mean_out->assign(mean.begin(), mean.end());
            batch_var_out->assign(var.begin(), var.end());
        }
    } else {
        if (running_mean.size() != std::size_t(c) || running_var.size() != std::size_t(c))
            throw ShapeError("batch_norm: running statistics missing");
        for (std::int64_t ic = 0; ic < c; ++ic) {
            mean[std::size_t(ic)] = double(running_mean[std::size_t(ic)]);
            var[std::size_t(ic)] = double(running_var[std::size_t(ic)]);
        }
    }

    auto xhat = std::make_shared<Tensor<T>>(x->value.shape);
    auto inv_std = std::make_shared<std::vector<T>>(std::size_t(c));
    for (std::int64_t ic = 0; ic < c; ++ic)
        (*inv_std)[std::size_t(ic)] = T(1.0 / std::sqrt(var[std::size_t(ic)] + double(eps)));
    Tensor<T> out(x->value.shape);
    for (std::int64_t ib = 0; ib < batch; ++ib)
        for (std::int64_t ic = 0; ic < c; ++ic) {
            const T* src = x->value.data.data() + (ib * c + ic) * inner;
            T* xh = xhat->data.data() + (ib * c + ic) * inner;
            T* dst = out.data.data() + (ib * c + ic) * inner;
            const T g = gamma->value.data[std::size_t(ic)];
            const T bt = beta->value.data[std::size_t(ic)];
            const T mu = T(mean[std::size_t(ic)]);
            const T istd = (*inv_std)[std::size_t(ic)];
            for (std::int64_t i = 0; i < inner; ++i) {
                xh[i] = (src[i] - mu) * istd;
                dst[i] = g * xh[i] + bt;
            }
        }

    return make_node<T>(std::move(out), {x, gamma, beta},
                        [batch, c, inner, xhat, inv_std, use_batch_stats](Node<T>& nd) {
        const auto& gamma_v = nd.parents[1]->value;
        const double n_per_c = double(batch * inner);
        for (std::int64_t ic = 0; ic < c; ++ic) {
            double sum_dy = 0, sum_dy_xh = 0;
            for (std::int64_t ib = 0; ib < batch; ++ib) {
                const T* dy = nd.grad.data.data() + (ib * c + ic) * inner;
                const T* xh = xhat->data.data() + (ib * c + ic) * inner;
                for (std::int64_t i = 0; i < inner; ++i) {
                    sum_dy += double(dy[i]);
                    sum_dy_xh += double(dy[i]) * double(xh[i]);
                }
            }
            if (nd.parents[1]->requires_grad)
                nd.parents[1]->ensure_grad().data[std::size_t(ic)] += T(sum_dy_xh);
            if (nd.parents[2]->requires_grad)
                nd.parents[2]->ensure_grad().data[std::size_t(ic)] += T(sum_dy);
            if (nd.parents[0]->requires_grad) {
                auto& gx = nd.parents[0]->ensure_grad();
                const double g = double(gamma_v.data[std::size_t(ic)]);
                const double istd = double((*inv_std)[std::size_t(ic)]);
                for (std::int64_t ib = 0; ib < batch; ++ib) {
                    const T* dy = nd.grad.data.data() + (ib * c + ic) * inner;
                    const T* xh = xhat->data.data() + (ib * c + ic) * inner;
                    T* dst = gx.data.data() + (ib * c + ic) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) {
                        double v = double(dy[i]);
                        if (use_batch_stats)
                            v -= sum_dy / n_per_c + double(xh[i]) * sum_dy_xh / n_per_c;
                        dst[i] += T(g * istd * v);
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Losses and reductions

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    double acc = 0;
    for (T v : x->value.data) acc += double(v);
    return make_node<T>(Tensor<T>::scalar(T(acc)), {x}, [](Node<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        const T dy = nd.grad.data[0];
        for (auto& v : g.data) v += dy;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    return scale(sum_all(x), T(1) / T(x->value.numel()));
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    if (logits->value.ndim() != 2) throw ShapeError("cross_entropy expects [B,C] logits");
    const auto b = logits->value.dim(0), c = logits->value.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b)
        throw ShapeError("cross_entropy: batch/label count mismatch");
    for (int l : labels)
        if (l < 0 || l >= c) throw ShapeError("cross_entropy: label out of range");
    auto probs = std::make_shared<Tensor<T>>(Shape{b, c});
    double loss = 0;
    for (std::int64_t r = 0; r < b; ++r) {
        const T* row = logits->value.data.data() + r * c;
        double mx = double(row[0]);
        for (std::int64_t i = 1; i < c; ++i) mx = std::max(mx, double(row[i]));
        double z = 0;
        for (std::int64_t i = 0; i < c; ++i) z += std::exp(double(row[i]) - mx);
        const double log_z = std::log(z) + mx;
        for (std::int64_t i = 0; i < c; ++i)
            probs->data[std::size_t(r * c + i)] = T(std::exp(double(row[i]) - log_z));
        loss -= double(row[labels[std::size_t(r)]]) - log_z;
    }
    loss /= double(b);
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return make_node<T>(Tensor<T>::scalar(T(loss)), {logits},
                        [b, c, probs, labels_copy](Node<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        const double dy = double(nd.grad.data[0]) / double(b);
        for (std::int64_t r = 0; r < b; ++r)
            for (std::int64_t i = 0; i < c; ++i) {
                double v = double(probs->data[std::size_t(r * c + i)]);
                if (i == (*labels_copy)[std::size_t(r)]) v -= 1.0;
                g.data[std::size_t(r * c + i)] += T(v * dy);
            }
    });
}

// Mean absolute error against a constant target of the same element count.
template <typename T>
Var<T> l1_loss(const Var<T>& pred, const std::vector<T>& target) {
    const auto n = pred->value.numel();
    if (static_cast<std::int64_t>(target.size()) != n)
        throw ShapeError("l1_loss: element count mismatch");
    double loss = 0;
    for (std::int64_t i = 0; i < n; ++i)
        loss += std::abs(double(pred->value.data[std::size_t(i)]) - double(target[std::size_t(i)]));
    loss /= double(n);
    auto t = std::make_shared<std::vector<T>>(target);
    return make_node<T>(Tensor<T>::scalar(T(loss)), {pred}, [n, t](Node<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        const double dy = double(nd.grad.data[0]) / double(n);
        for (std::int64_t i = 0; i < n; ++i) {
            const double diff =
                double(nd.parents[0]->value.data[std::size_t(i)]) - double((*t)[std::size_t(i)]);
            const double s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
            g.data[std::size_t(i)] += T(s * dy);
        }
    });
}

// Weighted sum of scalar losses.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& weights) {
    if (xs.size() != weights.size()) throw ShapeError("weighted_sum: arity mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i]->value.numel() != 1) throw ShapeError("weighted_sum expects scalars");
        acc += double(weights[i]) * double(xs[i]->value.data[0]);
    }
    auto w = std::make_shared<std::vector<T>>(weights);
    return make_node<T>(Tensor<T>::scalar(T(acc)), xs, [w](Node<T>& nd) {
        for (std::size_t i = 0; i < nd.parents.size(); ++i)
            if (nd.parents[i]->requires_grad)
                nd.parents[i]->ensure_grad().data[0] += (*w)[i] * nd.grad.data[0];
    });
}

} // namespace radchar::nn

#endif
