#ifndef RADCHAR_NN_HPP
#define RADCHAR_NN_HPP

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "radchar/autograd.hpp"
#include "radchar/rng.hpp"
#include "radchar/tensor.hpp"

namespace radchar::nn {

enum class Mode { Train, Eval };

template <typename T>
struct NamedParam {
    std::string name;
    Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// LeCun initialisation: weights ~ N(0, 1/fan_in), biases zero. Draw order is
// fixed (flat index order), so a given seed reproduces parameters exactly.
template <typename T>
void lecun_fill(Tensor<T>& w, std::int64_t fan_in, Rng& rng) {
    const double stddev = 1.0 / std::sqrt(double(fan_in));
    for (auto& v : w.data) v = T(rng.normal(0.0, stddev));
}

template <typename T>
class Linear {
public:
    Linear(std::int64_t in, std::int64_t out, Rng& rng)
        : w_(make_var(Tensor<T>({in, out}), true)),
          b_(make_var(Tensor<T>({out}), true)) {
        lecun_fill(w_->value, in, rng);
    }

    Var<T> forward(const Var<T>& x) const { return linear(x, w_, b_); }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".w", w_});
        out.push_back({prefix + ".b", b_});
    }

private:
    Var<T> w_, b_;
};

template <typename T>
class Conv1D {
public:
    Conv1D(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel, Rng& rng)
        : w_(make_var(Tensor<T>({out_ch, in_ch, kernel}), true)),
          b_(make_var(Tensor<T>({out_ch}), true)) {
        lecun_fill(w_->value, in_ch * kernel, rng);
    }

    Var<T> forward(const Var<T>& x) const { return conv1d(x, w_, b_); }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".w", w_});
        out.push_back({prefix + ".b", b_});
    }

private:
    Var<T> w_, b_;
};

template <typename T>
class Conv2D {
public:
    Conv2D(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kh, std::int64_t kw,
           Rng& rng)
        : w_(make_var(Tensor<T>({out_ch, in_ch, kh, kw}), true)),
          b_(make_var(Tensor<T>({out_ch}), true)) {
        lecun_fill(w_->value, in_ch * kh * kw, rng);
    }

    Var<T> forward(const Var<T>& x) const { return conv2d(x, w_, b_); }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".w", w_});
        out.push_back({prefix + ".b", b_});
    }

private:
    Var<T> w_, b_;
};

template <typename T>
class BatchNorm {
public:
    explicit BatchNorm(std::int64_t features)
        : gamma_(make_var(Tensor<T>::full({features}, T(1)), true)),
          beta_(make_var(Tensor<T>({features}), true)),
          running_mean_(std::size_t(features), T(0)),
          running_var_(std::size_t(features), T(1)) {}

    Var<T> forward(const Var<T>& x, Mode mode) {
        if (mode == Mode::Eval)
            return batch_norm(x, gamma_, beta_, false, running_mean_, running_var_);
        std::vector<T> bm, bv;
        auto y = batch_norm(x, gamma_, beta_, true, running_mean_, running_var_, &bm, &bv);
        for (std::size_t i = 0; i < running_mean_.size(); ++i) {
            running_mean_[i] = T((1.0 - kMomentum) * double(running_mean_[i]) +
                                 kMomentum * double(bm[i]));
            running_var_[i] = T((1.0 - kMomentum) * double(running_var_[i]) +
                                kMomentum * double(bv[i]));
        }
        return y;
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".gamma", gamma_});
        out.push_back({prefix + ".beta", beta_});
    }

    std::vector<T>& running_mean() { return running_mean_; }
    std::vector<T>& running_var() { return running_var_; }

private:
    static constexpr double kMomentum = 0.1;
    Var<T> gamma_, beta_;
    std::vector<T> running_mean_, running_var_;
};

// Inverted dropout: eval mode is the identity.
template <typename T>
class Dropout {
public:
    explicit Dropout(double rate) : rate_(rate) {
        if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
    }

    Var<T> forward(const Var<T>& x, Mode mode, Rng& rng) const {
        if (mode == Mode::Eval || rate_ == 0.0) return x;
        Tensor<T> mask(x->value.shape);
        const T keep_scale = T(1.0 / (1.0 - rate_));
        for (auto& m : mask.data) m = rng.uniform() < rate_ ? T(0) : keep_scale;
        return mul_mask(x, std::move(mask));
    }

    double rate() const { return rate_; }

private:
    double rate_;
};

// Scaled dot-product multi-head self-attention over [B, S, D]. The per-head
// width defaults to d_model/heads; pass `head_dim` explicitly when d_model is
// not divisible by the head count (projections then map D -> H*head_dim and
// the output projection maps back to D).
template <typename T>
class MultiHeadSelfAttention {
public:
    MultiHeadSelfAttention(std::int64_t d_model, std::int64_t heads, Rng& rng,
                           std::int64_t head_dim = 0)
        : d_model_(d_model), heads_(heads),
          dh_(head_dim > 0 ? head_dim : d_model / heads),
          wq_(d_model, heads * dh_, rng), wk_(d_model, heads * dh_, rng),
          wv_(d_model, heads * dh_, rng), wo_(heads * dh_, d_model, rng) {
        if (head_dim <= 0 && d_model % heads != 0)
            throw ConfigError("d_model must be divisible by heads");
    }

    Var<T> forward(const Var<T>& x) const {
        if (x->value.ndim() != 3 || x->value.dim(2) != d_model_)
            throw ShapeError("attention expects [B,S," + std::to_string(d_model_) + "]");
        const auto b = x->value.dim(0), s = x->value.dim(1);
        const auto dh = dh_;
        auto split = [&](const Var<T>& t) {
            // [B,S,H*Dh] -> [B*H, S, Dh]
            return reshape(permute_0213(reshape(t, {b, s, heads_, dh})), {b * heads_, s, dh});
        };
        auto q = split(wq_.forward(x));
        auto k = split(wk_.forward(x));
        auto v = split(wv_.forward(x));
        auto scores = scale(bmm(q, k, /*trans_b=*/true), T(1.0 / std::sqrt(double(dh))));
        auto ctx = bmm(softmax_lastdim(scores), v); // [B*H, S, Dh]
        auto merged =
            reshape(permute_0213(reshape(ctx, {b, heads_, s, dh})), {b, s, heads_ * dh});
        return wo_.forward(merged);
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        wq_.collect(prefix + ".wq", out);
        wk_.collect(prefix + ".wk", out);
        wv_.collect(prefix + ".wv", out);
        wo_.collect(prefix + ".wo", out);
    }

    std::int64_t heads() const { return heads_; }
    std::int64_t head_dim() const { return dh_; }

private:
    std::int64_t d_model_, heads_, dh_;
    Linear<T> wq_, wk_, wv_, wo_;
};

template <typename T>
class FeedForward {
public:
    FeedForward(std::int64_t d_model, std::int64_t d_ff, Rng& rng)
        : lin1_(d_model, d_ff, rng), lin2_(d_ff, d_model, rng) {}

    Var<T> forward(const Var<T>& x) const { return lin2_.forward(gelu(lin1_.forward(x))); }

    void collect(const std::string& prefix, ParamList<T>& out) {
        lin1_.collect(prefix + ".lin1", out);
        lin2_.collect(prefix + ".lin2", out);
    }

private:
    Linear<T> lin1_, lin2_;
};

// Post-norm transformer encoder layer:
//   attention -> add -> norm -> feed-forward -> add -> norm
template <typename T>
class EncoderLayer {
public:
    EncoderLayer(std::int64_t d_model, std::int64_t heads, std::int64_t d_ff,
                 double dropout_rate, Rng& rng, std::int64_t head_dim = 0)
        : mhsa_(d_model, heads, rng, head_dim), ff_(d_model, d_ff, rng),
          ln1_gamma_(make_var(Tensor<T>::full({d_model}, T(1)), true)),
          ln1_beta_(make_var(Tensor<T>({d_model}), true)),
          ln2_gamma_(make_var(Tensor<T>::full({d_model}, T(1)), true)),
          ln2_beta_(make_var(Tensor<T>({d_model}), true)),
          drop_(dropout_rate) {}

    Var<T> forward(const Var<T>& x, Mode mode, Rng& dropout_rng) const {
        auto h = layer_norm(add(x, drop_.forward(mhsa_.forward(x), mode, dropout_rng)),
                            ln1_gamma_, ln1_beta_);
        return layer_norm(add(h, drop_.forward(ff_.forward(h), mode, dropout_rng)),
                          ln2_gamma_, ln2_beta_);
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        mhsa_.collect(prefix + ".mhsa", out);
        ff_.collect(prefix + ".ff", out);
        out.push_back({prefix + ".ln1.gamma", ln1_gamma_});
        out.push_back({prefix + ".ln1.beta", ln1_beta_});
        out.push_back({prefix + ".ln2.gamma", ln2_gamma_});
        out.push_back({prefix + ".ln2.beta", ln2_beta_});
    }

private:
    MultiHeadSelfAttention<T> mhsa_;
    FeedForward<T> ff_;
    Var<T> ln1_gamma_, ln1_beta_, ln2_gamma_, ln2_beta_;
    Dropout<T> drop_;
};

// Standard Adam with bias correction. State is positional: the params list
// must be in the same order on every step (and across checkpoint reloads).
template <typename T>
class Adam {
public:
    explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const ParamList<T>& params) {
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.push_back(Tensor<T>::zeros(p.var->value.shape));
                v_.push_back(Tensor<T>::zeros(p.var->value.shape));
            }
        }
        if (m_.size() != params.size()) throw ConfigError("Adam: parameter list changed");
        ++t_;
        const double bc1 = 1.0 - std::pow(double(beta1_), double(t_));
        const double bc2 = 1.0 - std::pow(double(beta2_), double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].var;
            if (p->grad.numel() == 0) p->ensure_grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p->value.data.size(); ++j) {
                const double g = double(p->grad.data[j]);
                m.data[j] = T(double(beta1_) * double(m.data[j]) + (1.0 - double(beta1_)) * g);
                v.data[j] = T(double(beta2_) * double(v.data[j]) + (1.0 - double(beta2_)) * g * g);
                const double mhat = double(m.data[j]) / bc1;
                const double vhat = double(v.data[j]) / bc2;
                p->value.data[j] -= T(double(lr_) * mhat / (std::sqrt(vhat) + double(eps_)));
            }
        }
    }

    std::uint64_t step_count() const { return t_; }
    std::vector<Tensor<T>>& moment1() { return m_; }
    std::vector<Tensor<T>>& moment2() { return v_; }
    void restore_step_count(std::uint64_t t) { t_ = t; }

private:
    T lr_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

template <typename T>
void zero_grads(const ParamList<T>& params) {
    for (const auto& p : params)
        if (p.var->grad.numel() > 0) p.var->zero_grad();
}

} // namespace radchar::nn

#endif
