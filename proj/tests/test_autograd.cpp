#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "radchar/autograd.hpp"
#include "radchar/nn.hpp"
#include "radchar/rng.hpp"

using namespace radchar;
using namespace radchar::nn;

namespace {

using D = double;

Tensor<D> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<D> t(std::move(shape));
    for (auto& v : t.data) v = scale * rng.normal();
    return t;
}

// Central finite differences against the tape, elementwise over every leaf.
// `build` must construct a fresh graph from the leaves on every call.
void check_gradients(std::vector<Var<D>> leaves,
                     const std::function<Var<D>()>& build,
                     double tol = 1e-4, double eps = 1e-5) {
    for (auto& leaf : leaves) {
        leaf->ensure_grad();
        leaf->zero_grad();
    }
    auto loss = build();
    backward(loss);
    for (auto& leaf : leaves) {
        REQUIRE(leaf->grad.numel() == leaf->value.numel());
        for (std::size_t i = 0; i < leaf->value.data.size(); ++i) {
            const double keep = leaf->value.data[i];
            leaf->value.data[i] = keep + eps;
            const double up = build()->value.data[0];
            leaf->value.data[i] = keep - eps;
            const double down = build()->value.data[0];
            leaf->value.data[i] = keep;
            const double fd = (up - down) / (2.0 * eps);
            const double an = leaf->grad.data[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
            REQUIRE(std::abs(fd - an) / denom < tol);
        }
    }
}

// Collapses any tensor to a scalar through a fixed random functional so
// intermediate ops can be checked with a scalar loss.
Var<D> collapse(const Var<D>& y, Rng& rng) {
    Tensor<D> w(y->value.shape);
    for (auto& v : w.data) v = rng.normal();
    return sum_all(mul_mask(y, std::move(w)));
}

} // namespace

TEST_CASE("sum gradient is all ones") {
    auto x = make_var(Tensor<D>({2, 3}, {1, 2, 3, 4, 5, 6}), true);
    auto loss = sum_all(x);
    backward(loss);
    REQUIRE(loss->value.data[0] == Catch::Approx(21.0));
    for (double g : x->grad.data) REQUIRE(g == Catch::Approx(1.0));
}

TEST_CASE("quadratic form gradient is 2x") {
    auto x = make_var(Tensor<D>({1, 2}, {1.0, 2.0}), true);
    auto xt = reshape(x, {2, 1});
    auto loss = reshape(matmul(x, xt), {1});
    backward(loss);
    REQUIRE(loss->value.data[0] == Catch::Approx(5.0));
    REQUIRE(x->grad.data[0] == Catch::Approx(2.0));
    REQUIRE(x->grad.data[1] == Catch::Approx(4.0));
}

TEST_CASE("backward before forward is an error") {
    auto x = make_var(Tensor<D>::scalar(1.0), true);
    REQUIRE_THROWS_AS(backward(x), NumericError);
}

TEST_CASE("backward requires a scalar") {
    auto x = make_var(Tensor<D>({2}, {1.0, 2.0}), true);
    auto y = relu(x);
    REQUIRE_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("non-participating parameters get zero gradient") {
    auto used = make_var(Tensor<D>({3}, {1, 2, 3}), true);
    auto unused = make_var(Tensor<D>({3}, {4, 5, 6}), true);
    backward(sum_all(used));
    REQUIRE(used->grad.numel() == 3);
    REQUIRE(unused->grad.numel() == 0); // never touched; treated as zero
    unused->ensure_grad();
    for (double g : unused->grad.data) REQUIRE(g == 0.0);
}

TEST_CASE("shape mismatches are reported with both shapes") {
    auto a = make_var(Tensor<D>({2, 3}), true);
    auto b = make_var(Tensor<D>({3, 3}), true);
    try {
        (void)add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("[2,3]") != std::string::npos);
        REQUIRE(msg.find("[3,3]") != std::string::npos);
    }
}

TEST_CASE("finite differences: matmul and linear") {
    Rng rng(1);
    auto a = make_var(random_tensor({3, 4}, rng), true);
    auto b = make_var(random_tensor({4, 5}, rng), true);
    check_gradients({a, b}, [&] {
        Rng wr(7);
        return collapse(matmul(a, b), wr);
    });

    auto x = make_var(random_tensor({2, 6, 4}, rng), true);
    auto w = make_var(random_tensor({4, 3}, rng), true);
    auto bias = make_var(random_tensor({3}, rng), true);
    check_gradients({x, w, bias}, [&] {
        Rng wr(8);
        return collapse(linear(x, w, bias), wr);
    });
}

TEST_CASE("finite differences: conv1d") {
    Rng rng(2);
    auto x = make_var(random_tensor({2, 3, 9}, rng), true);
    auto w = make_var(random_tensor({4, 3, 3}, rng), true);
    auto b = make_var(random_tensor({4}, rng), true);
    check_gradients({x, w, b}, [&] {
        Rng wr(9);
        return collapse(conv1d(x, w, b), wr);
    });
}

TEST_CASE("finite differences: conv2d") {
    Rng rng(3);
    auto x = make_var(random_tensor({2, 2, 6, 5}, rng), true);
    auto w = make_var(random_tensor({3, 2, 3, 3}, rng), true);
    auto b = make_var(random_tensor({3}, rng), true);
    check_gradients({x, w, b}, [&] {
        Rng wr(10);
        return collapse(conv2d(x, w, b), wr);
    });
}

TEST_CASE("finite differences: pooling") {
    Rng rng(4);
    auto x1 = make_var(random_tensor({2, 3, 8}, rng), true);
    check_gradients({x1}, [&] {
        Rng wr(11);
        return collapse(maxpool1d(x1, 2), wr);
    });
    auto x2 = make_var(random_tensor({2, 2, 6, 6}, rng), true);
    check_gradients({x2}, [&] {
        Rng wr(12);
        return collapse(maxpool2d(x2, 2), wr);
    });
}

TEST_CASE("finite differences: activations") {
    Rng rng(5);
    // keep values away from the ReLU kink
    auto x = make_var(random_tensor({3, 7}, rng), true);
    for (auto& v : x->value.data)
        if (std::abs(v) < 0.05) v += 0.1;
    check_gradients({x}, [&] {
        Rng wr(13);
        return collapse(relu(x), wr);
    });
    check_gradients({x}, [&] {
        Rng wr(14);
        return collapse(gelu(x), wr);
    });
}

TEST_CASE("softmax rows sum to one and gradients check out") {
    Rng rng(6);
    auto x = make_var(random_tensor({4, 9}, rng), true);
    auto y = softmax_lastdim(x);
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int c = 0; c < 9; ++c) s += y->value.data[std::size_t(r * 9 + c)];
        REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
    }
    check_gradients({x}, [&] {
        Rng wr(15);
        return collapse(softmax_lastdim(x), wr);
    });
}

TEST_CASE("finite differences: layer norm") {
    Rng rng(7);
    auto x = make_var(random_tensor({3, 4, 6}, rng), true);
    auto gamma = make_var(random_tensor({6}, rng), true);
    auto beta = make_var(random_tensor({6}, rng), true);
    check_gradients({x, gamma, beta}, [&] {
        Rng wr(16);
        return collapse(layer_norm(x, gamma, beta), wr);
    });
}

TEST_CASE("finite differences: batch norm (train mode)") {
    Rng rng(8);
    auto x = make_var(random_tensor({4, 3, 5}, rng), true);
    auto gamma = make_var(random_tensor({3}, rng), true);
    auto beta = make_var(random_tensor({3}, rng), true);
    std::vector<D> none;
    check_gradients({x, gamma, beta}, [&] {
        Rng wr(17);
        return collapse(batch_norm(x, gamma, beta, true, none, none), wr);
    });
}

TEST_CASE("batch norm train output is normalised per channel") {
    Rng rng(9);
    auto x = make_var(random_tensor({64, 4, 16}, rng, 3.0), false);
    auto gamma = make_var(Tensor<D>::full({4}, 1.0), false);
    auto beta = make_var(Tensor<D>({4}), false);
    std::vector<D> none;
    auto y = batch_norm(x, gamma, beta, true, none, none);
    for (int c = 0; c < 4; ++c) {
        double sum = 0, sum_sq = 0;
        int n = 0;
        for (int b = 0; b < 64; ++b)
            for (int i = 0; i < 16; ++i) {
                const double v = y->value.data[std::size_t((b * 4 + c) * 16 + i)];
                sum += v;
                sum_sq += v * v;
                ++n;
            }
        REQUIRE(sum / n == Catch::Approx(0.0).margin(1e-4));
        REQUIRE(sum_sq / n == Catch::Approx(1.0).margin(1e-2));
    }
}

TEST_CASE("finite differences: attention and encoder layer") {
    Rng init(42);
    MultiHeadSelfAttention<D> mhsa(8, 2, init);
    auto x = make_var(random_tensor({2, 5, 8}, init), true);
    ParamList<D> params;
    mhsa.collect("mhsa", params);
    std::vector<Var<D>> leaves = {x};
    for (auto& p : params) leaves.push_back(p.var);
    check_gradients(leaves, [&] {
        Rng wr(18);
        return collapse(mhsa.forward(x), wr);
    });

    Rng init2(43);
    EncoderLayer<D> enc(8, 2, 16, 0.0, init2);
    auto x2 = make_var(random_tensor({2, 4, 8}, init2), true);
    ParamList<D> eparams;
    enc.collect("enc", eparams);
    std::vector<Var<D>> eleaves = {x2};
    for (auto& p : eparams) eleaves.push_back(p.var);
    Rng drop_rng(0);
    check_gradients(eleaves, [&] {
        Rng wr(19);
        return collapse(enc.forward(x2, Mode::Eval, drop_rng), wr);
    }, 1e-4, 1e-6);
}

TEST_CASE("finite differences: losses") {
    Rng rng(10);
    auto logits = make_var(random_tensor({6, 5}, rng), true);
    const std::vector<int> labels = {0, 3, 2, 4, 1, 2};
    check_gradients({logits}, [&] { return cross_entropy(logits, labels); });

    auto pred = make_var(random_tensor({8}, rng), true);
    std::vector<D> target(8);
    for (auto& t : target) t = rng.normal();
    check_gradients({pred}, [&] { return l1_loss(pred, target); });
}

TEST_CASE("cross entropy fixed values") {
    // uniform logits over 5 classes -> ln 5
    auto logits = make_var(Tensor<D>({2, 5}), false);
    auto ce = cross_entropy(logits, {1, 4});
    REQUIRE(ce->value.data[0] == Catch::Approx(std::log(5.0)).margin(1e-9));
    // saturated correct logits -> ~0
    Tensor<D> sat({1, 5});
    sat.data[2] = 1e6;
    auto ce2 = cross_entropy(make_var(sat, false), {2});
    REQUIRE(ce2->value.data[0] == Catch::Approx(0.0).margin(1e-9));
    REQUIRE_THROWS_AS(cross_entropy(logits, {1}), ShapeError);
    REQUIRE_THROWS_AS(cross_entropy(logits, {1, 7}), ShapeError);
}

TEST_CASE("l1 loss fixed values") {
    auto pred = make_var(Tensor<D>({2}, {0.2, 0.8}), false);
    auto l = l1_loss(pred, {0.0, 1.0});
    REQUIRE(l->value.data[0] == Catch::Approx(0.2));
}

TEST_CASE("Adam fixed first step and sign property") {
    // scalar param 0, grad 1, lr 1e-3: bias-corrected first step is exactly lr
    auto p = make_var(Tensor<D>::scalar(0.0), true);
    p->ensure_grad().data[0] = 1.0;
    Adam<D> opt(1e-3);
    ParamList<D> params = {{"p", p}};
    opt.step(params);
    REQUIRE(p->value.data[0] == Catch::Approx(-1e-3).margin(1e-12));

    // zero gradient leaves the parameter unchanged
    auto p2 = make_var(Tensor<D>::scalar(0.5), true);
    p2->ensure_grad();
    Adam<D> opt2(1e-3);
    ParamList<D> params2 = {{"p", p2}};
    opt2.step(params2);
    REQUIRE(p2->value.data[0] == 0.5);

    // repeated constant positive gradient moves monotonically down
    auto p3 = make_var(Tensor<D>::scalar(1.0), true);
    Adam<D> opt3(1e-2);
    ParamList<D> params3 = {{"p", p3}};
    double prev = 1.0;
    for (int t = 0; t < 10; ++t) {
        p3->ensure_grad().data[0] = 2.5;
        opt3.step(params3);
        REQUIRE(p3->value.data[0] < prev);
        prev = p3->value.data[0];
    }
}

TEST_CASE("lecun init statistics and determinism") {
    // pooled over 10 seeds: Linear(100, 50) weight variance ~ 1/100
    double sum = 0, sum_sq = 0;
    std::int64_t n = 0;
    for (int seed = 0; seed < 10; ++seed) {
        Rng rng{std::uint64_t(seed)};
        Linear<D> lin(100, 50, rng);
        ParamList<D> params;
        lin.collect("lin", params);
        for (double v : params[0].var->value.data) {
            sum += v;
            sum_sq += v * v;
            ++n;
        }
        for (double v : params[1].var->value.data) REQUIRE(v == 0.0); // biases zero
    }
    const double mean = sum / double(n);
    const double var = sum_sq / double(n) - mean * mean;
    REQUIRE(var == Catch::Approx(0.01).epsilon(0.15));

    Rng a(5), b(5);
    Linear<D> la(10, 10, a), lb(10, 10, b);
    ParamList<D> pa, pb;
    la.collect("l", pa);
    lb.collect("l", pb);
    REQUIRE(pa[0].var->value.data == pb[0].var->value.data);
}

TEST_CASE("dropout semantics") {
    Rng rng(3);
    auto x = make_var(Tensor<D>::full({100, 10}, 1.0), true);
    Dropout<D> drop(0.5);
    // eval mode is the identity (same node, not just same values)
    REQUIRE(drop.forward(x, Mode::Eval, rng) == x);
    auto y = drop.forward(x, Mode::Train, rng);
    int zeros = 0;
    for (double v : y->value.data) {
        REQUIRE((v == 0.0 || v == Catch::Approx(2.0)));
        if (v == 0.0) ++zeros;
    }
    REQUIRE(zeros > 300);
    REQUIRE(zeros < 700);
    REQUIRE_THROWS_AS(Dropout<D>(1.0), ConfigError);
}
