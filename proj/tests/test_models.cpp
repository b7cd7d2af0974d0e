#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "radchar/models.hpp"

using namespace radchar;
using namespace radchar::nn;

namespace {

template <typename T>
Var<T> random_batch(std::int64_t b, std::uint64_t seed) {
    Rng rng{seed};
    Tensor<T> x({b, kInputChannels, std::int64_t(kSamplesPerFrame)});
    for (auto& v : x.data) v = T(rng.normal(0.0, 1.0));
    return make_var(std::move(x));
}

// Deterministic scalar functional over all task outputs.
template <typename T>
Var<T> outputs_to_scalar(const TaskOutputs<T>& out) {
    std::vector<Var<T>> parts = {mean_all(out.class_logits)};
    for (const auto& r : out.reg) parts.push_back(mean_all(r));
    return weighted_sum(parts, std::vector<T>{T(1.0), T(0.7), T(0.5), T(0.3), T(0.2)});
}

} // namespace

TEST_CASE("sinusoidal positional embeddings match the closed form") {
    auto pe = sinusoidal_positions<double>(9, 128);
    REQUIRE(pe.shape == Shape{9, 128});
    CHECK(pe.data[0] == 0.0);  // sin(0)
    CHECK(pe.data[1] == 1.0);  // cos(0)
    // pos=1, i=0 -> sin(1); pos=1, i=2 -> sin(1/10000^(2/128))
    const std::size_t row = 128;
    CHECK_THAT(pe.data[row + 0], Catch::Matchers::WithinAbs(std::sin(1.0), 1e-15));
    CHECK_THAT(pe.data[row + 2],
               Catch::Matchers::WithinAbs(std::sin(1.0 / std::pow(10000.0, 2.0 / 128.0)),
                                          1e-15));
    CHECK_THAT(pe.data[row + 3],
               Catch::Matchers::WithinAbs(std::cos(1.0 / std::pow(10000.0, 2.0 / 128.0)),
                                          1e-15));
    for (double v : pe.data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("all backbones produce the expected task output shapes") {
    const std::int64_t b = 3;
    auto x = random_batch<float>(b, 99);
    for (auto kind : {BackboneKind::Cnn2D, BackboneKind::Cnn1D, BackboneKind::IqstS,
                      BackboneKind::IqstL}) {
        MtlModel<float> model(kind, 7);
        auto out = model.forward(x, Mode::Eval);
        REQUIRE(out.class_logits->value.shape == Shape{b, kNumSignalClasses});
        for (const auto& r : out.reg) REQUIRE(r->value.shape == Shape{b, 1});
        CHECK(out.class_logits->value.all_finite());
    }
}

TEST_CASE("backbone feature shapes") {
    CHECK(MtlModel<float>(BackboneKind::Cnn2D, 1).feature_shape() == Shape{8, 15, 15});
    CHECK(MtlModel<float>(BackboneKind::Cnn1D, 1).feature_shape() == Shape{8, 255});
    CHECK(MtlModel<float>(BackboneKind::IqstS, 1).feature_shape() == Shape{128});
    CHECK(MtlModel<float>(BackboneKind::IqstL, 1).feature_shape() == Shape{128});
}

TEST_CASE("single-sample batches work in eval mode") {
    auto x = random_batch<float>(1, 3);
    for (auto kind : {BackboneKind::Cnn2D, BackboneKind::Cnn1D, BackboneKind::IqstS}) {
        MtlModel<float> model(kind, 11);
        auto out = model.forward(x, Mode::Eval);
        REQUIRE(out.class_logits->value.shape == Shape{1, kNumSignalClasses});
        CHECK(out.class_logits->value.all_finite());
    }
}

TEST_CASE("malformed input is rejected") {
    MtlModel<float> model(BackboneKind::Cnn1D, 5);
    auto bad = make_var(Tensor<float>({2, 2, 100}));
    CHECK_THROWS_AS(model.forward(bad, Mode::Eval), ShapeError);
}

TEST_CASE("parameter names are unique and counts are ordered by capacity") {
    std::int64_t counts[4];
    int i = 0;
    for (auto kind : {BackboneKind::Cnn2D, BackboneKind::Cnn1D, BackboneKind::IqstS,
                      BackboneKind::IqstL}) {
        MtlModel<float> model(kind, 1);
        auto params = model.parameters();
        std::set<std::string> names;
        for (const auto& p : params) {
            CHECK(p.var->requires_grad);
            names.insert(p.name);
        }
        REQUIRE(names.size() == params.size());
        counts[i++] = model.parameter_count();
    }
    // Transformers dwarf the small CNNs, and the large variant dwarfs the small.
    CHECK(counts[3] > counts[2]); // IQST-L > IQST-S
    CHECK(counts[2] > counts[0]); // IQST-S > CNN2D
    CHECK(counts[2] > counts[1]); // IQST-S > CNN1D
    for (auto c : counts) CHECK(c > 1000);
}

TEST_CASE("model construction is deterministic in the seed") {
    MtlModel<float> a(BackboneKind::IqstS, 42), b(BackboneKind::IqstS, 42),
        c(BackboneKind::IqstS, 43);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].var->value.data == pb[i].var->value.data);
        if (pa[i].var->value.data != pc[i].var->value.data) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("gradients from all five heads reach the shared backbone") {
    for (auto kind : {BackboneKind::Cnn2D, BackboneKind::Cnn1D, BackboneKind::IqstS}) {
        MtlModel<float> model(kind, 21);
        auto x = random_batch<float>(2, 5);
        auto loss = outputs_to_scalar(model.forward(x, Mode::Eval));
        backward(loss);
        for (const auto& p : model.backbone_parameters()) {
            double norm = 0.0;
            REQUIRE(p.var->grad.numel() == p.var->value.numel());
            for (auto g : p.var->grad.data) norm += double(g) * double(g);
            INFO(backbone_name(kind) << " " << p.name);
            CHECK(norm > 0.0);
        }
    }
}

TEST_CASE("head gradients are isolated per task") {
    MtlModel<float> model(BackboneKind::Cnn1D, 8);
    auto x = random_batch<float>(2, 6);
    auto out = model.forward(x, Mode::Eval);
    backward(mean_all(out.reg[0])); // only the n_p head contributes
    for (const auto& p : model.parameters()) {
        if (p.name.rfind("head.class", 0) == 0 || p.name.rfind("head.t_", 0) == 0) {
            double norm = 0.0;
            for (auto g : p.var->grad.data) norm += std::abs(double(g));
            INFO(p.name);
            CHECK(norm == 0.0);
        }
    }
}

TEST_CASE("end-to-end model gradients agree with finite differences") {
    // Full models in double precision; spot-check a sample of parameter
    // coordinates against central differences.
    for (auto kind : {BackboneKind::Cnn1D, BackboneKind::Cnn2D, BackboneKind::IqstS}) {
        MtlModel<double> model(kind, 17);
        auto x = random_batch<double>(2, 31);
        auto params = model.parameters();

        auto eval = [&]() {
            return outputs_to_scalar(model.forward(x, Mode::Eval))->value.data[0];
        };
        auto loss = outputs_to_scalar(model.forward(x, Mode::Eval));
        backward(loss);

        Rng pick{std::uint64_t(1000 + int(kind))};
        const double eps = 1e-5;
        int checked = 0;
        for (int trial = 0; trial < 24; ++trial) {
            auto& p = params[std::size_t(
                pick.uniform_int(0, std::int64_t(params.size()) - 1))];
            auto& vals = p.var->value.data;
            const std::size_t j =
                std::size_t(pick.uniform_int(0, std::int64_t(vals.size()) - 1));
            const double saved = vals[j];
            vals[j] = saved + eps;
            const double up = eval();
            vals[j] = saved - eps;
            const double dn = eval();
            vals[j] = saved;
            const double fd = (up - dn) / (2.0 * eps);
            const double an = p.var->grad.data[j];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            INFO(backbone_name(kind) << " " << p.name << "[" << j << "] fd=" << fd
                                     << " an=" << an);
            CHECK(std::abs(fd - an) / denom < 1e-4);
            ++checked;
        }
        REQUIRE(checked == 24);
    }
}

TEST_CASE("train-mode forward is reproducible after reseeding dropout") {
    MtlModel<float> model(BackboneKind::Cnn1D, 33);
    auto x = random_batch<float>(4, 12);
    model.reseed_dropout(77);
    auto a = model.forward(x, Mode::Train);
    model.reseed_dropout(77);
    auto b = model.forward(x, Mode::Train);
    // BatchNorm running stats drift between the calls, but the sampled dropout
    // masks and the batch statistics used in the forward pass match.
    CHECK(a.class_logits->value.data == b.class_logits->value.data);
}

TEST_CASE("state buffers expose running statistics for every head") {
    MtlModel<float> model(BackboneKind::IqstS, 2);
    auto buffers = model.state_buffers();
    REQUIRE(buffers.size() == 10); // 5 heads x (mean, var)
    std::set<std::string> names;
    for (const auto& [name, vec] : buffers) {
        names.insert(name);
        REQUIRE(vec->size() == std::size_t(kBackboneFilters));
    }
    CHECK(names.size() == 10);
}

TEST_CASE("backbone names round-trip") {
    for (auto kind : {BackboneKind::Cnn2D, BackboneKind::Cnn1D, BackboneKind::IqstS,
                      BackboneKind::IqstL})
        CHECK(parse_backbone(backbone_name(kind)) == kind);
    CHECK_THROWS_AS(parse_backbone("mlp"), ConfigError);
}
