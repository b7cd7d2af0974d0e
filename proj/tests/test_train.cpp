#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>

#include "radchar/train.hpp"

using namespace radchar;
using namespace radchar::nn;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/radchar_train_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

RadCharDataset tiny_dataset(std::uint64_t count, std::uint64_t seed, int snr_min = -20,
                            int snr_max = 20) {
    RadCharDataset ds;
    ds.config.count = count;
    ds.config.seed = seed;
    ds.config.snr_min_db = snr_min;
    ds.config.snr_max_db = snr_max;
    for (std::uint64_t i = 0; i < count; ++i)
        ds.records.push_back(make_record(ds.config, i));
    return ds;
}

// Emits the true labels of the records it is shown, in visit order. Valid
// only when evaluate() walks the indices sequentially, which it does.
struct OracleModel {
    const RadCharDataset* ds;
    const std::vector<std::uint32_t>* indices;
    std::size_t cursor = 0;

    TaskOutputs<float> forward(const Var<float>& x, Mode) {
        const auto b = x->value.dim(0);
        const LabelNormalizer norm;
        Tensor<float> logits({b, std::int64_t(kNumSignalClasses)});
        std::array<Tensor<float>, 4> reg = {Tensor<float>({b, 1}), Tensor<float>({b, 1}),
                                            Tensor<float>({b, 1}), Tensor<float>({b, 1})};
        for (std::int64_t r = 0; r < b; ++r) {
            const auto& rec = ds->records.at((*indices)[cursor++]);
            logits.data[std::size_t(r * kNumSignalClasses + int(rec.params.cls))] = 10.0f;
            const auto t = norm.normalize(rec.params);
            for (std::size_t k = 0; k < 4; ++k)
                reg[k].data[std::size_t(r)] = float(t[k]);
        }
        TaskOutputs<float> out;
        out.class_logits = make_var(std::move(logits));
        for (std::size_t k = 0; k < 4; ++k) out.reg[k] = make_var(std::move(reg[k]));
        return out;
    }
};

} // namespace

TEST_CASE("task weight parsing") {
    auto w = TaskWeights::parse("0.1,0.225,0.225,0.225,0.225");
    CHECK(w.w_class == 0.1f);
    for (auto v : w.w_reg) CHECK(v == 0.225f);
    CHECK_THROWS_AS(TaskWeights::parse("1,2,3"), ConfigError);
    CHECK_THROWS_AS(TaskWeights::parse("1,2,3,x,5"), ConfigError);
    CHECK_THROWS_AS(TaskWeights::parse("-1,2,3,4,5"), ConfigError);
    TaskWeights defaults;
    CHECK_THAT(double(defaults.w_class) + 4 * double(defaults.w_reg[0]),
               Catch::Matchers::WithinAbs(1.0, 1e-7));
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.lr = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("mtl loss with uniform logits and perfect regression is w_class * ln 5") {
    const std::int64_t b = 4;
    TaskOutputs<float> out;
    out.class_logits = make_var(Tensor<float>({b, 5})); // all-zero logits -> uniform
    std::array<std::vector<float>, 4> targets;
    for (std::size_t k = 0; k < 4; ++k) {
        Tensor<float> r({b, 1});
        for (std::int64_t i = 0; i < b; ++i) r.data[std::size_t(i)] = 0.3f + float(k) * 0.1f;
        targets[k].assign(std::size_t(b), 0.3f + float(k) * 0.1f);
        out.reg[k] = make_var(std::move(r));
    }
    std::vector<int> labels = {0, 1, 2, 3};
    TaskWeights w;
    const double loss = double(mtl_loss(out, labels, targets, w)->value.data[0]);
    CHECK_THAT(loss, Catch::Matchers::WithinAbs(0.1 * std::log(5.0), 1e-6));

    SECTION("doubling every weight exactly doubles the loss") {
        TaskWeights w2;
        w2.w_class *= 2.0f;
        for (auto& v : w2.w_reg) v *= 2.0f;
        const double loss2 = double(mtl_loss(out, labels, targets, w2)->value.data[0]);
        CHECK_THAT(loss2, Catch::Matchers::WithinAbs(2.0 * loss, 1e-6));
    }

    SECTION("saturated correct logits and exact regression give ~zero loss") {
        auto& logits = out.class_logits->value;
        for (std::int64_t i = 0; i < b; ++i)
            logits.data[std::size_t(i * 5 + labels[std::size_t(i)])] = 50.0f;
        const double loss0 = double(mtl_loss(out, labels, targets, w)->value.data[0]);
        CHECK(loss0 < 1e-6);
    }
}

TEST_CASE("zero task weight removes that task's gradient contribution") {
    MtlModel<float> model(BackboneKind::Cnn1D, 3);
    auto ds = tiny_dataset(8, 77);
    std::vector<std::uint32_t> idx = {0, 1, 2, 3, 4, 5, 6, 7};
    StandardizationStats stats{0.0, 1.0};
    const LabelNormalizer norm;
    auto batch = make_batch(ds, idx, 0, 8, stats, norm);

    TaskWeights w;
    w.w_reg[0] = 0.0f; // drop the n_p task
    auto out = model.forward(batch.x, Mode::Eval);
    backward(mtl_loss(out, batch.labels, batch.targets, w));
    for (const auto& p : model.parameters()) {
        if (p.name.rfind("head.n_p", 0) != 0) continue;
        double norm_sum = 0.0;
        for (auto g : p.var->grad.data) norm_sum += std::abs(double(g));
        INFO(p.name);
        CHECK(norm_sum == 0.0);
    }
}

TEST_CASE("standardised batches have the expected layout and labels") {
    auto ds = tiny_dataset(6, 5);
    std::vector<std::uint32_t> idx = {5, 0, 3};
    StandardizationStats stats{0.25, 4.0};
    const LabelNormalizer norm;
    auto batch = make_batch(ds, idx, 0, 3, stats, norm);
    REQUIRE(batch.x->value.shape == Shape{3, 2, 512});
    REQUIRE(batch.labels.size() == 3);
    CHECK(batch.labels[1] == int(ds.records[0].params.cls));
    // Spot-check standardisation of one sample: (v - mean) / sqrt(var).
    const float expect = (ds.records[5].frame.i[7] - 0.25f) / 2.0f;
    CHECK_THAT(batch.x->value.data[7], Catch::Matchers::WithinAbs(expect, 1e-6));
    const float expect_q = (ds.records[3].frame.q[100] - 0.25f) / 2.0f;
    CHECK_THAT(batch.x->value.data[2 * 1024 + 512 + 100],
               Catch::Matchers::WithinAbs(expect_q, 1e-6));
    // Targets are normalised into [0,1].
    for (const auto& t : batch.targets)
        for (float v : t) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
}

TEST_CASE("training is deterministic and decreases the loss") {
    auto ds = tiny_dataset(120, 11);
    auto splits = split_indices(ds.records.size(), 11);
    auto stats = compute_standardization(ds, splits.train);

    TrainConfig cfg;
    cfg.backbone = BackboneKind::Cnn1D;
    cfg.epochs = 4;
    cfg.batch_size = 32;
    cfg.seed = 9;

    MtlModel<float> m1(cfg.backbone, cfg.seed);
    std::ostringstream log1;
    auto r1 = fit(m1, ds, splits, stats, cfg, &log1);

    MtlModel<float> m2(cfg.backbone, cfg.seed);
    std::ostringstream log2;
    auto r2 = fit(m2, ds, splits, stats, cfg, &log2);

    REQUIRE(r1.history.size() == 4);
    CHECK(log1.str() == log2.str());
    for (std::size_t e = 0; e < r1.history.size(); ++e) {
        CHECK(r1.history[e].train_loss == r2.history[e].train_loss);
        CHECK(r1.history[e].val_loss == r2.history[e].val_loss);
    }
    // Four epochs on a small model reliably improve on the initial loss.
    CHECK(r1.history.back().train_loss < r1.history.front().train_loss);
    // One JSON line per epoch.
    std::size_t lines = 0;
    for (char c : log1.str())
        if (c == '\n') ++lines;
    CHECK(lines == 4);
    // Best checkpoint tracks the minimum validation loss.
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    for (const auto& es : r1.history)
        if (es.val_loss < best) {
            best = es.val_loss;
            best_epoch = es.epoch;
        }
    CHECK(r1.best_epoch == best_epoch);
    CHECK(r1.best_val_loss == best);
}

TEST_CASE("checkpoints round-trip through disk bit-exactly") {
    auto ds = tiny_dataset(60, 21);
    auto splits = split_indices(ds.records.size(), 21);
    auto stats = compute_standardization(ds, splits.train);
    TrainConfig cfg;
    cfg.backbone = BackboneKind::Cnn1D;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.seed = 4;
    MtlModel<float> model(cfg.backbone, cfg.seed);
    auto result = fit(model, ds, splits, stats, cfg);

    TempFile f("ckpt.rckp");
    save_checkpoint(result.final_, f.path);
    auto loaded = load_checkpoint(f.path);
    CHECK(loaded.backbone == cfg.backbone);
    CHECK(loaded.dataset_config_hash == ds.config.hash());
    CHECK(loaded.stats.mean == stats.mean);
    CHECK(loaded.stats.variance == stats.variance);
    CHECK(loaded.has_adam);
    CHECK(loaded.adam_step > 0);
    REQUIRE(loaded.names == result.final_.names);
    for (std::size_t i = 0; i < loaded.tensors.size(); ++i) {
        REQUIRE(loaded.shapes[i] == result.final_.shapes[i]);
        REQUIRE(loaded.tensors[i] == result.final_.tensors[i]);
    }

    // A restored model reproduces the trained model's outputs exactly.
    auto restored = restore_model(loaded);
    auto batch = make_batch(ds, splits.test, 0, splits.test.size(), stats,
                            LabelNormalizer{});
    auto a = model.forward(batch.x, Mode::Eval);
    auto b = restored.forward(batch.x, Mode::Eval);
    CHECK(a.class_logits->value.data == b.class_logits->value.data);
    for (std::size_t k = 0; k < 4; ++k)
        CHECK(a.reg[k]->value.data == b.reg[k]->value.data);
}

TEST_CASE("malformed checkpoints are rejected") {
    TempFile f("bad.rckp");
    {
        std::ofstream out(f.path, std::ios::binary);
        out << "RCKPgarbage";
    }
    CHECK_THROWS_AS(load_checkpoint(f.path), FormatError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.rckp"), IoError);
}

TEST_CASE("oracle predictor scores perfect accuracy and zero error") {
    auto ds = tiny_dataset(64, 31);
    std::vector<std::uint32_t> idx(64);
    std::iota(idx.begin(), idx.end(), 0u);
    StandardizationStats stats{0.0, 1.0};
    OracleModel oracle{&ds, &idx};
    auto rep = evaluate(oracle, ds, idx, stats, 16);
    CHECK(rep.overall_accuracy == 1.0);
    for (std::size_t k = 0; k < 4; ++k) CHECK(rep.overall_mae[k] < 1e-4);
    std::size_t total = 0;
    for (auto c : rep.counts) total += c;
    CHECK(total == 64);
}

TEST_CASE("csv report has a stable 41-row schema with nan markers") {
    auto ds = tiny_dataset(40, 41, 0, 0); // every record at exactly 0 dB
    std::vector<std::uint32_t> idx(40);
    std::iota(idx.begin(), idx.end(), 0u);
    StandardizationStats stats{0.0, 1.0};
    OracleModel oracle{&ds, &idx};
    auto rep = evaluate(oracle, ds, idx, stats, 16);

    const auto csv = report_csv(rep);
    std::size_t rows = 0;
    for (char c : csv)
        if (c == '\n') ++rows;
    CHECK(rows == 42); // header + 41 bins
    CHECK(csv.rfind("snr_db,count,accuracy,mae_np,mae_tpw_us,mae_tpri_us,mae_td_us\n", 0) ==
          0);
    CHECK(csv.find("-20,0,nan,nan,nan,nan,nan") != std::string::npos);
    CHECK(csv.find("\n0,40,1.000000") != std::string::npos);

    OracleModel oracle2{&ds, &idx};
    CHECK(report_csv(evaluate(oracle2, ds, idx, stats, 16)) == csv);
}

TEST_CASE("evaluation rejects an empty split") {
    auto ds = tiny_dataset(10, 1);
    MtlModel<float> model(BackboneKind::Cnn1D, 1);
    StandardizationStats stats{0.0, 1.0};
    CHECK_THROWS_AS(evaluate(model, ds, {}, stats), ConfigError);
}

TEST_CASE("spearman rank correlation") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == 1.0);
    CHECK(spearman({1, 2, 3, 4}, {9, 7, 5, 3}) == -1.0);
    // Monotone but nonlinear is still a perfect rank correlation.
    CHECK(spearman({1, 2, 3, 4, 5}, {1, 8, 27, 64, 125}) == 1.0);
    // Known mixed case: ranks of y are 3,1,4,2 against 1,2,3,4 -> rho = 0.
    CHECK_THAT(spearman({1, 2, 3, 4}, {30, 10, 40, 20}),
               Catch::Matchers::WithinAbs(0.0, 1e-12));
    // NaN bins are skipped with their partners.
    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK(spearman({1, 2, 3, 4, 5}, {10, nan, 30, nan, 50}) == 1.0);
    CHECK_THROWS_AS(spearman({1, 2}, {1}), ShapeError);
    CHECK_THROWS_AS(spearman({1, 2, 3}, {5, 5, 5}), NumericError);
}

TEST_CASE("per-task losses at initialisation are the same order of magnitude") {
    // With random init the classifier sits near uniform (CE ~ ln 5) and the
    // regression heads near a small constant against uniform targets, so the
    // default weights roughly balance the weighted terms.
    auto ds = tiny_dataset(64, 51);
    auto splits = split_indices(ds.records.size(), 51);
    auto stats = compute_standardization(ds, splits.train);
    MtlModel<float> model(BackboneKind::Cnn1D, 51);
    const LabelNormalizer norm;
    TaskWeights w;
    auto pass = detail_train::eval_split(model, ds, splits.val, stats, norm, w);
    const double weighted_ce = 0.1 * pass.task_losses[0];
    CHECK(weighted_ce > 0.01);
    CHECK(weighted_ce < 1.0);
    for (std::size_t k = 1; k <= 4; ++k) {
        const double weighted_l1 = 0.225 * pass.task_losses[k];
        CHECK(weighted_l1 > 0.001);
        CHECK(weighted_l1 < 1.0);
    }
}
