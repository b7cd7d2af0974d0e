#ifndef RADCHAR_TRAIN_HPP
#define RADCHAR_TRAIN_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "radchar/checkpoint.hpp"
#include "radchar/dataset.hpp"
#include "radchar/models.hpp"

namespace radchar::nn {

struct TaskWeights {
    float w_class = 0.1f;
    std::array<float, 4> w_reg = {0.225f, 0.225f, 0.225f, 0.225f}; // n_p, t_pw, t_pri, t_d

    void validate() const {
        if (w_class < 0.0f) throw ConfigError("task weights must be non-negative");
        for (float w : w_reg)
            if (w < 0.0f) throw ConfigError("task weights must be non-negative");
    }

    // "w_class,w_np,w_tpw,w_tpri,w_td"
    static TaskWeights parse(const std::string& s) {
        std::vector<float> vals;
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                std::size_t used = 0;
                vals.push_back(std::stof(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ConfigError("bad task weight '" + tok + "'");
            }
        }
        if (vals.size() != 5)
            throw ConfigError("expected 5 comma-separated task weights, got " +
                              std::to_string(vals.size()));
        TaskWeights w;
        w.w_class = vals[0];
        for (int i = 0; i < 4; ++i) w.w_reg[std::size_t(i)] = vals[std::size_t(i) + 1];
        w.validate();
        return w;
    }
};

struct TrainConfig {
    BackboneKind backbone = BackboneKind::Cnn1D;
    int epochs = 100;
    double lr = 5e-4;
    std::int64_t batch_size = 64;
    std::uint64_t seed = 0;
    TaskWeights weights;

    void validate() const {
        if (epochs <= 0) throw ConfigError("epochs must be positive");
        if (lr <= 0.0) throw ConfigError("learning rate must be positive");
        if (batch_size <= 0) throw ConfigError("batch size must be positive");
        weights.validate();
    }
};

// A standardised mini-batch with its class labels and normalised targets.
struct Batch {
    Var<float> x;                              // [B,2,512]
    std::vector<int> labels;                   // class ids
    std::array<std::vector<float>, 4> targets; // normalised n_p, t_pw, t_pri, t_d
};

inline Batch make_batch(const RadCharDataset& ds, const std::vector<std::uint32_t>& order,
                        std::size_t begin, std::size_t end,
                        const StandardizationStats& stats, const LabelNormalizer& norm) {
    const auto b = std::int64_t(end - begin);
    const float inv_std = float(1.0 / std::sqrt(stats.variance));
    const float mean = float(stats.mean);
    Tensor<float> x({b, kInputChannels, std::int64_t(kSamplesPerFrame)});
    Batch batch;
    batch.labels.reserve(std::size_t(b));
    for (auto& t : batch.targets) t.reserve(std::size_t(b));
    for (std::size_t pos = begin; pos < end; ++pos) {
        const auto& rec = ds.records.at(order[pos]);
        const auto row = std::int64_t(pos - begin);
        float* xi = x.data.data() + row * 2 * kSamplesPerFrame;
        float* xq = xi + kSamplesPerFrame;
        for (int s = 0; s < kSamplesPerFrame; ++s) {
            xi[s] = (rec.frame.i[std::size_t(s)] - mean) * inv_std;
            xq[s] = (rec.frame.q[std::size_t(s)] - mean) * inv_std;
        }
        batch.labels.push_back(static_cast<int>(rec.params.cls));
        const auto t = norm.normalize(rec.params);
        for (std::size_t k = 0; k < 4; ++k) batch.targets[k].push_back(float(t[k]));
    }
    batch.x = make_var(std::move(x));
    return batch;
}

// Compound multi-task loss: w_class * cross-entropy + sum of weighted L1
// losses in normalised label space.
template <typename T>
Var<T> mtl_loss(const TaskOutputs<T>& out, const std::vector<int>& labels,
                const std::array<std::vector<T>, 4>& targets, const TaskWeights& weights) {
    std::vector<Var<T>> parts = {cross_entropy(out.class_logits, labels)};
    std::vector<T> w = {T(weights.w_class)};
    for (std::size_t k = 0; k < 4; ++k) {
        parts.push_back(l1_loss(out.reg[k], targets[k]));
        w.push_back(T(weights.w_reg[k]));
    }
    return weighted_sum(parts, w);
}

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    std::array<double, 5> val_task_losses{}; // CE, then the four L1 terms (unweighted)
};

struct TrainResult {
    std::vector<EpochStats> history;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    Checkpoint best;   // lowest validation multi-task loss
    Checkpoint final_; // last epoch
};

namespace detail_train {

// Forward a split in eval mode and accumulate loss / accuracy. Batched to
// bound graph size; reduction order is fixed for bit-stable results.
struct EvalPass {
    double loss = 0.0;
    double accuracy = 0.0;
    std::array<double, 5> task_losses{};
};

inline EvalPass eval_split(MtlModel<float>& model, const RadCharDataset& ds,
                           const std::vector<std::uint32_t>& indices,
                           const StandardizationStats& stats, const LabelNormalizer& norm,
                           const TaskWeights& weights, std::size_t batch_size = 256) {
    EvalPass out;
    if (indices.empty()) return out;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < indices.size(); begin += batch_size) {
        const std::size_t end = std::min(indices.size(), begin + batch_size);
        auto batch = make_batch(ds, indices, begin, end, stats, norm);
        auto pred = model.forward(batch.x, Mode::Eval);
        const double frac = double(end - begin) / double(indices.size());
        out.loss += frac * double(mtl_loss(pred, batch.labels, batch.targets, weights)
                                      ->value.data[0]);
        out.task_losses[0] +=
            frac * double(cross_entropy(pred.class_logits, batch.labels)->value.data[0]);
        for (std::size_t k = 0; k < 4; ++k)
            out.task_losses[k + 1] +=
                frac * double(l1_loss(pred.reg[k], batch.targets[k])->value.data[0]);
        const auto& logits = pred.class_logits->value;
        for (std::size_t r = 0; r < end - begin; ++r) {
            const float* row = logits.data.data() + r * std::size_t(kNumSignalClasses);
            int arg = 0;
            for (int c = 1; c < kNumSignalClasses; ++c)
                if (row[c] > row[arg]) arg = c;
            if (arg == batch.labels[r]) ++correct;
        }
    }
    out.accuracy = double(correct) / double(indices.size());
    return out;
}

} // namespace detail_train

// Train `model` on the train split, validating each epoch. Standardisation
// stats must come from the train split only. Writes one JSON line per epoch
// to `log` when given. Deterministic for a fixed config.
inline TrainResult fit(MtlModel<float>& model, const RadCharDataset& ds, const Splits& splits,
                       const StandardizationStats& stats, const TrainConfig& cfg,
                       std::ostream* log = nullptr,
                       const std::function<void(const EpochStats&)>& on_epoch = nullptr) {
    cfg.validate();
    const LabelNormalizer norm;
    Adam<float> adam(float(cfg.lr));
    auto params = model.parameters();
    model.reseed_dropout(cfg.seed);

    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();

    std::vector<std::uint32_t> order = splits.train;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(splitmix64(cfg.seed ^ (0x65706f63ULL + std::uint64_t(epoch))));
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            const auto j =
                std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i)));
            std::swap(order[i], order[j]);
        }

        double train_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size();
             begin += std::size_t(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), begin + std::size_t(cfg.batch_size));
            if (end - begin < 2) break; // batch norm needs at least two samples
            auto batch = make_batch(ds, order, begin, end, stats, norm);
            auto pred = model.forward(batch.x, Mode::Train);
            auto loss = mtl_loss(pred, batch.labels, batch.targets, cfg.weights);
            const double loss_val = double(loss->value.data[0]);
            if (!std::isfinite(loss_val)) {
                std::ostringstream diag;
                diag << "non-finite loss at epoch " << epoch << " batch " << batches
                     << ": ce="
                     << cross_entropy(pred.class_logits, batch.labels)->value.data[0];
                for (std::size_t k = 0; k < 4; ++k)
                    diag << " l1[" << kRegressionTaskNames[k]
                         << "]=" << l1_loss(pred.reg[k], batch.targets[k])->value.data[0];
                throw NumericError(diag.str());
            }
            zero_grads(params);
            backward(loss);
            adam.step(params);
            train_loss += loss_val;
            ++batches;
        }
        train_loss /= double(std::max<std::size_t>(batches, 1));

        const auto val = detail_train::eval_split(model, ds, splits.val, stats, norm,
                                                  cfg.weights);
        EpochStats es;
        es.epoch = epoch;
        es.train_loss = train_loss;
        es.val_loss = val.loss;
        es.val_accuracy = val.accuracy;
        es.val_task_losses = val.task_losses;
        result.history.push_back(es);

        if (log) {
            nlohmann::json line = {
                {"epoch", epoch},
                {"train_loss", es.train_loss},
                {"val_loss", es.val_loss},
                {"val_accuracy", es.val_accuracy},
                {"val_ce", es.val_task_losses[0]},
            };
            for (std::size_t k = 0; k < 4; ++k)
                line[std::string("val_l1_") + kRegressionTaskNames[k]] =
                    es.val_task_losses[k + 1];
            *log << line.dump() << "\n";
        }
        if (on_epoch) on_epoch(es);

        if (splits.val.empty() || val.loss < result.best_val_loss) {
            result.best_val_loss = val.loss;
            result.best_epoch = epoch;
            result.best = snapshot_model(model, ds.config.hash(), stats, &adam);
        }
    }
    result.final_ = snapshot_model(model, ds.config.hash(), stats, &adam);
    if (result.best.tensors.empty()) result.best = result.final_;
    return result;
}

// Per-integer-SNR evaluation report over -20..20 dB.
struct EvalReport {
    static constexpr int kSnrMin = kSnrMinDb;
    static constexpr int kSnrMax = kSnrMaxDb;
    static constexpr int kBins = kSnrMax - kSnrMin + 1;

    std::array<std::size_t, kBins> counts{};
    std::array<double, kBins> accuracy{};      // NaN for empty bins
    std::array<std::array<double, kBins>, 4> mae{}; // n_p (pulses), times in µs

    double overall_accuracy = 0.0;
    std::array<double, 4> overall_mae{};

    static int bin_of(double snr_db) {
        const int snr = int(std::lround(snr_db));
        if (snr < kSnrMin || snr > kSnrMax)
            throw NumericError("snr out of report range: " + std::to_string(snr_db));
        return snr - kSnrMin;
    }
};

// Physical units for reporting: pulse count for n_p, microseconds for times.
inline std::array<double, 4> physical_units(const std::array<double, 4>& denorm) {
    return {denorm[0], denorm[1] * 1e6, denorm[2] * 1e6, denorm[3] * 1e6};
}

template <typename Model>
EvalReport evaluate(Model& model, const RadCharDataset& ds,
                    const std::vector<std::uint32_t>& indices,
                    const StandardizationStats& stats, std::size_t batch_size = 256) {
    if (indices.empty()) throw ConfigError("evaluate needs a non-empty split");
    const LabelNormalizer norm;
    EvalReport rep;
    std::array<std::size_t, EvalReport::kBins> correct{};
    std::array<std::array<double, EvalReport::kBins>, 4> abs_err_sum{};
    std::size_t correct_total = 0;
    std::array<double, 4> abs_err_total{};

    for (std::size_t begin = 0; begin < indices.size(); begin += batch_size) {
        const std::size_t end = std::min(indices.size(), begin + batch_size);
        auto batch = make_batch(ds, indices, begin, end, stats, norm);
        auto pred = model.forward(batch.x, Mode::Eval);
        for (std::size_t r = 0; r < end - begin; ++r) {
            const auto& rec = ds.records.at(indices[begin + r]);
            const int bin = EvalReport::bin_of(rec.params.snr_db);
            ++rep.counts[std::size_t(bin)];

            const float* row =
                pred.class_logits->value.data.data() + r * std::size_t(kNumSignalClasses);
            int arg = 0;
            for (int c = 1; c < kNumSignalClasses; ++c)
                if (row[c] > row[arg]) arg = c;
            if (arg == static_cast<int>(rec.params.cls)) {
                ++correct[std::size_t(bin)];
                ++correct_total;
            }

            std::array<double, 4> norm_pred{};
            for (std::size_t k = 0; k < 4; ++k)
                norm_pred[k] = double(pred.reg[k]->value.data[r]);
            const auto pred_phys = physical_units(norm.denormalize(norm_pred));
            const auto true_phys = physical_units(
                {double(rec.params.n_p), rec.params.t_pw_s, rec.params.t_pri_s,
                 rec.params.t_d_s});
            for (std::size_t k = 0; k < 4; ++k) {
                const double err = std::abs(pred_phys[k] - true_phys[k]);
                abs_err_sum[k][std::size_t(bin)] += err;
                abs_err_total[k] += err;
            }
        }
    }

    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (int b = 0; b < EvalReport::kBins; ++b) {
        const auto n = rep.counts[std::size_t(b)];
        rep.accuracy[std::size_t(b)] = n ? double(correct[std::size_t(b)]) / double(n) : nan;
        for (std::size_t k = 0; k < 4; ++k)
            rep.mae[k][std::size_t(b)] = n ? abs_err_sum[k][std::size_t(b)] / double(n) : nan;
    }
    rep.overall_accuracy = double(correct_total) / double(indices.size());
    for (std::size_t k = 0; k < 4; ++k)
        rep.overall_mae[k] = abs_err_total[k] / double(indices.size());
    return rep;
}

// CSV rendering: one row per SNR bin, fixed column order and formatting so
// identical reports are byte-identical. Empty bins carry "nan".
inline std::string report_csv(const EvalReport& rep) {
    std::ostringstream out;
    out << "snr_db,count,accuracy,mae_np,mae_tpw_us,mae_tpri_us,mae_td_us\n";
    out.setf(std::ios::fixed);
    out.precision(6);
    for (int b = 0; b < EvalReport::kBins; ++b) {
        out << (EvalReport::kSnrMin + b) << "," << rep.counts[std::size_t(b)];
        auto cell = [&](double v) {
            if (std::isnan(v)) out << ",nan";
            else out << "," << v;
        };
        cell(rep.accuracy[std::size_t(b)]);
        for (std::size_t k = 0; k < 4; ++k) cell(rep.mae[k][std::size_t(b)]);
        out << "\n";
    }
    return out.str();
}

// Spearman rank correlation with average ranks for ties; NaN entries in `y`
// (empty bins) are skipped along with their `x` partner.
inline double spearman(std::vector<double> x, std::vector<double> y) {
    if (x.size() != y.size()) throw ShapeError("spearman needs equal-length series");
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!std::isnan(x[i]) && !std::isnan(y[i])) {
            xs.push_back(x[i]);
            ys.push_back(y[i]);
        }
    const std::size_t n = xs.size();
    if (n < 2) throw NumericError("spearman needs at least two points");
    auto ranks = [](const std::vector<double>& v) {
        const std::size_t m = v.size();
        std::vector<std::size_t> idx(m);
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
        std::vector<double> r(m);
        std::size_t i = 0;
        while (i < m) {
            std::size_t j = i;
            while (j + 1 < m && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = 0.5 * (double(i) + double(j)) + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(xs), ry = ranks(ys);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= double(n);
    my /= double(n);
    double num = 0.0, dx = 0.0, dy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if (dx <= 0.0 || dy <= 0.0) throw NumericError("spearman: constant series");
    return num / std::sqrt(dx * dy);
}

} // namespace radchar::nn

#endif
