// Command-line front end: dataset generation, training, evaluation,
// single-frame inference, and record inspection.

#include <array>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "radchar/checkpoint.hpp"
#include "radchar/dataset.hpp"
#include "radchar/models.hpp"
#include "radchar/train.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitFormat = 4;
constexpr int kExitNumeric = 5;

// Relative data paths resolve against RADCHAR_DATA_DIR when it is set.
std::string resolve_path(const std::string& path) {
    if (path.empty()) return path;
    const char* base = std::getenv("RADCHAR_DATA_DIR");
    if (!base || !*base || std::filesystem::path(path).is_absolute()) return path;
    return (std::filesystem::path(base) / path).string();
}

radchar::RadCharDataset load_resolved(const std::string& path) {
    return radchar::load_dataset(resolve_path(path));
}

void run_generate(const radchar::DatasetConfig& cfg, const std::string& out, int workers) {
    const std::string path = resolve_path(out);
    radchar::generate_dataset(cfg, path, workers);

    std::array<std::uint64_t, radchar::kNumSignalClasses> histogram{};
    for (std::uint64_t i = 0; i < cfg.count; ++i) {
        const auto p = radchar::sample_params(cfg.seed, i, cfg.snr_min_db, cfg.snr_max_db);
        ++histogram[std::size_t(p.cls)];
    }
    std::cout << "wrote " << cfg.count << " records to " << path << " ("
              << std::filesystem::file_size(path) << " bytes)\n";
    for (int c = 0; c < radchar::kNumSignalClasses; ++c)
        std::cout << "  " << std::setw(22) << std::left
                  << radchar::signal_class_name(radchar::SignalClass(c))
                  << histogram[std::size_t(c)] << "\n";
}

void run_train(const std::string& dataset_path, const radchar::nn::TrainConfig& cfg,
               const std::string& out) {
    using namespace radchar::nn;
    const auto ds = load_resolved(dataset_path);
    const auto splits = radchar::split_indices(ds.records.size(), ds.config.seed);
    const auto stats = radchar::compute_standardization(ds, splits.train);

    const std::string ckpt_path = resolve_path(out);
    std::ofstream log(ckpt_path + ".log.jsonl", std::ios::trunc);
    if (!log) throw radchar::IoError("cannot open training log: " + ckpt_path + ".log.jsonl");

    MtlModel<float> model(cfg.backbone, cfg.seed);
    std::cout << "training " << backbone_name(cfg.backbone) << " ("
              << model.parameter_count() << " parameters) on " << splits.train.size()
              << " records, validating on " << splits.val.size() << "\n";
    auto result = fit(model, ds, splits, stats, cfg, &log, [](const EpochStats& es) {
        std::cout << "epoch " << es.epoch << ": train " << es.train_loss << ", val "
                  << es.val_loss << ", val acc " << es.val_accuracy << std::endl;
    });
    save_checkpoint(result.best, ckpt_path);
    save_checkpoint(result.final_, ckpt_path + ".final");
    std::cout << "best epoch " << result.best_epoch << " (val loss "
              << result.best_val_loss << ") -> " << ckpt_path << "\n";
}

void print_summary_table(const radchar::nn::EvalReport& rep) {
    const std::array<int, 3> snrs = {-10, 0, 10};
    const std::array<const char*, 5> rows = {"accuracy", "mae_np", "mae_tpw_us",
                                             "mae_tpri_us", "mae_td_us"};
    std::cout << std::setw(14) << std::left << "metric";
    for (int s : snrs) std::cout << std::setw(10) << std::right << (std::to_string(s) + " dB");
    std::cout << "\n";
    std::cout.setf(std::ios::fixed);
    std::cout.precision(3);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::cout << std::setw(14) << std::left << rows[r];
        for (int s : snrs) {
            const auto bin = std::size_t(s - radchar::nn::EvalReport::kSnrMin);
            const double v = r == 0 ? rep.accuracy[bin] : rep.mae[r - 1][bin];
            std::cout << std::setw(10) << std::right << v;
        }
        std::cout << "\n";
    }
    std::cout.unsetf(std::ios::fixed);
}

void run_eval(const std::string& ckpt_path, const std::string& dataset_path,
              const std::string& report_path, const std::string& split_name) {
    using namespace radchar::nn;
    const auto ckpt = load_checkpoint(resolve_path(ckpt_path));
    const auto ds = load_resolved(dataset_path);
    if (ckpt.dataset_config_hash != ds.config.hash())
        throw radchar::ConfigError(
            "checkpoint was trained on a different dataset configuration (hash mismatch)");
    auto model = restore_model(ckpt);

    const auto splits = radchar::split_indices(ds.records.size(), ds.config.seed);
    std::vector<std::uint32_t> indices;
    if (split_name == "train") indices = splits.train;
    else if (split_name == "val") indices = splits.val;
    else if (split_name == "test") indices = splits.test;
    else {
        indices.resize(ds.records.size());
        std::iota(indices.begin(), indices.end(), 0u);
    }

    const auto rep = evaluate(model, ds, indices, ckpt.stats);
    if (!report_path.empty()) {
        const std::string out = resolve_path(report_path);
        std::ofstream f(out, std::ios::binary | std::ios::trunc);
        if (!f) throw radchar::IoError("cannot write report: " + out);
        f << report_csv(rep);
    }
    std::cout << "evaluated " << indices.size() << " records (" << split_name
              << " split), overall accuracy " << rep.overall_accuracy << "\n";
    print_summary_table(rep);
}

// Input frame: CSV with 512 rows of "i,q" or "t,i,q"; one optional header.
radchar::nn::Tensor<float> read_iq_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw radchar::IoError("cannot open input: " + path);
    radchar::nn::Tensor<float> x({1, 2, radchar::kSamplesPerFrame});
    std::string line;
    int row = 0;
    bool first = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> cols;
        std::stringstream ss(line);
        std::string tok;
        bool numeric = true;
        while (std::getline(ss, tok, ',')) {
            try {
                std::size_t used = 0;
                cols.push_back(std::stod(tok, &used));
                if (used != tok.size()) numeric = false;
            } catch (const std::exception&) {
                numeric = false;
            }
        }
        if (!numeric) {
            if (first) { // header line
                first = false;
                continue;
            }
            throw radchar::FormatError("non-numeric row in " + path + ": " + line);
        }
        first = false;
        if (cols.size() != 2 && cols.size() != 3)
            throw radchar::FormatError("expected 2 (i,q) or 3 (t,i,q) columns, got " +
                                       std::to_string(cols.size()));
        if (row >= radchar::kSamplesPerFrame)
            throw radchar::FormatError("more than 512 sample rows in " + path);
        const std::size_t off = cols.size() == 3 ? 1 : 0;
        x.data[std::size_t(row)] = float(cols[off]);
        x.data[std::size_t(radchar::kSamplesPerFrame + row)] = float(cols[off + 1]);
        ++row;
    }
    if (row != radchar::kSamplesPerFrame)
        throw radchar::FormatError("expected 512 sample rows, got " + std::to_string(row));
    return x;
}

void run_infer(const std::string& ckpt_path, const std::string& input_path) {
    using namespace radchar::nn;
    const auto ckpt = load_checkpoint(resolve_path(ckpt_path));
    auto model = restore_model(ckpt);
    auto x = read_iq_csv(resolve_path(input_path));
    const float mean = float(ckpt.stats.mean);
    const float inv_std = float(1.0 / std::sqrt(ckpt.stats.variance));
    for (auto& v : x.data) v = (v - mean) * inv_std;

    auto out = model.forward(make_var(std::move(x)), Mode::Eval);
    const auto probs = softmax_lastdim(out.class_logits)->value;
    int arg = 0;
    for (int c = 1; c < radchar::kNumSignalClasses; ++c)
        if (probs.data[std::size_t(c)] > probs.data[std::size_t(arg)]) arg = c;

    const radchar::LabelNormalizer norm;
    std::array<double, 4> norm_pred{};
    for (std::size_t k = 0; k < 4; ++k) norm_pred[k] = double(out.reg[k]->value.data[0]);
    const auto phys = physical_units(norm.denormalize(norm_pred));

    std::cout.setf(std::ios::fixed);
    std::cout.precision(4);
    std::cout << "class: " << radchar::signal_class_name(radchar::SignalClass(arg))
              << " (p=" << probs.data[std::size_t(arg)] << ")\n";
    std::cout << "n_p:   " << std::lround(phys[0]) << " (raw " << phys[0] << ")\n";
    std::cout << "t_pw:  " << phys[1] << " us\n";
    std::cout << "t_pri: " << phys[2] << " us\n";
    std::cout << "t_d:   " << phys[3] << " us\n";
}

void run_inspect(const std::string& dataset_path, std::uint64_t index,
                 const std::string& dump_csv) {
    const auto ds = load_resolved(dataset_path);
    if (index >= ds.records.size())
        throw radchar::ConfigError("index " + std::to_string(index) + " out of range (" +
                                   std::to_string(ds.records.size()) + " records)");
    const auto& rec = ds.records[index];
    std::cout << "record " << rec.index << "\n"
              << "  class: " << radchar::signal_class_name(rec.params.cls) << "\n"
              << "  l_c:   " << rec.params.l_c << "\n"
              << "  n_p:   " << rec.params.n_p << "\n"
              << "  t_pw:  " << rec.params.t_pw_s * 1e6 << " us\n"
              << "  t_pri: " << rec.params.t_pri_s * 1e6 << " us\n"
              << "  t_d:   " << rec.params.t_d_s * 1e6 << " us\n"
              << "  snr:   " << rec.params.snr_db << " dB\n";
    if (!dump_csv.empty()) {
        const std::string out = resolve_path(dump_csv);
        std::ofstream f(out, std::ios::binary | std::ios::trunc);
        if (!f) throw radchar::IoError("cannot write dump: " + out);
        f << "t,i,q\n";
        f << std::setprecision(9);
        for (int s = 0; s < radchar::kSamplesPerFrame; ++s)
            f << double(s) / radchar::kSampleRateHz << "," << rec.frame.i[std::size_t(s)]
              << "," << rec.frame.q[std::size_t(s)] << "\n";
        std::cout << "wrote " << out << "\n";
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic pulsed-radar dataset generator and multi-task signal "
                 "classification/characterisation models"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from an INI/TOML file");

    // generate
    auto* gen = app.add_subcommand("generate", "Generate a dataset file");
    radchar::DatasetConfig gen_cfg;
    std::string gen_out;
    int gen_workers = 1;
    gen->add_option("--count", gen_cfg.count, "Number of records")->capture_default_str();
    gen->add_option("--seed", gen_cfg.seed, "Dataset seed")->capture_default_str();
    gen->add_option("--snr-min", gen_cfg.snr_min_db, "Min SNR (dB)")->capture_default_str();
    gen->add_option("--snr-max", gen_cfg.snr_max_db, "Max SNR (dB)")->capture_default_str();
    gen->add_option("--workers", gen_workers, "Generator threads")->capture_default_str();
    gen->add_option("--out", gen_out, "Output dataset path")->required();

    // train
    auto* train = app.add_subcommand("train", "Train a model");
    radchar::nn::TrainConfig train_cfg;
    std::string train_dataset, train_out, train_model = "cnn1d";
    std::string train_weights = "0.1,0.225,0.225,0.225,0.225";
    train->add_option("--dataset", train_dataset, "Dataset path")->required();
    train->add_option("--model", train_model, "cnn1d|cnn2d|iqst-s|iqst-l")
        ->capture_default_str();
    train->add_option("--epochs", train_cfg.epochs, "Training epochs")->capture_default_str();
    train->add_option("--lr", train_cfg.lr, "Learning rate")->capture_default_str();
    train->add_option("--batch-size", train_cfg.batch_size, "Mini-batch size")
        ->capture_default_str();
    train->add_option("--seed", train_cfg.seed, "Training seed")->capture_default_str();
    train->add_option("--weights", train_weights,
                      "Task weights: class,n_p,t_pw,t_pri,t_d")
        ->capture_default_str();
    train->add_option("--out", train_out, "Checkpoint output path")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string eval_ckpt, eval_dataset, eval_report, eval_split = "test";
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
    eval->add_option("--dataset", eval_dataset, "Dataset path")->required();
    eval->add_option("--report", eval_report, "CSV report output path");
    eval->add_option("--split", eval_split, "train|val|test|all")->capture_default_str();

    // infer
    auto* infer = app.add_subcommand("infer", "Predict from a single IQ frame");
    std::string infer_ckpt, infer_input;
    infer->add_option("--checkpoint", infer_ckpt, "Checkpoint path")->required();
    infer->add_option("--input", infer_input, "CSV frame: 512 rows of i,q or t,i,q")
        ->required();

    // inspect
    auto* inspect = app.add_subcommand("inspect", "Print one record's parameters");
    std::string inspect_dataset, inspect_dump;
    std::uint64_t inspect_index = 0;
    inspect->add_option("--dataset", inspect_dataset, "Dataset path")->required();
    inspect->add_option("--index", inspect_index, "Record index")->capture_default_str();
    inspect->add_option("--dump-csv", inspect_dump, "Write the frame as t,i,q CSV");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) {
            run_generate(gen_cfg, gen_out, gen_workers);
        } else if (train->parsed()) {
            train_cfg.backbone = radchar::nn::parse_backbone(train_model);
            train_cfg.weights = radchar::nn::TaskWeights::parse(train_weights);
            run_train(train_dataset, train_cfg, train_out);
        } else if (eval->parsed()) {
            if (eval_split != "train" && eval_split != "val" && eval_split != "test" &&
                eval_split != "all")
                throw radchar::ConfigError("--split must be train|val|test|all");
            run_eval(eval_ckpt, eval_dataset, eval_report, eval_split);
        } else if (infer->parsed()) {
            run_infer(infer_ckpt, infer_input);
        } else if (inspect->parsed()) {
            run_inspect(inspect_dataset, inspect_index, inspect_dump);
        }
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    } catch (const radchar::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const radchar::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const radchar::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const radchar::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const radchar::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return 0;
}
