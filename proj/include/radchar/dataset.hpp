#ifndef RADCHAR_DATASET_HPP
#define RADCHAR_DATASET_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "radchar/errors.hpp"
#include "radchar/rng.hpp"
#include "radchar/signal.hpp"

namespace radchar {

static_assert(std::endian::native == std::endian::little,
              "dataset format is little-endian; big-endian hosts unsupported");

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr char kGeneratorVersion[] = "radchar-0.1.0";

struct DatasetConfig {
    std::uint64_t count = 100000;
    std::uint64_t seed = 0;
    int snr_min_db = -20;
    int snr_max_db = 20;
    double f_s_hz = kSampleRateHz;
    int samples_per_frame = kSamplesPerFrame;

    void validate() const {
        if (count < 1) throw ConfigError("count must be >= 1");
        if (snr_min_db > snr_max_db) throw ConfigError("snr_min > snr_max");
        if (snr_min_db < -20 || snr_max_db > 20)
            throw ConfigError("snr bounds must lie within [-20, 20] dB");
        if (f_s_hz != kSampleRateHz)
            throw ConfigError("only f_s = 3.2 MHz is supported");
        if (samples_per_frame != kSamplesPerFrame)
            throw ConfigError("only 512 samples per frame is supported");
    }

    nlohmann::json to_json() const {
        return {{"count", count},       {"seed", seed},
                {"snr_min_db", snr_min_db}, {"snr_max_db", snr_max_db},
                {"f_s_hz", f_s_hz},     {"samples_per_frame", samples_per_frame}};
    }

    static DatasetConfig from_json(const nlohmann::json& j) {
        DatasetConfig c;
        c.count = j.at("count").get<std::uint64_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.snr_min_db = j.at("snr_min_db").get<int>();
        c.snr_max_db = j.at("snr_max_db").get<int>();
        c.f_s_hz = j.at("f_s_hz").get<double>();
        c.samples_per_frame = j.at("samples_per_frame").get<int>();
        return c;
    }

    // FNV-1a over the canonical config string; ties checkpoints to the
    // dataset they were trained on.
    std::uint64_t hash() const {
        const std::string s = to_json().dump();
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
        return h;
    }
};

struct FrameF32 {
    std::array<float, kSamplesPerFrame> i{};
    std::array<float, kSamplesPerFrame> q{};
};

struct DatasetRecord {
    std::uint64_t index = 0;
    SignalParams params;
    FrameF32 frame;
};

// Parameter draw for record `index` of a dataset seeded with `seed`.
// Fixed draw order: class, t_pw, t_pri, n_p, t_d, l_c, snr. SNR is drawn in
// integer-dB steps so per-SNR evaluation bins are exact.
inline SignalParams sample_params_from(Rng& rng, int snr_min_db, int snr_max_db) {
    SignalParams p;
    p.cls = static_cast<SignalClass>(rng.uniform_int(0, kNumSignalClasses - 1));
    p.t_pw_s = rng.uniform(kPwMinS, kPwMaxS);
    p.t_pri_s = rng.uniform(kPriMinS, kPriMaxS);
    p.n_p = static_cast<int>(rng.uniform_int(kNpMin, kNpMax));
    p.t_d_s = rng.uniform(kDelayMinS, kDelayMaxS);
    const auto lengths = valid_code_lengths(p.cls);
    p.l_c = lengths[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(lengths.size()) - 1))];
    p.snr_db = static_cast<double>(rng.uniform_int(snr_min_db, snr_max_db));
    return p;
}

inline SignalParams sample_params(std::uint64_t seed, std::uint64_t index,
                                  int snr_min_db = -20, int snr_max_db = 20) {
    Rng rng = Rng::for_record(seed, index);
    return sample_params_from(rng, snr_min_db, snr_max_db);
}

// Fully regenerates one record from (config.seed, index). Noise draws
// continue on the same per-record stream as the parameter draws.
inline DatasetRecord make_record(const DatasetConfig& cfg, std::uint64_t index) {
    Rng rng = Rng::for_record(cfg.seed, index);
    DatasetRecord rec;
    rec.index = index;
    rec.params = sample_params_from(rng, cfg.snr_min_db, cfg.snr_max_db);
    const IQFrame clean = synthesize_frame(rec.params);
    const IQFrame noisy = apply_awgn(clean, rec.params.snr_db, rng);
    for (int s = 0; s < kSamplesPerFrame; ++s) {
        rec.frame.i[static_cast<std::size_t>(s)] = static_cast<float>(noisy.i[static_cast<std::size_t>(s)]);
        rec.frame.q[static_cast<std::size_t>(s)] = static_cast<float>(noisy.q[static_cast<std::size_t>(s)]);
    }
    return rec;
}

namespace detail {

inline constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 4 + 8;
inline constexpr std::size_t kRecordBytes =
    8 + 4 + 4 * 4 + static_cast<std::size_t>(kSamplesPerFrame) * 2 * 4;

template <typename T>
void put(std::vector<std::uint8_t>& buf, std::size_t& off, T v) {
    std::memcpy(buf.data() + off, &v, sizeof(T));
    off += sizeof(T);
}

template <typename T>
T get(const std::uint8_t* buf, std::size_t& off) {
    T v;
    std::memcpy(&v, buf + off, sizeof(T));
    off += sizeof(T);
    return v;
}

inline void encode_record(const DatasetRecord& rec, std::vector<std::uint8_t>& buf) {
    buf.resize(kRecordBytes);
    std::size_t off = 0;
    put<std::uint64_t>(buf, off, rec.index);
    put<std::uint8_t>(buf, off, static_cast<std::uint8_t>(rec.params.cls));
    put<std::uint8_t>(buf, off, static_cast<std::uint8_t>(rec.params.l_c));
    put<std::uint8_t>(buf, off, static_cast<std::uint8_t>(rec.params.n_p));
    put<std::uint8_t>(buf, off, 0); // pad
    put<float>(buf, off, static_cast<float>(rec.params.snr_db));
    put<float>(buf, off, static_cast<float>(rec.params.t_pw_s));
    put<float>(buf, off, static_cast<float>(rec.params.t_pri_s));
    put<float>(buf, off, static_cast<float>(rec.params.t_d_s));
    for (int s = 0; s < kSamplesPerFrame; ++s) {
        put<float>(buf, off, rec.frame.i[static_cast<std::size_t>(s)]);
        put<float>(buf, off, rec.frame.q[static_cast<std::size_t>(s)]);
    }
}

inline DatasetRecord decode_record(const std::uint8_t* buf) {
    DatasetRecord rec;
    std::size_t off = 0;
    rec.index = get<std::uint64_t>(buf, off);
    rec.params.cls = static_cast<SignalClass>(get<std::uint8_t>(buf, off));
    rec.params.l_c = get<std::uint8_t>(buf, off);
    rec.params.n_p = get<std::uint8_t>(buf, off);
    (void)get<std::uint8_t>(buf, off);
    rec.params.snr_db = get<float>(buf, off);
    rec.params.t_pw_s = get<float>(buf, off);
    rec.params.t_pri_s = get<float>(buf, off);
    rec.params.t_d_s = get<float>(buf, off);
    for (int s = 0; s < kSamplesPerFrame; ++s) {
        rec.frame.i[static_cast<std::size_t>(s)] = get<float>(buf, off);
        rec.frame.q[static_cast<std::size_t>(s)] = get<float>(buf, off);
    }
    return rec;
}

} // namespace detail

inline std::string sidecar_path(const std::string& dataset_path) {
    return dataset_path + ".json";
}

// Writes the dataset file plus its JSON metadata sidecar. Generation is
// parallel across record indices; the per-record RNG contract makes worker
// count irrelevant to the output bytes.
inline void generate_dataset(const DatasetConfig& cfg, const std::string& path,
                             int workers = 1) {
    cfg.validate();
    if (workers < 1) throw ConfigError("workers must be >= 1");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);

    std::vector<std::uint8_t> header(detail::kHeaderBytes);
    std::size_t off = 0;
    header[0] = 'R'; header[1] = 'A'; header[2] = 'D'; header[3] = 'C';
    off = 4;
    detail::put<std::uint32_t>(header, off, kFormatVersion);
    detail::put<std::uint64_t>(header, off, cfg.count);
    detail::put<std::uint32_t>(header, off, static_cast<std::uint32_t>(cfg.samples_per_frame));
    detail::put<double>(header, off, cfg.f_s_hz);
    out.write(reinterpret_cast<const char*>(header.data()),
              static_cast<std::streamsize>(header.size()));

    const std::uint64_t chunk_size = 4096;
    std::vector<std::uint8_t> chunk;
    for (std::uint64_t base = 0; base < cfg.count; base += chunk_size) {
        const std::uint64_t n = std::min(chunk_size, cfg.count - base);
        chunk.assign(static_cast<std::size_t>(n) * detail::kRecordBytes, 0);
        auto work = [&](std::uint64_t first, std::uint64_t last) {
            std::vector<std::uint8_t> buf;
            for (std::uint64_t k = first; k < last; ++k) {
                detail::encode_record(make_record(cfg, base + k), buf);
                std::memcpy(chunk.data() + static_cast<std::size_t>(k) * detail::kRecordBytes,
                            buf.data(), detail::kRecordBytes);
            }
        };
        if (workers == 1) {
            work(0, n);
        } else {
            std::vector<std::thread> pool;
            const std::uint64_t per = (n + static_cast<std::uint64_t>(workers) - 1) /
                                      static_cast<std::uint64_t>(workers);
            for (int w = 0; w < workers; ++w) {
                const std::uint64_t first = std::min(n, static_cast<std::uint64_t>(w) * per);
                const std::uint64_t last = std::min(n, first + per);
                if (first < last) pool.emplace_back(work, first, last);
            }
            for (auto& t : pool) t.join();
        }
        out.write(reinterpret_cast<const char*>(chunk.data()),
                  static_cast<std::streamsize>(chunk.size()));
    }
    if (!out) throw IoError("write failed: " + path);
    out.close();

    nlohmann::json meta = {{"format_version", kFormatVersion},
                           {"generator_version", kGeneratorVersion},
                           {"config", cfg.to_json()},
                           {"config_hash", cfg.hash()}};
    std::ofstream side(sidecar_path(path), std::ios::trunc);
    if (!side) throw IoError("cannot write sidecar: " + sidecar_path(path));
    side << meta.dump(2) << "\n";
}

struct RadCharDataset {
    DatasetConfig config;
    std::vector<DatasetRecord> records;
};

inline RadCharDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset: " + path);
    std::vector<std::uint8_t> header(detail::kHeaderBytes);
    in.read(reinterpret_cast<char*>(header.data()),
            static_cast<std::streamsize>(header.size()));
    if (!in) throw FormatError("truncated header: " + path);
    if (std::memcmp(header.data(), "RADC", 4) != 0)
        throw FormatError("bad magic, not a RadChar dataset: " + path);
    std::size_t off = 4;
    const auto version = detail::get<std::uint32_t>(header.data(), off);
    if (version != kFormatVersion)
        throw FormatError("unsupported format version " + std::to_string(version));
    const auto count = detail::get<std::uint64_t>(header.data(), off);
    const auto spf = detail::get<std::uint32_t>(header.data(), off);
    const auto f_s = detail::get<double>(header.data(), off);
    if (spf != kSamplesPerFrame) throw FormatError("unexpected samples_per_frame");

    RadCharDataset ds;
    ds.config.count = count;
    ds.config.f_s_hz = f_s;
    ds.config.samples_per_frame = static_cast<int>(spf);
    ds.records.reserve(count);
    std::vector<std::uint8_t> buf(detail::kRecordBytes);
    for (std::uint64_t r = 0; r < count; ++r) {
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size()));
        if (!in) throw FormatError("truncated record " + std::to_string(r));
        ds.records.push_back(detail::decode_record(buf.data()));
    }

    std::ifstream side(sidecar_path(path));
    if (side) {
        const auto meta = nlohmann::json::parse(side, nullptr, false);
        if (!meta.is_discarded() && meta.contains("config"))
            ds.config = DatasetConfig::from_json(meta.at("config"));
        if (ds.config.count != count)
            throw FormatError("sidecar/file record count mismatch");
    }
    return ds;
}

// Deterministic 70-15-15 partition of 0..count-1.
struct Splits {
    std::vector<std::uint32_t> train, val, test;
};

inline Splits split_indices(std::uint64_t count, std::uint64_t seed) {
    if (count < 10) throw ConfigError("split requires at least 10 records");
    std::vector<std::uint32_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0u);
    Rng rng(splitmix64(seed ^ 0x73706c6974ULL)); // dedicated split stream
    for (std::uint64_t i = count - 1; i > 0; --i) {
        const auto j = static_cast<std::uint64_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(i)));
        std::swap(idx[i], idx[j]);
    }
    const auto n_train = static_cast<std::size_t>(0.70 * static_cast<double>(count));
    const auto n_val = static_cast<std::size_t>(0.15 * static_cast<double>(count));
    Splits s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                 idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
    return s;
}

// Pooled scalar mean/variance over every I and Q value of the given records.
struct StandardizationStats {
    double mean = 0.0;
    double variance = 1.0;
};

inline StandardizationStats compute_standardization(
    const RadCharDataset& ds, const std::vector<std::uint32_t>& indices) {
    if (indices.empty()) throw ConfigError("standardization needs a non-empty split");
    double sum = 0.0, sum_sq = 0.0;
    const double n = static_cast<double>(indices.size()) * kSamplesPerFrame * 2;
    for (auto r : indices) {
        const auto& f = ds.records.at(r).frame;
        for (int s = 0; s < kSamplesPerFrame; ++s) {
            sum += f.i[static_cast<std::size_t>(s)] + f.q[static_cast<std::size_t>(s)];
            sum_sq += double(f.i[static_cast<std::size_t>(s)]) * f.i[static_cast<std::size_t>(s)] +
                      double(f.q[static_cast<std::size_t>(s)]) * f.q[static_cast<std::size_t>(s)];
        }
    }
    StandardizationStats st;
    st.mean = sum / n;
    st.variance = sum_sq / n - st.mean * st.mean;
    if (st.variance < 1e-12)
        throw NumericError("degenerate variance in standardization");
    return st;
}

// Min-max scaling of the four regression labels, order: n_p, t_pw, t_pri, t_d.
struct LabelNormalizer {
    std::array<std::pair<double, double>, 4> bounds = {{
        {double(kNpMin), double(kNpMax)},
        {kPwMinS, kPwMaxS},
        {kPriMinS, kPriMaxS},
        {kDelayMinS, kDelayMaxS},
    }};

    std::array<double, 4> normalize(const SignalParams& p) const {
        const std::array<double, 4> raw = {double(p.n_p), p.t_pw_s, p.t_pri_s, p.t_d_s};
        std::array<double, 4> out{};
        for (std::size_t k = 0; k < 4; ++k) {
            const auto [lo, hi] = bounds[k];
            if (raw[k] < lo - 1e-12 || raw[k] > hi + 1e-12)
                throw ConfigError("regression label out of range");
            out[k] = (raw[k] - lo) / (hi - lo);
        }
        return out;
    }

    std::array<double, 4> denormalize(const std::array<double, 4>& v) const {
        std::array<double, 4> out{};
        for (std::size_t k = 0; k < 4; ++k) {
            const auto [lo, hi] = bounds[k];
            out[k] = lo + v[k] * (hi - lo);
        }
        return out;
    }
};

} // namespace radchar

#endif
