#ifndef RADCHAR_CHECKPOINT_HPP
#define RADCHAR_CHECKPOINT_HPP

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "radchar/dataset.hpp"
#include "radchar/models.hpp"

namespace radchar::nn {

// Checkpoint container: a JSON header (backbone kind, seeds, dataset
// standardisation) followed by raw float32 tensor blobs for the parameters,
// the BatchNorm running statistics, and optionally the Adam state. Tensors
// round-trip bit-exactly.
//
// Layout (little-endian):
//   "RCKP" | u32 version | u64 header_len | header JSON bytes
//   u64 tensor_count, then per tensor:
//     u32 name_len | name | u32 ndim | i64 dims... | f32 data...
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    BackboneKind backbone = BackboneKind::Cnn1D;
    std::uint64_t init_seed = 0;
    std::uint64_t dataset_config_hash = 0;
    StandardizationStats stats{0.0, 1.0};
    std::uint64_t adam_step = 0;
    bool has_adam = false;

    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<float>> tensors;

    void add(const std::string& name, const Shape& shape, const std::vector<float>& data) {
        names.push_back(name);
        shapes.push_back(shape);
        tensors.push_back(data);
    }

    std::optional<std::size_t> find(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        return std::nullopt;
    }
};

namespace detail {

template <typename U>
void put_scalar(std::string& out, U v) {
    const std::size_t at = out.size();
    out.resize(at + sizeof(U));
    std::memcpy(out.data() + at, &v, sizeof(U));
}

inline void put_u32(std::string& out, std::uint32_t v) { put_scalar(out, v); }
inline void put_u64(std::string& out, std::uint64_t v) { put_scalar(out, v); }

inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, std::uint32_t(s.size()));
    out.append(s);
}

inline void put_tensor(std::string& out, const std::string& name, const Shape& shape,
                       const std::vector<float>& data) {
    put_str(out, name);
    put_u32(out, std::uint32_t(shape.size()));
    for (auto d : shape) put_u64(out, std::uint64_t(d));
    const std::size_t bytes = data.size() * sizeof(float);
    const std::size_t at = out.size();
    out.resize(at + bytes);
    std::memcpy(out.data() + at, data.data(), bytes);
}

} // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::json header = {
        {"backbone", backbone_name(ckpt.backbone)},
        {"init_seed", ckpt.init_seed},
        {"dataset_config_hash", ckpt.dataset_config_hash},
        {"stats", {{"mean", ckpt.stats.mean}, {"variance", ckpt.stats.variance}}},
        {"adam_step", ckpt.adam_step},
        {"has_adam", ckpt.has_adam},
    };
    const std::string header_str = header.dump();

    std::string out;
    out.append("RCKP");
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, header_str.size());
    out.append(header_str);
    detail::put_u64(out, ckpt.tensors.size());
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i)
        detail::put_tensor(out, ckpt.names[i], ckpt.shapes[i], ckpt.tensors[i]);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw IoError("short write to checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    std::size_t at = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (at + n > buf.size())
            throw FormatError(std::string("truncated checkpoint (") + what + "): " + path);
    };
    auto get_u32 = [&]() {
        need(4, "u32");
        std::uint32_t v;
        std::memcpy(&v, buf.data() + at, 4);
        at += 4;
        return v;
    };
    auto get_u64 = [&]() {
        need(8, "u64");
        std::uint64_t v;
        std::memcpy(&v, buf.data() + at, 8);
        at += 8;
        return v;
    };
    auto get_str = [&](std::size_t n) {
        need(n, "string");
        std::string s = buf.substr(at, n);
        at += n;
        return s;
    };

    if (get_str(4) != "RCKP") throw FormatError("bad checkpoint magic: " + path);
    const auto version = get_u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto header_len = get_u64();
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(get_str(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.backbone = parse_backbone(header.at("backbone").get<std::string>());
        ckpt.init_seed = header.at("init_seed").get<std::uint64_t>();
        ckpt.dataset_config_hash = header.at("dataset_config_hash").get<std::uint64_t>();
        ckpt.stats.mean = header.at("stats").at("mean").get<double>();
        ckpt.stats.variance = header.at("stats").at("variance").get<double>();
        ckpt.adam_step = header.at("adam_step").get<std::uint64_t>();
        ckpt.has_adam = header.at("has_adam").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header field: ") + e.what());
    }

    const auto count = get_u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name = get_str(get_u32());
        const auto ndim = get_u32();
        Shape shape;
        for (std::uint32_t d = 0; d < ndim; ++d)
            shape.push_back(std::int64_t(get_u64()));
        const auto numel = std::size_t(shape_numel(shape));
        need(numel * sizeof(float), "tensor data");
        std::vector<float> data(numel);
        std::memcpy(data.data(), buf.data() + at, numel * sizeof(float));
        at += numel * sizeof(float);
        ckpt.add(name, shape, data);
    }
    if (at != buf.size()) throw FormatError("trailing bytes in checkpoint: " + path);
    return ckpt;
}

// Snapshot model parameters and running statistics (and Adam moments when an
// optimiser is supplied; moments are stored positionally via name suffixes).
inline Checkpoint snapshot_model(MtlModel<float>& model, std::uint64_t dataset_config_hash,
                                 const StandardizationStats& stats,
                                 Adam<float>* adam = nullptr) {
    Checkpoint ckpt;
    ckpt.backbone = model.kind();
    ckpt.init_seed = model.init_seed();
    ckpt.dataset_config_hash = dataset_config_hash;
    ckpt.stats = stats;

    auto params = model.parameters();
    for (const auto& p : params) ckpt.add(p.name, p.var->value.shape, p.var->value.data);
    for (const auto& [name, vec] : model.state_buffers())
        ckpt.add(name, {std::int64_t(vec->size())}, *vec);
    if (adam && adam->step_count() > 0) {
        ckpt.has_adam = true;
        ckpt.adam_step = adam->step_count();
        auto& m = adam->moment1();
        auto& v = adam->moment2();
        if (m.size() != params.size())
            throw NumericError("Adam state does not match the parameter list");
        for (std::size_t i = 0; i < params.size(); ++i) {
            ckpt.add(params[i].name + "#adam_m", m[i].shape, m[i].data);
            ckpt.add(params[i].name + "#adam_v", v[i].shape, v[i].data);
        }
    }
    return ckpt;
}

// Rebuild a model (and optionally the optimiser state) from a checkpoint.
inline MtlModel<float> restore_model(const Checkpoint& ckpt, Adam<float>* adam = nullptr) {
    MtlModel<float> model(ckpt.backbone, ckpt.init_seed);
    auto params = model.parameters();
    for (auto& p : params) {
        auto idx = ckpt.find(p.name);
        if (!idx) throw FormatError("checkpoint is missing tensor '" + p.name + "'");
        if (ckpt.shapes[*idx] != p.var->value.shape)
            throw FormatError("checkpoint shape mismatch for '" + p.name + "': " +
                              shape_str(ckpt.shapes[*idx]) + " vs " +
                              shape_str(p.var->value.shape));
        p.var->value.data = ckpt.tensors[*idx];
    }
    for (auto& [name, vec] : model.state_buffers()) {
        auto idx = ckpt.find(name);
        if (!idx) throw FormatError("checkpoint is missing tensor '" + name + "'");
        if (ckpt.tensors[*idx].size() != vec->size())
            throw FormatError("checkpoint size mismatch for '" + name + "'");
        *vec = ckpt.tensors[*idx];
    }
    if (adam && ckpt.has_adam) {
        auto& m = adam->moment1();
        auto& v = adam->moment2();
        m.clear();
        v.clear();
        for (const auto& p : params) {
            for (const char* suffix : {"#adam_m", "#adam_v"}) {
                auto idx = ckpt.find(p.name + suffix);
                if (!idx)
                    throw FormatError("checkpoint is missing tensor '" + p.name + suffix +
                                      "'");
                auto& dst = (suffix[6] == 'm') ? m : v;
                dst.push_back(Tensor<float>(ckpt.shapes[*idx], ckpt.tensors[*idx]));
            }
        }
        adam->restore_step_count(ckpt.adam_step);
    }
    return model;
}

} // namespace radchar::nn

#endif
