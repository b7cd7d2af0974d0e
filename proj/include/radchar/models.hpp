#ifndef RADCHAR_MODELS_HPP
#define RADCHAR_MODELS_HPP

#include <array>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "radchar/nn.hpp"
#include "radchar/signal.hpp"

namespace radchar::nn {

enum class BackboneKind { Cnn2D, Cnn1D, IqstS, IqstL };

inline const char* backbone_name(BackboneKind k) {
    switch (k) {
        case BackboneKind::Cnn2D: return "cnn2d";
        case BackboneKind::Cnn1D: return "cnn1d";
        case BackboneKind::IqstS: return "iqst-s";
        case BackboneKind::IqstL: return "iqst-l";
    }
    return "?";
}

inline BackboneKind parse_backbone(const std::string& s) {
    if (s == "cnn2d") return BackboneKind::Cnn2D;
    if (s == "cnn1d") return BackboneKind::Cnn1D;
    if (s == "iqst-s") return BackboneKind::IqstS;
    if (s == "iqst-l") return BackboneKind::IqstL;
    throw ConfigError("unknown backbone '" + s + "' (cnn2d|cnn1d|iqst-s|iqst-l)");
}

inline constexpr std::int64_t kInputChannels = 2;
inline constexpr std::int64_t kBackboneFilters = 8;
inline constexpr double kConvDropout = 0.25;
inline constexpr double kDenseDropout = 0.5;

// IQST geometry: 8 tokens of 128 samples (I tokens 0-3, Q tokens 4-7),
// d_model 128, plus one learnable shared token consumed by the heads.
inline constexpr std::int64_t kIqstTokens = 8;
inline constexpr std::int64_t kIqstDModel = 128;
inline constexpr std::int64_t kIqstFeedForward = 4 * kIqstDModel;
inline constexpr double kIqstDropout = 0.1;
// d_model is not divisible by the 3/9 head counts, so attention uses an
// explicit per-head width of 64 (the conventional transformer default).
inline constexpr std::int64_t kIqstHeadDim = 64;

// Fixed sinusoidal positional embeddings for `positions` x `d_model`.
template <typename T>
Tensor<T> sinusoidal_positions(std::int64_t positions, std::int64_t d_model) {
    Tensor<T> pe({positions, d_model});
    for (std::int64_t pos = 0; pos < positions; ++pos)
        for (std::int64_t i = 0; i < d_model; ++i) {
            const double angle =
                double(pos) / std::pow(10000.0, double(2 * (i / 2)) / double(d_model));
            pe.data[std::size_t(pos * d_model + i)] =
                T(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return pe;
}

// What a backbone hands to the heads.
enum class FeatureKind { Map2D, Seq1D, Vec };

template <typename T>
class Cnn2dBackbone {
public:
    Cnn2dBackbone(Rng& rng, double drop_scale)
        : conv_(1, kBackboneFilters, 2, 2, rng), drop_(kConvDropout * drop_scale) {}

    Var<T> forward(const Var<T>& x, Mode mode, Rng& dropout_rng) const {
        // [B,2,512] -> single-channel 32x32 image, I block then Q block.
        const auto b = x->value.dim(0);
        auto img = reshape(x, {b, 1, 32, 32});
        auto y = maxpool2d(relu(conv_.forward(img)), 2); // [B,8,15,15]
        return drop_.forward(y, mode, dropout_rng);
    }

    FeatureKind feature_kind() const { return FeatureKind::Map2D; }
    Shape feature_shape() const { return {kBackboneFilters, 15, 15}; }

    void collect(const std::string& prefix, ParamList<T>& out) {
        conv_.collect(prefix + ".conv", out);
    }

private:
    Conv2D<T> conv_;
    Dropout<T> drop_;
};

template <typename T>
class Cnn1dBackbone {
public:
    Cnn1dBackbone(Rng& rng, double drop_scale)
        : conv_(kInputChannels, kBackboneFilters, 2, rng),
          drop_(kConvDropout * drop_scale) {}

    Var<T> forward(const Var<T>& x, Mode mode, Rng& dropout_rng) const {
        auto y = maxpool1d(relu(conv_.forward(x)), 2); // [B,8,255]
        return drop_.forward(y, mode, dropout_rng);
    }

    FeatureKind feature_kind() const { return FeatureKind::Seq1D; }
    Shape feature_shape() const { return {kBackboneFilters, 255}; }

    void collect(const std::string& prefix, ParamList<T>& out) {
        conv_.collect(prefix + ".conv", out);
    }

private:
    Conv1D<T> conv_;
    Dropout<T> drop_;
};

template <typename T>
class IqstBackbone {
public:
    IqstBackbone(std::int64_t heads, std::int64_t layers, Rng& rng, double drop_scale)
        : proj_(kSamplesPerFrame * kInputChannels / kIqstTokens, kIqstDModel, rng),
          token_(make_var(Tensor<T>({kIqstDModel}), true)),
          pos_(make_var(sinusoidal_positions<T>(kIqstTokens + 1, kIqstDModel), false)) {
        lecun_fill(token_->value, kIqstDModel, rng);
        for (std::int64_t l = 0; l < layers; ++l)
            layers_.push_back(std::make_unique<EncoderLayer<T>>(
                kIqstDModel, heads, kIqstFeedForward, kIqstDropout * drop_scale, rng,
                kIqstHeadDim));
    }

    Var<T> forward(const Var<T>& x, Mode mode, Rng& dropout_rng) const {
        const auto b = x->value.dim(0);
        auto tokens = reshape(x, {b, kIqstTokens, kIqstDModel});
        auto embedded = prepend_token(proj_.forward(tokens), token_); // [B,9,128]
        auto h = add_batched(embedded, pos_);
        for (const auto& layer : layers_) h = layer->forward(h, mode, dropout_rng);
        return select_axis1(h, 0); // shared token -> [B,128]
    }

    FeatureKind feature_kind() const { return FeatureKind::Vec; }
    Shape feature_shape() const { return {kIqstDModel}; }

    void collect(const std::string& prefix, ParamList<T>& out) {
        proj_.collect(prefix + ".proj", out);
        out.push_back({prefix + ".token", token_});
        for (std::size_t l = 0; l < layers_.size(); ++l)
            layers_[l]->collect(prefix + ".enc" + std::to_string(l), out);
    }

private:
    Linear<T> proj_;
    Var<T> token_;
    Var<T> pos_;
    std::vector<std::unique_ptr<EncoderLayer<T>>> layers_;
};

// Task head: conv -> batch norm -> ReLU -> dropout 0.25 -> flatten ->
// dropout 0.5 -> dense output. All heads share this depth and differ only in
// the output width. The 0.5 dropout acts on the dense layer's input; applied
// to its output it would zero the scalar regression predictions half the
// time and stall those tasks. On non-2D feature maps the 3x3 convolution
// degrades to a kernel-3 1D convolution; the IQST feature vector is treated
// as a single-channel length-128 sequence.
template <typename T>
class TaskHead {
public:
    TaskHead(FeatureKind kind, const Shape& feature_shape, std::int64_t out_width, Rng& rng,
             double drop_scale)
        : kind_(kind), bn_(kBackboneFilters), conv_drop_(kConvDropout * drop_scale),
          dense_drop_(kDenseDropout * drop_scale), out_width_(out_width) {
        switch (kind_) {
            case FeatureKind::Map2D: {
                const auto h = feature_shape.at(1), w = feature_shape.at(2);
                conv2d_ = std::make_unique<Conv2D<T>>(feature_shape.at(0), kBackboneFilters,
                                                      3, 3, rng);
                flat_ = kBackboneFilters * (h - 2) * (w - 2);
                break;
            }
            case FeatureKind::Seq1D: {
                conv1d_ = std::make_unique<Conv1D<T>>(feature_shape.at(0), kBackboneFilters,
                                                      3, rng);
                flat_ = kBackboneFilters * (feature_shape.at(1) - 2);
                break;
            }
            case FeatureKind::Vec: {
                conv1d_ = std::make_unique<Conv1D<T>>(1, kBackboneFilters, 3, rng);
                flat_ = kBackboneFilters * (feature_shape.at(0) - 2);
                break;
            }
        }
        dense_ = std::make_unique<Linear<T>>(flat_, out_width, rng);
    }

    Var<T> forward(const Var<T>& feature, Mode mode, Rng& dropout_rng) {
        const auto b = feature->value.dim(0);
        Var<T> y;
        if (kind_ == FeatureKind::Map2D) {
            y = conv2d_->forward(feature);
        } else if (kind_ == FeatureKind::Seq1D) {
            y = conv1d_->forward(feature);
        } else {
            y = conv1d_->forward(reshape(feature, {b, 1, feature->value.dim(1)}));
        }
        y = conv_drop_.forward(relu(bn_.forward(y, mode)), mode, dropout_rng);
        y = dense_drop_.forward(reshape(y, {b, flat_}), mode, dropout_rng);
        return dense_->forward(y);
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        if (conv2d_) conv2d_->collect(prefix + ".conv", out);
        if (conv1d_) conv1d_->collect(prefix + ".conv", out);
        bn_.collect(prefix + ".bn", out);
        dense_->collect(prefix + ".dense", out);
    }

    BatchNorm<T>& batch_norm() { return bn_; }

private:
    FeatureKind kind_;
    std::unique_ptr<Conv2D<T>> conv2d_;
    std::unique_ptr<Conv1D<T>> conv1d_;
    BatchNorm<T> bn_;
    Dropout<T> conv_drop_, dense_drop_;
    std::unique_ptr<Linear<T>> dense_;
    std::int64_t flat_ = 0, out_width_ = 0;
};

template <typename T>
struct TaskOutputs {
    Var<T> class_logits;        // [B,5]
    std::array<Var<T>, 4> reg;  // each [B,1], order: n_p, t_pw, t_pri, t_d
};

inline const std::array<const char*, 4> kRegressionTaskNames = {"n_p", "t_pw", "t_pri",
                                                                "t_d"};

// Hard parameter shared MTL model: one backbone pass feeds a classification
// head and four regression heads.
template <typename T>
class MtlModel {
public:
    // `dropout_scale` multiplies every dropout rate; 0 disables regularisation
    // (useful for overfitting sanity checks). Parameter draws are unaffected.
    MtlModel(BackboneKind kind, std::uint64_t init_seed, double dropout_scale = 1.0)
        : kind_(kind), init_seed_(init_seed), dropout_rng_(splitmix64(init_seed ^ 0xd20))
    {
        Rng rng(splitmix64(init_seed ^ 0x1217));
        switch (kind) {
            case BackboneKind::Cnn2D:
                cnn2d_ = std::make_unique<Cnn2dBackbone<T>>(rng, dropout_scale);
                break;
            case BackboneKind::Cnn1D:
                cnn1d_ = std::make_unique<Cnn1dBackbone<T>>(rng, dropout_scale);
                break;
            case BackboneKind::IqstS:
                iqst_ = std::make_unique<IqstBackbone<T>>(3, 3, rng, dropout_scale);
                break;
            case BackboneKind::IqstL:
                iqst_ = std::make_unique<IqstBackbone<T>>(9, 6, rng, dropout_scale);
                break;
        }
        const FeatureKind fk = feature_kind();
        const Shape fs = feature_shape();
        heads_.push_back(std::make_unique<TaskHead<T>>(fk, fs, kNumSignalClasses, rng,
                                                       dropout_scale));
        for (int task = 0; task < 4; ++task)
            heads_.push_back(
                std::make_unique<TaskHead<T>>(fk, fs, 1, rng, dropout_scale));
    }

    TaskOutputs<T> forward(const Var<T>& batch, Mode mode) {
        if (batch->value.ndim() != 3 || batch->value.dim(1) != kInputChannels ||
            batch->value.dim(2) != kSamplesPerFrame)
            throw ShapeError("model expects [B,2,512] input, got " +
                             shape_str(batch->value.shape));
        Var<T> feature;
        if (cnn2d_) feature = cnn2d_->forward(batch, mode, dropout_rng_);
        else if (cnn1d_) feature = cnn1d_->forward(batch, mode, dropout_rng_);
        else feature = iqst_->forward(batch, mode, dropout_rng_);
        TaskOutputs<T> out;
        out.class_logits = heads_[0]->forward(feature, mode, dropout_rng_);
        for (int task = 0; task < 4; ++task)
            out.reg[std::size_t(task)] =
                heads_[std::size_t(task) + 1]->forward(feature, mode, dropout_rng_);
        return out;
    }

    ParamList<T> parameters() {
        ParamList<T> out;
        if (cnn2d_) cnn2d_->collect("backbone", out);
        if (cnn1d_) cnn1d_->collect("backbone", out);
        if (iqst_) iqst_->collect("backbone", out);
        heads_[0]->collect("head.class", out);
        for (int task = 0; task < 4; ++task)
            heads_[std::size_t(task) + 1]->collect(
                std::string("head.") + kRegressionTaskNames[std::size_t(task)], out);
        return out;
    }

    ParamList<T> backbone_parameters() {
        ParamList<T> out;
        if (cnn2d_) cnn2d_->collect("backbone", out);
        if (cnn1d_) cnn1d_->collect("backbone", out);
        if (iqst_) iqst_->collect("backbone", out);
        return out;
    }

    // BatchNorm running statistics, saved alongside the parameters.
    std::vector<std::pair<std::string, std::vector<T>*>> state_buffers() {
        std::vector<std::pair<std::string, std::vector<T>*>> out;
        static const std::array<const char*, 5> names = {"class", "n_p", "t_pw", "t_pri",
                                                         "t_d"};
        for (std::size_t h = 0; h < heads_.size(); ++h) {
            out.emplace_back(std::string("head.") + names[h] + ".bn.running_mean",
                             &heads_[h]->batch_norm().running_mean());
            out.emplace_back(std::string("head.") + names[h] + ".bn.running_var",
                             &heads_[h]->batch_norm().running_var());
        }
        return out;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for (const auto& p : parameters()) n += p.var->value.numel();
        return n;
    }

    BackboneKind kind() const { return kind_; }
    std::uint64_t init_seed() const { return init_seed_; }
    FeatureKind feature_kind() const {
        if (cnn2d_) return cnn2d_->feature_kind();
        if (cnn1d_) return cnn1d_->feature_kind();
        return iqst_->feature_kind();
    }
    Shape feature_shape() const {
        if (cnn2d_) return cnn2d_->feature_shape();
        if (cnn1d_) return cnn1d_->feature_shape();
        return iqst_->feature_shape();
    }
    void reseed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(splitmix64(seed ^ 0xd20)); }

private:
    BackboneKind kind_;
    std::uint64_t init_seed_;
    Rng dropout_rng_;
    std::unique_ptr<Cnn2dBackbone<T>> cnn2d_;
    std::unique_ptr<Cnn1dBackbone<T>> cnn1d_;
    std::unique_ptr<IqstBackbone<T>> iqst_;
    std::vector<std::unique_ptr<TaskHead<T>>> heads_;
};

} // namespace radchar::nn

#endif
