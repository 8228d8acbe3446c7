#pragma once

// Network assembly: dvgaze and the comparison models that share its trunk.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dvgaze/blocks.hpp"

namespace dvgaze {

struct ModelConfig {
    // Channels entering each DIC block.
    std::vector<int> stage_channels{16, 32, 64, 128};
    int num_dic_blocks = 4;
    // Stride of every DIC block; stride 2 also doubles the channel count.
    int block_stride = 2;
    int primary_stride = 1;
    int encoding_length = 10;  // L
    int feature_dim = 128;     // d
    int transformer_layers = 2;
    int attention_heads = 4;
    int input_height = 64;
    int input_width = 64;
    int input_channels = 3;
    bool shared_weights = true;

    int block_out_channels(int i) const {
        const int in = stage_channels.at(static_cast<std::size_t>(i));
        return block_stride == 2 ? 2 * in : in;
    }
    int final_channels() const { return block_out_channels(num_dic_blocks - 1); }

    // (height, width) of the activation entering block i; i == num_dic_blocks
    // gives the trunk output size.
    std::array<int, 2> block_input_size(int i) const {
        int h = (input_height + 2 - 3) / primary_stride + 1;
        int w = (input_width + 2 - 3) / primary_stride + 1;
        for (int b = 0; b < i; ++b) {
            h = (h + 2 - 3) / block_stride + 1;
            w = (w + 2 - 3) / block_stride + 1;
        }
        return {h, w};
    }

    void validate() const {
        auto positive = [](int v, const char* key) {
            if (v <= 0) throw ConfigError(std::string("model.") + key, "must be positive");
        };
        positive(num_dic_blocks, "num_dic_blocks");
        positive(encoding_length, "encoding_length");
        positive(feature_dim, "feature_dim");
        positive(transformer_layers, "transformer_layers");
        positive(attention_heads, "attention_heads");
        positive(input_height, "input_height");
        positive(input_width, "input_width");
        positive(input_channels, "input_channels");
        if (block_stride != 1 && block_stride != 2) throw ConfigError("model.block_stride", "must be 1 or 2");
        if (primary_stride != 1 && primary_stride != 2) throw ConfigError("model.primary_stride", "must be 1 or 2");
        if (static_cast<int>(stage_channels.size()) != num_dic_blocks)
            throw ConfigError("model.stage_channels", "needs one entry per DIC block (" + std::to_string(num_dic_blocks) + ")");
        for (std::size_t i = 0; i < stage_channels.size(); ++i) {
            const std::string key = "model.stage_channels[" + std::to_string(i) + "]";
            if (stage_channels[i] <= 0 || stage_channels[i] % 4 != 0) throw ConfigError(key, "must be a positive multiple of 4");
            if (i > 0 && stage_channels[i] != block_out_channels(static_cast<int>(i) - 1))
                throw ConfigError(key, "must equal the previous block's output channels (" +
                                           std::to_string(block_out_channels(static_cast<int>(i) - 1)) + ")");
        }
        if (feature_dim % attention_heads != 0)
            throw ConfigError("model.attention_heads", "must divide feature_dim");
        const auto out = block_input_size(num_dic_blocks);
        if (out[0] < 1 || out[1] < 1) throw ConfigError("model.input_height", "input too small for the block strides");
    }
};

enum class ModelKind { dvgaze, concat, transformer_only, single_view };

// A trainable configuration compared in the experiments.
struct Variant {
    std::string name = "dvgaze";
    ModelKind kind = ModelKind::dvgaze;
    bool use_pose = true;
    nn::Compensation compensation = nn::Compensation::add_input;
    bool consistency_loss = true;

    static const std::vector<std::string>& names() {
        static const std::vector<std::string> n{"dvgaze",         "concat",         "transformer_only", "single_view",
                                                "dvgaze_no_pose", "dvgaze_no_comp", "dvgaze_no_gc"};
        return n;
    }

    static Variant from_name(const std::string& name) {
        Variant v;
        v.name = name;
        if (name == "dvgaze") return v;
        if (name == "concat") {
            v.kind = ModelKind::concat;
            v.use_pose = false;
            return v;
        }
        if (name == "transformer_only") {
            v.kind = ModelKind::transformer_only;
            return v;
        }
        if (name == "single_view") {
            v.kind = ModelKind::single_view;
            v.use_pose = false;
            v.consistency_loss = false;
            return v;
        }
        if (name == "dvgaze_no_pose") {
            v.use_pose = false;
            return v;
        }
        if (name == "dvgaze_no_comp") {
            v.compensation = nn::Compensation::fused_only;
            return v;
        }
        if (name == "dvgaze_no_gc") {
            v.consistency_loss = false;
            return v;
        }
        throw ConfigError("variant", "unknown variant '" + name + "'");
    }
};

// Batched per-view (pitch, yaw) predictions, [B, 2 views, 2 angles].
struct GazePrediction {
    nn::Tensor angles;

    int batch() const { return angles.dim(0); }
    geom::GazeAngles gaze(int sample, int view) const {
        const std::size_t base = (static_cast<std::size_t>(sample) * 2 + view) * 2;
        return {angles[base], angles[base + 1]};
    }
};

namespace detail {

struct PrimaryConv {
    nn::Conv2d conv;
    nn::BatchNorm2d bn;

    PrimaryConv() = default;
    PrimaryConv(nn::ParameterSet& ps, const std::string& name, int in, int out, int stride, Rng& rng)
        : conv(ps, name + ".conv", in, out, 3, stride, rng, false), bn(ps, name + ".bn", out) {}
    nn::Tensor operator()(const nn::Tensor& x, const nn::Mode& m) const { return nn::relu(bn(conv(x), m)); }
};

}  // namespace detail

class GazeNet {
public:
    GazeNet(const ModelConfig& cfg, const Variant& variant, std::uint64_t seed) : cfg_(cfg), variant_(variant) {
        cfg_.validate();
        if (variant_.kind == ModelKind::single_view) cfg_.shared_weights = false;
        Rng rng = Rng::derive(seed, 0x5eed);
        const bool shared = cfg_.shared_weights;
        primary_ = nn::ViewModules<detail::PrimaryConv>(shared, [&](const std::string& s) {
            return detail::PrimaryConv(params_, "primary" + s, cfg_.input_channels, cfg_.stage_channels[0],
                                       cfg_.primary_stride, rng);
        });
        for (int i = 0; i < cfg_.num_dic_blocks; ++i) {
            nn::DicBlockConfig bc;
            bc.in_channels = cfg_.stage_channels[static_cast<std::size_t>(i)];
            bc.out_channels = cfg_.block_out_channels(i);
            bc.stride = cfg_.block_stride;
            bc.width = cfg_.block_input_size(i)[1];
            bc.with_fusion = variant_.kind == ModelKind::dvgaze;
            bc.compensation = variant_.compensation;
            bc.shared_weights = shared;
            blocks_.emplace_back(params_, "block" + std::to_string(i), bc, rng);
        }
        const int c = cfg_.final_channels();
        const int d = cfg_.feature_dim;
        switch (variant_.kind) {
            case ModelKind::dvgaze:
            case ModelKind::transformer_only:
                to_vec_ = nn::Linear(params_, "to_vec", c, d, rng);
                if (variant_.use_pose) pose_ = nn::PoseEncoder(params_, "pose", cfg_.encoding_length, d, rng);
                transformer_ = nn::DualViewTransformer(params_, "transformer", d, cfg_.transformer_layers,
                                                       cfg_.attention_heads, rng);
                break;
            case ModelKind::concat:
                concat_head_ = nn::Mlp2(params_, "concat_head", 2 * c, d, 4, rng);
                break;
            case ModelKind::single_view:
                view_heads_ = nn::ViewModules<nn::Mlp2>(
                    false, [&](const std::string& s) { return nn::Mlp2(params_, "head" + s, c, d, 2, rng); });
                break;
        }
    }

    GazeNet(const GazeNet&) = delete;
    GazeNet& operator=(const GazeNet&) = delete;
    GazeNet(GazeNet&&) = default;

    const ModelConfig& config() const { return cfg_; }
    const Variant& variant() const { return variant_; }
    nn::ParameterSet& parameters() { return params_; }
    const nn::ParameterSet& parameters() const { return params_; }
    const std::vector<nn::DicBlock>& blocks() const { return blocks_; }
    bool needs_pose() const { return pose_.has_value(); }

    // Runtime switch that zeroes every DIC fusion branch.
    void set_fusion_enabled(bool enabled) { fusion_enabled_ = enabled; }

    // images: [2B, C, H, W] (view A rows first); pose_raw: [2B, 6].
    GazePrediction forward(const nn::Tensor& images, const nn::Tensor& pose_raw, const nn::Mode& mode) const {
        check_inputs(images, pose_raw);
        const nn::Tensor features = nn::global_avg_pool(trunk(images, mode).stacked);
        const int b = images.dim(0) / 2;
        switch (variant_.kind) {
            case ModelKind::dvgaze:
            case ModelKind::transformer_only: {
                const nn::Tensor z_vec = to_vec_(features);
                const nn::Tensor pos = pose_ ? nn::positional_encode(pose_raw, *pose_) : nn::Tensor();
                return {nn::dual_view_transformer(z_vec, pos, transformer_)};
            }
            case ModelKind::concat: {
                const nn::Tensor joined = nn::concat({nn::slice(features, 0, 0, b), nn::slice(features, 0, b, 2 * b)}, 1);
                return {nn::reshape(concat_head_(joined), {b, 2, 2})};
            }
            case ModelKind::single_view: {
                const nn::Tensor a = view_heads_[0](nn::slice(features, 0, 0, b));
                const nn::Tensor bb = view_heads_[1](nn::slice(features, 0, b, 2 * b));
                return {nn::stacked_to_tokens(nn::concat({a, bb}, 0))};
            }
        }
        throw std::logic_error("GazeNet: unknown model kind");
    }

    nn::FeatureMapPair trunk(const nn::Tensor& images, const nn::Mode& mode) const {
        nn::FeatureMapPair z{nn::apply_per_view(images, primary_.shared(), mode,
                                                [&](const nn::Tensor& x, int v, const nn::Mode& m) { return primary_[v](x, m); })};
        for (const auto& block : blocks_) z = block.forward(z, mode, fusion_enabled_);
        return z;
    }

private:
    void check_inputs(const nn::Tensor& images, const nn::Tensor& pose_raw) const {
        if (images.rank() != 4 || images.dim(0) % 2 != 0 || images.dim(0) == 0 ||
            images.dim(1) != cfg_.input_channels || images.dim(2) != cfg_.input_height ||
            images.dim(3) != cfg_.input_width)
            throw ShapeError("GazeNet: images " + nn::shape_str(images.shape()) + ", expected [2B, " +
                             std::to_string(cfg_.input_channels) + ", " + std::to_string(cfg_.input_height) + ", " +
                             std::to_string(cfg_.input_width) + "]");
        if (pose_ && (!pose_raw.defined() || pose_raw.rank() != 2 || pose_raw.dim(0) != images.dim(0) || pose_raw.dim(1) != 6))
            throw ShapeError("GazeNet: pose features must be [2B, 6]");
    }

    ModelConfig cfg_;
    Variant variant_;
    nn::ParameterSet params_;
    nn::ViewModules<detail::PrimaryConv> primary_;
    std::vector<nn::DicBlock> blocks_;
    nn::Linear to_vec_;
    std::optional<nn::PoseEncoder> pose_;
    nn::DualViewTransformer transformer_;
    nn::Mlp2 concat_head_;
    nn::ViewModules<nn::Mlp2> view_heads_;
    bool fusion_enabled_ = true;
};

// Stacks per-view inputs into the layout GazeNet consumes.
inline nn::Tensor stack_views(const nn::Tensor& a, const nn::Tensor& b) { return nn::concat({a, b}, 0); }

inline GazePrediction dvgaze_forward(const nn::Tensor& img_a, const nn::Tensor& img_b, const nn::Tensor& pose_a,
                                     const nn::Tensor& pose_b, const GazeNet& net, const nn::Mode& mode = {}) {
    if (net.variant().kind != ModelKind::dvgaze) throw std::invalid_argument("dvgaze_forward: not a dvgaze network");
    return net.forward(stack_views(img_a, img_b), stack_views(pose_a, pose_b), mode);
}

inline GazePrediction baseline_concat_forward(const nn::Tensor& img_a, const nn::Tensor& img_b, const GazeNet& net,
                                              const nn::Mode& mode = {}) {
    if (net.variant().kind != ModelKind::concat) throw std::invalid_argument("baseline_concat_forward: not a concat network");
    return net.forward(stack_views(img_a, img_b), {}, mode);
}

inline GazePrediction baseline_transformer_forward(const nn::Tensor& img_a, const nn::Tensor& img_b,
                                                   const nn::Tensor& pose_a, const nn::Tensor& pose_b,
                                                   const GazeNet& net, const nn::Mode& mode = {}) {
    if (net.variant().kind != ModelKind::transformer_only)
        throw std::invalid_argument("baseline_transformer_forward: not a transformer-only network");
    return net.forward(stack_views(img_a, img_b), stack_views(pose_a, pose_b), mode);
}

}  // namespace dvgaze
