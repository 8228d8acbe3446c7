#pragma once

// Building blocks of the dual-view network: bottleneck feature transform,
// epipolar gather/attention/scatter, channel attention, the dual-view
// interactive convolution (DIC) block and the pose-encoded transformer.
//
// Dual-view activations travel as one stacked tensor [2B, N, H, W]: rows
// [0, B) hold view A and rows [B, 2B) hold view B of the same samples.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dvgaze/geometry.hpp"
#include "dvgaze/layers.hpp"

namespace dvgaze::nn {

struct FeatureMapPair {
    Tensor stacked;  // [2B, N, H, W]

    int batch() const { return stacked.dim(0) / 2; }
    Tensor view_a() const { return slice(stacked, 0, 0, batch()); }
    Tensor view_b() const { return slice(stacked, 0, batch(), 2 * batch()); }

    static FeatureMapPair from_views(const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape())
            throw ShapeError("FeatureMapPair: view shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        return {concat({a, b}, 0)};
    }
};

// All same-row pairs of the two views: features[(b*N + n)*H + h] is the 2 x W
// block holding row h of channel n from view A (row 0) and view B (row 1).
struct EpipolarFeatureSet {
    Tensor features;  // [B*N*H, 2, W]
    int batch = 0, channels = 0, height = 0, width = 0;
};

// Weights either shared by both views (one copy) or held per view.
template <class M>
struct ViewModules {
    std::vector<M> copies;

    template <class Factory>
    ViewModules(bool shared, Factory&& make) {
        copies.push_back(make(std::string()));
        if (!shared) copies.push_back(make(std::string(".view_b")));
    }
    ViewModules() = default;

    bool shared() const { return copies.size() == 1; }
    const M& operator[](int view) const { return copies.size() == 1 ? copies[0] : copies[static_cast<std::size_t>(view)]; }
};

// Runs fn(x, view, mode) on the whole stack when weights are shared and on
// each half otherwise. Shared batch norm pools statistics over both views.
template <class F>
Tensor apply_per_view(const Tensor& stacked, bool shared, const Mode& mode, F&& fn) {
    Mode m = mode;
    if (shared) {
        m.bn_groups = 2;
        return fn(stacked, 0, m);
    }
    m.bn_groups = 1;
    const int b = stacked.dim(0) / 2;
    return concat({fn(slice(stacked, 0, 0, b), 0, m), fn(slice(stacked, 0, b, 2 * b), 1, m)}, 0);
}

// ------------------------------------------------------------ feature transform

// Residual bottleneck: 1x1 (N -> N/4), 3x3 (N/4 -> N/4), 1x1 (N/4 -> N), plus
// identity.
struct FeatureTransform {
    Conv2d reduce, spatial, expand;

    FeatureTransform() = default;
    FeatureTransform(ParameterSet& ps, const std::string& name, int channels, Rng& rng)
        : reduce(ps, name + ".reduce", channels, channels / 4, 1, 1, rng),
          spatial(ps, name + ".spatial", channels / 4, channels / 4, 3, 1, rng),
          expand(ps, name + ".expand", channels / 4, channels, 1, 1, rng) {}

    Tensor operator()(const Tensor& x) const { return add(x, expand(relu(spatial(relu(reduce(x)))))); }
};

inline FeatureMapPair feature_transform(const FeatureMapPair& z, const ViewModules<FeatureTransform>& params,
                                        const Mode& mode = {}) {
    const int expected = params[0].reduce.weight.dim(1);
    if (z.stacked.dim(1) != expected)
        throw ShapeError("feature_transform: " + std::to_string(z.stacked.dim(1)) + " channels, expected " +
                         std::to_string(expected));
    return {apply_per_view(z.stacked, params.shared(), mode,
                           [&](const Tensor& x, int v, const Mode&) { return params[v](x); })};
}

// ------------------------------------------------------------ epipolar gather

inline EpipolarFeatureSet epipolar_gather(const FeatureMapPair& z) {
    const Tensor& s = z.stacked;
    if (s.rank() != 4 || s.dim(0) % 2 != 0) throw ShapeError("epipolar_gather: expected [2B, N, H, W]");
    const int b = s.dim(0) / 2, n = s.dim(1), h = s.dim(2), w = s.dim(3);
    const std::size_t view_stride = static_cast<std::size_t>(b) * n * h * w;
    std::vector<double> y(s.numel());
    const auto sv = s.data();
    // Both layouts enumerate (b, n, h) in the same order; only the view axis moves.
    const std::size_t rows = static_cast<std::size_t>(b) * n * h;
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(sv.begin() + r * w, w, y.begin() + (2 * r) * w);
        std::copy_n(sv.begin() + view_stride + r * w, w, y.begin() + (2 * r + 1) * w);
    }
    Tensor out = detail::make_result({static_cast<int>(rows), 2, w}, std::move(y), {s}, [rows, w, view_stride](Node& nd) {
        if (double* g = detail::grad_of(nd.inputs[0]))
            for (std::size_t r = 0; r < rows; ++r)
                for (int i = 0; i < w; ++i) {
                    g[r * w + i] += nd.grad[(2 * r) * w + i];
                    g[view_stride + r * w + i] += nd.grad[(2 * r + 1) * w + i];
                }
    });
    return {out, b, n, h, w};
}

inline FeatureMapPair epipolar_scatter(const EpipolarFeatureSet& e) {
    const Tensor& f = e.features;
    const std::size_t rows = static_cast<std::size_t>(e.batch) * e.channels * e.height;
    if (f.rank() != 3 || f.dim(1) != 2 || f.dim(2) != e.width || static_cast<std::size_t>(f.dim(0)) != rows || rows == 0)
        throw ShapeError("epipolar_scatter: features " + shape_str(f.shape()) + " inconsistent with origin shape (" +
                         std::to_string(e.channels) + ", " + std::to_string(e.height) + ", " +
                         std::to_string(e.width) + ") x batch " + std::to_string(e.batch));
    const int w = e.width;
    const std::size_t view_stride = rows * w;
    std::vector<double> y(f.numel());
    const auto fv = f.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(fv.begin() + (2 * r) * w, w, y.begin() + r * w);
        std::copy_n(fv.begin() + (2 * r + 1) * w, w, y.begin() + view_stride + r * w);
    }
    Tensor out = detail::make_result({2 * e.batch, e.channels, e.height, w}, std::move(y), {f},
                                     [rows, w, view_stride](Node& nd) {
                                         if (double* g = detail::grad_of(nd.inputs[0]))
                                             for (std::size_t r = 0; r < rows; ++r)
                                                 for (int i = 0; i < w; ++i) {
                                                     g[(2 * r) * w + i] += nd.grad[r * w + i];
                                                     g[(2 * r + 1) * w + i] += nd.grad[view_stride + r * w + i];
                                                 }
                                     });
    return {out};
}

// ----------------------------------------------------------- epipolar attention

// Query/key projections of each W-wide row; the rows themselves are the values.
struct EpipolarAttention {
    Linear query, key;

    EpipolarAttention() = default;
    EpipolarAttention(ParameterSet& ps, const std::string& name, int width, Rng& rng)
        : query(ps, name + ".query", width, width, rng), key(ps, name + ".key", width, width, rng) {}
};

inline EpipolarFeatureSet epipolar_attention(const EpipolarFeatureSet& e, const ViewModules<EpipolarAttention>& params) {
    const Tensor& f = e.features;
    Tensor q, k;
    if (params.shared()) {
        q = params[0].query(f);
        k = params[0].key(f);
    } else {
        // Row 0 of every pair comes from view A, row 1 from view B.
        q = concat({slice(params[0].query(f), 1, 0, 1), slice(params[1].query(f), 1, 1, 2)}, 1);
        k = concat({slice(params[0].key(f), 1, 0, 1), slice(params[1].key(f), 1, 1, 2)}, 1);
    }
    EpipolarFeatureSet out = e;
    out.features = attention(q, k, f, 1, 1.0 / std::sqrt(static_cast<double>(e.width)));
    return out;
}

// ------------------------------------------------------------ channel attention

// Pooled descriptors of both views -> per-channel weights in (0, 1). Each view
// sees [own pool, other pool], so the map is symmetric in the views.
struct ChannelAttention {
    Linear hidden, out;

    ChannelAttention() = default;
    ChannelAttention(ParameterSet& ps, const std::string& name, int channels, Rng& rng)
        : hidden(ps, name + ".hidden", 2 * channels, std::max(1, channels / 2), rng),
          out(ps, name + ".out", std::max(1, channels / 2), channels, rng) {}

    Tensor weights(const Tensor& paired) const { return sigmoid(out(relu(hidden(paired)))); }
};

inline FeatureMapPair channel_attention(const FeatureMapPair& z, const ViewModules<ChannelAttention>& params) {
    const Tensor pooled = global_avg_pool(z.stacked);
    const Tensor paired = concat({pooled, swap_halves(pooled)}, 1);
    Tensor w;
    if (params.shared()) {
        w = params[0].weights(paired);
    } else {
        const int b = z.batch();
        w = concat({params[0].weights(slice(paired, 0, 0, b)), params[1].weights(slice(paired, 0, b, 2 * b))}, 0);
    }
    return {scale_channels(z.stacked, w)};
}

// ------------------------------------------------------------------ conv stage

// Two 3x3 conv + batch-norm layers with a residual (projected when the shape
// changes). This is the plain "Conv" stage every DIC block ends with.
struct ConvStage {
    Conv2d conv1, conv2, proj;
    BatchNorm2d bn1, bn2, proj_bn;
    bool has_proj = false;

    ConvStage() = default;
    ConvStage(ParameterSet& ps, const std::string& name, int in, int out, int stride, Rng& rng)
        : conv1(ps, name + ".conv1", in, out, 3, stride, rng, false),
          conv2(ps, name + ".conv2", out, out, 3, 1, rng, false),
          bn1(ps, name + ".bn1", out),
          bn2(ps, name + ".bn2", out),
          has_proj(stride != 1 || in != out) {
        if (has_proj) {
            proj = Conv2d(ps, name + ".proj", in, out, 1, stride, rng, false);
            proj_bn = BatchNorm2d(ps, name + ".proj_bn", out);
        }
    }

    Tensor operator()(const Tensor& x, const Mode& mode) const {
        const Tensor main = bn2(conv2(relu(bn1(conv1(x), mode))), mode);
        const Tensor skip = has_proj ? proj_bn(proj(x), mode) : x;
        return relu(add(main, skip));
    }
};

// ------------------------------------------------------------------- DIC block

enum class Compensation {
    add_input,   // Conv(z_in + z_fused)
    fused_only,  // Conv(z_fused), the "without z_in" ablation
};

struct DicBlockConfig {
    int in_channels = 16;
    int out_channels = 32;
    int stride = 2;
    int width = 32;  // spatial width of the block input
    bool with_fusion = true;
    Compensation compensation = Compensation::add_input;
    bool shared_weights = true;
};

class DicBlock {
public:
    DicBlock() = default;
    DicBlock(ParameterSet& ps, const std::string& name, const DicBlockConfig& cfg, Rng& rng) : cfg_(cfg) {
        const bool shared = cfg.shared_weights;
        if (cfg.with_fusion) {
            transform_ = ViewModules<FeatureTransform>(
                shared, [&](const std::string& s) { return FeatureTransform(ps, name + ".transform" + s, cfg.in_channels, rng); });
            epipolar_ = ViewModules<EpipolarAttention>(
                shared, [&](const std::string& s) { return EpipolarAttention(ps, name + ".epipolar" + s, cfg.width, rng); });
            channel_ = ViewModules<ChannelAttention>(
                shared, [&](const std::string& s) { return ChannelAttention(ps, name + ".channel" + s, cfg.in_channels, rng); });
        }
        conv_ = ViewModules<ConvStage>(shared, [&](const std::string& s) {
            return ConvStage(ps, name + ".conv" + s, cfg.in_channels, cfg.out_channels, cfg.stride, rng);
        });
    }

    const DicBlockConfig& config() const { return cfg_; }
    const ViewModules<FeatureTransform>& transform() const { return transform_; }
    const ViewModules<EpipolarAttention>& epipolar() const { return epipolar_; }
    const ViewModules<ChannelAttention>& channel() const { return channel_; }
    const ViewModules<ConvStage>& conv() const { return conv_; }

    // z_fused for the given input; requires fusion modules.
    FeatureMapPair fused(const FeatureMapPair& z_in, const Mode& mode) const {
        const FeatureMapPair trans = feature_transform(z_in, transform_, mode);
        const EpipolarFeatureSet attended = epipolar_attention(epipolar_gather(trans), epipolar_);
        return channel_attention(epipolar_scatter(attended), channel_);
    }

    // Plain convolution stage applied to a dual-view stack.
    FeatureMapPair conv_stage(const FeatureMapPair& z, const Mode& mode) const {
        return {apply_per_view(z.stacked, conv_.shared(), mode,
                               [&](const Tensor& x, int v, const Mode& m) { return conv_[v](x, m); })};
    }

    // fusion_enabled = false zeroes the fusion branch: output = Conv(z_in).
    FeatureMapPair forward(const FeatureMapPair& z_in, const Mode& mode, bool fusion_enabled = true) const {
        if (z_in.stacked.rank() != 4 || z_in.stacked.dim(1) != cfg_.in_channels)
            throw ShapeError("dic_block: input " + shape_str(z_in.stacked.shape()) + ", expected " +
                             std::to_string(cfg_.in_channels) + " channels");
        if (!cfg_.with_fusion || !fusion_enabled) return conv_stage(z_in, mode);
        if (z_in.stacked.dim(3) != cfg_.width)
            throw ShapeError("dic_block: input width " + std::to_string(z_in.stacked.dim(3)) + ", expected " +
                             std::to_string(cfg_.width));
        const FeatureMapPair f = fused(z_in, mode);
        if (cfg_.compensation == Compensation::fused_only) return conv_stage(f, mode);
        return conv_stage({add(z_in.stacked, f.stacked)}, mode);
    }

private:
    DicBlockConfig cfg_;
    ViewModules<FeatureTransform> transform_;
    ViewModules<EpipolarAttention> epipolar_;
    ViewModules<ChannelAttention> channel_;
    ViewModules<ConvStage> conv_;
};

inline FeatureMapPair dic_block(const FeatureMapPair& z_in, const DicBlock& block, const Mode& mode = {}) {
    return block.forward(z_in, mode);
}

// ------------------------------------------------------------- pose encoding

// Virtual-camera optical axis (third column of R_rec R_c) followed by the
// camera translation.
inline std::array<double, 6> pose_feature(const geom::Mat3& rect_rotation, const geom::CameraPose& cam) {
    const geom::Vec3 axis = (rect_rotation * cam.rotation).col(2);
    return {axis.x(), axis.y(), axis.z(), cam.translation.x(), cam.translation.y(), cam.translation.z()};
}

inline int encoded_width(int raw_dims, int levels) { return raw_dims * (2 * levels + 1); }

struct PoseEncoder {
    Mlp2 mlp;
    int levels = 10;

    PoseEncoder() = default;
    PoseEncoder(ParameterSet& ps, const std::string& name, int levels_, int feature_dim, Rng& rng)
        : mlp(ps, name + ".mlp", encoded_width(6, levels_), feature_dim, feature_dim, rng), levels(levels_) {}
};

// raw: [M, 6] -> [M, d]
inline Tensor positional_encode(const Tensor& raw, const PoseEncoder& enc) {
    if (raw.rank() != 2 || raw.dim(1) != 6) throw ShapeError("positional_encode: expected [M, 6]");
    return enc.mlp(frequency_encode(raw, enc.levels));
}

// --------------------------------------------------------------- transformer

struct TransformerLayer {
    LayerNorm norm1, norm2;
    Linear q, k, v, o;
    Mlp2 ffn;

    TransformerLayer() = default;
    TransformerLayer(ParameterSet& ps, const std::string& name, int d, int ffn_hidden, Rng& rng)
        : norm1(ps, name + ".norm1", d),
          norm2(ps, name + ".norm2", d),
          q(ps, name + ".q", d, d, rng),
          k(ps, name + ".k", d, d, rng),
          v(ps, name + ".v", d, d, rng),
          o(ps, name + ".o", d, d, rng),
          ffn(ps, name + ".ffn", d, ffn_hidden, d, rng) {}
};

// Pre-norm encoder over the two view tokens plus a shared (pitch, yaw) head.
struct DualViewTransformer {
    std::vector<TransformerLayer> layers;
    LayerNorm final_norm;
    Mlp2 head;
    int heads = 4;
    int dim = 128;

    DualViewTransformer() = default;
    DualViewTransformer(ParameterSet& ps, const std::string& name, int d, int num_layers, int num_heads, Rng& rng)
        : heads(num_heads), dim(d) {
        if (d % num_heads != 0) throw ConfigError("model.attention_heads", "feature_dim must be divisible by heads");
        for (int i = 0; i < num_layers; ++i)
            layers.emplace_back(ps, name + ".layer" + std::to_string(i), d, 2 * d, rng);
        final_norm = LayerNorm(ps, name + ".final_norm", d);
        head = Mlp2(ps, name + ".head", d, std::max(2, d / 2), 2, rng);
    }

    // tokens: [B, 2, d] -> [B, 2, 2]
    Tensor operator()(const Tensor& tokens) const {
        Tensor x = tokens;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dim / heads));
        for (const auto& layer : layers) {
            const Tensor h = layer.norm1(x);
            x = add(x, layer.o(attention(layer.q(h), layer.k(h), layer.v(h), heads, sc)));
            x = add(x, layer.ffn(layer.norm2(x)));
        }
        return head(final_norm(x));
    }
};

// [2B, d] stacked per view -> [B, 2, d] token pairs.
inline Tensor stacked_to_tokens(const Tensor& stacked) {
    const int b = stacked.dim(0) / 2, d = stacked.dim(1);
    return concat({reshape(slice(stacked, 0, 0, b), {b, 1, d}), reshape(slice(stacked, 0, b, 2 * b), {b, 1, d})}, 1);
}

// z_vec, pos: [2B, d] stacked per view (pos may be undefined) -> [B, 2, 2].
inline Tensor dual_view_transformer(const Tensor& z_vec, const Tensor& pos, const DualViewTransformer& params) {
    if (z_vec.rank() != 2 || z_vec.dim(1) != params.dim || z_vec.dim(0) % 2 != 0)
        throw ShapeError("dual_view_transformer: features " + shape_str(z_vec.shape()) + ", expected [2B, " +
                         std::to_string(params.dim) + "]");
    if (pos.defined() && pos.shape() != z_vec.shape())
        throw ShapeError("dual_view_transformer: position features " + shape_str(pos.shape()));
    return params(stacked_to_tokens(pos.defined() ? add(z_vec, pos) : z_vec));
}

}  // namespace dvgaze::nn
