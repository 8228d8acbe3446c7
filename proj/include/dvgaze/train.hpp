#pragma once

// Mini-batch training, evaluation metrics and oracle view selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dvgaze/dataset.hpp"
#include "dvgaze/losses.hpp"
#include "dvgaze/model.hpp"

namespace dvgaze {

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 32;
    int epochs = 60;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double validation_fraction = 0.1;
    LossWeights loss_weights;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be positive");
        if (batch_size <= 0) throw ConfigError("train.batch_size", "must be positive");
        if (epochs <= 0) throw ConfigError("train.epochs", "must be positive");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("train.adam_beta1", "must be in [0, 1)");
        if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("train.adam_beta2", "must be in [0, 1)");
        if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
            throw ConfigError("train.validation_fraction", "must be in [0, 1)");
        loss_weights.validate();
    }
};

struct EpochRecord {
    int epoch = 0;
    double gaze_loss = 0.0;         // sample-weighted mean over the epoch
    double consistency_loss = 0.0;  // unweighted L_gc, same averaging
    double total_loss = 0.0;
    double val_error = -1.0;  // mean per-view angular error (deg); -1 without a validation split
};

// ------------------------------------------------------------------ batches

struct Batch {
    nn::Tensor images;  // [2B, C, H, W], view A rows first
    nn::Tensor pose;    // [2B, 6]
    nn::Tensor truth;   // [B, 2, 2]
    std::vector<double> rotations;  // 18 per sample
    int size = 0;
};

inline Batch make_batch(const std::vector<DualViewSample>& samples, std::span<const std::size_t> idx) {
    if (idx.empty()) throw std::invalid_argument("make_batch: empty batch");
    const Image& ref = samples.at(idx[0]).images[0];
    const int b = static_cast<int>(idx.size()), c = ref.channels, h = ref.height, w = ref.width;
    const std::size_t plane = static_cast<std::size_t>(h) * w, per_image = plane * c;
    std::vector<double> img(2 * static_cast<std::size_t>(b) * per_image);
    std::vector<double> pose(2 * static_cast<std::size_t>(b) * 6), truth(static_cast<std::size_t>(b) * 4);
    Batch out;
    out.size = b;
    out.rotations.reserve(static_cast<std::size_t>(b) * 18);
    for (int v = 0; v < 2; ++v) {
        for (int i = 0; i < b; ++i) {
            const DualViewSample& s = samples.at(idx[static_cast<std::size_t>(i)]);
            const Image& im = s.images[static_cast<std::size_t>(v)];
            if (!im.same_shape(ref)) throw ShapeError("make_batch: sample " + s.id + " has a different image shape");
            double* dst = &img[(static_cast<std::size_t>(v) * b + i) * per_image];
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int ch = 0; ch < c; ++ch)
                        dst[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(y) * w + x] = im.at(y, x, ch);
            for (int k = 0; k < 6; ++k)
                pose[(static_cast<std::size_t>(v) * b + i) * 6 + k] = s.pose_raw[static_cast<std::size_t>(v)][static_cast<std::size_t>(k)];
        }
    }
    for (int i = 0; i < b; ++i) {
        const DualViewSample& s = samples.at(idx[static_cast<std::size_t>(i)]);
        for (std::size_t v = 0; v < 2; ++v) {
            truth[static_cast<std::size_t>(i) * 4 + v * 2] = s.gaze[v].pitch;
            truth[static_cast<std::size_t>(i) * 4 + v * 2 + 1] = s.gaze[v].yaw;
            for (int r = 0; r < 3; ++r)
                for (int k = 0; k < 3; ++k) out.rotations.push_back(s.virtual_rotations[v](r, k));
        }
    }
    out.images = nn::Tensor::from({2 * b, c, h, w}, std::move(img));
    out.pose = nn::Tensor::from({2 * b, 6}, std::move(pose));
    out.truth = nn::Tensor::from({b, 2, 2}, std::move(truth));
    return out;
}

// Stable 64-bit FNV-1a, used for the validation split.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline bool is_validation_id(const std::string& id, double fraction) {
    if (fraction <= 0.0) return false;
    return static_cast<double>(fnv1a64(id) % 10000) < fraction * 10000.0;
}

// ---------------------------------------------------------------- optimizer

class Adam {
public:
    Adam(nn::ParameterSet& params, const TrainConfig& cfg) : params_(params), cfg_(cfg) {
        for (const auto& p : params_.parameters()) {
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.adam_beta1, t_), c2 = 1.0 - std::pow(cfg_.adam_beta2, t_);
        const auto& ps = params_.parameters();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            nn::Tensor t = ps[i].tensor;
            if (!t.has_grad()) continue;
            auto g = t.grad();
            auto x = t.mutable_data();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < x.size(); ++k) {
                const double gk = g[k] + cfg_.weight_decay * x[k];
                m[k] = cfg_.adam_beta1 * m[k] + (1.0 - cfg_.adam_beta1) * gk;
                v[k] = cfg_.adam_beta2 * v[k] + (1.0 - cfg_.adam_beta2) * gk * gk;
                x[k] -= cfg_.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.adam_eps);
            }
        }
    }

    long steps() const { return t_; }

private:
    nn::ParameterSet& params_;
    TrainConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

// --------------------------------------------------------------- evaluation

struct SampleErrors {
    std::string id;
    double left = 0.0;   // view A, degrees
    double right = 0.0;  // view B, degrees
    double avg = 0.0;    // world-averaged gaze, degrees
};

struct Metrics {
    double error_left = 0.0;
    double error_right = 0.0;
    double error_avg = 0.0;
    double error_oracle = 0.0;
    std::vector<SampleErrors> per_sample;

    // Mean of the two per-view errors.
    double mean_view_error() const { return 0.5 * (error_left + error_right); }
};

// Mean over samples of the better view's error.
inline double oracle_select(std::span<const double> left, std::span<const double> right) {
    if (left.size() != right.size()) throw std::invalid_argument("oracle_select: unpaired errors");
    if (left.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < left.size(); ++i) s += std::min(left[i], right[i]);
    return s / static_cast<double>(left.size());
}

// Scores per-sample predicted angles ([view A, view B] per sample) against
// the dataset labels.
inline Metrics evaluate_predictions(const std::vector<DualViewSample>& samples,
                                    const std::vector<std::array<geom::GazeAngles, 2>>& pred) {
    if (pred.size() != samples.size()) throw std::invalid_argument("evaluate_predictions: prediction count mismatch");
    Metrics m;
    std::vector<double> left, right;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const DualViewSample& s = samples[i];
        SampleErrors e;
        e.id = s.id;
        e.left = geom::angular_error(geom::angles_to_vector(pred[i][0]), geom::angles_to_vector(s.gaze[0]));
        e.right = geom::angular_error(geom::angles_to_vector(pred[i][1]), geom::angles_to_vector(s.gaze[1]));
        const geom::GazeVector truth_world{s.virtual_rotations[0].transpose() * geom::angles_to_vector(s.gaze[0]).direction};
        try {
            e.avg = geom::angular_error(
                geom::world_average_gaze(pred[i][0], pred[i][1], s.virtual_rotations[0], s.virtual_rotations[1]),
                truth_world);
        } catch (const UndefinedAverageError&) {
            e.avg = 90.0;  // antipodal views: no direction preferred
        }
        left.push_back(e.left);
        right.push_back(e.right);
        m.error_left += e.left;
        m.error_right += e.right;
        m.error_avg += e.avg;
        m.per_sample.push_back(std::move(e));
    }
    if (!samples.empty()) {
        const double n = static_cast<double>(samples.size());
        m.error_left /= n;
        m.error_right /= n;
        m.error_avg /= n;
        m.error_oracle = oracle_select(left, right);
    }
    return m;
}

inline void check_input_schema(const GazeNet& net, const std::vector<DualViewSample>& samples) {
    if (samples.empty()) return;
    const Image& im = samples[0].images[0];
    const ModelConfig& c = net.config();
    if (im.height != c.input_height || im.width != c.input_width || im.channels != c.input_channels)
        throw ShapeError("dataset images are " + std::to_string(im.height) + "x" + std::to_string(im.width) + "x" +
                         std::to_string(im.channels) + " but the model expects " + std::to_string(c.input_height) +
                         "x" + std::to_string(c.input_width) + "x" + std::to_string(c.input_channels));
}

inline std::vector<std::array<geom::GazeAngles, 2>> predict(const GazeNet& net, const std::vector<DualViewSample>& samples,
                                                           int batch_size = 64) {
    check_input_schema(net, samples);
    nn::NoGradGuard guard;
    std::vector<std::array<geom::GazeAngles, 2>> out;
    out.reserve(samples.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
        idx.clear();
        for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i)
            idx.push_back(i);
        const Batch b = make_batch(samples, idx);
        const GazePrediction p = net.forward(b.images, b.pose, nn::Mode{false, 1});
        for (int i = 0; i < b.size; ++i) out.push_back({p.gaze(i, 0), p.gaze(i, 1)});
    }
    return out;
}

inline Metrics evaluate(const GazeNet& net, const std::vector<DualViewSample>& samples) {
    return evaluate_predictions(samples, predict(net, samples));
}

// ----------------------------------------------------------------- training

struct TrainResult {
    std::vector<EpochRecord> history;
    int epochs_completed = 0;
};

inline LossWeights effective_weights(const Variant& variant, const LossWeights& w) {
    LossWeights out = w;
    if (!variant.consistency_loss) out.beta = 0.0;
    return out;
}

// Trains `net` in place. Deterministic given cfg.seed and the sample order.
inline TrainResult train(GazeNet& net, const std::vector<DualViewSample>& samples, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    check_input_schema(net, samples);
    const LossWeights weights = effective_weights(net.variant(), cfg.loss_weights);
    weights.validate();

    std::vector<std::size_t> train_idx;
    std::vector<DualViewSample> val;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (is_validation_id(samples[i].id, cfg.validation_fraction))
            val.push_back(samples[i]);
        else
            train_idx.push_back(i);
    }
    if (train_idx.empty()) throw std::invalid_argument("train: no training samples after the validation split");

    Adam opt(net.parameters(), cfg);
    TrainResult result;
    const nn::Mode mode{true, 1};
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        Rng shuffle = Rng::derive(cfg.seed, 0x5000 + static_cast<std::uint64_t>(epoch));
        shuffle.shuffle(order.begin(), order.end());
        EpochRecord rec;
        rec.epoch = epoch;
        std::size_t seen = 0;
        int batch_no = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const Batch b = make_batch(samples, std::span<const std::size_t>(order.data() + start, end - start));
            net.parameters().zero_grad();
            const GazePrediction p = net.forward(b.images, b.pose, mode);
            const LossTerms terms = total_loss(p.angles, b.truth, b.rotations, weights);
            const std::pair<const char*, double> parts[] = {{"gaze_loss", terms.gaze.item()},
                                                            {"consistency_loss", terms.consistency.item()},
                                                            {"total_loss", terms.total.item()}};
            for (const auto& [name, value] : parts)
                if (!std::isfinite(value))
                    throw NonFiniteError("non-finite " + std::string(name) + " at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(batch_no));
            nn::backward(terms.total);
            opt.step();
            rec.gaze_loss += parts[0].second * b.size;
            rec.consistency_loss += parts[1].second * b.size;
            rec.total_loss += parts[2].second * b.size;
            seen += static_cast<std::size_t>(b.size);
        }
        rec.gaze_loss /= static_cast<double>(seen);
        rec.consistency_loss /= static_cast<double>(seen);
        rec.total_loss /= static_cast<double>(seen);
        if (!val.empty()) rec.val_error = evaluate(net, val).mean_view_error();
        result.history.push_back(rec);
        result.epochs_completed = epoch;
        if (on_epoch) on_epoch(rec);
    }
    return result;
}

}  // namespace dvgaze
