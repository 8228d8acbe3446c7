#pragma once

// Training objectives over batched predictions [B, 2 views, 2 angles].

#include <string>
#include <vector>

#include "dvgaze/errors.hpp"
#include "dvgaze/geometry.hpp"
#include "dvgaze/ops.hpp"

namespace dvgaze {

struct LossWeights {
    double alpha = 1.0;
    double beta = 0.1;

    void validate() const {
        if (!(alpha >= 0.0)) throw ConfigError("train.loss_weights.alpha", "must be >= 0");
        if (!(beta >= 0.0)) throw ConfigError("train.loss_weights.beta", "must be >= 0");
        if (alpha == 0.0 && beta == 0.0) throw ConfigError("train.loss_weights", "alpha and beta cannot both be zero");
    }
};

struct LossTerms {
    nn::Tensor total;
    nn::Tensor gaze;         // unweighted L1 term
    nn::Tensor consistency;  // unweighted squared-norm term
};

namespace detail {

inline void check_prediction_shape(const nn::Tensor& pred, const char* op) {
    if (pred.rank() != 3 || pred.dim(1) != 2 || pred.dim(2) != 2)
        throw ShapeError(std::string(op) + ": expected [B, 2, 2], got " + nn::shape_str(pred.shape()));
    if (pred.dim(0) == 0) throw std::invalid_argument(std::string(op) + ": empty batch");
}

}  // namespace detail

// sum |pred - truth| over angles, averaged over samples and views.
inline nn::Tensor gaze_loss(const nn::Tensor& pred, const nn::Tensor& truth) {
    detail::check_prediction_shape(pred, "gaze_loss");
    if (truth.shape() != pred.shape())
        throw ShapeError("gaze_loss: truth " + nn::shape_str(truth.shape()) + " vs prediction " +
                         nn::shape_str(pred.shape()));
    return nn::scale(nn::sum(nn::abs(nn::sub(pred, truth))), 1.0 / (2.0 * pred.dim(0)));
}

// Batch mean of ||R_a^T g_a - R_b^T g_b||^2. `rotations` holds, per sample,
// the row-major virtual-camera rotations of view A then view B (18 values).
inline nn::Tensor consistency_loss(const nn::Tensor& pred, const std::vector<double>& rotations) {
    detail::check_prediction_shape(pred, "consistency_loss");
    const int b = pred.dim(0);
    if (rotations.size() != static_cast<std::size_t>(b) * 18)
        throw ShapeError("consistency_loss: need 18 rotation values per sample");
    const nn::Tensor world = nn::rotate_rows(nn::gaze_to_vector(nn::reshape(pred, {2 * b, 2})), rotations, true);
    const nn::Tensor pairs = nn::reshape(world, {b, 6});
    const nn::Tensor diff = nn::sub(nn::slice(pairs, 1, 0, 3), nn::slice(pairs, 1, 3, 6));
    return nn::scale(nn::sum(nn::square(diff)), 1.0 / b);
}

inline LossTerms total_loss(const nn::Tensor& pred, const nn::Tensor& truth, const std::vector<double>& rotations,
                            const LossWeights& w) {
    w.validate();
    LossTerms terms;
    terms.gaze = gaze_loss(pred, truth);
    if (w.beta == 0.0) {
        {
            nn::NoGradGuard guard;
            terms.consistency = consistency_loss(pred, rotations);
        }
        terms.total = nn::scale(terms.gaze, w.alpha);
        return terms;
    }
    terms.consistency = consistency_loss(pred, rotations);
    terms.total = nn::add(nn::scale(terms.gaze, w.alpha), nn::scale(terms.consistency, w.beta));
    return terms;
}

// Packs per-sample (R_a, R_b) pairs into the layout consistency_loss expects.
inline std::vector<double> pack_rotations(const std::vector<std::array<geom::Mat3, 2>>& rots) {
    std::vector<double> out;
    out.reserve(rots.size() * 18);
    for (const auto& pair : rots)
        for (const auto& r : pair)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) out.push_back(r(i, j));
    return out;
}

}  // namespace dvgaze
