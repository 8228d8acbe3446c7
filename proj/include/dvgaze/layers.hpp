#pragma once

// Parameter ownership and the basic layers built on nn::ops.

#include <cmath>
#include <deque>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dvgaze/ops.hpp"
#include "dvgaze/rng.hpp"

namespace dvgaze::nn {

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

struct NamedBuffer {
    std::string name;
    BatchNormState* state;
};

// Owns every trainable tensor and normalisation buffer of a model, in
// registration order.
class ParameterSet {
public:
    ParameterSet() = default;
    ParameterSet(const ParameterSet&) = delete;
    ParameterSet& operator=(const ParameterSet&) = delete;
    ParameterSet(ParameterSet&&) = default;
    ParameterSet& operator=(ParameterSet&&) = default;

    Tensor add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.push_back({name, t});
        return t;
    }

    BatchNormState* add_buffer(const std::string& name, int channels) {
        if (buffer_index_.count(name)) throw std::invalid_argument("duplicate buffer name: " + name);
        states_.emplace_back(channels);
        buffer_index_[name] = buffers_.size();
        buffers_.push_back({name, &states_.back()});
        return &states_.back();
    }

    const std::vector<NamedParameter>& parameters() const { return params_; }
    const std::vector<NamedBuffer>& buffers() const { return buffers_; }

    const Tensor* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second].tensor;
    }
    BatchNormState* find_buffer(const std::string& name) const {
        auto it = buffer_index_.find(name);
        return it == buffer_index_.end() ? nullptr : buffers_[it->second].state;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    // Copies values of identically named and shaped parameters/buffers from
    // another set. Returns the number of parameters copied.
    std::size_t copy_matching(const ParameterSet& other) {
        std::size_t copied = 0;
        for (auto& p : params_) {
            const Tensor* src = other.find(p.name);
            if (!src || src->shape() != p.tensor.shape()) continue;
            std::copy(src->data().begin(), src->data().end(), p.tensor.mutable_data().begin());
            ++copied;
        }
        for (auto& b : buffers_)
            if (const BatchNormState* src = other.find_buffer(b.name)) *b.state = *src;
        return copied;
    }

private:
    std::vector<NamedParameter> params_;
    std::map<std::string, std::size_t> index_;
    std::deque<BatchNormState> states_;
    std::vector<NamedBuffer> buffers_;
    std::map<std::string, std::size_t> buffer_index_;
};

// Forward-pass switches shared by every module.
struct Mode {
    bool training = false;
    int bn_groups = 1;  // 2 for stacked [view A; view B] batches
};

inline Tensor randn(Shape shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
    return t;
}

inline Tensor rand_uniform(Shape shape, double bound, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
    return t;
}

struct Linear {
    Tensor weight, bias;

    Linear() = default;
    Linear(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng, bool with_bias = true) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight = ps.add(name + ".weight", rand_uniform({out, in}, bound, rng));
        if (with_bias) bias = ps.add(name + ".bias", rand_uniform({out}, bound, rng));
    }
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    int in_features() const { return weight.dim(1); }
    int out_features() const { return weight.dim(0); }
};

struct Conv2d {
    Tensor weight, bias;
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(ParameterSet& ps, const std::string& name, int in, int out, int kernel, int stride_, Rng& rng,
           bool with_bias = true)
        : stride(stride_), pad(kernel / 2) {
        const double fan_in = static_cast<double>(in) * kernel * kernel;
        weight = ps.add(name + ".weight", randn({out, in, kernel, kernel}, std::sqrt(2.0 / fan_in), rng));
        if (with_bias) bias = ps.add(name + ".bias", Tensor::zeros({out}));
    }
    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct BatchNorm2d {
    Tensor gamma, beta;
    BatchNormState* state = nullptr;

    BatchNorm2d() = default;
    BatchNorm2d(ParameterSet& ps, const std::string& name, int channels) {
        gamma = ps.add(name + ".gamma", Tensor::full({channels}, 1.0));
        beta = ps.add(name + ".beta", Tensor::zeros({channels}));
        state = ps.add_buffer(name + ".running", channels);
    }
    Tensor operator()(const Tensor& x, const Mode& mode) const {
        return batch_norm(x, gamma, beta, *state, mode.training, mode.bn_groups);
    }
};

struct LayerNorm {
    Tensor gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParameterSet& ps, const std::string& name, int width) {
        gamma = ps.add(name + ".gamma", Tensor::full({width}, 1.0));
        beta = ps.add(name + ".beta", Tensor::zeros({width}));
    }
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

// Two linear layers with a GELU between them.
struct Mlp2 {
    Linear first, second;

    Mlp2() = default;
    Mlp2(ParameterSet& ps, const std::string& name, int in, int hidden, int out, Rng& rng)
        : first(ps, name + ".0", in, hidden, rng), second(ps, name + ".1", hidden, out, rng) {}
    Tensor operator()(const Tensor& x) const { return second(gelu(first(x))); }
};

inline void zero_fill(Tensor& t) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0); }

}  // namespace dvgaze::nn
