#pragma once

// Central finite-difference check of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dvgaze/errors.hpp"
#include "dvgaze/rng.hpp"
#include "dvgaze/tensor.hpp"

namespace dvgaze {

// One differentiable problem instance. `inputs` are fresh tensors passed to
// `fn`; `params` are tensors captured by `fn` itself (module weights), which
// the checker perturbs in place and restores.
struct GradCheckCase {
    std::vector<nn::Tensor> inputs;
    std::vector<nn::Tensor> params;
    std::function<nn::Tensor(const std::vector<nn::Tensor>&)> fn;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::uint64_t worst_seed = 0;
    std::vector<double> per_seed;
};

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-8);
}

namespace detail {

inline double project(const nn::Tensor& y, const std::vector<double>& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * y[i];
    return s;
}

inline void require_finite(const nn::Tensor& y, const char* what) {
    for (double v : y.data())
        if (!std::isfinite(v)) throw NonFiniteError(std::string("gradient_check: non-finite ") + what);
}

}  // namespace detail

// Per seed: draws a case, a random output projection r and a unit direction u
// over all variables, then compares <grad(r . f), u> against
// (r . f(x + h u) - r . f(x - h u)) / 2h.
inline double gradient_check_once(const std::function<GradCheckCase(Rng&)>& sampler, std::uint64_t seed,
                                  double step = 1e-4) {
    Rng rng(seed);
    GradCheckCase c = sampler(rng);
    std::vector<nn::Tensor> vars = c.inputs;
    vars.insert(vars.end(), c.params.begin(), c.params.end());
    for (auto& v : vars) {
        v.set_requires_grad(true);
        v.zero_grad();
    }

    const nn::Tensor y = c.fn(c.inputs);
    detail::require_finite(y, "output");
    std::vector<double> r(y.numel());
    for (double& v : r) v = rng.normal();
    nn::backward(y, r);

    std::vector<std::vector<double>> dir(vars.size());
    double norm2 = 0.0;
    for (std::size_t i = 0; i < vars.size(); ++i) {
        dir[i].resize(vars[i].numel());
        for (double& d : dir[i]) {
            d = rng.normal();
            norm2 += d * d;
        }
    }
    const double inv = 1.0 / std::sqrt(norm2);
    double analytic = 0.0;
    for (std::size_t i = 0; i < vars.size(); ++i) {
        for (double& d : dir[i]) d *= inv;
        if (!vars[i].has_grad()) continue;
        const auto& g = vars[i].grad();
        for (std::size_t k = 0; k < g.size(); ++k) analytic += g[k] * dir[i][k];
    }

    std::vector<std::vector<double>> saved(vars.size());
    for (std::size_t i = 0; i < vars.size(); ++i) saved[i].assign(vars[i].data().begin(), vars[i].data().end());
    auto evaluate = [&](double h) {
        for (std::size_t i = 0; i < vars.size(); ++i) {
            auto data = vars[i].mutable_data();
            for (std::size_t k = 0; k < data.size(); ++k) data[k] = saved[i][k] + h * dir[i][k];
        }
        nn::NoGradGuard guard;
        const nn::Tensor out = c.fn(c.inputs);
        detail::require_finite(out, "perturbed output");
        return detail::project(out, r);
    };
    const double plus = evaluate(step);
    const double minus = evaluate(-step);
    for (std::size_t i = 0; i < vars.size(); ++i) std::copy(saved[i].begin(), saved[i].end(), vars[i].mutable_data().begin());

    const double numeric = (plus - minus) / (2.0 * step);
    if (!std::isfinite(analytic) || !std::isfinite(numeric))
        throw NonFiniteError("gradient_check: non-finite derivative");
    return relative_error(analytic, numeric);
}

inline GradCheckReport gradient_check(const std::function<GradCheckCase(Rng&)>& sampler,
                                      std::span<const std::uint64_t> seeds, double step = 1e-4) {
    GradCheckReport rep;
    for (std::uint64_t s : seeds) {
        const double e = gradient_check_once(sampler, s, step);
        rep.per_seed.push_back(e);
        if (e >= rep.max_relative_error) {
            rep.max_relative_error = e;
            rep.worst_seed = s;
        }
    }
    return rep;
}

}  // namespace dvgaze
