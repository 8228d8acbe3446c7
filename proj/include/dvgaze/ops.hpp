#pragma once

// Differentiable tensor operations.
//
// Matrix products are evaluated per sample (convolution) or per row (linear)
// on freshly copied, aligned operands. Two rows or images holding the same
// data therefore produce bit-identical results wherever they sit in the batch,
// which is what makes view-swap equivariance exact.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "dvgaze/tensor.hpp"

namespace dvgaze::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMatMap = Eigen::Map<const RowMat>;

namespace detail {

// Eigen's vectorised kernels peel differently depending on pointer
// alignment, so products on raw tensor storage would round differently from
// run to run. Operands are copied into Eigen-owned (fully aligned) matrices
// and results are accumulated with plain loops.
inline RowMat owned(const double* p, std::size_t rows, int cols) {
    return ConstRowMatMap(p, static_cast<Eigen::Index>(rows), cols);
}

inline void add_into(double* dst, const RowMat& m) {
    const double* src = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const Tensor& t, int r, const char* op) {
    if (t.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
    std::vector<double> y(x.numel());
    const auto xv = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
    return make_result(x.shape(), std::move(y), {x}, [df](Node& n) {
        auto& in = n.inputs[0];
        double* g = grad_of(in);
        if (!g) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * df(in->value[i], n.value[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
    return detail::make_result(a.shape(), std::move(y), {a, b}, [](Node& n) {
        for (auto& in : n.inputs)
            if (double* g = detail::grad_of(in))
                for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
    return detail::make_result(a.shape(), std::move(y), {a, b}, [](Node& n) {
        if (double* g = detail::grad_of(n.inputs[0]))
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
        if (double* g = detail::grad_of(n.inputs[1]))
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
    return detail::make_result(a.shape(), std::move(y), {a, b}, [](Node& n) {
        const auto& av = n.inputs[0]->value;
        const auto& bv = n.inputs[1]->value;
        if (double* g = detail::grad_of(n.inputs[0]))
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
        if (double* g = detail::grad_of(n.inputs[1]))
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
    });
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                         [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v); });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor abs(const Tensor& x) {
    return detail::unary(x, [](double v) { return std::abs(v); },
                         [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor square(const Tensor& x) {
    return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ------------------------------------------------------------------ reductions

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_result({1}, {s}, {x}, [](Node& n) {
        if (double* g = detail::grad_of(n.inputs[0]))
            for (std::size_t i = 0; i < n.inputs[0]->value.size(); ++i) g[i] += n.grad[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ------------------------------------------------------------------ structure

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> y(x.data().begin(), x.data().end());
    return detail::make_result(std::move(shape), std::move(y), {x}, [](Node& n) {
        if (double* g = detail::grad_of(n.inputs[0]))
            for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    });
}

namespace detail {
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit a;
    for (int i = 0; i < axis; ++i) a.outer *= static_cast<std::size_t>(s[i]);
    a.len = static_cast<std::size_t>(s[axis]);
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) a.inner *= static_cast<std::size_t>(s[i]);
    return a;
}
}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Shape out_shape = parts[0].shape();
    if (axis < 0) axis += static_cast<int>(out_shape.size());
    int total = 0;
    for (const Tensor& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != axis && s[d] != out_shape[d])
                throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(out_shape));
        total += s[axis];
    }
    out_shape[axis] = total;
    const auto sp = detail::split_at(out_shape, axis);
    std::vector<double> y(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        const std::size_t len = static_cast<std::size_t>(p.dim(axis)) * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(p.data().begin() + o * len, len, y.begin() + o * sp.len * sp.inner + off);
        off += len;
    }
    const std::size_t row = sp.len * sp.inner;
    return detail::make_result(out_shape, std::move(y), parts, [offsets, row, outer = sp.outer](Node& n) {
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            double* g = detail::grad_of(n.inputs[k]);
            if (!g) continue;
            const std::size_t len = n.inputs[k]->value.size() / outer;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < len; ++i) g[o * len + i] += n.grad[o * row + offsets[k] + i];
        }
    });
}

inline Tensor slice(const Tensor& x, int axis, int begin, int end) {
    if (axis < 0) axis += x.rank();
    if (begin < 0 || end > x.dim(axis) || begin >= end)
        throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " + shape_str(x.shape()));
    const auto sp = detail::split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = end - begin;
    const std::size_t len = static_cast<std::size_t>(end - begin) * sp.inner;
    const std::size_t off = static_cast<std::size_t>(begin) * sp.inner;
    const std::size_t row = sp.len * sp.inner;
    std::vector<double> y(sp.outer * len);
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(x.data().begin() + o * row + off, len, y.begin() + o * len);
    return detail::make_result(out_shape, std::move(y), {x}, [=, outer = sp.outer](Node& n) {
        if (double* g = detail::grad_of(n.inputs[0]))
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < len; ++i) g[o * row + off + i] += n.grad[o * len + i];
    });
}

// Exchanges the two halves of the leading axis (view A block <-> view B block).
inline Tensor swap_halves(const Tensor& x) {
    const int half = x.dim(0) / 2;
    if (half * 2 != x.dim(0)) throw ShapeError("swap_halves: odd leading dimension");
    return concat({slice(x, 0, half, 2 * half), slice(x, 0, 0, half)}, 0);
}

// -------------------------------------------------------------------- linear

// y[..., out] = x[..., in] W^T + b, evaluated row by row.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
    detail::require_rank(w, 2, "linear weight");
    const int out = w.dim(0), in = w.dim(1);
    if (x.dim(-1) != in) throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != out)) throw ShapeError("linear: bias shape");
    const std::size_t rows = x.numel() / static_cast<std::size_t>(in);
    Shape out_shape = x.shape();
    out_shape.back() = out;

    const RowMat wm = ConstRowMatMap(w.data().data(), out, in);
    Eigen::VectorXd xr(in), yr(out);
    std::vector<double> y(rows * static_cast<std::size_t>(out));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.data().begin() + r * in, in, xr.data());
        yr.noalias() = wm * xr;
        if (b.defined())
            for (int o = 0; o < out; ++o) yr[o] += b[static_cast<std::size_t>(o)];
        std::copy_n(yr.data(), out, y.begin() + r * out);
    }
    return detail::make_result(out_shape, std::move(y), {x, w, b}, [rows, in, out](Node& n) {
        const auto& xin = n.inputs[0];
        const auto& win = n.inputs[1];
        const RowMat dy = detail::owned(n.grad.data(), rows, out);
        if (double* g = detail::grad_of(xin)) {
            const RowMat dx = dy * detail::owned(win->value.data(), out, in);
            detail::add_into(g, dx);
        }
        if (double* g = detail::grad_of(win)) {
            const RowMat dw = dy.transpose() * detail::owned(xin->value.data(), rows, in);
            detail::add_into(g, dw);
        }
        if (n.inputs.size() > 2)
            if (double* g = detail::grad_of(n.inputs[2]))
                for (std::size_t r = 0; r < rows; ++r)
                    for (int o = 0; o < out; ++o) g[o] += n.grad[r * out + o];
    });
}

// ----------------------------------------------------------------- attention

// Scaled dot-product self-attention over the middle axis.
// q, k: [B, L, heads*dk]; v: [B, L, heads*dv] -> [B, L, heads*dv].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, double scale_factor) {
    detail::require_rank(q, 3, "attention q");
    detail::require_same_shape(q, k, "attention q/k");
    detail::require_rank(v, 3, "attention v");
    const int batch = q.dim(0), len = q.dim(1);
    if (v.dim(0) != batch || v.dim(1) != len) throw ShapeError("attention: v shape");
    if (q.dim(2) % heads != 0 || v.dim(2) % heads != 0) throw ShapeError("attention: width not divisible by heads");
    const int dk = q.dim(2) / heads, dv = v.dim(2) / heads;
    const int qw = q.dim(2), vw = v.dim(2);

    std::vector<double> probs(static_cast<std::size_t>(batch) * heads * len * len);
    std::vector<double> y(v.numel(), 0.0);
    std::vector<double> row(len);
    const auto qv = q.data(), kv = k.data(), vv = v.data();
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            double* p = &probs[((static_cast<std::size_t>(b) * heads + h) * len) * len];
            for (int i = 0; i < len; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < len; ++j) {
                    double s = 0.0;
                    const std::size_t qi = (static_cast<std::size_t>(b) * len + i) * qw + h * dk;
                    const std::size_t kj = (static_cast<std::size_t>(b) * len + j) * qw + h * dk;
                    for (int d = 0; d < dk; ++d) s += qv[qi + d] * kv[kj + d];
                    row[j] = s * scale_factor;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                for (int j = 0; j < len; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                for (int j = 0; j < len; ++j) p[i * len + j] = row[j] / z;
                double* yi = &y[(static_cast<std::size_t>(b) * len + i) * vw + h * dv];
                for (int j = 0; j < len; ++j) {
                    const double* vj = &vv[(static_cast<std::size_t>(b) * len + j) * vw + h * dv];
                    const double pij = p[i * len + j];
                    for (int d = 0; d < dv; ++d) yi[d] += pij * vj[d];
                }
            }
        }
    }
    return detail::make_result(
        v.shape(), std::move(y), {q, k, v},
        [probs = std::move(probs), batch, len, heads, dk, dv, qw, vw, scale_factor](Node& n) {
            const auto& qn = n.inputs[0];
            const auto& kn = n.inputs[1];
            const auto& vn = n.inputs[2];
            double* gq = detail::grad_of(qn);
            double* gk = detail::grad_of(kn);
            double* gv = detail::grad_of(vn);
            std::vector<double> dp(len), ds(len);
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const double* p = &probs[((static_cast<std::size_t>(b) * heads + h) * len) * len];
                    for (int i = 0; i < len; ++i) {
                        const double* dyi = &n.grad[(static_cast<std::size_t>(b) * len + i) * vw + h * dv];
                        double dot = 0.0;
                        for (int j = 0; j < len; ++j) {
                            const std::size_t vj = (static_cast<std::size_t>(b) * len + j) * vw + h * dv;
                            double s = 0.0;
                            for (int d = 0; d < dv; ++d) s += dyi[d] * vn->value[vj + d];
                            dp[j] = s;
                            dot += p[i * len + j] * s;
                            if (gv)
                                for (int d = 0; d < dv; ++d) gv[vj + d] += p[i * len + j] * dyi[d];
                        }
                        for (int j = 0; j < len; ++j) ds[j] = p[i * len + j] * (dp[j] - dot) * scale_factor;
                        const std::size_t qi = (static_cast<std::size_t>(b) * len + i) * qw + h * dk;
                        for (int j = 0; j < len; ++j) {
                            const std::size_t kj = (static_cast<std::size_t>(b) * len + j) * qw + h * dk;
                            if (gq)
                                for (int d = 0; d < dk; ++d) gq[qi + d] += ds[j] * kn->value[kj + d];
                            if (gk)
                                for (int d = 0; d < dk; ++d) gk[kj + d] += ds[j] * qn->value[qi + d];
                        }
                    }
                }
            }
        });
}

// --------------------------------------------------------------- convolution

namespace detail {

struct ConvGeometry {
    int channels, height, width, kernel, stride, pad, out_h, out_w;
    int patch() const { return channels * kernel * kernel; }
    int positions() const { return out_h * out_w; }
};

inline void im2col(const double* img, const ConvGeometry& g, RowMat& col) {
    col.resize(g.patch(), g.positions());
    for (int c = 0; c < g.channels; ++c)
        for (int ky = 0; ky < g.kernel; ++ky)
            for (int kx = 0; kx < g.kernel; ++kx) {
                double* dst = col.row((c * g.kernel + ky) * g.kernel + kx).data();
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[oy * g.out_w + ox] = (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width)
                                                     ? 0.0
                                                     : img[(static_cast<std::size_t>(c) * g.height + iy) * g.width + ix];
                    }
                }
            }
}

inline void col2im_add(const RowMat& col, const ConvGeometry& g, double* img) {
    for (int c = 0; c < g.channels; ++c)
        for (int ky = 0; ky < g.kernel; ++ky)
            for (int kx = 0; kx < g.kernel; ++kx) {
                const double* src = col.row((c * g.kernel + ky) * g.kernel + kx).data();
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.height) continue;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.width) continue;
                        img[(static_cast<std::size_t>(c) * g.height + iy) * g.width + ix] += src[oy * g.out_w + ox];
                    }
                }
            }
}

}  // namespace detail

// x: [N, C, H, W], w: [O, C, k, k], b: [O] (optional).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    detail::require_rank(x, 4, "conv2d input");
    detail::require_rank(w, 4, "conv2d weight");
    const int n = x.dim(0), out = w.dim(0), k = w.dim(2);
    if (w.dim(1) != x.dim(1) || w.dim(3) != k)
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != out)) throw ShapeError("conv2d: bias shape");
    detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
    g.out_h = (g.height + 2 * pad - k) / stride + 1;
    g.out_w = (g.width + 2 * pad - k) / stride + 1;
    if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d: empty output for " + shape_str(x.shape()));

    const RowMat wm = ConstRowMatMap(w.data().data(), out, g.patch());
    const std::size_t in_size = static_cast<std::size_t>(g.channels) * g.height * g.width;
    const std::size_t out_size = static_cast<std::size_t>(out) * g.positions();
    std::vector<double> y(static_cast<std::size_t>(n) * out_size);
    RowMat col, res;
    for (int i = 0; i < n; ++i) {
        detail::im2col(x.data().data() + i * in_size, g, col);
        res.noalias() = wm * col;
        if (b.defined())
            for (int o = 0; o < out; ++o) res.row(o).array() += b[static_cast<std::size_t>(o)];
        std::copy_n(res.data(), out_size, y.begin() + i * out_size);
    }
    return detail::make_result({n, out, g.out_h, g.out_w}, std::move(y), {x, w, b}, [g, n, out, in_size, out_size](Node& nd) {
        const auto& xin = nd.inputs[0];
        const auto& win = nd.inputs[1];
        double* gx = detail::grad_of(xin);
        double* gw = detail::grad_of(win);
        double* gb = nd.inputs.size() > 2 ? detail::grad_of(nd.inputs[2]) : nullptr;
        const RowMat wm = detail::owned(win->value.data(), out, g.patch());
        RowMat col, dcol, dw;
        for (int i = 0; i < n; ++i) {
            const RowMat dy = detail::owned(nd.grad.data() + i * out_size, out, g.positions());
            if (gw) {
                detail::im2col(xin->value.data() + i * in_size, g, col);
                dw.noalias() = dy * col.transpose();
                detail::add_into(gw, dw);
            }
            if (gx) {
                dcol.noalias() = wm.transpose() * dy;
                detail::col2im_add(dcol, g, gx + i * in_size);
            }
            if (gb)
                for (int o = 0; o < out; ++o)
                    for (int p = 0; p < g.positions(); ++p) gb[o] += dy(o, p);
        }
    });
}

// ------------------------------------------------------------- normalisation

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(int channels = 0) : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// Per-channel normalisation of x: [N, C, H, W]. Training statistics are
// accumulated separately over `groups` equal slices of the batch and then
// combined, so permuting whole groups leaves every output unchanged.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                         bool training, int groups = 1) {
    detail::require_rank(x, 4, "batch_norm");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c) ||
        state.running_mean.size() != static_cast<std::size_t>(c))
        throw ShapeError("batch_norm: channel mismatch for " + shape_str(x.shape()));
    if (groups < 1 || n % groups != 0) throw ShapeError("batch_norm: batch not divisible into groups");
    const int per_group = n / groups;
    const double count = static_cast<double>(n) * static_cast<double>(hw);
    const auto xv = x.data();

    std::vector<double> mu(c), inv_std(c);
    if (training) {
        for (int ch = 0; ch < c; ++ch) {
            double total = 0.0;
            for (int gi = 0; gi < groups; ++gi) {
                double s = 0.0;
                for (int i = gi * per_group; i < (gi + 1) * per_group; ++i) {
                    const double* p = &xv[(static_cast<std::size_t>(i) * c + ch) * hw];
                    for (std::size_t j = 0; j < hw; ++j) s += p[j];
                }
                total += s;
            }
            mu[ch] = total / count;
            double var_total = 0.0;
            for (int gi = 0; gi < groups; ++gi) {
                double s = 0.0;
                for (int i = gi * per_group; i < (gi + 1) * per_group; ++i) {
                    const double* p = &xv[(static_cast<std::size_t>(i) * c + ch) * hw];
                    for (std::size_t j = 0; j < hw; ++j) s += (p[j] - mu[ch]) * (p[j] - mu[ch]);
                }
                var_total += s;
            }
            const double var = var_total / count;
            inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
            const double unbiased = count > 1 ? var_total / (count - 1) : var;
            state.running_mean[ch] = (1 - state.momentum) * state.running_mean[ch] + state.momentum * mu[ch];
            state.running_var[ch] = (1 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mu[ch] = state.running_mean[ch];
            inv_std[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
        }
    }

    std::vector<double> xhat(x.numel()), y(x.numel());
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                xhat[base + j] = (xv[base + j] - mu[ch]) * inv_std[ch];
                y[base + j] = gamma[ch] * xhat[base + j] + beta[ch];
            }
        }
    return detail::make_result(
        x.shape(), std::move(y), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std, n, c, hw, count, training](Node& nd) {
            const auto& gam = nd.inputs[1]->value;
            double* gx = detail::grad_of(nd.inputs[0]);
            double* gg = detail::grad_of(nd.inputs[1]);
            double* gbeta = detail::grad_of(nd.inputs[2]);
            for (int ch = 0; ch < c; ++ch) {
                double sdy = 0.0, sdyx = 0.0;
                for (int i = 0; i < n; ++i) {
                    const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        sdy += nd.grad[base + j];
                        sdyx += nd.grad[base + j] * xhat[base + j];
                    }
                }
                if (gg) gg[ch] += sdyx;
                if (gbeta) gbeta[ch] += sdy;
                if (!gx) continue;
                const double k = gam[ch] * inv_std[ch];
                for (int i = 0; i < n; ++i) {
                    const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        if (training)
                            gx[base + j] += k * (nd.grad[base + j] - sdy / count - xhat[base + j] * sdyx / count);
                        else
                            gx[base + j] += k * nd.grad[base + j];
                    }
                }
            }
        });
}

// Normalises over the last axis.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const int d = x.dim(-1);
    if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d))
        throw ShapeError("layer_norm: width mismatch");
    const std::size_t rows = x.numel() / d;
    std::vector<double> xhat(x.numel()), y(x.numel()), inv_std(rows);
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* p = &xv[r * d];
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += p[j];
        m /= d;
        double v = 0.0;
        for (int j = 0; j < d; ++j) v += (p[j] - m) * (p[j] - m);
        v /= d;
        inv_std[r] = 1.0 / std::sqrt(v + eps);
        for (int j = 0; j < d; ++j) {
            xhat[r * d + j] = (p[j] - m) * inv_std[r];
            y[r * d + j] = gamma[j] * xhat[r * d + j] + beta[j];
        }
    }
    return detail::make_result(x.shape(), std::move(y), {x, gamma, beta},
                               [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](Node& nd) {
                                   const auto& gam = nd.inputs[1]->value;
                                   double* gx = detail::grad_of(nd.inputs[0]);
                                   double* gg = detail::grad_of(nd.inputs[1]);
                                   double* gbeta = detail::grad_of(nd.inputs[2]);
                                   std::vector<double> dxh(d);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const double* dy = &nd.grad[r * d];
                                       const double* xh = &xhat[r * d];
                                       double s1 = 0.0, s2 = 0.0;
                                       for (int j = 0; j < d; ++j) {
                                           if (gg) gg[j] += dy[j] * xh[j];
                                           if (gbeta) gbeta[j] += dy[j];
                                           dxh[j] = dy[j] * gam[j];
                                           s1 += dxh[j];
                                           s2 += dxh[j] * xh[j];
                                       }
                                       if (!gx) continue;
                                       for (int j = 0; j < d; ++j)
                                           gx[r * d + j] += inv_std[r] * (dxh[j] - s1 / d - xh[j] * s2 / d);
                                   }
                               });
}

// ------------------------------------------------------------ spatial helpers

// [N, C, H, W] -> [N, C]
inline Tensor global_avg_pool(const Tensor& x) {
    detail::require_rank(x, 4, "global_avg_pool");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    std::vector<double> y(static_cast<std::size_t>(n) * c);
    for (std::size_t i = 0; i < y.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
        y[i] = s / static_cast<double>(hw);
    }
    return detail::make_result({n, c}, std::move(y), {x}, [hw](Node& nd) {
        if (double* g = detail::grad_of(nd.inputs[0]))
            for (std::size_t i = 0; i < nd.grad.size(); ++i)
                for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += nd.grad[i] / static_cast<double>(hw);
    });
}

// x: [N, C, H, W] scaled by w: [N, C].
inline Tensor scale_channels(const Tensor& x, const Tensor& w) {
    detail::require_rank(x, 4, "scale_channels");
    if (w.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != x.dim(1))
        throw ShapeError("scale_channels: weights " + shape_str(w.shape()) + " for " + shape_str(x.shape()));
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    std::vector<double> y(x.numel());
    for (std::size_t i = 0; i < w.numel(); ++i)
        for (std::size_t j = 0; j < hw; ++j) y[i * hw + j] = x[i * hw + j] * w[i];
    return detail::make_result(x.shape(), std::move(y), {x, w}, [hw](Node& nd) {
        const auto& xv = nd.inputs[0]->value;
        const auto& wv = nd.inputs[1]->value;
        double* gx = detail::grad_of(nd.inputs[0]);
        double* gw = detail::grad_of(nd.inputs[1]);
        for (std::size_t i = 0; i < wv.size(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < hw; ++j) {
                if (gx) gx[i * hw + j] += nd.grad[i * hw + j] * wv[i];
                s += nd.grad[i * hw + j] * xv[i * hw + j];
            }
            if (gw) gw[i] += s;
        }
    });
}

// ------------------------------------------------------------- gaze helpers

// [M, 2] (pitch, yaw) -> [M, 3] unit gaze vectors.
inline Tensor gaze_to_vector(const Tensor& angles) {
    if (angles.rank() != 2 || angles.dim(1) != 2) throw ShapeError("gaze_to_vector: expected [M, 2]");
    const int m = angles.dim(0);
    std::vector<double> y(static_cast<std::size_t>(m) * 3);
    for (int i = 0; i < m; ++i) {
        const double p = angles[2 * i], t = angles[2 * i + 1];
        const double cp = std::cos(p);
        y[3 * i] = -cp * std::sin(t);
        y[3 * i + 1] = -std::sin(p);
        y[3 * i + 2] = -cp * std::cos(t);
    }
    return detail::make_result({m, 3}, std::move(y), {angles}, [m](Node& nd) {
        double* g = detail::grad_of(nd.inputs[0]);
        if (!g) return;
        const auto& a = nd.inputs[0]->value;
        for (int i = 0; i < m; ++i) {
            const double p = a[2 * i], t = a[2 * i + 1];
            const double sp = std::sin(p), cp = std::cos(p), st = std::sin(t), ct = std::cos(t);
            const double gx = nd.grad[3 * i], gy = nd.grad[3 * i + 1], gz = nd.grad[3 * i + 2];
            g[2 * i] += gx * sp * st - gy * cp + gz * sp * ct;
            g[2 * i + 1] += -gx * cp * ct + gz * cp * st;
        }
    });
}

// Applies a per-row constant 3x3 matrix (row-major, 9 values per row) or its
// transpose to v: [M, 3].
inline Tensor rotate_rows(const Tensor& v, const std::vector<double>& mats, bool transpose) {
    if (v.rank() != 2 || v.dim(1) != 3) throw ShapeError("rotate_rows: expected [M, 3]");
    const int m = v.dim(0);
    if (mats.size() != static_cast<std::size_t>(m) * 9) throw ShapeError("rotate_rows: matrix count mismatch");
    auto elem = [&mats, transpose](int i, int r, int c) {
        return transpose ? mats[9 * i + 3 * c + r] : mats[9 * i + 3 * r + c];
    };
    std::vector<double> y(static_cast<std::size_t>(m) * 3, 0.0);
    for (int i = 0; i < m; ++i)
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) y[3 * i + r] += elem(i, r, c) * v[3 * i + c];
    return detail::make_result({m, 3}, std::move(y), {v}, [mats, transpose, m](Node& nd) {
        double* g = detail::grad_of(nd.inputs[0]);
        if (!g) return;
        for (int i = 0; i < m; ++i)
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) {
                    const double e = transpose ? mats[9 * i + 3 * c + r] : mats[9 * i + 3 * r + c];
                    g[3 * i + c] += e * nd.grad[3 * i + r];
                }
    });
}

// Per scalar p: [p, sin(pi p), cos(pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)].
// [M, D] -> [M, D * (2L + 1)].
inline Tensor frequency_encode(const Tensor& raw, int levels) {
    if (levels < 1) throw std::invalid_argument("frequency_encode: levels must be >= 1");
    if (raw.rank() != 2) throw ShapeError("frequency_encode: expected [M, D]");
    const int m = raw.dim(0), d = raw.dim(1), per = 2 * levels + 1;
    std::vector<double> y(static_cast<std::size_t>(m) * d * per);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) {
            const double p = raw[static_cast<std::size_t>(i) * d + j];
            double* o = &y[(static_cast<std::size_t>(i) * d + j) * per];
            o[0] = p;
            for (int k = 0; k < levels; ++k) {
                const double w = std::ldexp(std::numbers::pi, k);
                o[1 + 2 * k] = std::sin(w * p);
                o[2 + 2 * k] = std::cos(w * p);
            }
        }
    return detail::make_result({m, d * per}, std::move(y), {raw}, [m, d, per, levels](Node& nd) {
        double* g = detail::grad_of(nd.inputs[0]);
        if (!g) return;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                const double p = nd.inputs[0]->value[idx];
                const double* go = &nd.grad[idx * per];
                double acc = go[0];
                for (int k = 0; k < levels; ++k) {
                    const double w = std::ldexp(std::numbers::pi, k);
                    acc += go[1 + 2 * k] * w * std::cos(w * p) - go[2 + 2 * k] * w * std::sin(w * p);
                }
                g[idx] += acc;
            }
    });
}

}  // namespace dvgaze::nn
