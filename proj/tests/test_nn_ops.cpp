#include <array>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "dvgaze/gradcheck.hpp"
#include "dvgaze/layers.hpp"
#include "dvgaze/ops.hpp"

using namespace dvgaze;
using namespace dvgaze::nn;

namespace {

std::vector<std::uint64_t> seeds(int n) {
    std::vector<std::uint64_t> s(static_cast<std::size_t>(n));
    std::iota(s.begin(), s.end(), 100);
    return s;
}

Tensor randt(Shape shape, Rng& rng, double sd = 1.0) { return randn(std::move(shape), sd, rng); }

void expect_gradients(const std::function<GradCheckCase(Rng&)>& sampler, int n = 20) {
    const auto s = seeds(n);
    const GradCheckReport r = gradient_check(sampler, s);
    EXPECT_LT(r.max_relative_error, 1e-3) << "worst seed " << r.worst_seed;
}

// Direct 7-loop convolution used as the reference.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int o = w.dim(0), k = w.dim(2);
    const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    std::vector<double> y(static_cast<std::size_t>(n) * o * oh * ow, 0.0);
    for (int i = 0; i < n; ++i)
        for (int oc = 0; oc < o; ++oc)
            for (int r = 0; r < oh; ++r)
                for (int col = 0; col < ow; ++col) {
                    double s = b.defined() ? b[oc] : 0.0;
                    for (int ic = 0; ic < c; ++ic)
                        for (int kr = 0; kr < k; ++kr)
                            for (int kc = 0; kc < k; ++kc) {
                                const int yy = r * stride - pad + kr, xx = col * stride - pad + kc;
                                if (yy < 0 || xx < 0 || yy >= h || xx >= wd) continue;
                                s += w[((static_cast<std::size_t>(oc) * c + ic) * k + kr) * k + kc] *
                                     x[((static_cast<std::size_t>(i) * c + ic) * h + yy) * wd + xx];
                            }
                    y[((static_cast<std::size_t>(i) * o + oc) * oh + r) * ow + col] = s;
                }
    return y;
}

}  // namespace

TEST(Tensor, FromRejectsWrongCount) { EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError); }

TEST(Tensor, BackwardAccumulatesThroughSharedInput) {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    const Tensor y = sum(add(mul(x, x), x));
    backward(y);
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{3, 5, 7}));
}

TEST(Tensor, NoGradGuardSkipsGraph) {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y;
    {
        NoGradGuard g;
        y = mul(x, x);
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(grad_enabled());
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_NE(Rng::derive(1, 0).next_u64(), Rng::derive(1, 1).next_u64());
}

TEST(Rng, NormalMoments) {
    Rng r(9);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal();
        s += v;
        s2 += v * v;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Conv2d, MatchesNaiveLoops) {
    Rng rng(1);
    for (int stride : {1, 2})
        for (int k : {1, 3}) {
            const Tensor x = randt({2, 3, 7, 6}, rng), w = randt({4, 3, k, k}, rng), b = randt({4}, rng);
            const Tensor y = conv2d(x, w, b, stride, k / 2);
            const auto ref = naive_conv(x, w, b, stride, k / 2);
            ASSERT_EQ(y.numel(), ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
        }
}

TEST(Conv2d, StrideTwoShape) {
    Rng rng(2);
    const Tensor y = conv2d(randt({1, 16, 32, 32}, rng), randt({32, 16, 3, 3}, rng), {}, 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 32, 16, 16}));
}

// Statistics pool over the whole batch; groups only fix the summation order
// so swapping the two halves permutes the output bit-exactly.
TEST(BatchNorm, GroupSwapIsExactPermutation) {
    Rng rng(7);
    const Tensor x = randt({4, 3, 5, 5}, rng, 2.0);
    const Tensor g = randt({3}, rng), b = randt({3}, rng);
    BatchNormState s1(3), s2(3);
    const Tensor y = batch_norm(x, g, b, s1, true, 2);
    const Tensor ys = batch_norm(swap_halves(x), g, b, s2, true, 2);
    const Tensor back = swap_halves(ys);
    EXPECT_TRUE(std::equal(y.data().begin(), y.data().end(), back.data().begin()));
    EXPECT_EQ(s1.running_mean, s2.running_mean);
    EXPECT_EQ(s1.running_var, s2.running_var);

    const Tensor plain = batch_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3}), s1, true, 2);
    for (int ch = 0; ch < 3; ++ch) {
        double m = 0.0;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 25; ++j) m += plain[(i * 3 + ch) * 25 + j];
        EXPECT_NEAR(m / 100.0, 0.0, 1e-12);
    }
}

TEST(BatchNorm, EvalUsesRunningStats) {
    BatchNormState st(1);
    st.running_mean = {2.0};
    st.running_var = {4.0};
    const Tensor y = batch_norm(Tensor::from({1, 1, 1, 1}, {6.0}), Tensor::full({1}, 1.0), Tensor::zeros({1}), st, false, 1);
    EXPECT_NEAR(y[0], 2.0, 1e-5);
}

TEST(FrequencyEncode, ZeroInputLayout) {
    const Tensor e = frequency_encode(Tensor::zeros({1, 6}), 10);
    ASSERT_EQ(e.dim(1), 126);
    for (int j = 0; j < 6; ++j) {
        EXPECT_EQ(e[j * 21], 0.0);
        for (int k = 0; k < 10; ++k) {
            EXPECT_EQ(e[j * 21 + 1 + 2 * k], 0.0);
            EXPECT_EQ(e[j * 21 + 2 + 2 * k], 1.0);
        }
    }
}

TEST(FrequencyEncode, PeriodicInTwo) {
    Rng rng(3);
    const Tensor raw = randt({4, 6}, rng);
    std::vector<double> shifted(raw.data().begin(), raw.data().end());
    for (int i = 0; i < 4; ++i) shifted[i * 6] += 2.0;
    const Tensor a = frequency_encode(raw, 10), b = frequency_encode(Tensor::from({4, 6}, shifted), 10);
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 126; ++c) {
            const double x = a[i * 126 + c], y = b[i * 126 + c];
            if (c == 0)
                EXPECT_NEAR(y - x, 2.0, 1e-12);
            else
                EXPECT_NEAR(x, y, 1e-9) << "column " << c;
        }
}

TEST(Attention, RowsAreConvexCombinations) {
    Rng rng(4);
    const Tensor q = randt({5, 2, 8}, rng, 3.0), k = randt({5, 2, 8}, rng, 3.0), v = randt({5, 2, 8}, rng);
    const Tensor y = attention(q, k, v, 1, 1.0 / std::sqrt(8.0));
    for (int b = 0; b < 5; ++b)
        for (int i = 0; i < 2; ++i)
            for (int d = 0; d < 8; ++d) {
                const double r0 = v[(b * 2 + 0) * 8 + d], r1 = v[(b * 2 + 1) * 8 + d];
                const double o = y[(b * 2 + i) * 8 + d];
                EXPECT_GE(o, std::min(r0, r1) - 1e-12);
                EXPECT_LE(o, std::max(r0, r1) + 1e-12);
            }
}

TEST(Attention, ZeroScoresAverage) {
    Rng rng(5);
    const Tensor v = randt({3, 2, 4}, rng);
    const Tensor y = attention(Tensor::zeros({3, 2, 4}), Tensor::zeros({3, 2, 4}), v, 2, 0.5);
    for (int b = 0; b < 3; ++b)
        for (int d = 0; d < 4; ++d) {
            const double m = 0.5 * (v[(b * 2) * 4 + d] + v[(b * 2 + 1) * 4 + d]);
            EXPECT_NEAR(y[(b * 2) * 4 + d], m, 1e-15);
            EXPECT_NEAR(y[(b * 2 + 1) * 4 + d], m, 1e-15);
        }
}

TEST(GazeToVector, MatchesGeometry) {
    const Tensor a = Tensor::from({2, 2}, {0.3, -0.2, -0.5, 1.1});
    const Tensor v = gaze_to_vector(a);
    for (int i = 0; i < 2; ++i) {
        const double p = a[2 * i], t = a[2 * i + 1];
        EXPECT_DOUBLE_EQ(v[3 * i], -std::cos(p) * std::sin(t));
        EXPECT_DOUBLE_EQ(v[3 * i + 1], -std::sin(p));
        EXPECT_DOUBLE_EQ(v[3 * i + 2], -std::cos(p) * std::cos(t));
    }
}

TEST(Shapes, ConcatSliceRoundtrip) {
    Rng rng(6);
    const Tensor a = randt({2, 3, 4}, rng), b = randt({2, 5, 4}, rng);
    const Tensor c = concat({a, b}, 1);
    EXPECT_EQ(c.shape(), (Shape{2, 8, 4}));
    const Tensor back = slice(c, 1, 3, 8);
    EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), b.data().begin()));
    EXPECT_THROW(add(a, b), ShapeError);
}

TEST(Shapes, SwapHalves) {
    const Tensor x = Tensor::from({4, 1}, {1, 2, 3, 4});
    const Tensor y = swap_halves(x);
    EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{3, 4, 1, 2}));
}

// ------------------------------------------------------------ gradient checks

TEST(GradCheck, Elementwise) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        c.inputs = {randt({3, 5}, rng), randt({3, 5}, rng)};
        c.fn = [](const std::vector<Tensor>& in) {
            return add(mul(gelu(in[0]), sigmoid(in[1])), scale(square(sub(in[0], in[1])), 0.3));
        };
        return c;
    });
}

TEST(GradCheck, LinearAndSum) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        const Tensor w = randt({4, 6}, rng), b = randt({4}, rng);
        c.inputs = {randt({2, 3, 6}, rng)};
        c.params = {w, b};
        c.fn = [w, b](const std::vector<Tensor>& in) { return mean(linear(in[0], w, b)); };
        return c;
    });
}

TEST(GradCheck, Conv2d) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        const Tensor w = randt({3, 2, 3, 3}, rng), b = randt({3}, rng);
        const int stride = 1 + static_cast<int>(rng.below(2));
        c.inputs = {randt({2, 2, 5, 6}, rng)};
        c.params = {w, b};
        c.fn = [w, b, stride](const std::vector<Tensor>& in) { return conv2d(in[0], w, b, stride, 1); };
        return c;
    });
}

TEST(GradCheck, BatchNormTraining) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        const Tensor g = randt({3}, rng), b = randt({3}, rng);
        c.inputs = {randt({4, 3, 2, 3}, rng)};
        c.params = {g, b};
        c.fn = [g, b](const std::vector<Tensor>& in) {
            BatchNormState st(3);
            return batch_norm(in[0], g, b, st, true, 2);
        };
        return c;
    });
}

TEST(GradCheck, LayerNorm) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        const Tensor g = randt({6}, rng), b = randt({6}, rng);
        c.inputs = {randt({2, 3, 6}, rng)};
        c.params = {g, b};
        c.fn = [g, b](const std::vector<Tensor>& in) { return layer_norm(in[0], g, b); };
        return c;
    });
}

TEST(GradCheck, MultiHeadAttention) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        c.inputs = {randt({2, 3, 8}, rng), randt({2, 3, 8}, rng), randt({2, 3, 8}, rng)};
        c.fn = [](const std::vector<Tensor>& in) { return attention(in[0], in[1], in[2], 2, 0.5); };
        return c;
    });
}

TEST(GradCheck, PoolingAndChannelScale) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        c.inputs = {randt({2, 3, 4, 4}, rng), randt({2, 3}, rng)};
        c.fn = [](const std::vector<Tensor>& in) {
            return add(scale_channels(in[0], in[1]), scale_channels(in[0], global_avg_pool(in[0])));
        };
        return c;
    });
}

TEST(GradCheck, FrequencyEncode) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        c.inputs = {randt({2, 6}, rng, 0.5)};
        c.fn = [](const std::vector<Tensor>& in) { return frequency_encode(in[0], 4); };
        return c;
    });
}

TEST(GradCheck, GazeVectorAndRotation) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        std::vector<double> mats(27);
        for (double& m : mats) m = rng.normal();
        c.inputs = {randt({3, 2}, rng)};
        c.fn = [mats](const std::vector<Tensor>& in) {
            return add(rotate_rows(gaze_to_vector(in[0]), mats, true), rotate_rows(gaze_to_vector(in[0]), mats, false));
        };
        return c;
    });
}

TEST(GradCheck, AbsAwayFromKink) {
    expect_gradients([](Rng& rng) {
        GradCheckCase c;
        std::vector<double> v(8);
        for (double& x : v) x = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 2.0);
        c.inputs = {Tensor::from({8}, v)};
        c.fn = [](const std::vector<Tensor>& in) { return abs(in[0]); };
        return c;
    });
}

TEST(GradCheck, DetectsWrongGradient) {
    // A deliberately broken op must be caught by the checker.
    auto sampler = [](Rng& rng) {
        GradCheckCase c;
        c.inputs = {randt({4}, rng)};
        c.fn = [](const std::vector<Tensor>& in) {
            std::vector<double> y(in[0].data().begin(), in[0].data().end());
            for (double& v : y) v = v * v;
            return nn::detail::make_result({4}, std::move(y), {in[0]}, [](Node& n) {
                if (double* g = nn::detail::grad_of(n.inputs[0]))
                    for (std::size_t i = 0; i < 4; ++i) g[i] += n.grad[i] * n.inputs[0]->value[i];  // missing factor 2
            });
        };
        return c;
    };
    const auto s = seeds(3);
    EXPECT_GT(gradient_check(sampler, s).max_relative_error, 0.1);
}
