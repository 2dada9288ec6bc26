#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "vkan/cbam.hpp"
#include "vkan/gradcheck.hpp"

using namespace vkan;

namespace {

Tensor randn(std::vector<std::int64_t> shape, CounterRng& rng, double scale = 1.0) {
    Tensor t(DType::F64, std::move(shape));
    for (auto& v : t.data<double>()) v = scale * rng.next_normal();
    return t;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("construction rejects indivisible reduction") {
    ParamStore store;
    CHECK_THROWS(make_cbam_params(store, "bad", 6, 4, DType::F64, 1));
    ParamStore ok_store;
    CHECK_NOTHROW(make_cbam_params(ok_store, "ok", 8, 4, DType::F64, 1));
}

TEST_CASE("channel attention of zero input with zero biases is one half") {
    ParamStore store;
    CBAMParams p = make_cbam_params(store, "cbam", 8, 4, DType::F64, 2);
    Var x(Tensor::zeros(DType::F64, {2, 8, 3, 3}));
    Var s = channel_attention(x, p);
    CHECK(s.shape() == std::vector<std::int64_t>{2, 8, 1, 1});
    for (std::int64_t i = 0; i < s.numel(); ++i) {
        CHECK(s.value().scalar_at(i) == doctest::Approx(0.5));
    }
}

TEST_CASE("channel attention scores stay strictly inside (0,1)") {
    ParamStore store;
    CBAMParams p = make_cbam_params(store, "cbam", 8, 4, DType::F64, 3);
    CounterRng rng(201, "ca-range");
    Var x(randn({2, 8, 5, 5}, rng, 3.0));
    Var s = channel_attention(x, p);
    for (std::int64_t i = 0; i < s.numel(); ++i) {
        CHECK(s.value().scalar_at(i) > 0.0);
        CHECK(s.value().scalar_at(i) < 1.0);
    }
}

TEST_CASE("constant input makes max and avg branches coincide (hand computed, C=2)") {
    ParamStore store;
    CBAMParams p = make_cbam_params(store, "cbam", 2, 1, DType::F64, 4);
    // known 2x2 squeeze matrices via the 1x1 convs
    const double wd[4] = {0.3, -0.7, 1.1, 0.4};  // down: hidden x C
    const double bd[2] = {0.1, -0.2};
    const double wu[4] = {0.5, 0.9, -0.6, 0.2};  // up: C x hidden
    const double bu[2] = {0.05, 0.3};
    std::copy_n(wd, 4, p.down_w.value_mut().data<double>().data());
    std::copy_n(bd, 2, p.down_b.value_mut().data<double>().data());
    std::copy_n(wu, 4, p.up_w.value_mut().data<double>().data());
    std::copy_n(bu, 2, p.up_b.value_mut().data<double>().data());

    const double c0 = 1.0, c1 = -0.5;  // per-channel constants
    Tensor xt(DType::F64, {1, 2, 4, 4});
    for (int i = 0; i < 16; ++i) {
        xt.data<double>()[i] = c0;
        xt.data<double>()[16 + i] = c1;
    }
    Var s = channel_attention(Var(xt), p);

    // hand evaluation: both pooled descriptors equal (c0, c1)
    double hidden[2], up[2];
    for (int h = 0; h < 2; ++h) {
        hidden[h] = std::max(0.0, wd[h * 2 + 0] * c0 + wd[h * 2 + 1] * c1 + bd[h]);
    }
    for (int c = 0; c < 2; ++c) {
        up[c] = wu[c * 2 + 0] * hidden[0] + wu[c * 2 + 1] * hidden[1] + bu[c];
    }
    CHECK(s.value().scalar_at(0) == doctest::Approx(sigmoid_ref(2.0 * up[0])).epsilon(1e-12));
    CHECK(s.value().scalar_at(1) == doctest::Approx(sigmoid_ref(2.0 * up[1])).epsilon(1e-12));
}

TEST_CASE("spatial attention zero case, shape, and hot-pixel peak") {
    ParamStore store;
    CBAMParams p = make_cbam_params(store, "cbam", 4, 2, DType::F64, 5);
    Var zero(Tensor::zeros(DType::F64, {1, 4, 5, 5}));
    {
        ParamStore zstore;
        CBAMParams zp = make_cbam_params(zstore, "cbam", 4, 2, DType::F64, 6);
        for (auto& v : zp.spatial_w.value_mut().data<double>()) v = 0.0;
        Var s = spatial_attention(zero, zp);
        CHECK(s.shape() == std::vector<std::int64_t>{1, 1, 5, 5});
        for (std::int64_t i = 0; i < s.numel(); ++i) {
            CHECK(s.value().scalar_at(i) == doctest::Approx(0.5));
        }
    }

    // identity-center 7x7 kernel: score at the hot pixel is sigmoid(max + mean)
    for (auto& v : p.spatial_w.value_mut().data<double>()) v = 0.0;
    auto w = p.spatial_w.value_mut().data<double>();
    w[3 * 7 + 3] = 1.0;           // center tap, channel-max plane
    w[49 + 3 * 7 + 3] = 1.0;      // center tap, channel-mean plane
    Tensor xt = Tensor::zeros(DType::F64, {1, 4, 5, 5});
    xt.data<double>()[2 * 5 + 2] = 2.0;  // hot pixel in channel 0
    Var s = spatial_attention(Var(xt), p);
    const double expect = sigmoid_ref(2.0 + 2.0 / 4.0);
    CHECK(s.value().scalar_at(2 * 5 + 2) == doctest::Approx(expect).epsilon(1e-12));
    for (std::int64_t i = 0; i < 25; ++i) {
        if (i != 12) CHECK(s.value().scalar_at(i) == doctest::Approx(0.5));
    }
}

TEST_CASE("cbam_apply zero in, zero out, and shape preservation") {
    ParamStore store;
    CBAMParams p = make_cbam_params(store, "cbam", 8, 4, DType::F64, 7);
    Var zero(Tensor::zeros(DType::F64, {1, 8, 4, 4}));
    Var y = cbam_apply(zero, p);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.value().scalar_at(i) == 0.0);

    ParamStore big_store;
    CBAMParams bp = make_cbam_params(big_store, "cbam", 48, 16, DType::F32, 8);
    CounterRng rng(202, "cbam-shape");
    Tensor xt(DType::F32, {1, 48, 128, 128});
    for (auto& v : xt.data<float>()) v = static_cast<float>(rng.next_normal());
    NoGradGuard ng;
    CHECK(cbam_apply(Var(xt), bp).shape() == std::vector<std::int64_t>{1, 48, 128, 128});
}

TEST_CASE("refined pre-residual map never exceeds the input sup-norm; output non-negative") {
    ParamStore store;
    CBAMParams p = make_cbam_params(store, "cbam", 8, 4, DType::F64, 9);
    CounterRng rng(203, "cbam-bound");
    Var x(randn({2, 8, 6, 6}, rng, 2.0));
    Var refined = mul(x, channel_attention(x, p));
    refined = mul(refined, spatial_attention(refined, p));
    double xmax = 0.0, rmax = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        xmax = std::max(xmax, std::abs(x.value().scalar_at(i)));
        rmax = std::max(rmax, std::abs(refined.value().scalar_at(i)));
    }
    CHECK(rmax <= xmax);

    Var out = cbam_apply(x, p);
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.value().scalar_at(i) >= 0.0);
}

TEST_CASE("saturated attention drives the output to relu(2x) on non-negative input") {
    ParamStore store;
    CBAMParams p = make_cbam_params(store, "cbam", 4, 2, DType::F64, 10);
    // large positive biases push both sigmoids to 1 regardless of the input
    for (auto& v : p.up_b.value_mut().data<double>()) v = 50.0;
    for (auto& v : p.spatial_b.value_mut().data<double>()) v = 50.0;
    CounterRng rng(204, "cbam-sat");
    Tensor xt(DType::F64, {1, 4, 3, 3});
    for (auto& v : xt.data<double>()) v = std::abs(rng.next_normal());
    Var x(xt);
    Var y = cbam_apply(x, p);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.value().scalar_at(i) ==
              doctest::Approx(2.0 * x.value().scalar_at(i)).epsilon(1e-9));
    }
}

TEST_CASE("cbam_apply gradcheck at toy size") {
    ParamStore store;
    CBAMParams p = make_cbam_params(store, "cbam", 4, 2, DType::F64, 11);
    CounterRng rng(205, "cbam-grad");
    Var x(randn({2, 4, 3, 3}, rng), true);
    Var coef(randn({2, 4, 3, 3}, rng));
    auto fn = [&](const std::vector<Var>& in) {
        CBAMParams q = p;
        q.down_w = in[1];
        q.up_w = in[2];
        q.spatial_w = in[3];
        return sum_all(mul(cbam_apply(in[0], q), coef));
    };
    CHECK(finite_diff_check(fn, {x, p.down_w, p.up_w, p.spatial_w}, 1e-5) <= 1e-4);
}
