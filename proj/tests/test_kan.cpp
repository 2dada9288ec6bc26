#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "vkan/gradcheck.hpp"
#include "vkan/kan.hpp"

using namespace vkan;

namespace {

Tensor randn(std::vector<std::int64_t> shape, CounterRng& rng, double scale = 1.0) {
    Tensor t(DType::F64, std::move(shape));
    for (auto& v : t.data<double>()) v = scale * rng.next_normal();
    return t;
}

std::vector<double> basis_at(const SplineGrid& g, double x) {
    Var v(Tensor::scalar(DType::F64, x));
    Var b = bspline_basis(v, g);
    std::vector<double> out(static_cast<std::size_t>(b.numel()));
    for (std::int64_t i = 0; i < b.numel(); ++i) out[static_cast<std::size_t>(i)] = b.value().scalar_at(i);
    return out;
}

void zero_params(std::initializer_list<Var> vars) {
    for (Var v : vars) {
        dispatch_float(v.dtype(), [&](auto tag) {
            using T = decltype(tag);
            for (auto& x : v.value_mut().data<T>()) x = T(0);
        });
    }
}

}  // namespace

TEST_CASE("order-0 basis is the cell indicator") {
    SplineGrid g = SplineGrid::make(0, 4, 0.0, 4.0);
    CHECK(g.num_basis() == 4);
    auto b = basis_at(g, 2.3);
    CHECK(b == std::vector<double>{0, 0, 1, 0});
    // right-closed at the final knot
    auto be = basis_at(g, 4.0);
    CHECK(be == std::vector<double>{0, 0, 0, 1});
    // outside the support: all zero
    auto bo = basis_at(g, 5.0);
    CHECK(bo == std::vector<double>{0, 0, 0, 0});
}

TEST_CASE("order-1 hats at a cell midpoint are both one half") {
    SplineGrid g = SplineGrid::make(1, 4, 0.0, 4.0);
    CHECK(g.num_basis() == 5);
    auto b = basis_at(g, 0.5);
    CHECK(b[0] == doctest::Approx(0.5));
    CHECK(b[1] == doctest::Approx(0.5));
    for (std::size_t i = 2; i < b.size(); ++i) CHECK(b[i] == 0.0);
}

TEST_CASE("partition of unity holds to 1e-12 inside the grid range") {
    for (int k : {1, 2, 3}) {
        SplineGrid g = SplineGrid::make(k, 5, -1.0, 1.0);
        for (int i = 0; i < 1000; ++i) {
            const double x = -1.0 + 2.0 * (i + 0.5) / 1000.0;
            auto b = basis_at(g, x);
            double s = 0.0;
            for (double v : b) s += v;
            REQUIRE(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("local support is exact") {
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    CounterRng rng(101, "support");
    for (int trial = 0; trial < 400; ++trial) {
        const double x = rng.next_uniform(-2.5, 2.5);
        auto b = basis_at(g, x);
        for (std::size_t i = 0; i < b.size(); ++i) {
            const double lo = g.knots[i];
            const double hi = g.knots[i + static_cast<std::size_t>(g.order) + 1];
            if (x < lo || x > hi) REQUIRE(b[i] == 0.0);
        }
    }
}

TEST_CASE("basis functions are continuous at interior knots for k >= 1") {
    const double h = 1e-7;
    for (int k : {1, 2, 3}) {
        SplineGrid g = SplineGrid::make(k, 5, -1.0, 1.0);
        for (std::size_t j = 1; j + 1 < g.knots.size(); ++j) {
            const double t = g.knots[j];
            // side limits via linear extrapolation from two probes per side
            auto lm = basis_at(g, t - h);
            auto lm2 = basis_at(g, t - 2 * h);
            auto rp = basis_at(g, t + h);
            auto rp2 = basis_at(g, t + 2 * h);
            for (std::size_t i = 0; i < lm.size(); ++i) {
                const double left = 2.0 * lm[i] - lm2[i];
                const double right = 2.0 * rp[i] - rp2[i];
                REQUIRE(std::abs(left - right) <= 1e-9);
            }
        }
    }
}

TEST_CASE("bspline_basis gradient matches finite differences off the knots") {
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    CounterRng rng(102, "basis-grad");
    Var x(randn({17}, rng, 0.6), true);
    Var coef(randn({17, g.num_basis()}, rng));
    auto fn = [&](const std::vector<Var>& in) {
        return sum_all(mul(bspline_basis(in[0], g), coef));
    };
    CHECK(finite_diff_check(fn, {x}, 1e-5) <= 1e-4);
}

TEST_CASE("kan_linear degenerates to the silu base path with zero splines") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    KANLinearParams p = make_kan_linear_params(store, "kan", 3, 2, g, DType::F64, 9);
    zero_params({p.spline_weight});
    CounterRng rng(103, "kan-base");
    Var x(randn({5, 3}, rng, 0.5));
    Var y = kan_linear(x, p);
    Var expect = linear(silu(x), p.base_weight);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.value().scalar_at(i) == doctest::Approx(expect.value().scalar_at(i)));
    }
}

TEST_CASE("kan_linear with a single order-0 spline coefficient is piecewise constant") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(0, 4, 0.0, 4.0);
    KANLinearParams p = make_kan_linear_params(store, "kan", 1, 1, g, DType::F64, 10);
    zero_params({p.base_weight, p.spline_weight});
    p.spline_weight.value_mut().data<double>()[2] = 2.5;  // coefficient on cell [2,3)
    Var in_cell(Tensor::from_f64({2.7}, {1, 1}));
    CHECK(kan_linear(in_cell, p).value().scalar_at(0) == doctest::Approx(2.5));
    Var off_cell(Tensor::from_f64({1.5}, {1, 1}));
    CHECK(kan_linear(off_cell, p).value().scalar_at(0) == doctest::Approx(0.0));
}

TEST_CASE("kan_linear is exactly linear in its weights") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    KANLinearParams p = make_kan_linear_params(store, "kan", 4, 3, g, DType::F64, 11);
    CounterRng rng(104, "kan-lin");
    Var x(randn({6, 4}, rng, 0.5));
    Var y1 = kan_linear(x, p);
    for (auto& v : p.base_weight.value_mut().data<double>()) v *= 2.0;
    for (auto& v : p.spline_weight.value_mut().data<double>()) v *= 2.0;
    Var y2 = kan_linear(x, p);
    for (std::int64_t i = 0; i < y1.numel(); ++i) {
        CHECK(y2.value().scalar_at(i) == 2.0 * y1.value().scalar_at(i));
    }
}

TEST_CASE("kan_linear gradcheck over weights and inputs") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    KANLinearParams p = make_kan_linear_params(store, "kan", 3, 2, g, DType::F64, 12);
    CounterRng rng(105, "kan-grad");
    Var x(randn({4, 3}, rng, 0.5), true);
    Var coef(randn({4, 2}, rng));
    auto fn = [&](const std::vector<Var>& in) {
        KANLinearParams q = p;
        q.base_weight = in[1];
        q.spline_weight = in[2];
        return sum_all(mul(kan_linear(in[0], q), coef));
    };
    CHECK(finite_diff_check(fn, {x, p.base_weight, p.spline_weight}, 1e-5) <= 1e-4);
}

TEST_CASE("tok_kan preserves shape, zeroed weights give zero output") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    TokKANParams p = make_tok_kan_params(store, "tok", 16, g, DType::F64, 13);
    CounterRng rng(106, "tok");
    Var x(randn({2, 8, 8, 16}, rng, 0.5));
    CHECK(tok_kan(x, p).shape() == std::vector<std::int64_t>{2, 8, 8, 16});

    zero_params({p.kan1.base_weight, p.kan1.spline_weight, p.kan2.base_weight,
                 p.kan2.spline_weight, p.dw1_w, p.dw1_b, p.dw2_w, p.dw2_b});
    Var y = tok_kan(x, p);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.value().scalar_at(i) == 0.0);
}

TEST_CASE("tok_kan gradcheck at toy size") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    TokKANParams p = make_tok_kan_params(store, "tok", 4, g, DType::F64, 14);
    CounterRng rng(107, "tok-grad");
    Var x(randn({1, 3, 3, 4}, rng, 0.5), true);
    Var coef(randn({1, 3, 3, 4}, rng));
    auto fn = [&](const std::vector<Var>& in) {
        TokKANParams q = p;
        q.kan1.base_weight = in[1];
        q.dw1_w = in[2];
        q.kan2.spline_weight = in[3];
        return sum_all(mul(tok_kan(in[0], q), coef));
    };
    CHECK(finite_diff_check(fn, {x, p.kan1.base_weight, p.dw1_w, p.kan2.spline_weight}, 1e-5) <=
          1e-4);
}

TEST_CASE("efconv mode none is the identity") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    EFCKANParams p = make_efc_kan_params(store, "efc", 4, EFConvMode::None, g, DType::F64, 15);
    CounterRng rng(108, "efc-none");
    Var x(randn({1, 4, 4, 4}, rng));
    Var y = efconv(x, p);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        CHECK(y.value().scalar_at(i) == x.value().scalar_at(i));
    }
}

TEST_CASE("efconv conv3x2 with identity-center kernels is the identity") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    EFCKANParams p = make_efc_kan_params(store, "efc", 3, EFConvMode::Conv3x2, g, DType::F64, 16);
    for (auto& w : p.conv_w) {
        zero_params({w});
        auto d = w.value_mut().data<double>();
        // kernel[oc][ic][1][1] = (oc == ic)
        for (int oc = 0; oc < 3; ++oc) d[(oc * 3 + oc) * 9 + 4] = 1.0;
    }
    for (auto& b : p.conv_b) zero_params({b});
    CounterRng rng(109, "efc-id");
    Var x(randn({2, 5, 5, 3}, rng));
    Var y = efconv(x, p);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        CHECK(y.value().scalar_at(i) == doctest::Approx(x.value().scalar_at(i)));
    }
}

TEST_CASE("two stacked 3x3 kernels cover the same footprint as one 5x5") {
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    auto impulse_support = [&](EFConvMode mode) {
        ParamStore store;
        EFCKANParams p = make_efc_kan_params(store, "efc", 1, mode, g, DType::F64, 17);
        for (auto& w : p.conv_w) {
            for (auto& v : w.value_mut().data<double>()) v = 1.0;
        }
        for (auto& b : p.conv_b) zero_params({b});
        Tensor xt = Tensor::zeros(DType::F64, {1, 9, 9, 1});
        xt.data<double>()[4 * 9 + 4] = 1.0;  // unit impulse at the center
        Var y = efconv(Var(xt), p);
        std::set<std::pair<int, int>> support;
        for (int h = 0; h < 9; ++h) {
            for (int w = 0; w < 9; ++w) {
                if (y.value().scalar_at(h * 9 + w) != 0.0) support.insert({h, w});
            }
        }
        return support;
    };
    auto s33 = impulse_support(EFConvMode::Conv3x2);
    auto s5 = impulse_support(EFConvMode::Conv5);
    CHECK(s33.size() == 25);
    CHECK(s33 == s5);
}

TEST_CASE("efc_kan residual wraps Tok-KAN only") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    EFCKANParams p = make_efc_kan_params(store, "efc", 4, EFConvMode::Conv3, g, DType::F64, 18);
    zero_params({p.tok.kan1.base_weight, p.tok.kan1.spline_weight, p.tok.kan2.base_weight,
                 p.tok.kan2.spline_weight, p.tok.dw1_w, p.tok.dw1_b, p.tok.dw2_w, p.tok.dw2_b});
    CounterRng rng(110, "efc-res");
    Var x(randn({1, 4, 4, 4}, rng));
    Var y = efc_kan(x, p);
    Var xb = efconv(x, p);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.value().scalar_at(i) == doctest::Approx(xb.value().scalar_at(i)));
    }

    // mode none + zero Tok-KAN -> identity
    ParamStore store2;
    EFCKANParams q = make_efc_kan_params(store2, "efc", 4, EFConvMode::None, g, DType::F64, 19);
    zero_params({q.tok.kan1.base_weight, q.tok.kan1.spline_weight, q.tok.kan2.base_weight,
                 q.tok.kan2.spline_weight, q.tok.dw1_w, q.tok.dw1_b, q.tok.dw2_w, q.tok.dw2_b});
    Var z = efc_kan(x, q);
    for (std::int64_t i = 0; i < z.numel(); ++i) {
        CHECK(z.value().scalar_at(i) == doctest::Approx(x.value().scalar_at(i)));
    }
}

TEST_CASE("efc_kan end-to-end gradcheck") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    EFCKANParams p = make_efc_kan_params(store, "efc", 3, EFConvMode::Conv3x2, g, DType::F64, 20);
    CounterRng rng(111, "efc-grad");
    Var x(randn({1, 3, 3, 3}, rng, 0.5), true);
    Var coef(randn({1, 3, 3, 3}, rng));
    auto fn = [&](const std::vector<Var>& in) {
        EFCKANParams q = p;
        q.conv_w[0] = in[1];
        q.tok.kan1.base_weight = in[2];
        return sum_all(mul(efc_kan(in[0], q), coef));
    };
    CHECK(finite_diff_check(fn, {x, p.conv_w[0], p.tok.kan1.base_weight}, 1e-5) <= 1e-4);
}

TEST_CASE("vkan_block with zeroed branches reduces to layer norm") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    VKANBlockParams p =
        make_vkan_block_params(store, "vkan", 16, 4, EFConvMode::Conv3x2, g, DType::F64, 21);
    for (auto& layer : p.vss) zero_params({layer.out_w, layer.out_b});
    for (auto& w : p.efc.conv_w) zero_params({w});
    for (auto& b : p.efc.conv_b) zero_params({b});
    zero_params({p.efc.tok.kan1.base_weight, p.efc.tok.kan1.spline_weight,
                 p.efc.tok.kan2.base_weight, p.efc.tok.kan2.spline_weight, p.efc.tok.dw1_w,
                 p.efc.tok.dw1_b, p.efc.tok.dw2_w, p.efc.tok.dw2_b});
    CounterRng rng(112, "vkan-zero");
    Var x(randn({1, 4, 4, 16}, rng));
    Var y = vkan_block(x, p);
    // the residual chain collapses to LN(x + x), which matches LN(x) up to eps
    Var ln2 = layer_norm(add(x, x), p.ln_gamma, p.ln_beta);
    Var ln1 = layer_norm(x, p.ln_gamma, p.ln_beta);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        CHECK(y.value().scalar_at(i) == doctest::Approx(ln2.value().scalar_at(i)).epsilon(1e-12));
        CHECK(std::abs(y.value().scalar_at(i) - ln1.value().scalar_at(i)) <= 1e-3);
    }
}

TEST_CASE("vkan_block gradcheck at toy width") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    VKANBlockParams p =
        make_vkan_block_params(store, "vkan", 4, 2, EFConvMode::Conv3, g, DType::F64, 22);
    CounterRng rng(113, "vkan-grad");
    Var x(randn({1, 3, 3, 4}, rng, 0.5), true);
    Var coef(randn({1, 3, 3, 4}, rng));
    auto fn = [&](const std::vector<Var>& in) {
        VKANBlockParams q = p;
        q.vss[0].expand_w = in[1];
        q.efc.tok.kan1.base_weight = in[2];
        q.ln_gamma = in[3];
        return sum_all(mul(vkan_block(in[0], q), coef));
    };
    CHECK(finite_diff_check(fn, {x, p.vss[0].expand_w, p.efc.tok.kan1.base_weight, p.ln_gamma},
                            1e-5) <= 1e-4);
}

TEST_CASE("vkan_block stage-5 width shape contract") {
    ParamStore store;
    SplineGrid g = SplineGrid::make(3, 5, -1.0, 1.0);
    VKANBlockParams p =
        make_vkan_block_params(store, "vkan", 768, 16, EFConvMode::Conv3x2, g, DType::F32, 23);
    CounterRng rng(114, "vkan-768");
    Tensor xt(DType::F32, {1, 8, 8, 768});
    for (auto& v : xt.data<float>()) v = static_cast<float>(0.1 * rng.next_normal());
    NoGradGuard ng;
    Var y = vkan_block(Var(xt), p);
    CHECK(y.shape() == std::vector<std::int64_t>{1, 8, 8, 768});
}
