#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>

#include "vkan/gradcheck.hpp"
#include "vkan/net.hpp"

using namespace vkan;

namespace {

Tensor randn(std::vector<std::int64_t> shape, CounterRng& rng, double scale = 1.0) {
    Tensor t(DType::F64, std::move(shape));
    for (auto& v : t.data<double>()) v = scale * rng.next_normal();
    return t;
}

Tensor randn32(std::vector<std::int64_t> shape, CounterRng& rng, double scale = 1.0) {
    Tensor t(DType::F32, std::move(shape));
    for (auto& v : t.data<float>()) v = static_cast<float>(scale * rng.next_normal());
    return t;
}

}  // namespace

TEST_CASE("model config validation and json round trip") {
    ModelConfig cfg = ModelConfig::full();
    CHECK_NOTHROW(cfg.validate());
    ModelConfig bad = cfg;
    bad.stage_channels = {48, 96, 192, 384, 700};
    CHECK_THROWS(bad.validate());

    nlohmann::json j = model_config_to_json(cfg);
    CHECK(j.at("stage_channels")[0] == 48);
    CHECK(j.at("spline").at("k") == 3);
    CHECK(j.at("efconv_mode") == "conv3x2");
    ModelConfig back = model_config_from_json(j);
    CHECK(back.stage_channels == cfg.stage_channels);
    CHECK(back.ds_weights == cfg.ds_weights);
    CHECK(back.spline.lo == cfg.spline.lo);

    ModelConfig tiny = model_config_from_json(nlohmann::json{
        {"in_channels", 1}, {"stage_channels", {8, 16, 32, 64, 128}}, {"d_state", 4},
        {"cbam_reduction", 4}});
    CHECK(tiny.d_state == 4);
    CHECK(tiny.num_classes == 2);
}

TEST_CASE("encoder conv stages hit the documented widths and resolutions") {
    ParamStore store;
    CounterRng rng(301, "enc-stage");
    auto stage = [&](const Var& x, std::int64_t ic, std::int64_t oc, const char* name) {
        ParamStore s;
        ModelConfig cfg;
        ConvStageParams p;
        // build just one stage via the model builder naming scheme
        (void)cfg;
        p.c1 = ConvBNParams{
            leaf(init_conv_weight(DType::F32, {oc, ic, 3, 3}, 1, std::string(name) + "w1")),
            leaf(Tensor::zeros(DType::F32, {oc})),
            leaf(Tensor::full(DType::F32, {oc}, 1.0)),
            leaf(Tensor::zeros(DType::F32, {oc})),
            leaf(Tensor::zeros(DType::F32, {oc}), false),
            leaf(Tensor::full(DType::F32, {oc}, 1.0), false)};
        p.c2 = ConvBNParams{
            leaf(init_conv_weight(DType::F32, {oc, oc, 3, 3}, 1, std::string(name) + "w2")),
            leaf(Tensor::zeros(DType::F32, {oc})),
            leaf(Tensor::full(DType::F32, {oc}, 1.0)),
            leaf(Tensor::zeros(DType::F32, {oc})),
            leaf(Tensor::zeros(DType::F32, {oc}), false),
            leaf(Tensor::full(DType::F32, {oc}, 1.0), false)};
        return encoder_conv_stage(x, p, true);
    };
    NoGradGuard ng;
    Var img(randn32({1, 3, 256, 256}, rng));
    auto [pre1, x1] = stage(img, 3, 48, "s1");
    CHECK(pre1.shape() == std::vector<std::int64_t>{1, 48, 256, 256});
    CHECK(x1.shape() == std::vector<std::int64_t>{1, 48, 128, 128});
    auto [pre2, x2] = stage(x1, 48, 96, "s2");
    CHECK(x2.shape() == std::vector<std::int64_t>{1, 96, 64, 64});
    auto [pre3, x3] = stage(x2, 96, 192, "s3");
    CHECK(x3.shape() == std::vector<std::int64_t>{1, 192, 32, 32});
}

TEST_CASE("patch_embed halves resolution and doubles channels, channel-last out") {
    CounterRng rng(302, "pe");
    Var w(randn({384, 192, 2, 2}, rng, 0.05));
    Var b(Tensor::zeros(DType::F64, {384}));
    Var x(randn({1, 192, 32, 32}, rng));
    CHECK(patch_embed(x, w, b).shape() == std::vector<std::int64_t>{1, 16, 16, 384});

    // single-token hand case: 2x2 input, one filter position
    Var hw(Tensor::from_f64({1, 2, 3, 4, 5, 6, 7, 8}, {2, 1, 2, 2}));  // 2 filters on 1 channel
    Var hb(Tensor::from_f64({0.5, -0.5}, {2}));
    Var hx(Tensor::from_f64({1, 2, 3, 4}, {1, 1, 2, 2}));
    Var hy = patch_embed(hx, hw, hb);
    CHECK(hy.shape() == std::vector<std::int64_t>{1, 1, 1, 2});
    CHECK(hy.value().scalar_at(0) == doctest::Approx(1 + 4 + 9 + 16 + 0.5));
    CHECK(hy.value().scalar_at(1) == doctest::Approx(5 + 12 + 21 + 32 - 0.5));

    Var odd(randn({1, 192, 31, 32}, rng));
    CHECK_THROWS(patch_embed(odd, w, b));
}

TEST_CASE("patch_merge parity order and selector projection") {
    CounterRng rng(303, "pm");
    // 2x2 single-channel map (a,b / c,d): concat order must be (a, c, b, d)
    Var x(Tensor::from_f64({1, 2, 3, 4}, {1, 2, 2, 1}));  // a=1 b=2 c=3 d=4 row-major
    Var wid(Tensor::from_f64({1, 0, 0, 0,
                              0, 1, 0, 0,
                              0, 0, 1, 0,
                              0, 0, 0, 1}, {4, 4}));
    Var b0(Tensor::zeros(DType::F64, {4}));
    Var y = patch_merge(x, wid, b0);
    CHECK(y.shape() == std::vector<std::int64_t>{1, 1, 1, 4});
    CHECK(y.value().scalar_at(0) == 1.0);  // (0,0) = a
    CHECK(y.value().scalar_at(1) == 3.0);  // (1,0) = c
    CHECK(y.value().scalar_at(2) == 2.0);  // (0,1) = b
    CHECK(y.value().scalar_at(3) == 4.0);  // (1,1) = d

    // selector row picks out one parity sub-grid
    Var wsel(Tensor::from_f64({0, 1, 0, 0}, {1, 4}));
    Var bsel(Tensor::zeros(DType::F64, {1}));
    Var ysel = patch_merge(x, wsel, bsel);
    CHECK(ysel.value().scalar_at(0) == 3.0);

    Var big(randn({1, 16, 16, 384}, rng));
    Var wm(randn({768, 1536}, rng, 0.02));
    Var bm(Tensor::zeros(DType::F64, {768}));
    CHECK(patch_merge(big, wm, bm).shape() == std::vector<std::int64_t>{1, 8, 8, 768});
}

TEST_CASE("patch_expand shape, zero map, and inverse-projection identity") {
    CounterRng rng(304, "px");
    Var w(randn({768, 384}, rng, 0.05));
    Var b(Tensor::zeros(DType::F64, {768}));
    Var zero(Tensor::zeros(DType::F64, {1, 8, 8, 384}));
    Var up = patch_expand(zero, w, b);
    CHECK(up.shape() == std::vector<std::int64_t>{1, 16, 16, 192});
    for (std::int64_t i = 0; i < 100; ++i) CHECK(up.value().scalar_at(i) == 0.0);

    // expand with W_e then merge with the pseudo-inverse recovers the input
    const std::int64_t C = 6;
    Tensor we_t(DType::F64, {2 * C, C});
    for (auto& v : we_t.data<double>()) v = rng.next_normal();
    // merge weight = Moore-Penrose left inverse of the expand weight
    // (2C x C has full column rank a.s.); compute (We^T We)^{-1} We^T by
    // Gauss-Jordan on the small normal matrix.
    std::vector<double> ata(static_cast<std::size_t>(C * C), 0.0);
    auto we = we_t.data<double>();
    for (std::int64_t i = 0; i < C; ++i) {
        for (std::int64_t j = 0; j < C; ++j) {
            for (std::int64_t k = 0; k < 2 * C; ++k) ata[i * C + j] += we[k * C + i] * we[k * C + j];
        }
    }
    std::vector<double> inv(static_cast<std::size_t>(C * C), 0.0);
    for (std::int64_t i = 0; i < C; ++i) inv[i * C + i] = 1.0;
    for (std::int64_t col = 0; col < C; ++col) {
        std::int64_t piv = col;
        for (std::int64_t r = col + 1; r < C; ++r) {
            if (std::abs(ata[r * C + col]) > std::abs(ata[piv * C + col])) piv = r;
        }
        for (std::int64_t j = 0; j < C; ++j) {
            std::swap(ata[col * C + j], ata[piv * C + j]);
            std::swap(inv[col * C + j], inv[piv * C + j]);
        }
        const double d = ata[col * C + col];
        for (std::int64_t j = 0; j < C; ++j) {
            ata[col * C + j] /= d;
            inv[col * C + j] /= d;
        }
        for (std::int64_t r = 0; r < C; ++r) {
            if (r == col) continue;
            const double f = ata[r * C + col];
            for (std::int64_t j = 0; j < C; ++j) {
                ata[r * C + j] -= f * ata[col * C + j];
                inv[r * C + j] -= f * inv[col * C + j];
            }
        }
    }
    Tensor wm_t(DType::F64, {C, 2 * C});
    auto wm = wm_t.data<double>();
    for (std::int64_t i = 0; i < C; ++i) {
        for (std::int64_t j = 0; j < 2 * C; ++j) {
            double s = 0.0;
            for (std::int64_t k = 0; k < C; ++k) s += inv[i * C + k] * we[j * C + k];
            wm[i * 2 * C + j] = s;
        }
    }
    Var we_v(we_t), wm_v(wm_t);
    Var zb2(Tensor::zeros(DType::F64, {2 * C}));
    Var zbC(Tensor::zeros(DType::F64, {C}));
    Var input(randn({1, 4, 4, C}, rng));
    Var rt = patch_merge(patch_expand(input, we_v, zb2), wm_v, zbC);
    for (std::int64_t i = 0; i < input.numel(); ++i) {
        CHECK(std::abs(rt.value().scalar_at(i) - input.value().scalar_at(i)) <= 1e-12);
    }

    Var odd(randn({1, 4, 4, 5}, rng));
    CHECK_THROWS(patch_expand(odd, we_v, zb2));
}

TEST_CASE("decoder_fuse selector recovers the up path and passes gradcheck") {
    CounterRng rng(305, "fuse");
    const std::int64_t C = 5;
    Tensor wt = Tensor::zeros(DType::F64, {C, 2 * C});
    for (std::int64_t i = 0; i < C; ++i) wt.data<double>()[i * 2 * C + i] = 1.0;  // [I | 0]
    Var w(wt), b(Tensor::zeros(DType::F64, {C}));
    Var up(randn({1, 3, 3, C}, rng));
    Var skip(Tensor::zeros(DType::F64, {1, 3, 3, C}));
    Var y = decoder_fuse(up, skip, w, b);
    for (std::int64_t i = 0; i < up.numel(); ++i) {
        CHECK(y.value().scalar_at(i) == up.value().scalar_at(i));
    }
    Var bad(randn({1, 4, 3, C}, rng));
    CHECK_THROWS(decoder_fuse(up, bad, w, b));

    Var wr(randn({C, 2 * C}, rng), true);
    Var upr(randn({1, 2, 2, C}, rng), true);
    Var skipr(randn({1, 2, 2, C}, rng), true);
    Var coef(randn({1, 2, 2, C}, rng));
    auto fn = [&](const std::vector<Var>& in) {
        return sum_all(mul(decoder_fuse(in[0], in[1], in[2], b), coef));
    };
    CHECK(finite_diff_check(fn, {upr, skipr, wr}, 1e-5) <= 1e-4);
}

TEST_CASE("tiny-config forward produces all deep-supervision scales") {
    ModelConfig cfg = ModelConfig::tiny();
    ModelParams m = build_model(cfg, DType::F32, 7);
    CounterRng rng(306, "fwd-tiny");
    NoGradGuard ng;
    Var img(randn32({1, 1, 64, 64}, rng));
    ForwardTrace trace;
    auto outs = forward(img, m, false, ScanMode::Naive, &trace);
    REQUIRE(outs.size() == 4);
    CHECK(outs[0].shape() == std::vector<std::int64_t>{1, 2, 64, 64});
    CHECK(outs[1].shape() == std::vector<std::int64_t>{1, 2, 32, 32});
    CHECK(outs[2].shape() == std::vector<std::int64_t>{1, 2, 16, 16});
    CHECK(outs[3].shape() == std::vector<std::int64_t>{1, 2, 8, 8});

    std::map<std::string, std::vector<std::int64_t>> got(trace.stages.begin(),
                                                         trace.stages.end());
    CHECK(got.at("x_e1") == std::vector<std::int64_t>{1, 8, 32, 32});
    CHECK(got.at("x_e2") == std::vector<std::int64_t>{1, 16, 16, 16});
    CHECK(got.at("x_e3") == std::vector<std::int64_t>{1, 32, 8, 8});
    CHECK(got.at("x_e4") == std::vector<std::int64_t>{1, 4, 4, 64});
    CHECK(got.at("x_e5") == std::vector<std::int64_t>{1, 2, 2, 128});
    CHECK(got.at("x_d5") == std::vector<std::int64_t>{1, 4, 4, 64});
    CHECK(got.at("x_d4") == std::vector<std::int64_t>{1, 8, 8, 32});
    CHECK(got.at("x_d3") == std::vector<std::int64_t>{1, 16, 16, 16});
    CHECK(got.at("x_d2") == std::vector<std::int64_t>{1, 32, 32, 8});
    CHECK(got.at("x_d1") == std::vector<std::int64_t>{1, 24, 64, 64});

    // deep supervision off: only the main head
    ModelConfig cfg1 = cfg;
    cfg1.deep_supervision = false;
    ModelParams m1 = build_model(cfg1, DType::F32, 7);
    auto single = forward(img, m1, false);
    CHECK(single.size() == 1);

    // indivisible input rejected before compute
    Var badimg(randn32({1, 1, 48, 48}, rng));
    CHECK_THROWS(forward(badimg, m, false));
}

TEST_CASE("eval-mode forward is bit-deterministic across calls") {
    ModelConfig cfg = ModelConfig::tiny();
    ModelParams m = build_model(cfg, DType::F32, 11);
    CounterRng rng(307, "det");
    NoGradGuard ng;
    Var img(randn32({1, 1, 32, 32}, rng));
    // 32x32 is not divisible by 32 in both dims? 32 is. fine.
    auto a = forward(img, m, false);
    auto b = forward(img, m, false);
    for (std::size_t k = 0; k < a.size(); ++k) {
        auto pa = a[k].value().data<float>();
        auto pb = b[k].value().data<float>();
        for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i] == pb[i]);
    }
}

TEST_CASE("every trainable parameter is reached by gradients") {
    ModelConfig cfg = ModelConfig::tiny();
    ModelParams m = build_model(cfg, DType::F64, 13);
    CounterRng rng(308, "reach");
    Var img(randn({2, 1, 32, 32}, rng));
    auto outs = forward(img, m, true);
    Var loss(Tensor::scalar(DType::F64, 0.0));
    for (auto& o : outs) {
        loss = add(loss, sum_all(mul(o, Var(randn(o.shape(), rng)))));
    }
    backward(loss);
    int dead = 0;
    for (const auto& [name, v] : m.store.entries()) {
        if (!v.node()->trainable) continue;
        REQUIRE(v.has_grad());
        double mx = 0.0;
        for (std::int64_t i = 0; i < v.numel(); ++i) {
            mx = std::max(mx, std::abs(v.grad().scalar_at(i)));
        }
        if (mx == 0.0) {
            ++dead;
            MESSAGE("zero gradient on ", name);
        }
    }
    CHECK(dead == 0);
}

TEST_CASE("param_count is deterministic and scales quadratically in conv stages") {
    ModelConfig tiny = ModelConfig::tiny();
    auto r1 = param_count(tiny);
    auto r2 = param_count(tiny);
    CHECK(r1.total == r2.total);
    CHECK(r1.total > 0);
    CHECK(r1.trainable < r1.total);  // BN running stats are not trainable

    ModelConfig doubled = tiny;
    for (auto& c : doubled.stage_channels) c *= 2;
    auto rd = param_count(doubled);
    auto conv_count = [](const ParamCountReport& r) {
        std::int64_t n = 0;
        for (const auto& [name, c] : r.by_module) {
            if (name == "encoder conv stages" || name == "decoder conv stages") n += c;
        }
        return n;
    };
    const double ratio = static_cast<double>(conv_count(rd)) / conv_count(r1);
    CHECK(ratio > 3.4);
    CHECK(ratio < 4.1);

    std::int64_t sum_groups = 0;
    for (const auto& [name, c] : r1.by_module) sum_groups += c;
    CHECK(sum_groups == r1.total);
}
