#include "vkan/net.hpp"

#include <cmath>
#include <stdexcept>

namespace vkan {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
    ModelConfig cfg;
    cfg.in_channels = 1;
    cfg.stage_channels = {8, 16, 32, 64, 128};
    cfg.d_state = 4;
    cfg.cbam_reduction = 4;
    return cfg;
}

void ModelConfig::validate() const {
    require(in_channels >= 1, "config: in_channels must be >= 1");
    require(num_classes >= 2, "config: num_classes must be >= 2");
    require(stage_channels.size() == 5, "config: stage_channels must list 5 stages");
    for (std::size_t i = 0; i + 1 < stage_channels.size(); ++i) {
        require(stage_channels[i + 1] == 2 * stage_channels[i],
                "config: stage_channels must double at every stage, got " +
                    std::to_string(stage_channels[i]) + " -> " +
                    std::to_string(stage_channels[i + 1]));
    }
    require(stage_channels[0] >= 1, "config: stage channels must be positive");
    require(decoder_head_channels >= 1, "config: decoder_head_channels must be >= 1");
    require(d_state >= 1, "config: d_state must be >= 1");
    require(cbam_reduction >= 1 && stage_channels[0] % cbam_reduction == 0,
            "config: cbam_reduction must divide the first stage width");
    require(spline.k >= 0 && spline.G >= 1 && spline.lo < spline.hi, "config: invalid spline");
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["in_channels"] = cfg.in_channels;
    j["num_classes"] = cfg.num_classes;
    j["stage_channels"] = cfg.stage_channels;
    j["decoder_head_channels"] = cfg.decoder_head_channels;
    j["d_state"] = cfg.d_state;
    j["spline"] = {{"k", cfg.spline.k}, {"G", cfg.spline.G}, {"range", {cfg.spline.lo, cfg.spline.hi}}};
    j["cbam_reduction"] = cfg.cbam_reduction;
    j["efconv_mode"] = efconv_mode_name(cfg.efconv_mode);
    j["deep_supervision"] = cfg.deep_supervision;
    j["ds_weights"] = cfg.ds_weights;
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    if (j.contains("in_channels")) cfg.in_channels = j.at("in_channels").get<std::int64_t>();
    if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<std::int64_t>();
    if (j.contains("stage_channels")) {
        cfg.stage_channels = j.at("stage_channels").get<std::vector<std::int64_t>>();
    }
    if (j.contains("decoder_head_channels")) {
        cfg.decoder_head_channels = j.at("decoder_head_channels").get<std::int64_t>();
    }
    if (j.contains("d_state")) cfg.d_state = j.at("d_state").get<std::int64_t>();
    if (j.contains("spline")) {
        const auto& s = j.at("spline");
        if (s.contains("k")) cfg.spline.k = s.at("k").get<int>();
        if (s.contains("G")) cfg.spline.G = s.at("G").get<int>();
        if (s.contains("range")) {
            cfg.spline.lo = s.at("range").at(0).get<double>();
            cfg.spline.hi = s.at("range").at(1).get<double>();
        }
    }
    if (j.contains("cbam_reduction")) {
        cfg.cbam_reduction = j.at("cbam_reduction").get<std::int64_t>();
    }
    if (j.contains("efconv_mode")) {
        cfg.efconv_mode = efconv_mode_from_name(j.at("efconv_mode").get<std::string>());
    }
    if (j.contains("deep_supervision")) {
        cfg.deep_supervision = j.at("deep_supervision").get<bool>();
    }
    if (j.contains("ds_weights")) {
        const auto w = j.at("ds_weights").get<std::vector<double>>();
        require(w.size() == 4, "config: ds_weights must have 4 entries");
        std::copy_n(w.begin(), 4, cfg.ds_weights.begin());
    }
    cfg.validate();
    return cfg;
}

namespace {

ConvBNParams make_conv_bn(ParamStore& store, const std::string& prefix, std::int64_t ic,
                          std::int64_t oc, std::int64_t k, DType dt, std::uint64_t seed) {
    ConvBNParams p;
    p.w = store.add(prefix + ".conv.weight",
                    init_conv_weight(dt, {oc, ic, k, k}, seed, prefix + ".conv.weight"));
    p.b = store.add(prefix + ".conv.bias", Tensor::zeros(dt, {oc}));
    p.gamma = store.add(prefix + ".norm.gamma", Tensor::full(dt, {oc}, 1.0));
    p.beta = store.add(prefix + ".norm.beta", Tensor::zeros(dt, {oc}));
    p.run_mean = store.add(prefix + ".norm.running_mean", Tensor::zeros(dt, {oc}), false);
    p.run_var = store.add(prefix + ".norm.running_var", Tensor::full(dt, {oc}, 1.0), false);
    return p;
}

ConvStageParams make_conv_stage(ParamStore& store, const std::string& prefix, std::int64_t ic,
                                std::int64_t oc, DType dt, std::uint64_t seed) {
    ConvStageParams p;
    p.c1 = make_conv_bn(store, prefix + ".block1", ic, oc, 3, dt, seed);
    p.c2 = make_conv_bn(store, prefix + ".block2", oc, oc, 3, dt, seed);
    return p;
}

Var conv_bn_relu(const Var& x, const ConvBNParams& p, bool training) {
    Var t = conv2d(x, p.w, p.b, 1, 1, 1);
    t = batch_norm2d(t, p.gamma, p.beta, p.run_mean, p.run_var, training);
    return relu(t);
}

Var linear_init(ParamStore& store, const std::string& name, std::int64_t out, std::int64_t in,
                DType dt, std::uint64_t seed) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return store.add(name, init_uniform(dt, {out, in}, bound, seed, name));
}

}  // namespace

ModelParams build_model(const ModelConfig& cfg, DType dt, std::uint64_t seed) {
    cfg.validate();
    ModelParams m;
    m.config = cfg;
    m.dtype = dt;
    m.seed = seed;
    auto& store = m.store;
    const auto& ch = cfg.stage_channels;
    const SplineGrid grid = cfg.make_grid();

    m.enc[0] = make_conv_stage(store, "encoder.stage1", cfg.in_channels, ch[0], dt, seed);
    m.enc[1] = make_conv_stage(store, "encoder.stage2", ch[0], ch[1], dt, seed);
    m.enc[2] = make_conv_stage(store, "encoder.stage3", ch[1], ch[2], dt, seed);

    m.patch_embed_w = store.add(
        "encoder.patch_embed.weight",
        init_conv_weight(dt, {ch[3], ch[2], 2, 2}, seed, "encoder.patch_embed.weight"));
    m.patch_embed_b = store.add("encoder.patch_embed.bias", Tensor::zeros(dt, {ch[3]}));
    m.enc_vkan4 = make_vkan_block_params(store, "encoder.vkan4", ch[3], cfg.d_state,
                                         cfg.efconv_mode, grid, dt, seed);
    m.patch_merge_w = linear_init(store, "encoder.patch_merge.weight", ch[4], 4 * ch[3], dt, seed);
    m.patch_merge_b = store.add("encoder.patch_merge.bias", Tensor::zeros(dt, {ch[4]}));
    m.enc_vkan5 = make_vkan_block_params(store, "encoder.vkan5", ch[4], cfg.d_state,
                                         cfg.efconv_mode, grid, dt, seed);

    for (int i = 0; i < 3; ++i) {
        m.cbam[static_cast<std::size_t>(i)] =
            make_cbam_params(store, "skips.cbam" + std::to_string(i + 1),
                             ch[static_cast<std::size_t>(i)], cfg.cbam_reduction, dt, seed);
    }

    m.expand5_w = linear_init(store, "decoder.expand5.weight", 2 * ch[4], ch[4], dt, seed);
    m.expand5_b = store.add("decoder.expand5.bias", Tensor::zeros(dt, {2 * ch[4]}));
    m.fuse5_w = linear_init(store, "decoder.fuse5.weight", ch[3], 2 * ch[3], dt, seed);
    m.fuse5_b = store.add("decoder.fuse5.bias", Tensor::zeros(dt, {ch[3]}));
    m.dec_vkan5 = make_vkan_block_params(store, "decoder.vkan5", ch[3], cfg.d_state,
                                         cfg.efconv_mode, grid, dt, seed);

    m.expand4_w = linear_init(store, "decoder.expand4.weight", 2 * ch[3], ch[3], dt, seed);
    m.expand4_b = store.add("decoder.expand4.bias", Tensor::zeros(dt, {2 * ch[3]}));
    m.fuse4_w = linear_init(store, "decoder.fuse4.weight", ch[2], 2 * ch[2], dt, seed);
    m.fuse4_b = store.add("decoder.fuse4.bias", Tensor::zeros(dt, {ch[2]}));
    m.dec_vkan4 = make_vkan_block_params(store, "decoder.vkan4", ch[2], cfg.d_state,
                                         cfg.efconv_mode, grid, dt, seed);

    m.up3_w = store.add("decoder.up3.weight",
                        init_conv_weight(dt, {ch[2], ch[1], 2, 2}, seed, "decoder.up3.weight"));
    m.up3_b = store.add("decoder.up3.bias", Tensor::zeros(dt, {ch[1]}));
    m.fuse3_w = store.add("decoder.fuse3.weight",
                          init_conv_weight(dt, {ch[1], 2 * ch[1], 1, 1}, seed,
                                           "decoder.fuse3.weight"));
    m.fuse3_b = store.add("decoder.fuse3.bias", Tensor::zeros(dt, {ch[1]}));
    m.dec3 = make_conv_stage(store, "decoder.stage3", ch[1], ch[1], dt, seed);

    m.up2_w = store.add("decoder.up2.weight",
                        init_conv_weight(dt, {ch[1], ch[0], 2, 2}, seed, "decoder.up2.weight"));
    m.up2_b = store.add("decoder.up2.bias", Tensor::zeros(dt, {ch[0]}));
    m.fuse2_w = store.add("decoder.fuse2.weight",
                          init_conv_weight(dt, {ch[0], 2 * ch[0], 1, 1}, seed,
                                           "decoder.fuse2.weight"));
    m.fuse2_b = store.add("decoder.fuse2.bias", Tensor::zeros(dt, {ch[0]}));
    m.dec2 = make_conv_stage(store, "decoder.stage2", ch[0], ch[0], dt, seed);

    const std::int64_t hc = cfg.decoder_head_channels;
    m.up1_w = store.add("decoder.up1.weight",
                        init_conv_weight(dt, {ch[0], hc, 2, 2}, seed, "decoder.up1.weight"));
    m.up1_b = store.add("decoder.up1.bias", Tensor::zeros(dt, {hc}));
    m.dec1 = make_conv_stage(store, "decoder.stage1", hc, hc, dt, seed);

    const std::int64_t K = cfg.num_classes;
    m.head_main_w = store.add("heads.main.weight",
                              init_conv_weight(dt, {K, hc, 1, 1}, seed, "heads.main.weight"));
    m.head_main_b = store.add("heads.main.bias", Tensor::zeros(dt, {K}));
    m.head2_w = store.add("heads.ds2.weight",
                          init_conv_weight(dt, {K, ch[0], 1, 1}, seed, "heads.ds2.weight"));
    m.head2_b = store.add("heads.ds2.bias", Tensor::zeros(dt, {K}));
    m.head3_w = store.add("heads.ds3.weight",
                          init_conv_weight(dt, {K, ch[1], 1, 1}, seed, "heads.ds3.weight"));
    m.head3_b = store.add("heads.ds3.bias", Tensor::zeros(dt, {K}));
    m.head4_w = linear_init(store, "heads.ds4.weight", K, ch[2], dt, seed);
    m.head4_b = store.add("heads.ds4.bias", Tensor::zeros(dt, {K}));
    return m;
}

std::pair<Var, Var> encoder_conv_stage(const Var& x, const ConvStageParams& p, bool training) {
    Var pre = conv_bn_relu(conv_bn_relu(x, p.c1, training), p.c2, training);
    return {pre, pool2d(pre, PoolKind::Max, 2)};
}

Var patch_embed(const Var& x, const Var& w, const Var& b) {
    const auto& xv = x.value();
    require(xv.rank() == 4, "patch_embed: input must be BxCxHxW, got " + shape_str(xv.shape()));
    require(xv.dim(2) % 2 == 0 && xv.dim(3) % 2 == 0,
            "patch_embed: spatial dims must be even, got " + shape_str(xv.shape()));
    Var t = conv2d(x, w, b, 2, 0, 1);
    return permute(t, {0, 2, 3, 1});
}

namespace {

// Parity group order: (h%2, w%2) = (0,0), (1,0), (0,1), (1,1).
constexpr std::int64_t kParityH[4] = {0, 1, 0, 1};
constexpr std::int64_t kParityW[4] = {0, 0, 1, 1};

Var parity_gather(const Var& x) {
    const auto& xv = x.value();
    require(xv.rank() == 4, "patch_merge: input must be BxHxWxC, got " + shape_str(xv.shape()));
    const std::int64_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    require(H % 2 == 0 && W % 2 == 0,
            "patch_merge: spatial dims must be even, got " + shape_str(xv.shape()));
    const std::int64_t OH = H / 2, OW = W / 2;
    Tensor out(xv.dtype(), {B, OH, OW, 4 * C});
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t i = 0; i < OH; ++i) {
                for (std::int64_t j = 0; j < OW; ++j) {
                    T* drow = dst + ((b * OH + i) * OW + j) * 4 * C;
                    for (int g = 0; g < 4; ++g) {
                        const T* srow =
                            src + ((b * H + 2 * i + kParityH[g]) * W + 2 * j + kParityW[g]) * C;
                        std::copy_n(srow, C, drow + g * C);
                    }
                }
            }
        }
    });
    return make_op(std::move(out), {x},
                   [xn = x.node(), B, H, W, C, OH, OW](const Tensor& gy, const Tensor&) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), xn->value.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           T* d = gx.data<T>().data();
                           for (std::int64_t b = 0; b < B; ++b) {
                               for (std::int64_t i = 0; i < OH; ++i) {
                                   for (std::int64_t j = 0; j < OW; ++j) {
                                       const T* grow = g + ((b * OH + i) * OW + j) * 4 * C;
                                       for (int gp = 0; gp < 4; ++gp) {
                                           T* drow = d + ((b * H + 2 * i + kParityH[gp]) * W +
                                                          2 * j + kParityW[gp]) *
                                                             C;
                                           std::copy_n(grow + gp * C, C, drow);
                                       }
                                   }
                               }
                           }
                       });
                       xn->accumulate(gx);
                   });
}

Var parity_scatter(const Var& x) {
    const auto& xv = x.value();
    require(xv.rank() == 4, "patch_expand: input must be BxHxWx4G, got " + shape_str(xv.shape()));
    const std::int64_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C4 = xv.dim(3);
    require(C4 % 4 == 0, "patch_expand: channels must split into 4 parity groups");
    const std::int64_t G = C4 / 4;
    Tensor out(xv.dtype(), {B, 2 * H, 2 * W, G});
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    const T* srow = src + ((b * H + i) * W + j) * C4;
                    for (int g = 0; g < 4; ++g) {
                        T* drow = dst + ((b * 2 * H + 2 * i + kParityH[g]) * 2 * W + 2 * j +
                                         kParityW[g]) *
                                            G;
                        std::copy_n(srow + g * G, G, drow);
                    }
                }
            }
        }
    });
    return make_op(std::move(out), {x},
                   [xn = x.node(), B, H, W, C4, G](const Tensor& gy, const Tensor&) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), xn->value.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           T* d = gx.data<T>().data();
                           for (std::int64_t b = 0; b < B; ++b) {
                               for (std::int64_t i = 0; i < H; ++i) {
                                   for (std::int64_t j = 0; j < W; ++j) {
                                       T* drow = d + ((b * H + i) * W + j) * C4;
                                       for (int gp = 0; gp < 4; ++gp) {
                                           const T* grow =
                                               g + ((b * 2 * H + 2 * i + kParityH[gp]) * 2 * W +
                                                    2 * j + kParityW[gp]) *
                                                       G;
                                           std::copy_n(grow, G, drow + gp * G);
                                       }
                                   }
                               }
                           }
                       });
                       xn->accumulate(gx);
                   });
}

}  // namespace

Var patch_merge(const Var& x, const Var& w, const Var& b) {
    return linear(parity_gather(x), w, b);
}

Var patch_expand(const Var& x, const Var& w, const Var& b) {
    const auto& xv = x.value();
    require(xv.rank() == 4, "patch_expand: input must be BxHxWxC, got " + shape_str(xv.shape()));
    require(xv.dim(3) % 2 == 0, "patch_expand: channel dim must be even, got " +
                                    std::to_string(xv.dim(3)));
    return parity_scatter(linear(x, w, b));
}

Var decoder_fuse(const Var& up, const Var& skip, const Var& w, const Var& b) {
    const auto& uv = up.value();
    const auto& sv = skip.value();
    require(uv.shape() == sv.shape(), "decoder_fuse: spatial/channel mismatch " +
                                          shape_str(uv.shape()) + " vs " + shape_str(sv.shape()));
    return linear(concat({up, skip}, 3), w, b);
}

std::vector<Var> forward(const Var& image, ModelParams& m, bool training, ScanMode mode,
                         ForwardTrace* trace) {
    const auto& cfg = m.config;
    const auto& xv = image.value();
    require(xv.rank() == 4, "forward: image must be BxCxHxW, got " + shape_str(xv.shape()));
    require(xv.dim(1) == cfg.in_channels,
            "forward: image channels " + std::to_string(xv.dim(1)) + " != config in_channels " +
                std::to_string(cfg.in_channels));
    require(xv.dim(2) % 32 == 0 && xv.dim(3) % 32 == 0,
            "forward: spatial dims must be divisible by 32, got " + shape_str(xv.shape()));

    auto record = [&](const char* name, const Var& v) {
        if (trace) trace->stages.emplace_back(name, v.shape());
    };

    auto [p1, x1] = encoder_conv_stage(image, m.enc[0], training);
    record("x_e1", x1);
    auto [p2, x2] = encoder_conv_stage(x1, m.enc[1], training);
    record("x_e2", x2);
    auto [p3, x3] = encoder_conv_stage(x2, m.enc[2], training);
    record("x_e3", x3);

    Var e4 = patch_embed(x3, m.patch_embed_w, m.patch_embed_b);
    Var xe4 = vkan_block(e4, m.enc_vkan4, mode);
    record("x_e4", xe4);
    Var xe5 = vkan_block(patch_merge(xe4, m.patch_merge_w, m.patch_merge_b), m.enc_vkan5, mode);
    record("x_e5", xe5);

    Var s1 = cbam_apply(x1, m.cbam[0]);
    Var s2 = cbam_apply(x2, m.cbam[1]);
    Var s3 = cbam_apply(x3, m.cbam[2]);

    Var u5 = patch_expand(xe5, m.expand5_w, m.expand5_b);
    Var xd5 = vkan_block(decoder_fuse(u5, xe4, m.fuse5_w, m.fuse5_b), m.dec_vkan5, mode);
    record("x_d5", xd5);

    Var u4 = patch_expand(xd5, m.expand4_w, m.expand4_b);
    Var s3cl = permute(s3, {0, 2, 3, 1});
    Var xd4 = vkan_block(decoder_fuse(u4, s3cl, m.fuse4_w, m.fuse4_b), m.dec_vkan4, mode);
    record("x_d4", xd4);

    Var d4cf = permute(xd4, {0, 3, 1, 2});
    Var t3 = transposed_conv2d(d4cf, m.up3_w, m.up3_b, 2);
    Var c3 = conv2d(concat({t3, s2}, 1), m.fuse3_w, m.fuse3_b, 1, 0, 1);
    Var xd3 = conv_bn_relu(conv_bn_relu(c3, m.dec3.c1, training), m.dec3.c2, training);
    record("x_d3", xd3);

    Var t2 = transposed_conv2d(xd3, m.up2_w, m.up2_b, 2);
    Var c2 = conv2d(concat({t2, s1}, 1), m.fuse2_w, m.fuse2_b, 1, 0, 1);
    Var xd2 = conv_bn_relu(conv_bn_relu(c2, m.dec2.c1, training), m.dec2.c2, training);
    record("x_d2", xd2);

    Var t1 = transposed_conv2d(xd2, m.up1_w, m.up1_b, 2);
    Var xd1 = conv_bn_relu(conv_bn_relu(t1, m.dec1.c1, training), m.dec1.c2, training);
    record("x_d1", xd1);

    Var main = conv2d(xd1, m.head_main_w, m.head_main_b, 1, 0, 1);
    record("logits", main);
    if (!cfg.deep_supervision) return {main};

    Var ds2 = conv2d(xd2, m.head2_w, m.head2_b, 1, 0, 1);
    Var ds3 = conv2d(xd3, m.head3_w, m.head3_b, 1, 0, 1);
    Var ds4 = permute(linear(xd4, m.head4_w, m.head4_b), {0, 3, 1, 2});
    return {main, ds2, ds3, ds4};
}

ParamCountReport param_count(const ModelConfig& cfg) {
    ModelParams m = build_model(cfg, DType::F32, 0);
    ParamCountReport report;
    const std::vector<std::pair<std::string, std::string>> groups = {
        {"encoder.stage", "encoder conv stages"},
        {"encoder.patch_embed", "patch embed"},
        {"encoder.patch_merge", "patch merge"},
        {"encoder.vkan4", "encoder VKAN block 4"},
        {"encoder.vkan5", "encoder VKAN block 5"},
        {"skips.cbam", "CBAM skips"},
        {"decoder.expand", "patch expand"},
        {"decoder.fuse", "decoder fusions"},
        {"decoder.vkan5", "decoder VKAN block 5"},
        {"decoder.vkan4", "decoder VKAN block 4"},
        {"decoder.up", "decoder upsampling"},
        {"decoder.stage", "decoder conv stages"},
        {"heads.", "segmentation heads"},
    };
    std::vector<std::int64_t> counts(groups.size(), 0);
    for (const auto& [name, v] : m.store.entries()) {
        report.total += v.numel();
        if (v.node()->trainable) report.trainable += v.numel();
        for (std::size_t g = 0; g < groups.size(); ++g) {
            if (name.rfind(groups[g].first, 0) == 0) {
                counts[g] += v.numel();
                break;
            }
        }
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
        report.by_module.emplace_back(groups[g].second, counts[g]);
    }
    return report;
}

}  // namespace vkan
