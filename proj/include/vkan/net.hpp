#pragma once

#include <array>
#include <string>
#include <vector>

#include "json.hpp"
#include "vkan/cbam.hpp"
#include "vkan/kan.hpp"

namespace vkan {

struct SplineSpec {
    int k = 3;
    int G = 5;
    double lo = -1.0;
    double hi = 1.0;
};

/// Full hyperparameter record. stage_channels must double at each stage.
struct ModelConfig {
    std::int64_t in_channels = 3;
    std::int64_t num_classes = 2;
    std::vector<std::int64_t> stage_channels = {48, 96, 192, 384, 768};
    std::int64_t decoder_head_channels = 24;
    std::int64_t d_state = 16;
    SplineSpec spline;
    std::int64_t cbam_reduction = 16;
    EFConvMode efconv_mode = EFConvMode::Conv3x2;
    bool deep_supervision = true;
    std::array<double, 4> ds_weights = {1.0, 0.5, 0.25, 0.125};

    static ModelConfig full();
    static ModelConfig tiny();  // channels [8,16,32,64,128], d_state 4, cbam r 4
    void validate() const;
    SplineGrid make_grid() const { return SplineGrid::make(spline.k, spline.G, spline.lo, spline.hi); }
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ConvBNParams {
    Var w, b, gamma, beta, run_mean, run_var;
};

struct ConvStageParams {
    ConvBNParams c1, c2;
};

/// The named parameter tree of the whole model, plus its registry.
struct ModelParams {
    ModelConfig config;
    DType dtype = DType::F32;
    std::uint64_t seed = 0;
    ParamStore store;

    std::array<ConvStageParams, 3> enc;
    Var patch_embed_w, patch_embed_b;
    VKANBlockParams enc_vkan4, enc_vkan5;
    Var patch_merge_w, patch_merge_b;

    std::array<CBAMParams, 3> cbam;

    Var expand5_w, expand5_b, fuse5_w, fuse5_b;
    VKANBlockParams dec_vkan5;
    Var expand4_w, expand4_b, fuse4_w, fuse4_b;
    VKANBlockParams dec_vkan4;
    Var up3_w, up3_b, fuse3_w, fuse3_b;
    ConvStageParams dec3;
    Var up2_w, up2_b, fuse2_w, fuse2_b;
    ConvStageParams dec2;
    Var up1_w, up1_b;
    ConvStageParams dec1;

    Var head_main_w, head_main_b;
    Var head2_w, head2_b, head3_w, head3_b;
    Var head4_w, head4_b;  // linear head on the channel-last x_d4
};

ModelParams build_model(const ModelConfig& cfg, DType dt, std::uint64_t seed);

/// Two rounds of conv3x3-BN-ReLU then max pool 2; returns (pre-pool, pooled).
std::pair<Var, Var> encoder_conv_stage(const Var& x, const ConvStageParams& p, bool training);

/// 2x2 stride-2 conv doubling channels, emitted channel-last for VKAN stages.
Var patch_embed(const Var& x, const Var& w, const Var& b);

/// Parity sub-grid concat (4C) then linear to 2C. BxHxWxC -> Bx(H/2)x(W/2)x2C.
Var patch_merge(const Var& x, const Var& w, const Var& b);

/// Linear C->2C then rearrange into 2x2 spatial blocks of C/2 channels,
/// the exact inverse layout of patch_merge.
Var patch_expand(const Var& x, const Var& w, const Var& b);

/// Channel-last concat to 2C then 1x1 projection back to C.
Var decoder_fuse(const Var& up, const Var& skip, const Var& w, const Var& b);

struct ForwardTrace {
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> stages;
};

/// Full forward pass. Returns [main, aux 1/2, aux 1/4, aux 1/8] logits with
/// deep supervision on, otherwise just the full-resolution logits.
std::vector<Var> forward(const Var& image, ModelParams& params, bool training,
                         ScanMode mode = ScanMode::Naive, ForwardTrace* trace = nullptr);

struct ParamCountReport {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
    std::vector<std::pair<std::string, std::int64_t>> by_module;
};

ParamCountReport param_count(const ModelConfig& cfg);

}  // namespace vkan
