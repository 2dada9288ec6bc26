#include "vkan/cbam.hpp"

#include <stdexcept>

namespace vkan {

namespace {

void check_input(const Tensor& t, const CBAMParams& p, const char* what) {
    if (t.rank() != 4 || t.dim(1) != p.channels) {
        throw std::invalid_argument(std::string(what) + ": expected BxCxHxW with C=" +
                                    std::to_string(p.channels) + ", got " + shape_str(t.shape()));
    }
}

}  // namespace

Var channel_attention(const Var& x, const CBAMParams& p) {
    check_input(x.value(), p, "channel_attention");
    auto squeeze = [&](const Var& pooled) {
        Var t = conv2d(pooled, p.down_w, p.down_b, 1, 0, 1);
        t = relu(t);
        return conv2d(t, p.up_w, p.up_b, 1, 0, 1);
    };
    Var mp = squeeze(pool2d_global(x, PoolKind::Max));
    Var ap = squeeze(pool2d_global(x, PoolKind::Avg));
    return sigmoid(add(mp, ap));
}

Var spatial_attention(const Var& x, const CBAMParams& p) {
    check_input(x.value(), p, "spatial_attention");
    Var desc = concat({channel_max(x), channel_mean(x)}, 1);  // Bx2xHxW
    return sigmoid(conv2d(desc, p.spatial_w, p.spatial_b, 1, 3, 1));
}

Var cbam_apply(const Var& x, const CBAMParams& p) {
    check_input(x.value(), p, "cbam_apply");
    Var refined = mul(x, channel_attention(x, p));
    refined = mul(refined, spatial_attention(refined, p));
    return relu(add(x, refined));
}

CBAMParams make_cbam_params(ParamStore& store, const std::string& prefix, std::int64_t channels,
                            std::int64_t reduction, DType dt, std::uint64_t seed) {
    if (reduction < 1 || channels % reduction != 0) {
        throw std::invalid_argument("cbam: channels " + std::to_string(channels) +
                                    " not divisible by reduction " + std::to_string(reduction));
    }
    CBAMParams p;
    p.channels = channels;
    p.reduction = reduction;
    const std::int64_t hidden = channels / reduction;
    p.down_w = store.add(prefix + ".down.weight",
                         init_conv_weight(dt, {hidden, channels, 1, 1}, seed,
                                          prefix + ".down.weight"));
    p.down_b = store.add(prefix + ".down.bias", Tensor::zeros(dt, {hidden}));
    p.up_w = store.add(prefix + ".up.weight",
                       init_conv_weight(dt, {channels, hidden, 1, 1}, seed, prefix + ".up.weight"));
    p.up_b = store.add(prefix + ".up.bias", Tensor::zeros(dt, {channels}));
    p.spatial_w = store.add(prefix + ".spatial.weight",
                            init_conv_weight(dt, {1, 2, 7, 7}, seed, prefix + ".spatial.weight"));
    p.spatial_b = store.add(prefix + ".spatial.bias", Tensor::zeros(dt, {1}));
    return p;
}

}  // namespace vkan
