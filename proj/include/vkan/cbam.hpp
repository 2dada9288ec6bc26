#pragma once

#include "vkan/ops.hpp"
#include "vkan/params.hpp"

namespace vkan {

/// Channel attention squeezes through a shared 1x1 conv pair (C -> C/r -> C);
/// spatial attention runs a 7x7 conv over the channel-max/mean descriptor.
struct CBAMParams {
    Var down_w, down_b;        // (C/r) x C x 1 x 1
    Var up_w, up_b;            // C x (C/r) x 1 x 1
    Var spatial_w, spatial_b;  // 1 x 2 x 7 x 7
    std::int64_t channels = 0;
    std::int64_t reduction = 0;
};

/// sigmoid(up(relu(down(maxpool))) + up(relu(down(avgpool)))) -> BxCx1x1.
Var channel_attention(const Var& x, const CBAMParams& params);

/// sigmoid(conv7x7(concat(channel-max, channel-mean))) -> Bx1xHxW.
Var spatial_attention(const Var& x, const CBAMParams& params);

/// relu(x + sa(ca(x) . x) . (ca(x) . x))
Var cbam_apply(const Var& x, const CBAMParams& params);

CBAMParams make_cbam_params(ParamStore& store, const std::string& prefix, std::int64_t channels,
                            std::int64_t reduction, DType dt, std::uint64_t seed);

}  // namespace vkan
