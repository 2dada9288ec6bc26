#pragma once

#include <string>
#include <vector>

#include "vkan/scan.hpp"

namespace vkan {

/// Uniform B-spline grid: G intervals over [lo, hi], order k, knots extended
/// k steps past each end. Carries G + k order-k basis functions.
struct SplineGrid {
    int order = 3;
    int intervals = 5;
    double lo = -1.0;
    double hi = 1.0;
    std::vector<double> knots;  // G + 2k + 1, strictly increasing

    static SplineGrid make(int order, int intervals, double lo, double hi);
    std::int64_t num_basis() const { return intervals + order; }
};

/// Cox-de Boor evaluation of all order-k basis functions: output shape is the
/// input shape with one extra trailing axis of G + k values. Inputs outside
/// the support produce (partially) zero rows.
Var bspline_basis(const Var& x, const SplineGrid& grid);

struct KANLinearParams {
    Var base_weight;    // OUT x IN
    Var spline_weight;  // OUT x IN x (G+k)
    SplineGrid grid;
    std::int64_t in_dim = 0;
    std::int64_t out_dim = 0;
};

/// Each edge function is silu-base plus a learned spline expansion:
/// y_m = sum_n base[m,n] silu(x_n) + sum_j spline[m,n,j] N_j(x_n).
Var kan_linear(const Var& x, const KANLinearParams& params);

struct TokKANParams {
    Var ln_gamma, ln_beta;
    KANLinearParams kan1, kan2;  // C -> C each
    Var dw1_w, dw1_b, dw2_w, dw2_b;  // depthwise 3x3
};

/// DWConv(KANLinear(DWConv(KANLinear(LN(x))))) over BxHxWxC tokens.
Var tok_kan(const Var& x, const TokKANParams& params);

enum class EFConvMode { None, Conv3, Conv5, Conv3x2 };

const char* efconv_mode_name(EFConvMode m);
EFConvMode efconv_mode_from_name(const std::string& name);

struct EFCKANParams {
    EFConvMode mode = EFConvMode::Conv3x2;
    std::vector<Var> conv_w, conv_b;  // 0, 1 or 2 channel-preserving convs
    TokKANParams tok;
};

/// The receptive-field expansion convolutions alone (no activation between).
Var efconv(const Var& x, const EFCKANParams& params);

/// efc_kan(x) = tok_kan(efconv(x)) + efconv(x); the residual wraps Tok-KAN only.
Var efc_kan(const Var& x, const EFCKANParams& params);

struct VKANBlockParams {
    std::vector<VSSLayerParams> vss;  // exactly 4
    Var ln_gamma, ln_beta;
    EFCKANParams efc;
    std::int64_t channels = 0;
};

/// y = LN(x + vss_block(x)); out = y + efc_kan(y).
Var vkan_block(const Var& x, const VKANBlockParams& params, ScanMode mode = ScanMode::Naive);

KANLinearParams make_kan_linear_params(ParamStore& store, const std::string& prefix,
                                       std::int64_t in_dim, std::int64_t out_dim,
                                       const SplineGrid& grid, DType dt, std::uint64_t seed);
TokKANParams make_tok_kan_params(ParamStore& store, const std::string& prefix,
                                 std::int64_t channels, const SplineGrid& grid, DType dt,
                                 std::uint64_t seed);
EFCKANParams make_efc_kan_params(ParamStore& store, const std::string& prefix,
                                 std::int64_t channels, EFConvMode mode, const SplineGrid& grid,
                                 DType dt, std::uint64_t seed);
VKANBlockParams make_vkan_block_params(ParamStore& store, const std::string& prefix,
                                       std::int64_t channels, std::int64_t d_state,
                                       EFConvMode mode, const SplineGrid& grid, DType dt,
                                       std::uint64_t seed);

}  // namespace vkan
