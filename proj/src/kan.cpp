#include "vkan/kan.hpp"

#include <cmath>
#include <stdexcept>

namespace vkan {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// All order-`ord` basis values at v, written to out[0 .. ncell-ord).
// Order-0 cells are half-open with the final knot right-closed.
void basis_row(const SplineGrid& g, double v, int ord, double* out) {
    const auto& t = g.knots;
    const int ncell = static_cast<int>(t.size()) - 1;
    std::vector<double> b(static_cast<std::size_t>(ncell));
    for (int i = 0; i < ncell; ++i) {
        const bool inside = (t[static_cast<std::size_t>(i)] <= v &&
                             v < t[static_cast<std::size_t>(i + 1)]) ||
                            (i == ncell - 1 && v == t[static_cast<std::size_t>(ncell)]);
        b[static_cast<std::size_t>(i)] = inside ? 1.0 : 0.0;
    }
    for (int k = 1; k <= ord; ++k) {
        const int cnt = ncell - k;
        for (int i = 0; i < cnt; ++i) {
            const double d1 = t[static_cast<std::size_t>(i + k)] - t[static_cast<std::size_t>(i)];
            const double d2 =
                t[static_cast<std::size_t>(i + k + 1)] - t[static_cast<std::size_t>(i + 1)];
            const double left =
                d1 > 0.0 ? (v - t[static_cast<std::size_t>(i)]) / d1 * b[static_cast<std::size_t>(i)]
                         : 0.0;
            const double right =
                d2 > 0.0 ? (t[static_cast<std::size_t>(i + k + 1)] - v) / d2 *
                               b[static_cast<std::size_t>(i + 1)]
                         : 0.0;
            b[static_cast<std::size_t>(i)] = left + right;
        }
    }
    std::copy_n(b.data(), ncell - ord, out);
}

// dN_{i,k}/dv = k (N_{i,k-1}/(t_{i+k}-t_i) - N_{i+1,k-1}/(t_{i+k+1}-t_{i+1}))
void basis_deriv_row(const SplineGrid& g, double v, double* out) {
    const int k = g.order;
    const std::int64_t nb = g.num_basis();
    if (k == 0) {
        std::fill_n(out, nb, 0.0);
        return;
    }
    const auto& t = g.knots;
    std::vector<double> lower(static_cast<std::size_t>(nb + 1));
    basis_row(g, v, k - 1, lower.data());
    for (std::int64_t i = 0; i < nb; ++i) {
        const double d1 = t[static_cast<std::size_t>(i + k)] - t[static_cast<std::size_t>(i)];
        const double d2 =
            t[static_cast<std::size_t>(i + k + 1)] - t[static_cast<std::size_t>(i + 1)];
        const double a = d1 > 0.0 ? lower[static_cast<std::size_t>(i)] / d1 : 0.0;
        const double b = d2 > 0.0 ? lower[static_cast<std::size_t>(i + 1)] / d2 : 0.0;
        out[i] = static_cast<double>(k) * (a - b);
    }
}

}  // namespace

SplineGrid SplineGrid::make(int order, int intervals, double lo, double hi) {
    require(order >= 0, "spline order must be >= 0");
    require(intervals >= 1, "spline grid needs at least one interval");
    require(lo < hi, "spline range must satisfy lo < hi");
    SplineGrid g;
    g.order = order;
    g.intervals = intervals;
    g.lo = lo;
    g.hi = hi;
    const double h = (hi - lo) / intervals;
    g.knots.resize(static_cast<std::size_t>(intervals + 2 * order + 1));
    for (int i = 0; i < static_cast<int>(g.knots.size()); ++i) {
        g.knots[static_cast<std::size_t>(i)] = lo + (i - order) * h;
    }
    return g;
}

Var bspline_basis(const Var& x, const SplineGrid& grid) {
    const Tensor& xv = x.value();
    const std::int64_t n = xv.numel();
    const std::int64_t nb = grid.num_basis();
    auto out_shape = xv.shape();
    out_shape.push_back(nb);
    Tensor out(xv.dtype(), out_shape);
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        std::vector<double> row(static_cast<std::size_t>(nb));
        for (std::int64_t i = 0; i < n; ++i) {
            basis_row(grid, static_cast<double>(src[i]), grid.order, row.data());
            for (std::int64_t j = 0; j < nb; ++j) {
                dst[i * nb + j] = static_cast<T>(row[static_cast<std::size_t>(j)]);
            }
        }
    });
    return make_op(std::move(out), {x},
                   [xn = x.node(), grid, n, nb](const Tensor& gy, const Tensor&) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), xn->value.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           const T* src = xn->value.data<T>().data();
                           T* d = gx.data<T>().data();
                           std::vector<double> drow(static_cast<std::size_t>(nb));
                           for (std::int64_t i = 0; i < n; ++i) {
                               basis_deriv_row(grid, static_cast<double>(src[i]), drow.data());
                               double acc = 0.0;
                               for (std::int64_t j = 0; j < nb; ++j) {
                                   acc += static_cast<double>(g[i * nb + j]) *
                                          drow[static_cast<std::size_t>(j)];
                               }
                               d[i] = static_cast<T>(acc);
                           }
                       });
                       xn->accumulate(gx);
                   });
}

Var kan_linear(const Var& x, const KANLinearParams& p) {
    const Tensor& xv = x.value();
    require(xv.rank() >= 1 && xv.shape().back() == p.in_dim,
            "kan_linear: input last dim must be " + std::to_string(p.in_dim) + ", got " +
                shape_str(xv.shape()));
    const std::int64_t nb = p.grid.num_basis();
    Var base = linear(silu(x), p.base_weight);
    Var bas = bspline_basis(x, p.grid);  // ... x IN x nb
    std::vector<std::int64_t> flat_shape = xv.shape();
    flat_shape.back() = p.in_dim * nb;
    Var spline = linear(reshape(bas, flat_shape),
                        reshape(p.spline_weight, {p.out_dim, p.in_dim * nb}));
    return add(base, spline);
}

Var tok_kan(const Var& x, const TokKANParams& p) {
    const Tensor& xv = x.value();
    require(xv.rank() == 4, "tok_kan: input must be BxHxWxC, got " + shape_str(xv.shape()));
    const std::int64_t C = xv.dim(3);
    auto dwconv = [&](const Var& t, const Var& w, const Var& b) {
        Var cf = permute(t, {0, 3, 1, 2});
        cf = conv2d(cf, w, b, 1, 1, C);
        return permute(cf, {0, 2, 3, 1});
    };
    Var t = layer_norm(x, p.ln_gamma, p.ln_beta);
    t = kan_linear(t, p.kan1);
    t = dwconv(t, p.dw1_w, p.dw1_b);
    t = kan_linear(t, p.kan2);
    return dwconv(t, p.dw2_w, p.dw2_b);
}

const char* efconv_mode_name(EFConvMode m) {
    switch (m) {
        case EFConvMode::None: return "none";
        case EFConvMode::Conv3: return "conv3";
        case EFConvMode::Conv5: return "conv5";
        case EFConvMode::Conv3x2: return "conv3x2";
    }
    return "?";
}

EFConvMode efconv_mode_from_name(const std::string& name) {
    if (name == "none") return EFConvMode::None;
    if (name == "conv3") return EFConvMode::Conv3;
    if (name == "conv5") return EFConvMode::Conv5;
    if (name == "conv3x2") return EFConvMode::Conv3x2;
    throw std::invalid_argument("unknown efconv mode: " + name +
                                " (expected none|conv3|conv5|conv3x2)");
}

Var efconv(const Var& x, const EFCKANParams& p) {
    const Tensor& xv = x.value();
    require(xv.rank() == 4, "efconv: input must be BxHxWxC, got " + shape_str(xv.shape()));
    if (p.mode == EFConvMode::None) return x;
    Var t = permute(x, {0, 3, 1, 2});
    const std::int64_t pad = p.mode == EFConvMode::Conv5 ? 2 : 1;
    for (std::size_t i = 0; i < p.conv_w.size(); ++i) {
        t = conv2d(t, p.conv_w[i], p.conv_b[i], 1, pad, 1);
    }
    return permute(t, {0, 2, 3, 1});
}

Var efc_kan(const Var& x, const EFCKANParams& p) {
    Var xb = efconv(x, p);
    return add(tok_kan(xb, p.tok), xb);
}

Var vkan_block(const Var& x, const VKANBlockParams& p, ScanMode mode) {
    const Tensor& xv = x.value();
    require(xv.rank() == 4 && xv.dim(3) == p.channels,
            "vkan_block: input must be BxHxWx" + std::to_string(p.channels) + ", got " +
                shape_str(xv.shape()));
    Var y = layer_norm(add(x, vss_block(x, p.vss, mode)), p.ln_gamma, p.ln_beta);
    return add(y, efc_kan(y, p.efc));
}

KANLinearParams make_kan_linear_params(ParamStore& store, const std::string& prefix,
                                       std::int64_t in_dim, std::int64_t out_dim,
                                       const SplineGrid& grid, DType dt, std::uint64_t seed) {
    KANLinearParams p;
    p.grid = grid;
    p.in_dim = in_dim;
    p.out_dim = out_dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    p.base_weight =
        store.add(prefix + ".base_weight",
                  init_uniform(dt, {out_dim, in_dim}, bound, seed, prefix + ".base_weight"));
    p.spline_weight = store.add(prefix + ".spline_weight",
                                init_normal(dt, {out_dim, in_dim, grid.num_basis()}, 0.1 * bound,
                                            seed, prefix + ".spline_weight"));
    return p;
}

TokKANParams make_tok_kan_params(ParamStore& store, const std::string& prefix,
                                 std::int64_t channels, const SplineGrid& grid, DType dt,
                                 std::uint64_t seed) {
    TokKANParams p;
    p.ln_gamma = store.add(prefix + ".norm.gamma", Tensor::full(dt, {channels}, 1.0));
    p.ln_beta = store.add(prefix + ".norm.beta", Tensor::zeros(dt, {channels}));
    p.kan1 = make_kan_linear_params(store, prefix + ".kan1", channels, channels, grid, dt, seed);
    p.dw1_w = store.add(prefix + ".dw1.weight",
                        init_conv_weight(dt, {channels, 1, 3, 3}, seed, prefix + ".dw1.weight"));
    p.dw1_b = store.add(prefix + ".dw1.bias", Tensor::zeros(dt, {channels}));
    p.kan2 = make_kan_linear_params(store, prefix + ".kan2", channels, channels, grid, dt, seed);
    p.dw2_w = store.add(prefix + ".dw2.weight",
                        init_conv_weight(dt, {channels, 1, 3, 3}, seed, prefix + ".dw2.weight"));
    p.dw2_b = store.add(prefix + ".dw2.bias", Tensor::zeros(dt, {channels}));
    return p;
}

EFCKANParams make_efc_kan_params(ParamStore& store, const std::string& prefix,
                                 std::int64_t channels, EFConvMode mode, const SplineGrid& grid,
                                 DType dt, std::uint64_t seed) {
    EFCKANParams p;
    p.mode = mode;
    const int nconv = mode == EFConvMode::None ? 0 : (mode == EFConvMode::Conv3x2 ? 2 : 1);
    const std::int64_t k = mode == EFConvMode::Conv5 ? 5 : 3;
    for (int i = 0; i < nconv; ++i) {
        const std::string name = prefix + ".conv" + std::to_string(i);
        p.conv_w.push_back(store.add(
            name + ".weight",
            init_conv_weight(dt, {channels, channels, k, k}, seed, name + ".weight")));
        p.conv_b.push_back(store.add(name + ".bias", Tensor::zeros(dt, {channels})));
    }
    p.tok = make_tok_kan_params(store, prefix + ".tok", channels, grid, dt, seed);
    return p;
}

VKANBlockParams make_vkan_block_params(ParamStore& store, const std::string& prefix,
                                       std::int64_t channels, std::int64_t d_state,
                                       EFConvMode mode, const SplineGrid& grid, DType dt,
                                       std::uint64_t seed) {
    VKANBlockParams p;
    p.channels = channels;
    for (int i = 0; i < 4; ++i) {
        p.vss.push_back(make_vss_layer_params(store, prefix + ".vss" + std::to_string(i),
                                              channels, d_state, dt, seed));
    }
    p.ln_gamma = store.add(prefix + ".norm.gamma", Tensor::full(dt, {channels}, 1.0));
    p.ln_beta = store.add(prefix + ".norm.beta", Tensor::zeros(dt, {channels}));
    p.efc = make_efc_kan_params(store, prefix + ".efc", channels, mode, grid, dt, seed);
    return p;
}

}  // namespace vkan
