#include "vkan/scan.hpp"

#include <cmath>
#include <stdexcept>

namespace vkan {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

constexpr std::int64_t kScanBlock = 32;

// h_t = abar_t . h_{t-1} + bx_t,   y_t[d] = sum_n c_t[n] h_t[d,n]
// abar, bx: BxLxDxN; c: BxLxN; y: BxLxD. Saves h for the backward sweep.
template <typename T>
void scan_core_fwd(const T* abar, const T* bx, const T* c, T* y, T* h, std::int64_t B,
                   std::int64_t L, std::int64_t D, std::int64_t N, ScanMode mode) {
    const std::int64_t dn = D * N;
    for (std::int64_t b = 0; b < B; ++b) {
        const T* ab = abar + b * L * dn;
        const T* bb = bx + b * L * dn;
        const T* cb = c + b * L * N;
        T* yb = y + b * L * D;
        T* hb = h + b * L * dn;
        if (mode == ScanMode::Naive) {
            for (std::int64_t l = 0; l < L; ++l) {
                const T* hprev = l ? hb + (l - 1) * dn : nullptr;
                for (std::int64_t d = 0; d < D; ++d) {
                    const T* a = ab + l * dn + d * N;
                    const T* x = bb + l * dn + d * N;
                    T* ht = hb + l * dn + d * N;
                    double acc = 0.0;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const T prev = hprev ? hprev[d * N + n] : T(0);
                        ht[n] = a[n] * prev + x[n];
                        acc += static_cast<double>(cb[l * N + n]) * static_cast<double>(ht[n]);
                    }
                    yb[l * D + d] = static_cast<T>(acc);
                }
            }
        } else {
            // Chunked two-pass scan: per block, accumulate the block-local
            // state from zero plus the product of the block's decay factors,
            // fold block carries sequentially, then replay each block from
            // its carry. Reorders the carry arithmetic relative to Naive.
            const std::int64_t nblocks = (L + kScanBlock - 1) / kScanBlock;
            std::vector<T> carry(static_cast<std::size_t>(dn), T(0));
            std::vector<T> prod(static_cast<std::size_t>(dn));
            std::vector<T> local(static_cast<std::size_t>(dn));
            for (std::int64_t k = 0; k < nblocks; ++k) {
                const std::int64_t l0 = k * kScanBlock;
                const std::int64_t l1 = std::min(L, l0 + kScanBlock);
                std::fill(prod.begin(), prod.end(), T(1));
                std::fill(local.begin(), local.end(), T(0));
                for (std::int64_t l = l0; l < l1; ++l) {
                    const T* a = ab + l * dn;
                    const T* x = bb + l * dn;
                    for (std::int64_t i = 0; i < dn; ++i) {
                        local[i] = a[i] * local[i] + x[i];
                        prod[i] = prod[i] * a[i];
                    }
                }
                const T* hprev0 = carry.data();
                for (std::int64_t l = l0; l < l1; ++l) {
                    const T* a = ab + l * dn;
                    const T* x = bb + l * dn;
                    const T* hp = l == l0 ? hprev0 : hb + (l - 1) * dn;
                    T* ht = hb + l * dn;
                    for (std::int64_t d = 0; d < D; ++d) {
                        double acc = 0.0;
                        for (std::int64_t n = 0; n < N; ++n) {
                            const std::int64_t i = d * N + n;
                            ht[i] = a[i] * hp[i] + x[i];
                            acc += static_cast<double>(cb[l * N + n]) * static_cast<double>(ht[i]);
                        }
                        yb[l * D + d] = static_cast<T>(acc);
                    }
                }
                for (std::int64_t i = 0; i < dn; ++i) carry[i] = prod[i] * carry[i] + local[i];
            }
        }
    }
}

template <typename T>
void scan_core_bwd(const T* abar, const T* c, const T* h, const T* gy, T* d_abar, T* d_bx,
                   T* d_c, std::int64_t B, std::int64_t L, std::int64_t D, std::int64_t N) {
    const std::int64_t dn = D * N;
    std::vector<double> gh(static_cast<std::size_t>(dn));
    for (std::int64_t b = 0; b < B; ++b) {
        const T* ab = abar + b * L * dn;
        const T* cb = c + b * L * N;
        const T* hb = h + b * L * dn;
        const T* gyb = gy + b * L * D;
        std::fill(gh.begin(), gh.end(), 0.0);
        for (std::int64_t l = L - 1; l >= 0; --l) {
            if (l < L - 1) {
                const T* anext = ab + (l + 1) * dn;
                for (std::int64_t i = 0; i < dn; ++i) gh[i] *= static_cast<double>(anext[i]);
            }
            for (std::int64_t d = 0; d < D; ++d) {
                const double g = static_cast<double>(gyb[l * D + d]);
                for (std::int64_t n = 0; n < N; ++n) {
                    gh[d * N + n] += g * static_cast<double>(cb[l * N + n]);
                }
            }
            const T* hprev = l ? hb + (l - 1) * dn : nullptr;
            T* da = d_abar + (b * L + l) * dn;
            T* db = d_bx + (b * L + l) * dn;
            for (std::int64_t i = 0; i < dn; ++i) {
                db[i] = static_cast<T>(gh[i]);
                da[i] = hprev ? static_cast<T>(gh[i] * static_cast<double>(hprev[i])) : T(0);
            }
            T* dc = d_c + (b * L + l) * N;
            for (std::int64_t n = 0; n < N; ++n) {
                double s = 0.0;
                for (std::int64_t d = 0; d < D; ++d) {
                    s += static_cast<double>(gyb[l * D + d]) *
                         static_cast<double>(hb[l * dn + d * N + n]);
                }
                dc[n] = static_cast<T>(s);
            }
        }
    }
}

}  // namespace

Var scan_core(const Var& abar, const Var& bx, const Var& c, ScanMode mode) {
    const auto& av = abar.value();
    require(av.rank() == 4, "scan core expects BxLxDxN decay factors");
    const std::int64_t B = av.dim(0), L = av.dim(1), D = av.dim(2), N = av.dim(3);
    require(bx.value().shape() == av.shape(), "scan core: bx shape mismatch");
    require(c.value().shape() == (std::vector<std::int64_t>{B, L, N}),
            "scan core: c must be BxLxN");
    Tensor y(av.dtype(), {B, L, D});
    Tensor h(av.dtype(), {B, L, D, N});
    dispatch_float(av.dtype(), [&](auto tag) {
        using T = decltype(tag);
        scan_core_fwd<T>(av.data<T>().data(), bx.value().data<T>().data(),
                         c.value().data<T>().data(), y.data<T>().data(), h.data<T>().data(), B, L,
                         D, N, mode);
    });
    return make_op(std::move(y), {abar, bx, c},
                   [an = abar.node(), bn = bx.node(), cn = c.node(), h, B, L, D,
                    N](const Tensor& gy, const Tensor&) {
                       Tensor da(gy.dtype(), an->value.shape());
                       Tensor db(gy.dtype(), bn->value.shape());
                       Tensor dc(gy.dtype(), cn->value.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           scan_core_bwd<T>(an->value.data<T>().data(),
                                            cn->value.data<T>().data(), h.data<T>().data(),
                                            gy.data<T>().data(), da.data<T>().data(),
                                            db.data<T>().data(), dc.data<T>().data(), B, L, D, N);
                       });
                       if (an->requires_grad) an->accumulate(da);
                       if (bn->requires_grad) bn->accumulate(db);
                       if (cn->requires_grad) cn->accumulate(dc);
                   });
}

std::int64_t default_dt_rank(std::int64_t d_model) { return (d_model + 15) / 16; }

std::pair<Var, Var> discretize(const Var& delta, const Var& a_log, const Var& b_in) {
    const auto& dv = delta.value();
    require(dv.rank() == 3, "discretize: delta must be BxLxD, got " + shape_str(dv.shape()));
    const std::int64_t B = dv.dim(0), L = dv.dim(1), D = dv.dim(2);
    require(a_log.value().rank() == 2 && a_log.value().dim(0) == D,
            "discretize: a_log must be DxN with D=" + std::to_string(D));
    const std::int64_t N = a_log.value().dim(1);
    require(b_in.value().shape() == (std::vector<std::int64_t>{B, L, N}),
            "discretize: b_in must be BxLxN");
    bool positive = true;
    dispatch_float(dv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (T v : dv.data<T>()) positive = positive && (static_cast<double>(v) > 0.0);
    });
    require(positive, "discretize: delta must be positive elementwise");

    Var a = neg(vkan::exp(a_log));  // A = -exp(a_log) < 0
    Var a_bar = vkan::exp(mul(reshape(delta, {B, L, D, 1}), reshape(a, {1, 1, D, N})));
    Var b_bar = mul(reshape(delta, {B, L, D, 1}), reshape(b_in, {B, L, 1, N}));
    return {a_bar, b_bar};
}

Var selective_scan(const Var& x, const S6Params& p, ScanMode mode) {
    const auto& xv = x.value();
    require(xv.rank() == 3, "selective_scan: input must be BxLxD, got " + shape_str(xv.shape()));
    const std::int64_t B = xv.dim(0), L = xv.dim(1), D = xv.dim(2);
    require(L >= 1, "selective_scan: empty sequence");
    require(D == p.d_model, "selective_scan: channel dim " + std::to_string(D) +
                                " != params d_model " + std::to_string(p.d_model));
    const std::int64_t N = p.d_state, R = p.dt_rank;

    Var proj = linear(x, p.in_proj_w);  // BxLx(R+2N)
    Var dt_raw = slice_lastdim(proj, 0, R);
    Var b_in = slice_lastdim(proj, R, N);
    Var c_in = slice_lastdim(proj, R + N, N);
    Var delta = softplus(linear(dt_raw, p.dt_proj_w, p.dt_proj_b));  // BxLxD, positive

    auto [a_bar, b_bar] = discretize(delta, p.a_log, b_in);
    Var bx = mul(b_bar, reshape(x, {B, L, D, 1}));
    Var y = scan_core(a_bar, bx, c_in, mode);
    return add(y, mul(x, reshape(p.d_skip, {1, 1, D})));
}

namespace {

// Direction index maps for an HxW grid flattened to length L = H*W.
inline std::int64_t dir_index(int dir, std::int64_t h, std::int64_t w, std::int64_t H,
                              std::int64_t W) {
    const std::int64_t L = H * W;
    switch (dir) {
        case 0: return h * W + w;             // row-major
        case 1: return w * H + h;             // column-major
        case 2: return L - 1 - (h * W + w);   // reversed row-major
        default: return L - 1 - (w * H + h);  // reversed column-major
    }
}

}  // namespace

Var cross_scan(const Var& x) {
    const auto& xv = x.value();
    require(xv.rank() == 4, "cross_scan: input must be BxCxHxW, got " + shape_str(xv.shape()));
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::int64_t L = H * W;
    Tensor out(xv.dtype(), {B, 4, C, L});
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t c = 0; c < C; ++c) {
                const T* plane = src + (b * C + c) * L;
                for (int dir = 0; dir < 4; ++dir) {
                    T* seq = dst + ((b * 4 + dir) * C + c) * L;
                    for (std::int64_t h = 0; h < H; ++h) {
                        for (std::int64_t w = 0; w < W; ++w) {
                            seq[dir_index(dir, h, w, H, W)] = plane[h * W + w];
                        }
                    }
                }
            }
        }
    });
    return make_op(std::move(out), {x},
                   [xn = x.node(), B, C, H, W, L](const Tensor& gy, const Tensor&) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), xn->value.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           T* d = gx.data<T>().data();
                           for (std::int64_t b = 0; b < B; ++b) {
                               for (std::int64_t c = 0; c < C; ++c) {
                                   T* plane = d + (b * C + c) * L;
                                   for (int dir = 0; dir < 4; ++dir) {
                                       const T* seq = g + ((b * 4 + dir) * C + c) * L;
                                       for (std::int64_t h = 0; h < H; ++h) {
                                           for (std::int64_t w = 0; w < W; ++w) {
                                               plane[h * W + w] +=
                                                   seq[dir_index(dir, h, w, H, W)];
                                           }
                                       }
                                   }
                               }
                           }
                       });
                       xn->accumulate(gx);
                   });
}

Var cross_merge(const Var& seqs, std::int64_t H, std::int64_t W) {
    const auto& sv = seqs.value();
    require(sv.rank() == 4 && sv.dim(1) == 4,
            "cross_merge: input must be Bx4xCxL, got " + shape_str(sv.shape()));
    const std::int64_t B = sv.dim(0), C = sv.dim(2), L = sv.dim(3);
    require(L == H * W, "cross_merge: sequence length " + std::to_string(L) +
                            " != H*W = " + std::to_string(H * W));
    Tensor out(sv.dtype(), {B, C, H, W});
    dispatch_float(sv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = sv.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t c = 0; c < C; ++c) {
                T* plane = dst + (b * C + c) * L;
                for (int dir = 0; dir < 4; ++dir) {
                    const T* seq = src + ((b * 4 + dir) * C + c) * L;
                    for (std::int64_t h = 0; h < H; ++h) {
                        for (std::int64_t w = 0; w < W; ++w) {
                            plane[h * W + w] += seq[dir_index(dir, h, w, H, W)];
                        }
                    }
                }
            }
        }
    });
    return make_op(std::move(out), {seqs},
                   [sn = seqs.node(), B, C, H, W, L](const Tensor& gy, const Tensor&) {
                       if (!sn->requires_grad) return;
                       Tensor gs(gy.dtype(), sn->value.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           T* d = gs.data<T>().data();
                           for (std::int64_t b = 0; b < B; ++b) {
                               for (std::int64_t c = 0; c < C; ++c) {
                                   const T* plane = g + (b * C + c) * L;
                                   for (int dir = 0; dir < 4; ++dir) {
                                       T* seq = d + ((b * 4 + dir) * C + c) * L;
                                       for (std::int64_t h = 0; h < H; ++h) {
                                           for (std::int64_t w = 0; w < W; ++w) {
                                               seq[dir_index(dir, h, w, H, W)] = plane[h * W + w];
                                           }
                                       }
                                   }
                               }
                           }
                       });
                       sn->accumulate(gs);
                   });
}

Var ss2d(const Var& x, const SS2DParams& p, ScanMode mode) {
    const auto& xv = x.value();
    require(xv.rank() == 4, "ss2d: input must be BxHxWxC, got " + shape_str(xv.shape()));
    const std::int64_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    const std::int64_t L = H * W;
    Var cf = permute(x, {0, 3, 1, 2});
    Var seqs = cross_scan(cf);  // Bx4xCxL
    std::vector<Var> outs;
    outs.reserve(4);
    for (int dir = 0; dir < 4; ++dir) {
        Var s = reshape(slice(seqs, 1, dir, 1), {B, C, L});
        Var tokens = permute(s, {0, 2, 1});  // BxLxC
        Var y = selective_scan(tokens, p.dirs[static_cast<std::size_t>(dir)], mode);
        outs.push_back(reshape(permute(y, {0, 2, 1}), {B, 1, C, L}));
    }
    Var merged = cross_merge(concat(outs, 1), H, W);  // BxCxHxW
    return layer_norm(permute(merged, {0, 2, 3, 1}), p.norm_gamma, p.norm_beta);
}

Var vss_layer(const Var& x, const VSSLayerParams& p, ScanMode mode) {
    const auto& xv = x.value();
    require(xv.rank() == 4, "vss_layer: input must be BxHxWxC, got " + shape_str(xv.shape()));
    const std::int64_t C = xv.dim(3);
    require(C == p.channels, "vss_layer: channel dim " + std::to_string(C) + " != params C " +
                                 std::to_string(p.channels));
    const std::int64_t expanded = p.expand_w.value().dim(0);
    require(expanded == 4 * C && expanded % 2 == 0,
            "vss_layer: expansion must produce an evenly splittable 4C channels");

    Var h0 = layer_norm(x, p.ln_gamma, p.ln_beta);
    Var xb = linear(h0, p.expand_w, p.expand_b);  // BxHxWx4C
    Var x1 = slice_lastdim(xb, 0, 2 * C);
    Var x2 = slice_lastdim(xb, 2 * C, 2 * C);

    Var branch = permute(x1, {0, 3, 1, 2});  // Bx2CxHxW
    branch = conv2d(branch, p.dw_w, p.dw_b, 1, 1, 2 * C);
    branch = silu(branch);
    branch = permute(branch, {0, 2, 3, 1});
    branch = ss2d(branch, p.ss2d, mode);
    branch = layer_norm(branch, p.post_gamma, p.post_beta);

    Var gated = mul(branch, silu(x2));
    return add(linear(gated, p.out_w, p.out_b), x);
}

Var vss_block(const Var& x, std::span<const VSSLayerParams> layers, ScanMode mode) {
    require(layers.size() == 4,
            "vss_block requires exactly 4 VSS layers, got " + std::to_string(layers.size()));
    Var h = x;
    for (const auto& p : layers) h = vss_layer(h, p, mode);
    return h;
}

S6Params make_s6_params(ParamStore& store, const std::string& prefix, std::int64_t d_model,
                        std::int64_t d_state, DType dt, std::uint64_t seed) {
    S6Params p;
    p.d_model = d_model;
    p.d_state = d_state;
    p.dt_rank = default_dt_rank(d_model);

    // S4D-real initialization: A_n = -(n+1) per channel.
    Tensor a_log(dt, {d_model, d_state});
    dispatch_float(dt, [&](auto tag) {
        using T = decltype(tag);
        auto a = a_log.data<T>();
        for (std::int64_t d = 0; d < d_model; ++d) {
            for (std::int64_t n = 0; n < d_state; ++n) {
                a[d * d_state + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
            }
        }
    });
    p.a_log = store.add(prefix + ".a_log", std::move(a_log));
    p.d_skip = store.add(prefix + ".d_skip", Tensor::full(dt, {d_model}, 1.0));

    const double in_bound = 1.0 / std::sqrt(static_cast<double>(d_model));
    p.in_proj_w = store.add(prefix + ".in_proj.weight",
                            init_uniform(dt, {p.dt_rank + 2 * d_state, d_model}, in_bound, seed,
                                         prefix + ".in_proj.weight"));
    const double dt_bound = 1.0 / std::sqrt(static_cast<double>(p.dt_rank));
    p.dt_proj_w = store.add(
        prefix + ".dt_proj.weight",
        init_uniform(dt, {d_model, p.dt_rank}, dt_bound, seed, prefix + ".dt_proj.weight"));

    // Bias chosen so softplus(bias) lands log-uniformly in [0.001, 0.1].
    Tensor dt_bias(dt, {d_model});
    CounterRng rng(seed, prefix + ".dt_proj.bias");
    dispatch_float(dt, [&](auto tag) {
        using T = decltype(tag);
        auto b = dt_bias.data<T>();
        for (std::int64_t d = 0; d < d_model; ++d) {
            const double target = std::exp(rng.next_uniform(std::log(1e-3), std::log(1e-1)));
            b[d] = static_cast<T>(std::log(std::expm1(target)));
        }
    });
    p.dt_proj_b = store.add(prefix + ".dt_proj.bias", std::move(dt_bias));
    return p;
}

SS2DParams make_ss2d_params(ParamStore& store, const std::string& prefix, std::int64_t d_model,
                            std::int64_t d_state, DType dt, std::uint64_t seed) {
    SS2DParams p;
    for (int dir = 0; dir < 4; ++dir) {
        p.dirs[static_cast<std::size_t>(dir)] =
            make_s6_params(store, prefix + ".dir" + std::to_string(dir), d_model, d_state, dt, seed);
    }
    p.norm_gamma = store.add(prefix + ".norm.gamma", Tensor::full(dt, {d_model}, 1.0));
    p.norm_beta = store.add(prefix + ".norm.beta", Tensor::zeros(dt, {d_model}));
    return p;
}

VSSLayerParams make_vss_layer_params(ParamStore& store, const std::string& prefix,
                                     std::int64_t channels, std::int64_t d_state, DType dt,
                                     std::uint64_t seed) {
    VSSLayerParams p;
    p.channels = channels;
    const std::int64_t inner = 2 * channels;
    p.ln_gamma = store.add(prefix + ".norm.gamma", Tensor::full(dt, {channels}, 1.0));
    p.ln_beta = store.add(prefix + ".norm.beta", Tensor::zeros(dt, {channels}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    p.expand_w = store.add(
        prefix + ".expand.weight",
        init_uniform(dt, {4 * channels, channels}, bound, seed, prefix + ".expand.weight"));
    p.expand_b = store.add(prefix + ".expand.bias", Tensor::zeros(dt, {4 * channels}));
    p.dw_w = store.add(prefix + ".dwconv.weight",
                       init_conv_weight(dt, {inner, 1, 3, 3}, seed, prefix + ".dwconv.weight"));
    p.dw_b = store.add(prefix + ".dwconv.bias", Tensor::zeros(dt, {inner}));
    p.ss2d = make_ss2d_params(store, prefix + ".ss2d", inner, d_state, dt, seed);
    p.post_gamma = store.add(prefix + ".post_norm.gamma", Tensor::full(dt, {inner}, 1.0));
    p.post_beta = store.add(prefix + ".post_norm.beta", Tensor::zeros(dt, {inner}));
    const double out_bound = 1.0 / std::sqrt(static_cast<double>(inner));
    p.out_w = store.add(
        prefix + ".out_proj.weight",
        init_uniform(dt, {channels, inner}, out_bound, seed, prefix + ".out_proj.weight"));
    p.out_b = store.add(prefix + ".out_proj.bias", Tensor::zeros(dt, {channels}));
    return p;
}

}  // namespace vkan
