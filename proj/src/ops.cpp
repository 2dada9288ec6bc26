#include "vkan/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vkan {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void require_float(const Tensor& t, const char* what) {
    if (t.dtype() != DType::F32 && t.dtype() != DType::F64) {
        throw std::invalid_argument(std::string(what) + " must be f32 or f64, got " +
                                    dtype_name(t.dtype()));
    }
}

void require_same_float(const Tensor& a, const Tensor& b, const char* what) {
    require_float(a, what);
    if (a.dtype() != b.dtype()) {
        throw std::invalid_argument(std::string(what) + ": mixed dtypes " + dtype_name(a.dtype()) +
                                    " vs " + dtype_name(b.dtype()));
    }
}

// ---------------------------------------------------------------- broadcast

struct BroadcastPlan {
    std::vector<std::int64_t> out_shape;
    std::vector<std::int64_t> stride_a;  // 0 on broadcast dims
    std::vector<std::int64_t> stride_b;
};

std::vector<std::int64_t> dense_strides(const std::vector<std::int64_t>& shape) {
    std::vector<std::int64_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
    return s;
}

BroadcastPlan make_broadcast(const std::vector<std::int64_t>& a,
                             const std::vector<std::int64_t>& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    BroadcastPlan plan;
    plan.out_shape.resize(rank);
    plan.stride_a.assign(rank, 0);
    plan.stride_b.assign(rank, 0);
    const auto sa = dense_strides(a);
    const auto sb = dense_strides(b);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t out_d = rank - 1 - i;
        const std::int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument("shapes not broadcastable: " + shape_str(a) + " vs " +
                                        shape_str(b));
        }
        plan.out_shape[out_d] = std::max(da, db);
        if (da != 1) plan.stride_a[out_d] = sa[a.size() - 1 - i];
        if (db != 1) plan.stride_b[out_d] = sb[b.size() - 1 - i];
    }
    return plan;
}

template <typename T, typename F>
void broadcast_apply(const Tensor& a, const Tensor& b, Tensor& out, const BroadcastPlan& plan,
                     F f) {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = out.data<T>().data();
    const std::int64_t n = out.numel();
    const int rank = static_cast<int>(plan.out_shape.size());
    if (a.shape() == b.shape()) {  // fast path, no odometer
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
        return;
    }
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = f(pa[oa], pb[ob]);
        for (int d = rank - 1; d >= 0; --d) {
            ++idx[d];
            oa += plan.stride_a[d];
            ob += plan.stride_b[d];
            if (idx[d] < plan.out_shape[d]) break;
            idx[d] = 0;
            oa -= plan.stride_a[d] * plan.out_shape[d];
            ob -= plan.stride_b[d] * plan.out_shape[d];
        }
    }
}

template <typename F>
Var broadcast_binary(const Var& a, const Var& b, F f, BackwardFn bw) {
    require_same_float(a.value(), b.value(), "binary op");
    const auto plan = make_broadcast(a.shape(), b.shape());
    Tensor out(a.dtype(), plan.out_shape);
    dispatch_float(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        broadcast_apply<T>(a.value(), b.value(), out, plan,
                           [&](T x, T y) { return static_cast<T>(f(static_cast<double>(x), static_cast<double>(y))); });
    });
    return make_op(std::move(out), {a, b}, std::move(bw));
}

}  // namespace

Tensor reduce_to_shape(const Tensor& g, const std::vector<std::int64_t>& target) {
    if (g.shape() == target) return g;
    Tensor out(g.dtype(), target);
    const int rank = static_cast<int>(g.rank());
    std::vector<std::int64_t> tstride(rank, 0);
    const auto ds = dense_strides(target);
    for (int i = 0; i < rank; ++i) {
        const int gi = rank - 1 - i;
        const std::int64_t td = i < static_cast<int>(target.size()) ? target[target.size() - 1 - i] : 1;
        if (td != 1 && td != g.shape()[gi]) {
            throw std::invalid_argument("reduce_to_shape: incompatible " + shape_str(g.shape()) +
                                        " -> " + shape_str(target));
        }
        if (td != 1) tstride[gi] = ds[target.size() - 1 - i];
    }
    dispatch_float(g.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pg = g.data<T>().data();
        T* po = out.data<T>().data();
        std::vector<std::int64_t> idx(rank, 0);
        std::int64_t ot = 0;
        const std::int64_t n = g.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            po[ot] += pg[i];
            for (int d = rank - 1; d >= 0; --d) {
                ++idx[d];
                ot += tstride[d];
                if (idx[d] < g.shape()[d]) break;
                idx[d] = 0;
                ot -= tstride[d] * g.shape()[d];
            }
        }
    });
    return out;
}

// ------------------------------------------------------------- arithmetic

Var add(const Var& a, const Var& b) {
    return broadcast_binary(
        a, b, [](double x, double y) { return x + y; },
        [an = a.node(), bn = b.node()](const Tensor& gy, const Tensor&) {
            if (an->requires_grad) an->accumulate(reduce_to_shape(gy, an->value.shape()));
            if (bn->requires_grad) bn->accumulate(reduce_to_shape(gy, bn->value.shape()));
        });
}

Var sub(const Var& a, const Var& b) {
    return broadcast_binary(
        a, b, [](double x, double y) { return x - y; },
        [an = a.node(), bn = b.node()](const Tensor& gy, const Tensor&) {
            if (an->requires_grad) an->accumulate(reduce_to_shape(gy, an->value.shape()));
            if (bn->requires_grad) {
                Tensor ng(gy.dtype(), gy.shape());
                dispatch_float(gy.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    auto s = gy.data<T>();
                    auto d = ng.data<T>();
                    for (std::size_t i = 0; i < s.size(); ++i) d[i] = -s[i];
                });
                bn->accumulate(reduce_to_shape(ng, bn->value.shape()));
            }
        });
}

namespace {

// gy (out frame) combined pointwise with a broadcast operand, then reduced.
template <typename F>
Tensor grad_times(const Tensor& gy, const Tensor& other, const std::vector<std::int64_t>& target,
                  F f) {
    const auto plan = make_broadcast(gy.shape(), other.shape());
    Tensor tmp(gy.dtype(), plan.out_shape);
    dispatch_float(gy.dtype(), [&](auto tag) {
        using T = decltype(tag);
        broadcast_apply<T>(gy, other, tmp, plan, [&](T x, T y) {
            return static_cast<T>(f(static_cast<double>(x), static_cast<double>(y)));
        });
    });
    return reduce_to_shape(tmp, target);
}

}  // namespace

Var mul(const Var& a, const Var& b) {
    return broadcast_binary(
        a, b, [](double x, double y) { return x * y; },
        [an = a.node(), bn = b.node()](const Tensor& gy, const Tensor&) {
            if (an->requires_grad) {
                an->accumulate(grad_times(gy, bn->value, an->value.shape(),
                                          [](double g, double y) { return g * y; }));
            }
            if (bn->requires_grad) {
                bn->accumulate(grad_times(gy, an->value, bn->value.shape(),
                                          [](double g, double x) { return g * x; }));
            }
        });
}

Var divide(const Var& a, const Var& b) {
    return broadcast_binary(
        a, b, [](double x, double y) { return x / y; },
        [an = a.node(), bn = b.node()](const Tensor& gy, const Tensor&) {
            if (an->requires_grad) {
                an->accumulate(grad_times(gy, bn->value, an->value.shape(),
                                          [](double g, double y) { return g / y; }));
            }
            if (bn->requires_grad) {
                // d(a/b)/db = -a / b^2; combine in the output frame.
                const auto plan = make_broadcast(an->value.shape(), bn->value.shape());
                Tensor ratio(gy.dtype(), plan.out_shape);
                dispatch_float(gy.dtype(), [&](auto tag) {
                    using T = decltype(tag);
                    broadcast_apply<T>(an->value, bn->value, ratio, plan, [](T x, T y) {
                        const double yd = static_cast<double>(y);
                        return static_cast<T>(-static_cast<double>(x) / (yd * yd));
                    });
                });
                bn->accumulate(grad_times(gy, ratio, bn->value.shape(),
                                          [](double g, double r) { return g * r; }));
            }
        });
}

namespace {

// df receives (x, y) where y is the forward output.
template <typename F, typename DF>
Var pointwise_unary(const Var& x, F f, DF df) {
    require_float(x.value(), "unary op input");
    const Tensor& xv = x.value();
    Tensor out(xv.dtype(), xv.shape());
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto src = xv.data<T>();
        auto dst = out.data<T>();
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i] = static_cast<T>(f(static_cast<double>(src[i])));
        }
    });
    return make_op(std::move(out), {x}, [xn = x.node(), df](const Tensor& gy, const Tensor& y) {
        if (!xn->requires_grad) return;
        Tensor gx(gy.dtype(), gy.shape());
        dispatch_float(gy.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto g = gy.data<T>();
            auto xs = xn->value.data<T>();
            auto ys = y.data<T>();
            auto d = gx.data<T>();
            for (std::size_t i = 0; i < g.size(); ++i) {
                d[i] = static_cast<T>(static_cast<double>(g[i]) *
                                      df(static_cast<double>(xs[i]), static_cast<double>(ys[i])));
            }
        });
        xn->accumulate(gx);
    });
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus_d(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

Var neg(const Var& x) {
    return pointwise_unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Var scale(const Var& x, double c) {
    return pointwise_unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var add_scalar(const Var& x, double c) {
    return pointwise_unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var exp(const Var& x) {
    return pointwise_unary(x, [](double v) { return std::exp(v); },
                           [](double, double y) { return y; });
}

Var log(const Var& x) {
    return pointwise_unary(x, [](double v) { return std::log(v); },
                           [](double v, double) { return 1.0 / v; });
}

Var activation(const Var& x, Act kind) {
    switch (kind) {
        case Act::Relu: return relu(x);
        case Act::Silu: return silu(x);
        case Act::Sigmoid: return sigmoid(x);
        case Act::Softplus: return softplus(x);
    }
    throw std::invalid_argument("unknown activation kind");
}

Var relu(const Var& x) {
    return pointwise_unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                           [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var silu(const Var& x) {
    return pointwise_unary(x, [](double v) { return v * sigmoid_d(v); },
                           [](double v, double) {
                               const double s = sigmoid_d(v);
                               return s * (1.0 + v * (1.0 - s));
                           });
}

Var sigmoid(const Var& x) {
    return pointwise_unary(x, [](double v) { return sigmoid_d(v); },
                           [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& x) {
    return pointwise_unary(x, [](double v) { return softplus_d(v); },
                           [](double v, double) { return sigmoid_d(v); });
}

// ----------------------------------------------------------------- softmax

namespace {

template <typename T>
void softmax_rows(const T* src, T* dst, std::int64_t rows, std::int64_t cols, bool log_form) {
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* s = src + r * cols;
        T* d = dst + r * cols;
        double mx = static_cast<double>(s[0]);
        for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, static_cast<double>(s[c]));
        double sum = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) sum += std::exp(static_cast<double>(s[c]) - mx);
        if (log_form) {
            const double lse = mx + std::log(sum);
            for (std::int64_t c = 0; c < cols; ++c) d[c] = static_cast<T>(static_cast<double>(s[c]) - lse);
        } else {
            for (std::int64_t c = 0; c < cols; ++c) {
                d[c] = static_cast<T>(std::exp(static_cast<double>(s[c]) - mx) / sum);
            }
        }
    }
}

}  // namespace

Var softmax_lastdim(const Var& x) {
    require_float(x.value(), "softmax input");
    const Tensor& xv = x.value();
    const std::int64_t cols = xv.rank() ? xv.shape().back() : 1;
    const std::int64_t rows = xv.numel() / cols;
    Tensor out(xv.dtype(), xv.shape());
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        softmax_rows<T>(xv.data<T>().data(), out.data<T>().data(), rows, cols, false);
    });
    return make_op(std::move(out), {x},
                   [xn = x.node(), rows, cols](const Tensor& gy, const Tensor& y) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), gy.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           const T* p = y.data<T>().data();
                           T* d = gx.data<T>().data();
                           for (std::int64_t r = 0; r < rows; ++r) {
                               double dot = 0.0;
                               for (std::int64_t c = 0; c < cols; ++c) {
                                   dot += static_cast<double>(g[r * cols + c]) *
                                          static_cast<double>(p[r * cols + c]);
                               }
                               for (std::int64_t c = 0; c < cols; ++c) {
                                   const std::int64_t i = r * cols + c;
                                   d[i] = static_cast<T>(static_cast<double>(p[i]) *
                                                         (static_cast<double>(g[i]) - dot));
                               }
                           }
                       });
                       xn->accumulate(gx);
                   });
}

Var log_softmax_lastdim(const Var& x) {
    require_float(x.value(), "log_softmax input");
    const Tensor& xv = x.value();
    const std::int64_t cols = xv.rank() ? xv.shape().back() : 1;
    const std::int64_t rows = xv.numel() / cols;
    Tensor out(xv.dtype(), xv.shape());
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        softmax_rows<T>(xv.data<T>().data(), out.data<T>().data(), rows, cols, true);
    });
    return make_op(std::move(out), {x},
                   [xn = x.node(), rows, cols](const Tensor& gy, const Tensor& y) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), gy.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           const T* ly = y.data<T>().data();
                           T* d = gx.data<T>().data();
                           for (std::int64_t r = 0; r < rows; ++r) {
                               double gsum = 0.0;
                               for (std::int64_t c = 0; c < cols; ++c) {
                                   gsum += static_cast<double>(g[r * cols + c]);
                               }
                               for (std::int64_t c = 0; c < cols; ++c) {
                                   const std::int64_t i = r * cols + c;
                                   d[i] = static_cast<T>(static_cast<double>(g[i]) -
                                                         std::exp(static_cast<double>(ly[i])) * gsum);
                               }
                           }
                       });
                       xn->accumulate(gx);
                   });
}

// ------------------------------------------------------------------- shape

Var reshape(const Var& x, std::vector<std::int64_t> new_shape) {
    Tensor out = x.value().reshaped(std::move(new_shape));
    return make_op(std::move(out), {x}, [xn = x.node()](const Tensor& gy, const Tensor&) {
        if (xn->requires_grad) xn->accumulate(gy.reshaped(xn->value.shape()));
    });
}

Tensor permute_tensor(const Tensor& x, const std::vector<int>& axes) {
    const int rank = static_cast<int>(x.rank());
    require(static_cast<int>(axes.size()) == rank, "permute axes rank mismatch");
    std::vector<bool> seen(rank, false);
    for (int a : axes) {
        require(a >= 0 && a < rank && !seen[a], "invalid permutation");
        seen[a] = true;
    }
    std::vector<std::int64_t> out_shape(rank);
    for (int i = 0; i < rank; ++i) out_shape[i] = x.shape()[axes[i]];
    Tensor out(x.dtype(), out_shape);
    if (rank == 0) return x;
    const auto xs = dense_strides(x.shape());
    std::vector<std::int64_t> src_stride(rank);
    for (int i = 0; i < rank; ++i) src_stride[i] = xs[axes[i]];
    dispatch_float(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* ps = x.data<T>().data();
        T* pd = out.data<T>().data();
        std::vector<std::int64_t> idx(rank, 0);
        std::int64_t so = 0;
        const std::int64_t n = x.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            pd[i] = ps[so];
            for (int d = rank - 1; d >= 0; --d) {
                ++idx[d];
                so += src_stride[d];
                if (idx[d] < out_shape[d]) break;
                idx[d] = 0;
                so -= src_stride[d] * out_shape[d];
            }
        }
    });
    return out;
}

Var permute(const Var& x, std::vector<int> axes) {
    Tensor out = permute_tensor(x.value(), axes);
    std::vector<int> inverse(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = static_cast<int>(i);
    return make_op(std::move(out), {x},
                   [xn = x.node(), inverse](const Tensor& gy, const Tensor&) {
                       if (xn->requires_grad) xn->accumulate(permute_tensor(gy, inverse));
                   });
}

namespace {

struct AxisSplit {
    std::int64_t outer, axis, inner;
};

AxisSplit split_at(const std::vector<std::int64_t>& shape, int axis) {
    AxisSplit s{1, shape[axis], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

Var concat(const std::vector<Var>& parts, int axis) {
    require(!parts.empty(), "concat of zero tensors");
    const auto& first = parts[0].value();
    require(axis >= 0 && axis < static_cast<int>(first.rank()), "concat axis out of range");
    std::int64_t total_axis = 0;
    for (const auto& p : parts) {
        require(p.value().rank() == first.rank(), "concat rank mismatch");
        require(p.value().dtype() == first.dtype(), "concat dtype mismatch");
        for (std::size_t d = 0; d < first.rank(); ++d) {
            if (static_cast<int>(d) != axis) {
                require(p.value().shape()[d] == first.shape()[d],
                        "concat shape mismatch off-axis: " + shape_str(p.value().shape()) + " vs " +
                            shape_str(first.shape()));
            }
        }
        total_axis += p.value().shape()[axis];
    }
    auto out_shape = first.shape();
    out_shape[axis] = total_axis;
    Tensor out(first.dtype(), out_shape);
    const auto os = split_at(out_shape, axis);
    std::vector<std::int64_t> axis_sizes;
    dispatch_float(first.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* pd = out.data<T>().data();
        std::int64_t axis_off = 0;
        for (const auto& p : parts) {
            const auto ps = split_at(p.value().shape(), axis);
            const T* src = p.value().data<T>().data();
            for (std::int64_t o = 0; o < ps.outer; ++o) {
                std::copy_n(src + o * ps.axis * ps.inner, ps.axis * ps.inner,
                            pd + (o * os.axis + axis_off) * os.inner);
            }
            axis_off += ps.axis;
        }
    });
    for (const auto& p : parts) axis_sizes.push_back(p.value().shape()[axis]);
    return make_op(std::move(out), parts,
                   [parts, axis, axis_sizes](const Tensor& gy, const Tensor&) {
                       const auto gs = split_at(gy.shape(), axis);
                       std::int64_t axis_off = 0;
                       for (std::size_t k = 0; k < parts.size(); ++k) {
                           const auto n = parts[k].node();
                           const std::int64_t ax = axis_sizes[k];
                           if (n->requires_grad) {
                               Tensor gp(gy.dtype(), n->value.shape());
                               dispatch_float(gy.dtype(), [&](auto tag) {
                                   using T = decltype(tag);
                                   const T* src = gy.data<T>().data();
                                   T* dst = gp.data<T>().data();
                                   for (std::int64_t o = 0; o < gs.outer; ++o) {
                                       std::copy_n(src + (o * gs.axis + axis_off) * gs.inner,
                                                   ax * gs.inner, dst + o * ax * gs.inner);
                                   }
                               });
                               n->accumulate(gp);
                           }
                           axis_off += ax;
                       }
                   });
}

Var slice(const Var& x, int axis, std::int64_t start, std::int64_t len) {
    const auto& xv = x.value();
    require(axis >= 0 && axis < static_cast<int>(xv.rank()), "slice axis out of range");
    require(start >= 0 && len >= 1 && start + len <= xv.shape()[axis],
            "slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of range for dim " + std::to_string(xv.shape()[axis]));
    auto out_shape = xv.shape();
    out_shape[axis] = len;
    Tensor out(xv.dtype(), out_shape);
    const auto xs = split_at(xv.shape(), axis);
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t o = 0; o < xs.outer; ++o) {
            std::copy_n(src + (o * xs.axis + start) * xs.inner, len * xs.inner,
                        dst + o * len * xs.inner);
        }
    });
    return make_op(std::move(out), {x},
                   [xn = x.node(), axis, start, len](const Tensor& gy, const Tensor&) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), xn->value.shape());
                       const auto xs = split_at(xn->value.shape(), axis);
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* src = gy.data<T>().data();
                           T* dst = gx.data<T>().data();
                           for (std::int64_t o = 0; o < xs.outer; ++o) {
                               std::copy_n(src + o * len * xs.inner, len * xs.inner,
                                           dst + (o * xs.axis + start) * xs.inner);
                           }
                       });
                       xn->accumulate(gx);
                   });
}

Var slice_lastdim(const Var& x, std::int64_t start, std::int64_t len) {
    return slice(x, static_cast<int>(x.value().rank()) - 1, start, len);
}

// -------------------------------------------------------------- reductions

Var sum_all(const Var& x) {
    require_float(x.value(), "sum input");
    double total = 0.0;
    dispatch_float(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        for (T v : x.value().data<T>()) total += static_cast<double>(v);
    });
    Tensor out = Tensor::scalar(x.dtype(), total);
    return make_op(std::move(out), {x}, [xn = x.node()](const Tensor& gy, const Tensor&) {
        if (!xn->requires_grad) return;
        xn->accumulate(Tensor::full(gy.dtype(), xn->value.shape(), gy.scalar()));
    });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Var sum_lastdim(const Var& x) {
    require_float(x.value(), "sum input");
    const auto& xv = x.value();
    require(xv.rank() >= 1, "sum_lastdim needs rank >= 1");
    const std::int64_t cols = xv.shape().back();
    const std::int64_t rows = xv.numel() / cols;
    std::vector<std::int64_t> out_shape(xv.shape().begin(), xv.shape().end() - 1);
    Tensor out(xv.dtype(), out_shape);
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::int64_t c = 0; c < cols; ++c) s += static_cast<double>(src[r * cols + c]);
            dst[r] = static_cast<T>(s);
        }
    });
    return make_op(std::move(out), {x}, [xn = x.node(), rows, cols](const Tensor& gy, const Tensor&) {
        if (!xn->requires_grad) return;
        Tensor gx(gy.dtype(), xn->value.shape());
        dispatch_float(gy.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = gy.data<T>().data();
            T* d = gx.data<T>().data();
            for (std::int64_t r = 0; r < rows; ++r) {
                std::fill_n(d + r * cols, cols, g[r]);
            }
        });
        xn->accumulate(gx);
    });
}

namespace {

void require_nchw(const Tensor& t, const char* what) {
    require(t.rank() == 4, std::string(what) + " must be rank-4 NCHW, got shape " +
                               shape_str(t.shape()));
}

}  // namespace

Var channel_max(const Var& x) {
    require_nchw(x.value(), "channel_max input");
    const auto& xv = x.value();
    const std::int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor out(xv.dtype(), {B, 1, xv.dim(2), xv.dim(3)});
    Tensor argmax = Tensor::zeros(DType::I64, {B, 1, xv.dim(2), xv.dim(3)});
    auto am = argmax.data<std::int64_t>();
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t p = 0; p < HW; ++p) {
                T best = src[(b * C) * HW + p];
                std::int64_t bc = 0;
                for (std::int64_t c = 1; c < C; ++c) {
                    const T v = src[(b * C + c) * HW + p];
                    if (v > best) {
                        best = v;
                        bc = c;
                    }
                }
                dst[b * HW + p] = best;
                am[b * HW + p] = bc;
            }
        }
    });
    return make_op(std::move(out), {x},
                   [xn = x.node(), argmax, B, C, HW](const Tensor& gy, const Tensor&) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), xn->value.shape());
                       auto am = argmax.data<std::int64_t>();
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           T* d = gx.data<T>().data();
                           for (std::int64_t b = 0; b < B; ++b) {
                               for (std::int64_t p = 0; p < HW; ++p) {
                                   d[(b * C + am[b * HW + p]) * HW + p] += g[b * HW + p];
                               }
                           }
                       });
                       xn->accumulate(gx);
                   });
}

Var channel_mean(const Var& x) {
    require_nchw(x.value(), "channel_mean input");
    const auto& xv = x.value();
    const std::int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor out(xv.dtype(), {B, 1, xv.dim(2), xv.dim(3)});
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t p = 0; p < HW; ++p) {
                double s = 0.0;
                for (std::int64_t c = 0; c < C; ++c) s += static_cast<double>(src[(b * C + c) * HW + p]);
                dst[b * HW + p] = static_cast<T>(s / static_cast<double>(C));
            }
        }
    });
    return make_op(std::move(out), {x}, [xn = x.node(), B, C, HW](const Tensor& gy, const Tensor&) {
        if (!xn->requires_grad) return;
        Tensor gx(gy.dtype(), xn->value.shape());
        dispatch_float(gy.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = gy.data<T>().data();
            T* d = gx.data<T>().data();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t p = 0; p < HW; ++p) {
                    const T v = static_cast<T>(static_cast<double>(g[b * HW + p]) / C);
                    for (std::int64_t c = 0; c < C; ++c) d[(b * C + c) * HW + p] = v;
                }
            }
        });
        xn->accumulate(gx);
    });
}

// ------------------------------------------------------------------ linear

Var linear(const Var& x, const Var& weight, const std::optional<Var>& bias) {
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    require_same_float(xv, wv, "linear");
    require(wv.rank() == 2, "linear weight must be OUTxIN, got " + shape_str(wv.shape()));
    require(xv.rank() >= 1, "linear input must have rank >= 1");
    const std::int64_t in = wv.dim(1), out_dim = wv.dim(0);
    require(xv.shape().back() == in,
            "linear: input last dim " + std::to_string(xv.shape().back()) + " != weight IN " +
                std::to_string(in));
    if (bias) {
        require(bias->value().rank() == 1 && bias->value().dim(0) == out_dim,
                "linear bias must have shape [" + std::to_string(out_dim) + "]");
    }
    const std::int64_t rows = xv.numel() / in;
    auto out_shape = xv.shape();
    out_shape.back() = out_dim;
    Tensor out(xv.dtype(), out_shape);
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        ConstMatMap<T> X(xv.data<T>().data(), rows, in);
        ConstMatMap<T> W(wv.data<T>().data(), out_dim, in);
        MatMap<T> O(out.data<T>().data(), rows, out_dim);
        O.noalias() = X * W.transpose();
        if (bias) {
            ConstMatMap<T> Bv(bias->value().data<T>().data(), 1, out_dim);
            O.rowwise() += Bv.row(0);
        }
    });
    std::vector<Var> parents{x, weight};
    if (bias) parents.push_back(*bias);
    auto bn = bias ? bias->node() : nullptr;
    return make_op(std::move(out), std::move(parents),
                   [xn = x.node(), wn = weight.node(), bn, rows, in, out_dim](const Tensor& gy,
                                                                              const Tensor&) {
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           ConstMatMap<T> G(gy.data<T>().data(), rows, out_dim);
                           if (xn->requires_grad) {
                               Tensor gx(gy.dtype(), xn->value.shape());
                               ConstMatMap<T> W(wn->value.data<T>().data(), out_dim, in);
                               MatMap<T> GX(gx.data<T>().data(), rows, in);
                               GX.noalias() = G * W;
                               xn->accumulate(gx);
                           }
                           if (wn->requires_grad) {
                               Tensor gw(gy.dtype(), wn->value.shape());
                               ConstMatMap<T> X(xn->value.data<T>().data(), rows, in);
                               MatMap<T> GW(gw.data<T>().data(), out_dim, in);
                               GW.noalias() = G.transpose() * X;
                               wn->accumulate(gw);
                           }
                           if (bn && bn->requires_grad) {
                               Tensor gb(gy.dtype(), bn->value.shape());
                               MatMap<T> GB(gb.data<T>().data(), 1, out_dim);
                               GB = G.colwise().sum();
                               bn->accumulate(gb);
                           }
                       });
                   });
}

// ------------------------------------------------------------------ conv2d

namespace {

struct ConvGeom {
    std::int64_t B, IC, H, W;
    std::int64_t OC, ICg, KH, KW;
    std::int64_t OH, OW;
    std::int64_t stride, pad, groups;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, std::int64_t stride, std::int64_t pad,
                       std::int64_t groups) {
    require_nchw(x, "conv2d input");
    require(w.rank() == 4, "conv2d weight must be OCx(IC/g)xKHxKW, got " + shape_str(w.shape()));
    require(stride >= 1, "conv2d stride must be >= 1");
    require(pad >= 0, "conv2d padding must be >= 0");
    require(groups >= 1, "conv2d groups must be >= 1");
    ConvGeom g;
    g.B = x.dim(0);
    g.IC = x.dim(1);
    g.H = x.dim(2);
    g.W = x.dim(3);
    g.OC = w.dim(0);
    g.ICg = w.dim(1);
    g.KH = w.dim(2);
    g.KW = w.dim(3);
    g.stride = stride;
    g.pad = pad;
    g.groups = groups;
    require(g.IC % groups == 0, "conv2d: input channels " + std::to_string(g.IC) +
                                    " not divisible by groups " + std::to_string(groups));
    require(g.OC % groups == 0, "conv2d: output channels " + std::to_string(g.OC) +
                                    " not divisible by groups " + std::to_string(groups));
    require(g.ICg == g.IC / groups, "conv2d: weight dim1 " + std::to_string(g.ICg) +
                                        " != IC/groups " + std::to_string(g.IC / groups));
    require(g.H + 2 * pad >= g.KH && g.W + 2 * pad >= g.KW,
            "conv2d: kernel larger than padded input");
    g.OH = (g.H + 2 * pad - g.KH) / stride + 1;
    g.OW = (g.W + 2 * pad - g.KW) / stride + 1;
    require(g.OH >= 1 && g.OW >= 1, "conv2d: zero-size output");
    return g;
}

template <typename T>
void im2col(const T* src, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t KH,
            std::int64_t KW, std::int64_t stride, std::int64_t pad, std::int64_t OH,
            std::int64_t OW, T* col) {
    const std::int64_t ohw = OH * OW;
    std::int64_t r = 0;
    for (std::int64_t c = 0; c < C; ++c) {
        const T* plane = src + c * H * W;
        for (std::int64_t kh = 0; kh < KH; ++kh) {
            for (std::int64_t kw = 0; kw < KW; ++kw, ++r) {
                T* dst = col + r * ohw;
                for (std::int64_t oh = 0; oh < OH; ++oh) {
                    const std::int64_t ih = oh * stride + kh - pad;
                    T* drow = dst + oh * OW;
                    if (ih < 0 || ih >= H) {
                        std::fill_n(drow, OW, T(0));
                        continue;
                    }
                    const T* srow = plane + ih * W;
                    for (std::int64_t ow = 0; ow < OW; ++ow) {
                        const std::int64_t iw = ow * stride + kw - pad;
                        drow[ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t KH,
                std::int64_t KW, std::int64_t stride, std::int64_t pad, std::int64_t OH,
                std::int64_t OW, T* dst) {
    const std::int64_t ohw = OH * OW;
    std::int64_t r = 0;
    for (std::int64_t c = 0; c < C; ++c) {
        T* plane = dst + c * H * W;
        for (std::int64_t kh = 0; kh < KH; ++kh) {
            for (std::int64_t kw = 0; kw < KW; ++kw, ++r) {
                const T* srcr = col + r * ohw;
                for (std::int64_t oh = 0; oh < OH; ++oh) {
                    const std::int64_t ih = oh * stride + kh - pad;
                    if (ih < 0 || ih >= H) continue;
                    T* drow = plane + ih * W;
                    const T* srow = srcr + oh * OW;
                    for (std::int64_t ow = 0; ow < OW; ++ow) {
                        const std::int64_t iw = ow * stride + kw - pad;
                        if (iw >= 0 && iw < W) drow[iw] += srow[ow];
                    }
                }
            }
        }
    }
}

template <typename T>
Tensor conv2d_fwd(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvGeom& g) {
    Tensor out(x.dtype(), {g.B, g.OC, g.OH, g.OW});
    const std::int64_t K = g.ICg * g.KH * g.KW;
    const std::int64_t ohw = g.OH * g.OW;
    const std::int64_t ocg = g.OC / g.groups;
    std::vector<T> col(static_cast<std::size_t>(g.IC * g.KH * g.KW * ohw));
    const T* px = x.data<T>().data();
    const T* pw = w.data<T>().data();
    T* po = out.data<T>().data();
    for (std::int64_t b = 0; b < g.B; ++b) {
        im2col<T>(px + b * g.IC * g.H * g.W, g.IC, g.H, g.W, g.KH, g.KW, g.stride, g.pad, g.OH,
                  g.OW, col.data());
        for (std::int64_t grp = 0; grp < g.groups; ++grp) {
            ConstMatMap<T> Wg(pw + grp * ocg * K, ocg, K);
            ConstMatMap<T> Cg(col.data() + grp * K * ohw, K, ohw);
            MatMap<T> Og(po + (b * g.OC + grp * ocg) * ohw, ocg, ohw);
            Og.noalias() = Wg * Cg;
        }
        if (bias) {
            const T* pb = bias->data<T>().data();
            for (std::int64_t oc = 0; oc < g.OC; ++oc) {
                T* row = po + (b * g.OC + oc) * ohw;
                const T bv = pb[oc];
                for (std::int64_t i = 0; i < ohw; ++i) row[i] += bv;
            }
        }
    }
    return out;
}

template <typename T>
void conv2d_bwd(const Tensor& x, const Tensor& w, const Tensor& gy, const ConvGeom& g,
                Tensor* gx, Tensor* gw, Tensor* gb) {
    const std::int64_t K = g.ICg * g.KH * g.KW;
    const std::int64_t ohw = g.OH * g.OW;
    const std::int64_t ocg = g.OC / g.groups;
    std::vector<T> col(static_cast<std::size_t>(g.IC * g.KH * g.KW * ohw));
    std::vector<T> dcol(gx ? col.size() : 0);
    const T* px = x.data<T>().data();
    const T* pw = w.data<T>().data();
    const T* pg = gy.data<T>().data();
    for (std::int64_t b = 0; b < g.B; ++b) {
        if (gw) {
            im2col<T>(px + b * g.IC * g.H * g.W, g.IC, g.H, g.W, g.KH, g.KW, g.stride, g.pad, g.OH,
                      g.OW, col.data());
        }
        for (std::int64_t grp = 0; grp < g.groups; ++grp) {
            ConstMatMap<T> Gg(pg + (b * g.OC + grp * ocg) * ohw, ocg, ohw);
            if (gw) {
                ConstMatMap<T> Cg(col.data() + grp * K * ohw, K, ohw);
                MatMap<T> GW(gw->data<T>().data() + grp * ocg * K, ocg, K);
                GW.noalias() += Gg * Cg.transpose();
            }
            if (gx) {
                ConstMatMap<T> Wg(pw + grp * ocg * K, ocg, K);
                MatMap<T> DC(dcol.data() + grp * K * ohw, K, ohw);
                DC.noalias() = Wg.transpose() * Gg;
            }
        }
        if (gx) {
            col2im_add<T>(dcol.data(), g.IC, g.H, g.W, g.KH, g.KW, g.stride, g.pad, g.OH, g.OW,
                          gx->data<T>().data() + b * g.IC * g.H * g.W);
        }
        if (gb) {
            T* pb = gb->data<T>().data();
            for (std::int64_t oc = 0; oc < g.OC; ++oc) {
                double s = 0.0;
                const T* row = pg + (b * g.OC + oc) * ohw;
                for (std::int64_t i = 0; i < ohw; ++i) s += static_cast<double>(row[i]);
                pb[oc] += static_cast<T>(s);
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias,
           std::int64_t stride, std::int64_t padding, std::int64_t groups) {
    const Tensor& xv = input.value();
    const Tensor& wv = weight.value();
    require_same_float(xv, wv, "conv2d");
    const ConvGeom g = conv_geometry(xv, wv, stride, padding, groups);
    if (bias) {
        require(bias->value().rank() == 1 && bias->value().dim(0) == g.OC,
                "conv2d bias must have shape [" + std::to_string(g.OC) + "]");
    }
    Tensor out = dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        return conv2d_fwd<T>(xv, wv, bias ? &bias->value() : nullptr, g);
    });
    std::vector<Var> parents{input, weight};
    if (bias) parents.push_back(*bias);
    auto bn = bias ? bias->node() : nullptr;
    return make_op(std::move(out), std::move(parents),
                   [xn = input.node(), wn = weight.node(), bn, g](const Tensor& gy, const Tensor&) {
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           Tensor gx, gw, gb;
                           const bool want_x = xn->requires_grad;
                           const bool want_w = wn->requires_grad;
                           const bool want_b = bn && bn->requires_grad;
                           if (want_x) gx = Tensor(gy.dtype(), xn->value.shape());
                           if (want_w) gw = Tensor(gy.dtype(), wn->value.shape());
                           if (want_b) gb = Tensor(gy.dtype(), bn->value.shape());
                           conv2d_bwd<T>(xn->value, wn->value, gy, g, want_x ? &gx : nullptr,
                                         want_w ? &gw : nullptr, want_b ? &gb : nullptr);
                           if (want_x) xn->accumulate(gx);
                           if (want_w) wn->accumulate(gw);
                           if (want_b) bn->accumulate(gb);
                       });
                   });
}

// -------------------------------------------------------- transposed conv

namespace {

struct TConvGeom {
    std::int64_t B, C, H, W;     // input
    std::int64_t CO, KH, KW;     // weight C x CO x KH x KW
    std::int64_t OH, OW;         // output
    std::int64_t stride;
};

TConvGeom tconv_geometry(const Tensor& x, const Tensor& w, std::int64_t stride) {
    require_nchw(x, "transposed_conv2d input");
    require(w.rank() == 4, "transposed_conv2d weight must be CxC'xKHxKW, got " +
                               shape_str(w.shape()));
    require(stride >= 1, "transposed_conv2d stride must be >= 1");
    TConvGeom g;
    g.B = x.dim(0);
    g.C = x.dim(1);
    g.H = x.dim(2);
    g.W = x.dim(3);
    require(w.dim(0) == g.C, "transposed_conv2d: weight dim0 " + std::to_string(w.dim(0)) +
                                 " != input channels " + std::to_string(g.C));
    g.CO = w.dim(1);
    g.KH = w.dim(2);
    g.KW = w.dim(3);
    g.stride = stride;
    g.OH = (g.H - 1) * stride + g.KH;
    g.OW = (g.W - 1) * stride + g.KW;
    return g;
}

}  // namespace

Var transposed_conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias,
                      std::int64_t stride) {
    const Tensor& xv = input.value();
    const Tensor& wv = weight.value();
    require_same_float(xv, wv, "transposed_conv2d");
    const TConvGeom g = tconv_geometry(xv, wv, stride);
    if (bias) {
        require(bias->value().rank() == 1 && bias->value().dim(0) == g.CO,
                "transposed_conv2d bias must have shape [" + std::to_string(g.CO) + "]");
    }
    const std::int64_t K = g.CO * g.KH * g.KW;
    const std::int64_t hw = g.H * g.W;
    Tensor out(xv.dtype(), {g.B, g.CO, g.OH, g.OW});
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> col(static_cast<std::size_t>(K * hw));
        const T* px = xv.data<T>().data();
        const T* pw = wv.data<T>().data();
        T* po = out.data<T>().data();
        for (std::int64_t b = 0; b < g.B; ++b) {
            ConstMatMap<T> X(px + b * g.C * hw, g.C, hw);
            ConstMatMap<T> W(pw, g.C, K);
            MatMap<T> Col(col.data(), K, hw);
            Col.noalias() = W.transpose() * X;
            col2im_add<T>(col.data(), g.CO, g.OH, g.OW, g.KH, g.KW, g.stride, 0, g.H, g.W,
                          po + b * g.CO * g.OH * g.OW);
            if (bias) {
                const T* pb = bias->value().data<T>().data();
                for (std::int64_t co = 0; co < g.CO; ++co) {
                    T* row = po + (b * g.CO + co) * g.OH * g.OW;
                    for (std::int64_t i = 0; i < g.OH * g.OW; ++i) row[i] += pb[co];
                }
            }
        }
    });
    std::vector<Var> parents{input, weight};
    if (bias) parents.push_back(*bias);
    auto bn = bias ? bias->node() : nullptr;
    return make_op(
        std::move(out), std::move(parents),
        [xn = input.node(), wn = weight.node(), bn, g, K, hw](const Tensor& gy, const Tensor&) {
            dispatch_float(gy.dtype(), [&](auto tag) {
                using T = decltype(tag);
                std::vector<T> col(static_cast<std::size_t>(K * hw));
                const T* pg = gy.data<T>().data();
                Tensor gx, gw, gb;
                const bool want_x = xn->requires_grad;
                const bool want_w = wn->requires_grad;
                const bool want_b = bn && bn->requires_grad;
                if (want_x) gx = Tensor(gy.dtype(), xn->value.shape());
                if (want_w) gw = Tensor(gy.dtype(), wn->value.shape());
                if (want_b) gb = Tensor(gy.dtype(), bn->value.shape());
                for (std::int64_t b = 0; b < g.B; ++b) {
                    // im2col over the incoming gradient viewed as the fine grid.
                    im2col<T>(pg + b * g.CO * g.OH * g.OW, g.CO, g.OH, g.OW, g.KH, g.KW, g.stride,
                              0, g.H, g.W, col.data());
                    ConstMatMap<T> Col(col.data(), K, hw);
                    if (want_x) {
                        ConstMatMap<T> W(wn->value.data<T>().data(), g.C, K);
                        MatMap<T> GX(gx.data<T>().data() + b * g.C * hw, g.C, hw);
                        GX.noalias() = W * Col;
                    }
                    if (want_w) {
                        ConstMatMap<T> X(xn->value.data<T>().data() + b * g.C * hw, g.C, hw);
                        MatMap<T> GW(gw.data<T>().data(), g.C, K);
                        GW.noalias() += X * Col.transpose();
                    }
                    if (want_b) {
                        T* pb = gb.data<T>().data();
                        for (std::int64_t co = 0; co < g.CO; ++co) {
                            double s = 0.0;
                            const T* row = pg + (b * g.CO + co) * g.OH * g.OW;
                            for (std::int64_t i = 0; i < g.OH * g.OW; ++i) {
                                s += static_cast<double>(row[i]);
                            }
                            pb[co] += static_cast<T>(s);
                        }
                    }
                }
                if (want_x) xn->accumulate(gx);
                if (want_w) wn->accumulate(gw);
                if (want_b) bn->accumulate(gb);
            });
        });
}

// ----------------------------------------------------------------- pooling

Var pool2d(const Var& input, PoolKind kind, std::int64_t window) {
    const Tensor& xv = input.value();
    require_nchw(xv, "pool2d input");
    require(window >= 1, "pool2d window must be >= 1");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    require(H % window == 0 && W % window == 0,
            "pool2d: window " + std::to_string(window) + " does not divide spatial dims " +
                std::to_string(H) + "x" + std::to_string(W));
    const std::int64_t OH = H / window, OW = W / window;
    Tensor out(xv.dtype(), {B, C, OH, OW});
    Tensor argmax;
    if (kind == PoolKind::Max) argmax = Tensor::zeros(DType::I64, {B, C, OH, OW});
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        std::int64_t* am = kind == PoolKind::Max ? argmax.data<std::int64_t>().data() : nullptr;
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
            const T* plane = src + bc * H * W;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    if (kind == PoolKind::Max) {
                        T best = plane[oh * window * W + ow * window];
                        std::int64_t bi = oh * window * W + ow * window;
                        for (std::int64_t kh = 0; kh < window; ++kh) {
                            for (std::int64_t kw = 0; kw < window; ++kw) {
                                const std::int64_t i = (oh * window + kh) * W + ow * window + kw;
                                if (plane[i] > best) {
                                    best = plane[i];
                                    bi = i;
                                }
                            }
                        }
                        dst[bc * OH * OW + oh * OW + ow] = best;
                        am[bc * OH * OW + oh * OW + ow] = bi;
                    } else {
                        double s = 0.0;
                        for (std::int64_t kh = 0; kh < window; ++kh) {
                            for (std::int64_t kw = 0; kw < window; ++kw) {
                                s += static_cast<double>(
                                    plane[(oh * window + kh) * W + ow * window + kw]);
                            }
                        }
                        dst[bc * OH * OW + oh * OW + ow] =
                            static_cast<T>(s / static_cast<double>(window * window));
                    }
                }
            }
        }
    });
    return make_op(std::move(out), {input},
                   [xn = input.node(), kind, window, argmax, B, C, H, W, OH,
                    OW](const Tensor& gy, const Tensor&) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), xn->value.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           T* d = gx.data<T>().data();
                           if (kind == PoolKind::Max) {
                               const std::int64_t* am = argmax.data<std::int64_t>().data();
                               for (std::int64_t bc = 0; bc < B * C; ++bc) {
                                   for (std::int64_t o = 0; o < OH * OW; ++o) {
                                       d[bc * H * W + am[bc * OH * OW + o]] +=
                                           g[bc * OH * OW + o];
                                   }
                               }
                           } else {
                               const double inv = 1.0 / static_cast<double>(window * window);
                               for (std::int64_t bc = 0; bc < B * C; ++bc) {
                                   for (std::int64_t oh = 0; oh < OH; ++oh) {
                                       for (std::int64_t ow = 0; ow < OW; ++ow) {
                                           const T v = static_cast<T>(
                                               static_cast<double>(g[bc * OH * OW + oh * OW + ow]) *
                                               inv);
                                           for (std::int64_t kh = 0; kh < window; ++kh) {
                                               for (std::int64_t kw = 0; kw < window; ++kw) {
                                                   d[bc * H * W + (oh * window + kh) * W +
                                                     ow * window + kw] += v;
                                               }
                                           }
                                       }
                                   }
                               }
                           }
                       });
                       xn->accumulate(gx);
                   });
}

Var pool2d_global(const Var& input, PoolKind kind) {
    const Tensor& xv = input.value();
    require_nchw(xv, "global pool input");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor out(xv.dtype(), {B, C, 1, 1});
    Tensor argmax;
    if (kind == PoolKind::Max) argmax = Tensor::zeros(DType::I64, {B, C, 1, 1});
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        T* dst = out.data<T>().data();
        std::int64_t* am = kind == PoolKind::Max ? argmax.data<std::int64_t>().data() : nullptr;
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
            const T* plane = src + bc * HW;
            if (kind == PoolKind::Max) {
                T best = plane[0];
                std::int64_t bi = 0;
                for (std::int64_t i = 1; i < HW; ++i) {
                    if (plane[i] > best) {
                        best = plane[i];
                        bi = i;
                    }
                }
                dst[bc] = best;
                am[bc] = bi;
            } else {
                double s = 0.0;
                for (std::int64_t i = 0; i < HW; ++i) s += static_cast<double>(plane[i]);
                dst[bc] = static_cast<T>(s / static_cast<double>(HW));
            }
        }
    });
    return make_op(std::move(out), {input},
                   [xn = input.node(), kind, argmax, B, C, HW](const Tensor& gy, const Tensor&) {
                       if (!xn->requires_grad) return;
                       Tensor gx(gy.dtype(), xn->value.shape());
                       dispatch_float(gy.dtype(), [&](auto tag) {
                           using T = decltype(tag);
                           const T* g = gy.data<T>().data();
                           T* d = gx.data<T>().data();
                           if (kind == PoolKind::Max) {
                               const std::int64_t* am = argmax.data<std::int64_t>().data();
                               for (std::int64_t bc = 0; bc < B * C; ++bc) {
                                   d[bc * HW + am[bc]] += g[bc];
                               }
                           } else {
                               for (std::int64_t bc = 0; bc < B * C; ++bc) {
                                   const T v = static_cast<T>(static_cast<double>(g[bc]) / HW);
                                   for (std::int64_t i = 0; i < HW; ++i) d[bc * HW + i] += v;
                               }
                           }
                       });
                       xn->accumulate(gx);
                   });
}

// -------------------------------------------------------------- batch norm

Var batch_norm2d(const Var& input, const Var& gamma, const Var& beta, Var running_mean,
                 Var running_var, bool training, double momentum, double eps) {
    const Tensor& xv = input.value();
    require_nchw(xv, "batch_norm2d input");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    auto check_c = [&](const Tensor& t, const char* what) {
        require(t.rank() == 1 && t.dim(0) == C, std::string("batch_norm2d ") + what +
                                                    " must have shape [" + std::to_string(C) +
                                                    "], got " + shape_str(t.shape()));
    };
    check_c(gamma.value(), "gamma");
    check_c(beta.value(), "beta");
    check_c(running_mean.value(), "running_mean");
    check_c(running_var.value(), "running_var");

    const std::int64_t N = B * HW;
    Tensor mean(DType::F64, {C});
    Tensor invstd(DType::F64, {C});
    auto pm = mean.data<double>();
    auto pi = invstd.data<double>();

    if (training) {
        dispatch_float(xv.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* src = xv.data<T>().data();
            for (std::int64_t c = 0; c < C; ++c) {
                double s = 0.0, s2 = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* plane = src + (b * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        const double v = static_cast<double>(plane[i]);
                        s += v;
                        s2 += v * v;
                    }
                }
                const double mu = s / static_cast<double>(N);
                const double var = std::max(0.0, s2 / static_cast<double>(N) - mu * mu);
                pm[c] = mu;
                pi[c] = 1.0 / std::sqrt(var + eps);
            }
        });
        // Update running buffers (unbiased variance, PyTorch convention).
        dispatch_float(running_mean.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto rm = running_mean.value_mut().data<T>();
            auto rv = running_var.value_mut().data<T>();
            for (std::int64_t c = 0; c < C; ++c) {
                const double var = 1.0 / (pi[c] * pi[c]) - eps;
                const double uvar = N > 1 ? var * static_cast<double>(N) / static_cast<double>(N - 1) : var;
                rm[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(rm[c]) +
                                       momentum * pm[c]);
                rv[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(rv[c]) +
                                       momentum * uvar);
            }
        });
    } else {
        dispatch_float(running_mean.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto rm = running_mean.value().data<T>();
            auto rv = running_var.value().data<T>();
            for (std::int64_t c = 0; c < C; ++c) {
                pm[c] = static_cast<double>(rm[c]);
                pi[c] = 1.0 / std::sqrt(static_cast<double>(rv[c]) + eps);
            }
        });
    }

    Tensor out(xv.dtype(), xv.shape());
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        const T* pg = gamma.value().data<T>().data();
        const T* pb = beta.value().data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t c = 0; c < C; ++c) {
                const double gc = static_cast<double>(pg[c]);
                const double bc = static_cast<double>(pb[c]);
                const T* sp = src + (b * C + c) * HW;
                T* dp = dst + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    dp[i] = static_cast<T>(gc * (static_cast<double>(sp[i]) - pm[c]) * pi[c] + bc);
                }
            }
        }
    });

    return make_op(
        std::move(out), {input, gamma, beta},
        [xn = input.node(), gn = gamma.node(), bn = beta.node(), mean, invstd, training, B, C,
         HW](const Tensor& gy, const Tensor&) {
            const std::int64_t N = B * HW;
            auto pm = mean.data<double>();
            auto pi = invstd.data<double>();
            dispatch_float(gy.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = gy.data<T>().data();
                const T* x = xn->value.data<T>().data();
                const T* pgm = gn->value.data<T>().data();
                std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* gp = g + (b * C + c) * HW;
                        const T* xp = x + (b * C + c) * HW;
                        double sg = 0.0, sgx = 0.0;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            const double gv = static_cast<double>(gp[i]);
                            sg += gv;
                            sgx += gv * (static_cast<double>(xp[i]) - pm[c]) * pi[c];
                        }
                        sum_g[c] += sg;
                        sum_gx[c] += sgx;
                    }
                }
                if (gn->requires_grad) {
                    Tensor gg(gy.dtype(), gn->value.shape());
                    auto d = gg.data<T>();
                    for (std::int64_t c = 0; c < C; ++c) d[c] = static_cast<T>(sum_gx[c]);
                    gn->accumulate(gg);
                }
                if (bn->requires_grad) {
                    Tensor gb(gy.dtype(), bn->value.shape());
                    auto d = gb.data<T>();
                    for (std::int64_t c = 0; c < C; ++c) d[c] = static_cast<T>(sum_g[c]);
                    bn->accumulate(gb);
                }
                if (xn->requires_grad) {
                    Tensor gx(gy.dtype(), xn->value.shape());
                    T* d = gx.data<T>().data();
                    for (std::int64_t b = 0; b < B; ++b) {
                        for (std::int64_t c = 0; c < C; ++c) {
                            const double gc = static_cast<double>(pgm[c]);
                            const T* gp = g + (b * C + c) * HW;
                            const T* xp = x + (b * C + c) * HW;
                            T* dp = d + (b * C + c) * HW;
                            if (training) {
                                const double mg = sum_g[c] / static_cast<double>(N);
                                const double mgx = sum_gx[c] / static_cast<double>(N);
                                for (std::int64_t i = 0; i < HW; ++i) {
                                    const double xh =
                                        (static_cast<double>(xp[i]) - pm[c]) * pi[c];
                                    dp[i] = static_cast<T>(
                                        gc * pi[c] * (static_cast<double>(gp[i]) - mg - xh * mgx));
                                }
                            } else {
                                for (std::int64_t i = 0; i < HW; ++i) {
                                    dp[i] = static_cast<T>(gc * pi[c] *
                                                           static_cast<double>(gp[i]));
                                }
                            }
                        }
                    }
                    xn->accumulate(gx);
                }
            });
        });
}

// -------------------------------------------------------------- layer norm

Var layer_norm(const Var& input, const Var& gamma, const Var& beta, double eps) {
    const Tensor& xv = input.value();
    require_float(xv, "layer_norm input");
    require(xv.rank() >= 1, "layer_norm input must have rank >= 1");
    const std::int64_t C = xv.shape().back();
    require(gamma.value().rank() == 1 && gamma.value().dim(0) == C,
            "layer_norm gamma must have shape [" + std::to_string(C) + "], got " +
                shape_str(gamma.value().shape()));
    require(beta.value().rank() == 1 && beta.value().dim(0) == C,
            "layer_norm beta must have shape [" + std::to_string(C) + "], got " +
                shape_str(beta.value().shape()));
    const std::int64_t rows = xv.numel() / C;
    Tensor mean(DType::F64, {rows});
    Tensor invstd(DType::F64, {rows});
    auto pm = mean.data<double>();
    auto pi = invstd.data<double>();
    Tensor out(xv.dtype(), xv.shape());
    dispatch_float(xv.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* src = xv.data<T>().data();
        const T* pg = gamma.value().data<T>().data();
        const T* pb = beta.value().data<T>().data();
        T* dst = out.data<T>().data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* sp = src + r * C;
            double s = 0.0, s2 = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                const double v = static_cast<double>(sp[c]);
                s += v;
                s2 += v * v;
            }
            const double mu = s / static_cast<double>(C);
            const double var = std::max(0.0, s2 / static_cast<double>(C) - mu * mu);
            pm[r] = mu;
            pi[r] = 1.0 / std::sqrt(var + eps);
            T* dp = dst + r * C;
            for (std::int64_t c = 0; c < C; ++c) {
                dp[c] = static_cast<T>(static_cast<double>(pg[c]) *
                                           (static_cast<double>(sp[c]) - mu) * pi[r] +
                                       static_cast<double>(pb[c]));
            }
        }
    });
    return make_op(
        std::move(out), {input, gamma, beta},
        [xn = input.node(), gn = gamma.node(), bn = beta.node(), mean, invstd, rows,
         C](const Tensor& gy, const Tensor&) {
            auto pm = mean.data<double>();
            auto pi = invstd.data<double>();
            dispatch_float(gy.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* g = gy.data<T>().data();
                const T* x = xn->value.data<T>().data();
                const T* pg = gn->value.data<T>().data();
                Tensor gx;
                T* dxp = nullptr;
                if (xn->requires_grad) {
                    gx = Tensor(gy.dtype(), xn->value.shape());
                    dxp = gx.data<T>().data();
                }
                std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* gp = g + r * C;
                    const T* xp = x + r * C;
                    double mg = 0.0, mgx = 0.0;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double xh = (static_cast<double>(xp[c]) - pm[r]) * pi[r];
                        const double gh = static_cast<double>(gp[c]) * static_cast<double>(pg[c]);
                        mg += gh;
                        mgx += gh * xh;
                        dgamma[c] += static_cast<double>(gp[c]) * xh;
                        dbeta[c] += static_cast<double>(gp[c]);
                    }
                    mg /= static_cast<double>(C);
                    mgx /= static_cast<double>(C);
                    if (dxp) {
                        for (std::int64_t c = 0; c < C; ++c) {
                            const double xh = (static_cast<double>(xp[c]) - pm[r]) * pi[r];
                            const double gh =
                                static_cast<double>(gp[c]) * static_cast<double>(pg[c]);
                            dxp[r * C + c] = static_cast<T>(pi[r] * (gh - mg - xh * mgx));
                        }
                    }
                }
                if (xn->requires_grad) xn->accumulate(gx);
                if (gn->requires_grad) {
                    Tensor gg(gy.dtype(), gn->value.shape());
                    auto d = gg.data<T>();
                    for (std::int64_t c = 0; c < C; ++c) d[c] = static_cast<T>(dgamma[c]);
                    gn->accumulate(gg);
                }
                if (bn->requires_grad) {
                    Tensor gb(gy.dtype(), bn->value.shape());
                    auto d = gb.data<T>();
                    for (std::int64_t c = 0; c < C; ++c) d[c] = static_cast<T>(dbeta[c]);
                    bn->accumulate(gb);
                }
            });
        });
}

}  // namespace vkan
