#pragma once

#include <optional>
#include <vector>

#include "vkan/autodiff.hpp"

namespace vkan {

// ---- pointwise, with numpy-style trailing broadcast (dims equal or 1) ----

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);
Var neg(const Var& x);
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);
Var exp(const Var& x);
Var log(const Var& x);

enum class Act { Relu, Silu, Sigmoid, Softplus };

Var activation(const Var& x, Act kind);
Var relu(const Var& x);
Var silu(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);

Var softmax_lastdim(const Var& x);
Var log_softmax_lastdim(const Var& x);

// ---- shape ----

Var reshape(const Var& x, std::vector<std::int64_t> new_shape);
Var permute(const Var& x, std::vector<int> axes);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& x, int axis, std::int64_t start, std::int64_t len);
Var slice_lastdim(const Var& x, std::int64_t start, std::int64_t len);

// ---- reductions ----

Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var sum_lastdim(const Var& x);
Var channel_max(const Var& x);   // NCHW -> N,1,H,W
Var channel_mean(const Var& x);  // NCHW -> N,1,H,W

// ---- dense / conv / norm ----

/// Affine map over the last dimension, batched over all leading dims.
/// weight is OUT x IN, optional bias OUT.
Var linear(const Var& x, const Var& weight, const std::optional<Var>& bias = std::nullopt);

/// Cross-correlation (no kernel flip). input NCHW, weight OCx(IC/groups)xKHxKW.
Var conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias, std::int64_t stride,
           std::int64_t padding, std::int64_t groups = 1);

/// Adjoint of conv2d with the same kernel: input BxCxHxW, weight CxC'xKHxKW,
/// output spatial (H-1)*stride + KH.
Var transposed_conv2d(const Var& input, const Var& weight, const std::optional<Var>& bias,
                      std::int64_t stride);

enum class PoolKind { Max, Avg };

/// Non-overlapping pooling; window must divide both spatial dims.
Var pool2d(const Var& input, PoolKind kind, std::int64_t window);
/// Reduces H x W to 1 x 1.
Var pool2d_global(const Var& input, PoolKind kind);

/// Training mode normalizes by batch statistics and updates the running
/// buffers in place; eval mode reads them. running_mean/var carry no grads.
Var batch_norm2d(const Var& input, const Var& gamma, const Var& beta, Var running_mean,
                 Var running_var, bool training, double momentum = 0.1, double eps = 1e-5);

/// Normalizes over the last dimension.
Var layer_norm(const Var& input, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- plain-tensor helpers (no tape) ----

Tensor permute_tensor(const Tensor& x, const std::vector<int>& axes);
Tensor reduce_to_shape(const Tensor& g, const std::vector<std::int64_t>& target_shape);

}  // namespace vkan
