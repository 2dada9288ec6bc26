#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vkan/tensor.hpp"

namespace vkan {

struct TapeNode;
using NodePtr = std::shared_ptr<TapeNode>;

/// Backward rule: receives the node's accumulated output gradient and its own
/// forward value (so rules like softmax can reuse the output without copies).
using BackwardFn = std::function<void(const Tensor& grad_out, const Tensor& value)>;

/// One record on the reverse-mode tape: a value, an optional gradient slot,
/// links to the parent records, and the backward rule that pushes the
/// incoming gradient to those parents. Nodes are topologically ordered by
/// their creation sequence number.
struct TapeNode {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool trainable = false;
    std::uint64_t seq = 0;
    std::vector<NodePtr> parents;
    BackwardFn backward_fn;

    void accumulate(const Tensor& g);
    void zero_grad();
};

/// Handle to a tape node; copying shares the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& value_mut() { return node_->value; }
    const Tensor& grad() const;
    bool has_grad() const { return node_ && node_->has_grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void zero_grad() { if (node_) node_->zero_grad(); }

    const std::vector<std::int64_t>& shape() const { return node_->value.shape(); }
    DType dtype() const { return node_->value.dtype(); }
    std::int64_t numel() const { return node_->value.numel(); }

    /// Value-only copy with no history.
    Var detach() const { return Var(node_->value, false); }

    NodePtr node() const { return node_; }
    static Var from_node(NodePtr n);

private:
    NodePtr node_;
};

/// Records an op result. parents/backward are dropped when gradients are
/// globally disabled or no parent needs them.
Var make_op(Tensor value, std::vector<Var> parents, BackwardFn backward_fn);

Var constant(Tensor value);
Var leaf(Tensor value, bool trainable = true);

bool grad_enabled();

/// Scoped torch-style no-grad switch; ops record values only while active.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Reverse sweep from a scalar root: seeds d(root)/d(root)=1, walks nodes in
/// reverse creation order, accumulates into every reachable gradient slot,
/// then frees the interior of the graph (leaves keep their gradients).
void backward(const Var& root);

}  // namespace vkan
