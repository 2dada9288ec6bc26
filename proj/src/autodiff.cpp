#include "vkan/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <unordered_set>

namespace vkan {

namespace {

std::atomic<std::uint64_t> g_seq{0};
thread_local bool g_grad_enabled = true;

template <typename T>
void add_into(Tensor& dst, const Tensor& src) {
    auto d = dst.data<T>();
    auto s = src.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

void TapeNode::accumulate(const Tensor& g) {
    if (g.shape() != value.shape() || g.dtype() != value.dtype()) {
        throw std::invalid_argument("gradient shape/dtype mismatch: value " +
                                    shape_str(value.shape()) + " vs grad " + shape_str(g.shape()));
    }
    if (!has_grad) {
        grad = g;
        has_grad = true;
        return;
    }
    dispatch_float(value.dtype(), [&](auto tag) {
        using T = decltype(tag);
        add_into<T>(grad, g);
    });
}

void TapeNode::zero_grad() {
    grad = Tensor();
    has_grad = false;
}

Var::Var(Tensor value, bool requires_grad) {
    node_ = std::make_shared<TapeNode>();
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->seq = ++g_seq;
}

const Tensor& Var::grad() const {
    if (!has_grad()) {
        throw std::runtime_error("no gradient recorded for this node");
    }
    return node_->grad;
}

Var Var::from_node(NodePtr n) {
    Var v;
    v.node_ = std::move(n);
    return v;
}

Var make_op(Tensor value, std::vector<Var> parents, BackwardFn backward_fn) {
    auto node = std::make_shared<TapeNode>();
    node->value = std::move(value);
    node->seq = ++g_seq;
    if (g_grad_enabled) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.requires_grad();
        if (needs) {
            node->requires_grad = true;
            node->backward_fn = std::move(backward_fn);
            node->parents.reserve(parents.size());
            for (auto& p : parents) node->parents.push_back(p.node());
        }
    }
    return Var::from_node(std::move(node));
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var leaf(Tensor value, bool trainable) {
    Var v(std::move(value), true);
    v.node()->trainable = trainable;
    return v;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
    if (!root.defined()) {
        throw std::invalid_argument("backward on an undefined Var");
    }
    if (root.value().numel() != 1) {
        throw std::invalid_argument("backward requires a scalar root, got shape " +
                                    shape_str(root.value().shape()));
    }
    if (!root.requires_grad()) {
        throw std::invalid_argument("backward root does not require gradients");
    }

    // Collect the reachable subgraph.
    std::vector<NodePtr> order;
    std::unordered_set<TapeNode*> seen;
    std::vector<NodePtr> stack{root.node()};
    while (!stack.empty()) {
        NodePtr n = std::move(stack.back());
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n.get()).second) continue;
        for (const auto& p : n->parents) stack.push_back(p);
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

    root.node()->accumulate(Tensor::full(root.value().dtype(), root.value().shape(), 1.0));

    for (const auto& n : order) {
        if (n->backward_fn && n->has_grad) {
            n->backward_fn(n->grad, n->value);
        }
    }

    // Free interior graph state; only leaves keep gradients.
    for (const auto& n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->zero_grad();
        }
    }
}

}  // namespace vkan
