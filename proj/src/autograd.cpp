#include "regiontok/autograd.hpp"

#include "regiontok/errors.hpp"

#include <unordered_set>
#include <utility>

namespace regiontok::ad {

void Node::accumulate(const Tensor& g) {
    if (grad.empty()) {
        grad = g;
        return;
    }
    require_same_shape(grad, g, "gradient accumulation");
    double* dst = grad.data.data();
    const double* src = g.data.data();
    for (std::size_t i = 0, n = g.numel(); i < n; ++i) dst[i] += src[i];
}

Tensor& Node::grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape, 0.0);
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

double Var::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar of shape " + shape_string(shape()));
    return value().data[0];
}

void Var::backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_string(shape()));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS to get a topological order of grad-requiring nodes.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->accumulate(Tensor(node_->value.shape, 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Free intermediate gradients; leaves keep theirs.
    for (Node* n : order)
        if (n->backward) n->grad = Tensor();
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var parameter(Tensor value) { return Var(std::move(value), true); }

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    node->requires_grad = any;
    if (any) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return Var::from_node(std::move(node));
}

} // namespace regiontok::ad
