#pragma once

// Minimal reverse-mode automatic differentiation over Tensor.
//
// A Var is a handle to a graph node. Ops build new nodes that remember their
// parents and a backward closure; Var::backward() walks the graph in reverse
// topological order. Nodes that do not require gradients never allocate a
// grad buffer and are skipped during the backward walk.

#include "regiontok/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace regiontok::ad {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    // Adds g into grad, allocating on first use.
    void accumulate(const Tensor& g);
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    // Gradient accumulated by backward(); empty if none reached this node.
    const Tensor& grad() const { return node_->grad; }
    void zero_grad();

    // Seeds d(this)/d(this) = 1. Only valid on single-element vars.
    void backward() const;

    // Scalar value of a single-element var.
    double item() const;

    const std::shared_ptr<Node>& node() const { return node_; }

    static Var from_node(std::shared_ptr<Node> n);

private:
    std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Builds a node from parents. The node requires grad iff any parent does;
// when none do, the backward closure is dropped.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

} // namespace regiontok::ad
