#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "patchforge/tensor.hpp"

namespace patchforge {

using NodeId = int;

// Gradients keyed by leaf node id, each the same shape as its leaf.
using GradientMap = std::unordered_map<NodeId, Tensor>;

// Reverse-mode tape. Nodes are appended in evaluation order, so the insertion
// order is already a topological order. Single-writer; build one graph per
// forward pass (reset() recycles the storage).
class Graph {
public:
    NodeId leaf(Tensor value, bool requires_grad = false);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, float factor);
    NodeId sum(NodeId a);
    NodeId mean(NodeId a);
    NodeId sigmoid(NodeId a);
    NodeId leaky_relu(NodeId a, float slope);

    // input [Cin,H,W] * kernel [Cout,Cin,Kh,Kw]; bias optional (-1 for none)
    NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, int stride, int pad);

    // Custom operation hook. The callback receives the upstream gradient and
    // one accumulator per input (nullptr where no gradient is required).
    using BackwardFn = std::function<void(const Tensor& grad_out, const std::vector<Tensor*>& grad_in)>;
    NodeId custom(std::vector<NodeId> inputs, Tensor value, BackwardFn backward);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // output must be scalar. Returns gradients for every requires_grad leaf.
    GradientMap backward(NodeId output);

    void reset() { nodes_.clear(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool is_leaf = false;
        bool grad_live = false;
        std::vector<NodeId> inputs;
        BackwardFn backprop;
    };

    Tensor* grad_accumulator(NodeId id);
    NodeId push(Node n);

    std::vector<Node> nodes_;
};

// Central-difference gradient estimates of f at `point` for the given
// coordinates; the independent oracle the backward pass is checked against.
std::vector<float> finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                              const std::vector<std::size_t>& coords, double epsilon);

}  // namespace patchforge
