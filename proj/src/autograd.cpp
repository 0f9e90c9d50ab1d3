#include "patchforge/autograd.hpp"

#include <cmath>
#include <stdexcept>

#include "patchforge/conv.hpp"

namespace patchforge {

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.is_leaf = true;
    return push(std::move(n));
}

NodeId Graph::custom(std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    for (NodeId in : n.inputs)
        if (nodes_[static_cast<std::size_t>(in)].requires_grad) n.requires_grad = true;
    n.backprop = std::move(backward);
    return push(std::move(n));
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("shape mismatch");
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    require_same_shape(va, vb);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    return custom({a, b}, std::move(out), [](const Tensor& g, const std::vector<Tensor*>& gi) {
        for (int k = 0; k < 2; ++k)
            if (gi[static_cast<std::size_t>(k)])
                for (std::size_t i = 0; i < g.size(); ++i) (*gi[static_cast<std::size_t>(k)])[i] += g[i];
    });
}

NodeId Graph::sub(NodeId a, NodeId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    require_same_shape(va, vb);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    return custom({a, b}, std::move(out), [](const Tensor& g, const std::vector<Tensor*>& gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
    });
}

NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor va = value(a);
    const Tensor vb = value(b);
    require_same_shape(va, vb);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return custom({a, b}, std::move(out), [va, vb](const Tensor& g, const std::vector<Tensor*>& gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * vb[i];
        if (gi[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * va[i];
    });
}

NodeId Graph::scale(NodeId a, float factor) {
    const Tensor& va = value(a);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * factor;
    return custom({a}, std::move(out), [factor](const Tensor& g, const std::vector<Tensor*>& gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
    });
}

NodeId Graph::sum(NodeId a) {
    const Tensor& va = value(a);
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) acc += va[i];
    Tensor out({1});
    out[0] = static_cast<float>(acc);
    return custom({a}, std::move(out), [](const Tensor& g, const std::vector<Tensor*>& gi) {
        if (gi[0])
            for (std::size_t i = 0; i < gi[0]->size(); ++i) (*gi[0])[i] += g[0];
    });
}

NodeId Graph::mean(NodeId a) {
    const float inv = 1.0f / static_cast<float>(value(a).size());
    return scale(sum(a), inv);
}

NodeId Graph::sigmoid(NodeId a) {
    const Tensor& va = value(a);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0f / (1.0f + std::exp(-va[i]));
    Tensor saved = out;
    return custom({a}, std::move(out), [saved](const Tensor& g, const std::vector<Tensor*>& gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) {
                const float s = saved[i];
                (*gi[0])[i] += g[i] * s * (1.0f - s);
            }
    });
}

NodeId Graph::leaky_relu(NodeId a, float slope) {
    const Tensor va = value(a);
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] >= 0.0f ? va[i] : slope * va[i];
    return custom({a}, std::move(out), [va, slope](const Tensor& g, const std::vector<Tensor*>& gi) {
        if (gi[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * (va[i] >= 0.0f ? 1.0f : slope);
    });
}

NodeId Graph::conv2d(NodeId input, NodeId kernel, NodeId bias, int stride, int pad) {
    const Tensor in = value(input);
    const Tensor k = value(kernel);
    const float* bias_ptr = bias >= 0 ? value(bias).data() : nullptr;
    Tensor out = conv2d_forward(in, k, bias_ptr, stride, pad);
    std::vector<NodeId> inputs = {input, kernel};
    if (bias >= 0) inputs.push_back(bias);
    const int in_h = in.dim(1), in_w = in.dim(2), kh = k.dim(2), kw = k.dim(3);
    return custom(std::move(inputs), std::move(out),
                  [in, k, in_h, in_w, kh, kw, stride, pad](const Tensor& g, const std::vector<Tensor*>& gi) {
                      if (gi[0]) {
                          Tensor gin = conv2d_backward_input(k, g, in_h, in_w, stride, pad);
                          for (std::size_t i = 0; i < gin.size(); ++i) (*gi[0])[i] += gin[i];
                      }
                      if (gi[1]) {
                          Tensor gk = conv2d_backward_kernel(in, g, kh, kw, stride, pad);
                          for (std::size_t i = 0; i < gk.size(); ++i) (*gi[1])[i] += gk[i];
                      }
                      if (gi.size() > 2 && gi[2]) conv2d_backward_bias(g, gi[2]->data());
                  });
}

Tensor* Graph::grad_accumulator(NodeId id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (!n.grad_live) {
        n.grad = Tensor(n.value.shape());
        n.grad_live = true;
    }
    return &n.grad;
}

GradientMap Graph::backward(NodeId output) {
    Node& out = nodes_[static_cast<std::size_t>(output)];
    if (out.value.size() != 1) throw std::invalid_argument("backward requires a scalar output node");
    for (auto& n : nodes_) n.grad_live = false;
    out.grad = Tensor::full({1}, 1.0f);
    out.grad_live = true;

    for (NodeId id = output; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad_live || !n.backprop || !n.requires_grad) continue;
        std::vector<Tensor*> gin;
        gin.reserve(n.inputs.size());
        for (NodeId in : n.inputs) gin.push_back(grad_accumulator(in));
        n.backprop(n.grad, gin);
    }

    GradientMap grads;
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.is_leaf || !n.requires_grad) continue;
        grads.emplace(id, n.grad_live ? std::move(n.grad) : Tensor(n.value.shape()));
        n.grad_live = false;
    }
    return grads;
}

std::vector<float> finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                              const std::vector<std::size_t>& coords, double epsilon) {
    std::vector<float> est;
    est.reserve(coords.size());
    Tensor p = point;
    for (std::size_t c : coords) {
        const float orig = p[c];
        const float up = static_cast<float>(orig + epsilon);
        const float down = static_cast<float>(orig - epsilon);
        p[c] = up;
        const double hi = f(p);
        p[c] = down;
        const double lo = f(p);
        p[c] = orig;
        // divide by the perturbation actually realized in float32, not the
        // requested epsilon, so rounding of the probe points cancels out
        est.push_back(static_cast<float>((hi - lo) / (static_cast<double>(up) - down)));
    }
    return est;
}

}  // namespace patchforge
