#include "patchforge/optim.hpp"

#include <stdexcept>

namespace patchforge {

SgdMomentum::SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (lr <= 0.0) throw std::invalid_argument("learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0,1)");
}

void SgdMomentum::step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("params/grads count mismatch");
    if (velocity_.empty())
        for (const Tensor* p : params) velocity_.emplace_back(p->shape());
    if (velocity_.size() != params.size()) throw std::invalid_argument("optimizer state count mismatch");

    const float m = static_cast<float>(momentum_);
    const float lr = static_cast<float>(lr_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        Tensor& v = velocity_[i];
        if (!p.same_shape(g) || !p.same_shape(v)) throw std::invalid_argument("sgd shape mismatch");
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = m * v[j] + g[j];
            p[j] -= lr * v[j];
        }
    }
}

}  // namespace patchforge
