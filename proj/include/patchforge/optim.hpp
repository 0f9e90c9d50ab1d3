#pragma once

#include <vector>

#include "patchforge/tensor.hpp"

namespace patchforge {

// Classic SGD with momentum: v <- momentum*v + g; p <- p - lr*v.
// The attack drivers negate gradients when ascending.
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum);

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    double momentum() const { return momentum_; }

    // params[i] is updated in place using grads[i]; velocity buffers are
    // created lazily on first use and must keep matching shapes afterwards.
    void step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);

    const std::vector<Tensor>& velocity() const { return velocity_; }

private:
    double lr_;
    double momentum_;
    std::vector<Tensor> velocity_;
};

}  // namespace patchforge
