#pragma once

#include "patchforge/tensor.hpp"

namespace patchforge {

// Output spatial extent of a convolution along one axis.
int conv_out_extent(int in, int kernel, int stride, int pad);

// input [Cin,H,W], kernel [Cout,Cin,Kh,Kw], bias length Cout or null.
// OpenMP-parallel over output channels; bit-deterministic for any thread count
// because each output element has a single writer.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const float* bias, int stride, int pad);

Tensor conv2d_backward_input(const Tensor& kernel, const Tensor& grad_out, int in_h, int in_w, int stride, int pad);
Tensor conv2d_backward_kernel(const Tensor& input, const Tensor& grad_out, int kh, int kw, int stride, int pad);
void conv2d_backward_bias(const Tensor& grad_out, float* grad_bias);

namespace reference {
// Serial nested-loop implementation kept as the comparison baseline for the
// parallel kernels (tests and the bench target).
Tensor conv2d_forward_serial(const Tensor& input, const Tensor& kernel, const float* bias, int stride, int pad);
}  // namespace reference

}  // namespace patchforge
