#include "patchforge/conv.hpp"

#include <algorithm>
#include <stdexcept>

namespace patchforge {

int conv_out_extent(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

void check_conv_args(const Tensor& input, const Tensor& kernel, int stride, int pad) {
    if (input.rank() != 3 || kernel.rank() != 4) throw std::invalid_argument("conv2d expects CHW input and OIHW kernel");
    if (input.dim(0) != kernel.dim(1)) throw std::invalid_argument("conv2d channel mismatch between input and kernel");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >=1 and pad >=0");
    if (kernel.dim(2) > input.dim(1) + 2 * pad || kernel.dim(3) > input.dim(2) + 2 * pad)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
}

// valid output range [lo, hi) along one axis for a kernel tap at offset k:
// input index o*stride + k - pad must land in [0, extent)
inline void tap_range(int out_extent, int in_extent, int k, int stride, int pad, int& lo, int& hi) {
    lo = 0;
    while (lo < out_extent && lo * stride + k - pad < 0) ++lo;
    hi = out_extent;
    while (hi > lo && (hi - 1) * stride + k - pad >= in_extent) --hi;
}

}  // namespace

// Restructured as per-tap row updates: for each kernel tap (ic,ky,kx) the
// valid output row segment receives kv * input row. Accumulation into the
// output plane visits taps in (ic,ky,kx) order, the same float addition
// sequence as the serial reference, so the two stay bit-identical.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const float* bias, int stride, int pad) {
    check_conv_args(input, kernel, stride, pad);
    const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int oh = conv_out_extent(h, kh, stride, pad);
    const int ow = conv_out_extent(w, kw, stride, pad);
    Tensor out({cout, oh, ow});

#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < cout; ++oc) {
        float* oplane = out.data() + static_cast<std::size_t>(oc) * oh * ow;
        std::fill(oplane, oplane + static_cast<std::size_t>(oh) * ow, bias ? bias[oc] : 0.0f);
        for (int ic = 0; ic < cin; ++ic) {
            const float* iplane = input.data() + static_cast<std::size_t>(ic) * h * w;
            for (int ky = 0; ky < kh; ++ky) {
                int oy_lo, oy_hi;
                tap_range(oh, h, ky, stride, pad, oy_lo, oy_hi);
                for (int kx = 0; kx < kw; ++kx) {
                    const float kv = kernel.at4(oc, ic, ky, kx);
                    int ox_lo, ox_hi;
                    tap_range(ow, w, kx, stride, pad, ox_lo, ox_hi);
                    for (int oy = oy_lo; oy < oy_hi; ++oy) {
                        const float* irow = iplane + static_cast<std::size_t>(oy * stride + ky - pad) * w + kx - pad;
                        float* orow = oplane + static_cast<std::size_t>(oy) * ow;
                        if (stride == 1) {
                            for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += kv * irow[ox];
                        } else {
                            for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += kv * irow[ox * stride];
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor conv2d_backward_input(const Tensor& kernel, const Tensor& grad_out, int in_h, int in_w, int stride, int pad) {
    const int cin = kernel.dim(1), cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int oh = grad_out.dim(1), ow = grad_out.dim(2);
    Tensor gin({cin, in_h, in_w});

#pragma omp parallel for schedule(static)
    for (int ic = 0; ic < cin; ++ic) {
        float* gplane = gin.data() + static_cast<std::size_t>(ic) * in_h * in_w;
        for (int oc = 0; oc < cout; ++oc) {
            const float* goplane = grad_out.data() + static_cast<std::size_t>(oc) * oh * ow;
            for (int ky = 0; ky < kh; ++ky) {
                int oy_lo, oy_hi;
                tap_range(oh, in_h, ky, stride, pad, oy_lo, oy_hi);
                for (int kx = 0; kx < kw; ++kx) {
                    const float kv = kernel.at4(oc, ic, ky, kx);
                    int ox_lo, ox_hi;
                    tap_range(ow, in_w, kx, stride, pad, ox_lo, ox_hi);
                    for (int oy = oy_lo; oy < oy_hi; ++oy) {
                        const float* gorow = goplane + static_cast<std::size_t>(oy) * ow;
                        float* grow = gplane + static_cast<std::size_t>(oy * stride + ky - pad) * in_w + kx - pad;
                        if (stride == 1) {
                            for (int ox = ox_lo; ox < ox_hi; ++ox) grow[ox] += kv * gorow[ox];
                        } else {
                            for (int ox = ox_lo; ox < ox_hi; ++ox) grow[ox * stride] += kv * gorow[ox];
                        }
                    }
                }
            }
        }
    }
    return gin;
}

Tensor conv2d_backward_kernel(const Tensor& input, const Tensor& grad_out, int kh, int kw, int stride, int pad) {
    const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int cout = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
    Tensor gk({cout, cin, kh, kw});

#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < cout; ++oc) {
        const float* goplane = grad_out.data() + static_cast<std::size_t>(oc) * oh * ow;
        for (int ic = 0; ic < cin; ++ic) {
            const float* iplane = input.data() + static_cast<std::size_t>(ic) * h * w;
            for (int ky = 0; ky < kh; ++ky) {
                int oy_lo, oy_hi;
                tap_range(oh, h, ky, stride, pad, oy_lo, oy_hi);
                for (int kx = 0; kx < kw; ++kx) {
                    int ox_lo, ox_hi;
                    tap_range(ow, w, kx, stride, pad, ox_lo, ox_hi);
                    double acc = 0.0;
                    for (int oy = oy_lo; oy < oy_hi; ++oy) {
                        const float* gorow = goplane + static_cast<std::size_t>(oy) * ow;
                        const float* irow = iplane + static_cast<std::size_t>(oy * stride + ky - pad) * w + kx - pad;
                        double row_acc = 0.0;
                        if (stride == 1) {
                            for (int ox = ox_lo; ox < ox_hi; ++ox)
                                row_acc += static_cast<double>(gorow[ox]) * irow[ox];
                        } else {
                            for (int ox = ox_lo; ox < ox_hi; ++ox)
                                row_acc += static_cast<double>(gorow[ox]) * irow[ox * stride];
                        }
                        acc += row_acc;
                    }
                    gk.at4(oc, ic, ky, kx) = static_cast<float>(acc);
                }
            }
        }
    }
    return gk;
}

void conv2d_backward_bias(const Tensor& grad_out, float* grad_bias) {
    const int cout = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
    for (int oc = 0; oc < cout; ++oc) {
        double acc = 0.0;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) acc += grad_out.at3(oc, oy, ox);
        grad_bias[oc] += static_cast<float>(acc);
    }
}

namespace reference {

Tensor conv2d_forward_serial(const Tensor& input, const Tensor& kernel, const float* bias, int stride, int pad) {
    check_conv_args(input, kernel, stride, pad);
    const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int oh = conv_out_extent(h, kh, stride, pad);
    const int ow = conv_out_extent(w, kw, stride, pad);
    Tensor out({cout, oh, ow});
    for (int oc = 0; oc < cout; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                // float accumulator in (ic,ky,kx) tap order: the exact
                // addition sequence the restructured kernel performs
                float acc = bias ? bias[oc] : 0.0f;
                for (int ic = 0; ic < cin; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * stride + ky - pad;
                            const int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += kernel.at4(oc, ic, ky, kx) * input.at3(ic, iy, ix);
                        }
                out.at3(oc, oy, ox) = acc;
            }
        }
    }
    return out;
}

}  // namespace reference

}  // namespace patchforge
