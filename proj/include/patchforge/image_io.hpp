#pragma once

#include <string>
#include <vector>

#include "patchforge/tensor.hpp"

namespace patchforge {

// Images are Tensors of shape [3,H,W] (or [1,H,W] grayscale) with values in
// [0,1]. Files are 8-bit RGB/gray PNG; values are clamped then quantized with
// round-half-up so encoding is deterministic.

void write_png(const std::string& path, const Tensor& image);
Tensor read_png(const std::string& path);  // returns [3,H,W] in [0,1]

// Nearest-neighbour upscale, used for heatmap export.
Tensor upscale_nearest(const Tensor& image, int factor);

std::vector<unsigned char> quantize_u8(const Tensor& image);

}  // namespace patchforge
