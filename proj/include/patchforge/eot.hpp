#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "patchforge/autograd.hpp"
#include "patchforge/boxes.hpp"
#include "patchforge/rng.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

// The transformation distribution T. Defaults are the 128-px analogs of
// rotations +-5 deg (x,y) / +-10 deg (z), scales 80..120 on a 416-px frame,
// and brightness factors 0.4..1.6.
struct TransformRanges {
    double rx_min = -5, rx_max = 5;      // degrees
    double ry_min = -5, ry_max = 5;
    double rz_min = -10, rz_max = 10;
    double scale_min = 24, scale_max = 36;  // target edge, pixels
    double brightness_min = 0.4, brightness_max = 1.6;

    void validate(int image_size) const;
};

// One draw t ~ T. tx,ty is the top-left placement of the scaled footprint.
struct TransformSample {
    double rx = 0, ry = 0, rz = 0;
    double scale = 0;
    double tx = 0, ty = 0;
    double brightness = 1.0;

    static TransformSample identity(double scale) {
        TransformSample t;
        t.scale = scale;
        return t;
    }
};

struct Mat3 {
    std::array<double, 9> m{};

    static Mat3 identity();
    Mat3 operator*(const Mat3& o) const;
    Mat3 inverse() const;
    // projective application to (x, y, 1)
    void apply(double x, double y, double* ox, double* oy) const;
};

// Patch plane -> image plane: the patch is a unit square centered at the
// origin, rotated Rz*Ry*Rx, perspective-projected with focal length f =
// image_size, then scaled to t.scale and translated to (tx, ty).
Mat3 homography(const TransformSample& t, int patch_size, int image_size);

// Projected positions of the four patch corners, in order
// (0,0),(P,0),(P,P),(0,P).
std::array<std::array<double, 2>, 4> project_corners(const TransformSample& t, int patch_size, int image_size);

// Translation is drawn last, so the rotated+scaled footprint always fits
// inside the image (the no-cut-off rule). Deterministic per rng state.
TransformSample sample_transform(const TransformRanges& ranges, int patch_size, int image_size, Rng& rng);

struct PatchMask {
    int height = 0, width = 0;
    std::vector<std::uint8_t> inside;  // row-major booleans

    bool at(int y, int x) const { return inside[static_cast<std::size_t>(y) * width + x] != 0; }
};

// Multiply every channel by factor and clip to [0,1]; equivalent to HSV
// V-scaling wherever no channel clips. factor == 1 is the exact identity.
Tensor brightness(const Tensor& patch, double factor);

struct ApplyResult {
    Tensor image;
    PatchMask mask;
};

// A(delta, x, t): warp the brightness-adjusted patch by the homography and
// overwrite the masked pixels; pixels outside the mask are bit-identical to
// the input. Bilinear sampling so gradients reach the patch.
ApplyResult apply_patch(const Tensor& patch, const Tensor& image, const TransformSample& t);

// Differentiable version; gradients flow to the patch node through the
// bilinear weights and the brightness factor (zero where clipping saturates).
NodeId apply_patch_node(Graph& g, NodeId patch, const Tensor& image, const TransformSample& t,
                        PatchMask* mask_out = nullptr);

// Axis-aligned bounding box of the warped patch footprint.
Box footprint_box(const TransformSample& t, int patch_size, int image_size);

}  // namespace patchforge
