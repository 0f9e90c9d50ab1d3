#include "patchforge/eot.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace patchforge {

namespace {
constexpr double kPi = 3.14159265358979323846;
double deg2rad(double d) { return d * kPi / 180.0; }
}  // namespace

void TransformRanges::validate(int image_size) const {
    if (rx_min > rx_max || ry_min > ry_max || rz_min > rz_max) throw std::invalid_argument("empty rotation range");
    if (scale_min <= 0 || scale_min > scale_max) throw std::invalid_argument("bad scale range");
    if (brightness_min <= 0 || brightness_min > brightness_max) throw std::invalid_argument("bad brightness range");
    // generous bound on footprint growth from rotation + perspective
    if (scale_max * 1.6 > image_size)
        throw std::invalid_argument("image too small for the configured patch scale range");
}

Mat3 Mat3::identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
}

Mat3 Mat3::operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0;
            for (int k = 0; k < 3; ++k) acc += m[static_cast<std::size_t>(3 * i + k)] * o.m[static_cast<std::size_t>(3 * k + j)];
            r.m[static_cast<std::size_t>(3 * i + j)] = acc;
        }
    return r;
}

Mat3 Mat3::inverse() const {
    const double a = m[0], b = m[1], c = m[2], d = m[3], e = m[4], f = m[5], g = m[6], h = m[7], i = m[8];
    const double A = e * i - f * h, B = -(d * i - f * g), C = d * h - e * g;
    const double det = a * A + b * B + c * C;
    if (std::abs(det) < 1e-12) throw std::runtime_error("singular homography");
    Mat3 r;
    r.m = {A / det,
           -(b * i - c * h) / det,
           (b * f - c * e) / det,
           B / det,
           (a * i - c * g) / det,
           -(a * f - c * d) / det,
           C / det,
           -(a * h - b * g) / det,
           (a * e - b * d) / det};
    return r;
}

void Mat3::apply(double x, double y, double* ox, double* oy) const {
    const double w = m[6] * x + m[7] * y + m[8];
    *ox = (m[0] * x + m[1] * y + m[2]) / w;
    *oy = (m[3] * x + m[4] * y + m[5]) / w;
}

Mat3 homography(const TransformSample& t, int patch_size, int image_size) {
    const double P = patch_size;
    const double f = image_size;
    const double ax = deg2rad(t.rx), ay = deg2rad(t.ry), az = deg2rad(t.rz);

    // R = Rz * Ry * Rx
    const double cx = std::cos(ax), sx = std::sin(ax);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cz = std::cos(az), sz = std::sin(az);
    const double R[9] = {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
                         sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
                         -sy,     cy * sx,                cy * cx};

    // (u,v,1) -> centered unit square -> 3D point (z=0 plane) -> (X,Y,Z)
    Mat3 N;
    N.m = {1.0 / P, 0, -0.5, 0, 1.0 / P, -0.5, 0, 0, 1};
    Mat3 MR;
    MR.m = {R[0], R[1], 0, R[3], R[4], 0, R[6], R[7], 0};
    const Mat3 M = MR * N;

    // perspective projection with focal length f: (X,Y,Z) -> f*(X,Y)/(Z+f)
    Mat3 proj;
    proj.m = {f * M.m[0], f * M.m[1], f * M.m[2],
              f * M.m[3], f * M.m[4], f * M.m[5],
              M.m[6],     M.m[7],     M.m[8] + f};

    Mat3 place;
    place.m = {t.scale, 0, t.tx + t.scale / 2, 0, t.scale, t.ty + t.scale / 2, 0, 0, 1};
    return place * proj;
}

std::array<std::array<double, 2>, 4> project_corners(const TransformSample& t, int patch_size, int image_size) {
    const Mat3 H = homography(t, patch_size, image_size);
    const double P = patch_size;
    const double uv[4][2] = {{0, 0}, {P, 0}, {P, P}, {0, P}};
    std::array<std::array<double, 2>, 4> out;
    for (int i = 0; i < 4; ++i) H.apply(uv[i][0], uv[i][1], &out[static_cast<std::size_t>(i)][0], &out[static_cast<std::size_t>(i)][1]);
    return out;
}

Box footprint_box(const TransformSample& t, int patch_size, int image_size) {
    const auto c = project_corners(t, patch_size, image_size);
    Box b{c[0][0], c[0][1], c[0][0], c[0][1]};
    for (const auto& p : c) {
        b.x1 = std::min(b.x1, p[0]);
        b.y1 = std::min(b.y1, p[1]);
        b.x2 = std::max(b.x2, p[0]);
        b.y2 = std::max(b.y2, p[1]);
    }
    return b;
}

TransformSample sample_transform(const TransformRanges& ranges, int patch_size, int image_size, Rng& rng) {
    ranges.validate(image_size);
    TransformSample t;
    t.rx = rng.uniform(ranges.rx_min, ranges.rx_max);
    t.ry = rng.uniform(ranges.ry_min, ranges.ry_max);
    t.rz = rng.uniform(ranges.rz_min, ranges.rz_max);
    t.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
    t.brightness = rng.uniform(ranges.brightness_min, ranges.brightness_max);
    t.tx = 0;
    t.ty = 0;

    // translation last: keep the whole rotated footprint inside the image
    const Box fp = footprint_box(t, patch_size, image_size);
    const double tx_lo = -fp.x1, tx_hi = image_size - fp.x2;
    const double ty_lo = -fp.y1, ty_hi = image_size - fp.y2;
    if (tx_lo > tx_hi || ty_lo > ty_hi)
        throw std::invalid_argument("image too small for the sampled patch footprint");
    t.tx = rng.uniform(tx_lo, tx_hi);
    t.ty = rng.uniform(ty_lo, ty_hi);
    return t;
}

Tensor brightness(const Tensor& patch, double factor) {
    if (factor <= 0) throw std::invalid_argument("brightness factor must be positive");
    if (factor == 1.0) return patch;
    Tensor out(patch.shape());
    const float f = static_cast<float>(factor);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(patch[i] * f, 0.0f, 1.0f);
    return out;
}

namespace {

struct WarpPlan {
    PatchMask mask;
    // one entry per masked pixel, scan order
    struct Sample {
        int y, x;          // image pixel
        int tx[4], ty[4];  // texel indices, -1 when outside the patch
        float w[4];
    };
    std::vector<Sample> samples;
};

WarpPlan plan_warp(const TransformSample& t, int patch_size, const Tensor& image, int image_size) {
    WarpPlan plan;
    const int h = image.dim(1), w = image.dim(2);
    plan.mask.height = h;
    plan.mask.width = w;
    plan.mask.inside.assign(static_cast<std::size_t>(h) * w, 0);

    const Mat3 H = homography(t, patch_size, image_size);
    const Mat3 Hinv = H.inverse();
    const auto corners = project_corners(t, patch_size, image_size);

    // orientation-aware convex quad test
    double orient = 0;
    for (int i = 0; i < 4; ++i) {
        const auto& a = corners[static_cast<std::size_t>(i)];
        const auto& b = corners[static_cast<std::size_t>((i + 1) % 4)];
        orient += (b[0] - a[0]) * (b[1] + a[1]);
    }
    const double sgn = orient >= 0 ? 1.0 : -1.0;
    auto inside_quad = [&](double px, double py) {
        for (int i = 0; i < 4; ++i) {
            const auto& a = corners[static_cast<std::size_t>(i)];
            const auto& b = corners[static_cast<std::size_t>((i + 1) % 4)];
            const double cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
            if (sgn * cross > 0) return false;
        }
        return true;
    };

    Box fp{corners[0][0], corners[0][1], corners[0][0], corners[0][1]};
    for (const auto& c : corners) {
        fp.x1 = std::min(fp.x1, c[0]);
        fp.y1 = std::min(fp.y1, c[1]);
        fp.x2 = std::max(fp.x2, c[0]);
        fp.y2 = std::max(fp.y2, c[1]);
    }
    const int x0 = std::max(0, static_cast<int>(std::floor(fp.x1)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(fp.x2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(fp.y1)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(fp.y2)));

    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            if (!inside_quad(px, py)) continue;
            double u, v;
            Hinv.apply(px, py, &u, &v);
            u = std::clamp(u, 0.0, static_cast<double>(patch_size));
            v = std::clamp(v, 0.0, static_cast<double>(patch_size));
            double fx = u - 0.5, fy = v - 0.5;
            // snap near-integer sample positions so axis-aligned placements
            // (identity, 90-degree z rotations) reduce to exact texel copies
            if (std::abs(fx - std::round(fx)) < 1e-9) fx = std::round(fx);
            if (std::abs(fy - std::round(fy)) < 1e-9) fy = std::round(fy);
            const int bx = static_cast<int>(std::floor(fx));
            const int by = static_cast<int>(std::floor(fy));
            const float wx = static_cast<float>(fx - bx), wy = static_cast<float>(fy - by);

            WarpPlan::Sample s;
            s.y = y;
            s.x = x;
            const int xs[4] = {bx, bx + 1, bx, bx + 1};
            const int ys[4] = {by, by, by + 1, by + 1};
            const float ws[4] = {(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy};
            for (int k = 0; k < 4; ++k) {
                // texels outside the patch contribute zero
                const bool ok = xs[k] >= 0 && xs[k] < patch_size && ys[k] >= 0 && ys[k] < patch_size;
                s.tx[k] = ok ? xs[k] : -1;
                s.ty[k] = ok ? ys[k] : -1;
                s.w[k] = ws[k];
            }
            plan.mask.inside[static_cast<std::size_t>(y) * w + x] = 1;
            plan.samples.push_back(s);
        }
    return plan;
}

Tensor composite(const Tensor& adjusted_patch, const Tensor& image, const WarpPlan& plan) {
    Tensor out = image;
    for (const auto& s : plan.samples)
        for (int c = 0; c < 3; ++c) {
            float acc = 0.0f;
            for (int k = 0; k < 4; ++k)
                if (s.tx[k] >= 0) acc += s.w[k] * adjusted_patch.at3(c, s.ty[k], s.tx[k]);
            out.at3(c, s.y, s.x) = acc;
        }
    return out;
}

}  // namespace

ApplyResult apply_patch(const Tensor& patch, const Tensor& image, const TransformSample& t) {
    if (patch.rank() != 3 || patch.dim(0) != 3 || patch.dim(1) != patch.dim(2))
        throw std::invalid_argument("patch must be [3,P,P]");
    if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("image must be [3,H,W]");
    const int P = patch.dim(1);
    const int image_size = image.dim(2);
    WarpPlan plan = plan_warp(t, P, image, image_size);
    const Tensor adjusted = brightness(patch, t.brightness);
    return {composite(adjusted, image, plan), std::move(plan.mask)};
}

NodeId apply_patch_node(Graph& g, NodeId patch, const Tensor& image, const TransformSample& t, PatchMask* mask_out) {
    const Tensor patch_value = g.value(patch);
    if (patch_value.rank() != 3 || patch_value.dim(0) != 3 || patch_value.dim(1) != patch_value.dim(2))
        throw std::invalid_argument("patch must be [3,P,P]");
    const int P = patch_value.dim(1);
    const int image_size = image.dim(2);
    auto plan = std::make_shared<WarpPlan>(plan_warp(t, P, image, image_size));
    const Tensor adjusted = brightness(patch_value, t.brightness);
    Tensor out = composite(adjusted, image, *plan);
    if (mask_out) *mask_out = plan->mask;

    const double factor = t.brightness;
    return g.custom({patch}, std::move(out),
                    [plan, patch_value, factor](const Tensor& gout, const std::vector<Tensor*>& gin) {
                        if (!gin[0]) return;
                        Tensor& gp = *gin[0];
                        const float f = static_cast<float>(factor);
                        for (const auto& s : plan->samples)
                            for (int c = 0; c < 3; ++c) {
                                const float go = gout.at3(c, s.y, s.x);
                                if (go == 0.0f) continue;
                                for (int k = 0; k < 4; ++k) {
                                    if (s.tx[k] < 0) continue;
                                    float d;
                                    if (factor == 1.0) {
                                        d = 1.0f;
                                    } else {
                                        const float scaled = patch_value.at3(c, s.ty[k], s.tx[k]) * f;
                                        d = (scaled > 0.0f && scaled < 1.0f) ? f : 0.0f;
                                    }
                                    gp.at3(c, s.ty[k], s.tx[k]) += go * s.w[k] * d;
                                }
                            }
                    });
}

}  // namespace patchforge
