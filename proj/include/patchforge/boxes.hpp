#pragma once

#include <vector>

namespace patchforge {

// Axis-aligned box in pixel coordinates, corner form.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
};

struct LabeledBox {
    int class_id = 0;
    Box box;
};

// y in the attack objective: the labeled boxes of one image.
using GroundTruth = std::vector<LabeledBox>;

struct Detection {
    Box box;
    double objectness = 0;
    int class_id = 0;
    double class_prob = 0;
    double confidence = 0;  // objectness * class_prob
    int image_id = 0;
};

}  // namespace patchforge
