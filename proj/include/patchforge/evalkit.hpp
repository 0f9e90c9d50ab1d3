#pragma once

#include <optional>
#include <string>
#include <vector>

#include "patchforge/boxes.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

// intersection area / union area; 0 for disjoint or degenerate boxes
double iou(const Box& a, const Box& b);

// Greedy per-class NMS. Output sorted by confidence descending; ties broken by
// lower class_id, then lower box.x1.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

// All-points interpolated AP at a fixed IoU match threshold. Detections carry
// image ids; each truth instance matches at most once (highest-IoU truth wins).
struct TruthInstance {
    int image_id = 0;
    Box box;
};
double average_precision(std::vector<Detection> dets, const std::vector<TruthInstance>& truths, double iou_match = 0.5);

struct EvalReport {
    double conf_threshold = 0;
    std::vector<std::string> class_names;
    std::vector<double> class_ap;     // NaN for classes excluded (no truth)
    std::vector<bool> class_excluded;
    double map = 0;                   // mean over non-excluded classes
    int num_images = 0;
    int num_objects = 0;
};

void write_report_csv(const std::string& path, const EvalReport& report);
EvalReport read_report_csv(const std::string& path);

// Aggregates per-class AP over a whole detection run.
EvalReport aggregate_map(const std::vector<std::vector<Detection>>& dets_per_image,
                         const std::vector<GroundTruth>& truths_per_image,
                         const std::vector<std::string>& class_names, double conf_threshold,
                         double iou_match = 0.5);

// S x S grid of max pre-NMS confidence per cell (max over the B boxes).
struct Heatmap {
    int grid = 0;
    std::vector<double> values;  // row-major, in [0,1]

    double at(int row, int col) const { return values[static_cast<std::size_t>(row) * grid + col]; }
    std::pair<int, int> argmax_cell() const;
};

void write_heatmap_csv(const std::string& path, const Heatmap& hm);
void write_heatmap_png(const std::string& path, const Heatmap& hm, int upscale = 16);

}  // namespace patchforge
