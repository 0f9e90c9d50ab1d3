#include "patchforge/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "patchforge/image_io.hpp"

namespace patchforge {

double iou(const Box& a, const Box& b) {
    if (a.area() <= 0 || b.area() <= 0) return 0.0;
    const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

namespace {
bool det_order(const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.box.x1 < b.box.x1;
}
}  // namespace

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::sort(dets.begin(), dets.end(), det_order);
    std::vector<Detection> kept;
    std::vector<bool> dead(dets.size(), false);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dead[i]) continue;
        kept.push_back(dets[i]);
        for (std::size_t j = i + 1; j < dets.size(); ++j) {
            if (dead[j] || dets[j].class_id != dets[i].class_id) continue;
            if (iou(dets[i].box, dets[j].box) >= iou_threshold) dead[j] = true;
        }
    }
    return kept;
}

double average_precision(std::vector<Detection> dets, const std::vector<TruthInstance>& truths, double iou_match) {
    if (truths.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(dets.begin(), dets.end(), det_order);
    std::vector<bool> matched(truths.size(), false);
    std::vector<int> tp(dets.size(), 0);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        double best = 0.0;
        std::size_t best_t = truths.size();
        for (std::size_t t = 0; t < truths.size(); ++t) {
            if (matched[t] || truths[t].image_id != dets[i].image_id) continue;
            const double v = iou(dets[i].box, truths[t].box);
            if (v >= iou_match && v > best) {
                best = v;
                best_t = t;
            }
        }
        if (best_t < truths.size()) {
            matched[best_t] = true;
            tp[i] = 1;
        }
    }

    // precision-recall curve with precision made monotone from the right
    const double n_truth = static_cast<double>(truths.size());
    std::vector<double> precision(dets.size()), recall(dets.size());
    int cum_tp = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        cum_tp += tp[i];
        precision[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(cum_tp) / n_truth;
    }
    for (std::size_t i = dets.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

EvalReport aggregate_map(const std::vector<std::vector<Detection>>& dets_per_image,
                         const std::vector<GroundTruth>& truths_per_image,
                         const std::vector<std::string>& class_names, double conf_threshold, double iou_match) {
    const int num_classes = static_cast<int>(class_names.size());
    EvalReport report;
    report.conf_threshold = conf_threshold;
    report.class_names = class_names;
    report.num_images = static_cast<int>(truths_per_image.size());

    std::vector<std::vector<Detection>> by_class(static_cast<std::size_t>(num_classes));
    std::vector<std::vector<TruthInstance>> truth_by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t img = 0; img < dets_per_image.size(); ++img)
        for (Detection d : dets_per_image[img]) {
            if (d.confidence < conf_threshold || d.class_id >= num_classes) continue;
            d.image_id = static_cast<int>(img);
            by_class[static_cast<std::size_t>(d.class_id)].push_back(d);
        }
    for (std::size_t img = 0; img < truths_per_image.size(); ++img)
        for (const auto& lb : truths_per_image[img]) {
            truth_by_class[static_cast<std::size_t>(lb.class_id)].push_back({static_cast<int>(img), lb.box});
            ++report.num_objects;
        }

    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        const bool excluded = truth_by_class[static_cast<std::size_t>(c)].empty();
        report.class_excluded.push_back(excluded);
        if (excluded) {
            report.class_ap.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        const double ap = average_precision(by_class[static_cast<std::size_t>(c)],
                                            truth_by_class[static_cast<std::size_t>(c)], iou_match);
        report.class_ap.push_back(ap);
        sum += ap;
        ++counted;
    }
    report.map = counted > 0 ? sum / counted : 0.0;
    return report;
}

void write_report_csv(const std::string& path, const EvalReport& report) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "class,ap\n";
    char buf[64];
    for (std::size_t c = 0; c < report.class_names.size(); ++c) {
        if (report.class_excluded[c]) {
            os << report.class_names[c] << ",excluded\n";
        } else {
            std::snprintf(buf, sizeof(buf), "%.6f", report.class_ap[c]);
            os << report.class_names[c] << ',' << buf << '\n';
        }
    }
    std::snprintf(buf, sizeof(buf), "%.6f", report.map);
    os << "mAP," << buf << '\n';
    if (!os) throw std::runtime_error("write failed for " + path);
}

EvalReport read_report_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    EvalReport report;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) continue;
        const std::string name = line.substr(0, comma), value = line.substr(comma + 1);
        if (name == "mAP") {
            report.map = std::stod(value);
        } else {
            report.class_names.push_back(name);
            if (value == "excluded") {
                report.class_ap.push_back(std::numeric_limits<double>::quiet_NaN());
                report.class_excluded.push_back(true);
            } else {
                report.class_ap.push_back(std::stod(value));
                report.class_excluded.push_back(false);
            }
        }
    }
    return report;
}

std::pair<int, int> Heatmap::argmax_cell() const {
    int best = 0;
    for (int i = 1; i < grid * grid; ++i)
        if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(best)]) best = i;
    return {best / grid, best % grid};
}

void write_heatmap_csv(const std::string& path, const Heatmap& hm) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    char buf[64];
    for (int r = 0; r < hm.grid; ++r) {
        for (int c = 0; c < hm.grid; ++c) {
            std::snprintf(buf, sizeof(buf), "%.6f", hm.at(r, c));
            os << (c ? "," : "") << buf;
        }
        os << '\n';
    }
    if (!os) throw std::runtime_error("write failed for " + path);
}

void write_heatmap_png(const std::string& path, const Heatmap& hm, int upscale) {
    Tensor gray({1, hm.grid, hm.grid});
    for (int r = 0; r < hm.grid; ++r)
        for (int c = 0; c < hm.grid; ++c) gray.at3(0, r, c) = static_cast<float>(hm.at(r, c));
    write_png(path, upscale_nearest(gray, upscale));
}

}  // namespace patchforge
