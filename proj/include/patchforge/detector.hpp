#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchforge/autograd.hpp"
#include "patchforge/boxes.hpp"
#include "patchforge/evalkit.hpp"
#include "patchforge/scenegen.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

// MiniYOLO: one-shot S x S grid detector, B anchor boxes per cell, raw output
// channels laid out as b*(5+C)+f with f = {tx,ty,tw,th,to, class logits...}.
struct DetectorConfig {
    int image_size = 128;
    int grid = 8;       // S
    int boxes = 2;      // B
    int classes = 4;    // C
    std::vector<std::pair<double, double>> anchors = {{24, 24}, {48, 48}};  // w,h in pixels

    // backbone: conv blocks (out_channels, stride), 3x3 kernels, pad 1,
    // leaky-relu 0.1, followed by a linear 1x1 head
    std::vector<std::pair<int, int>> blocks = {{8, 2}, {16, 2}, {32, 2}, {64, 2}, {64, 1}};

    double lambda_coord = 5.0;
    double lambda_noobj = 0.5;
    double leaky_slope = 0.1;

    int head_channels() const { return boxes * (5 + classes); }
    double cell_size() const { return static_cast<double>(image_size) / grid; }
    void validate() const;
};

struct DetectorParams {
    DetectorConfig config;
    std::vector<Tensor> tensors;  // kernel,bias per block, then head kernel,bias

    static DetectorParams init(const DetectorConfig& config, std::uint64_t seed);
    std::uint64_t checksum() const;  // FNV-1a over raw bytes
};

void save_weights(const std::string& path, const DetectorParams& params);
DetectorParams load_weights(const std::string& path);

struct GridPrediction {
    Tensor logits;  // [B*(5+C), S, S]
    DetectorConfig config;

    float at(int b, int field, int row, int col) const {
        return logits.at3(b * (5 + config.classes) + field, row, col);
    }
};

// Graph-building forward pass (differentiable w.r.t. both params and image).
std::vector<NodeId> param_leaves(Graph& g, const DetectorParams& params, bool requires_grad);
NodeId forward_node(Graph& g, const std::vector<NodeId>& params, NodeId image, const DetectorConfig& config);

// Graph-free inference; bit-identical to the graph forward pass.
GridPrediction infer(const DetectorParams& params, const Tensor& image);

// Pre-NMS decode: center = (cell + sigmoid(txy)) * cell_size, size =
// anchor * exp(twh), objectness = sigmoid(to), class probs = softmax.
std::vector<Detection> decode(const GridPrediction& grid, double conf_threshold);

// Per-cell max over B of objectness * best class prob, before thresholding.
Heatmap roi_heatmap(const GridPrediction& grid);

// Composite detection loss J (coord MSE + objectness/class BCE + no-object
// BCE). For each ground-truth box, the highest-IoU predicted box of every
// overlapped grid cell is responsible for it.
double detection_loss_value(const Tensor& grid_logits, const GroundTruth& truth, const DetectorConfig& config,
                            Tensor* grad_out = nullptr);
NodeId detection_loss_node(Graph& g, NodeId grid, const GroundTruth& truth, const DetectorConfig& config);

struct TrainConfig {
    int epochs = 40;
    double lr = 0.01;
    double momentum = 0.9;
    int batch = 16;
    double grad_clip = 10.0;  // global gradient-norm cap; 0 disables
    double lr_decay = 1.0;    // per-epoch multiplicative lr factor
    std::uint64_t seed = 1;
    bool validate_each_epoch = false;
    double val_conf = 0.1;
    bool verbose = false;
};

struct TrainResult {
    DetectorParams params;
    std::vector<double> epoch_loss;
    std::vector<double> epoch_val_map;  // empty unless validation enabled
};

// Thrown when the training loss goes non-finite.
struct DivergenceError : std::runtime_error {
    int epoch;
    explicit DivergenceError(int e) : std::runtime_error("training diverged at epoch " + std::to_string(e)), epoch(e) {}
};

TrainResult train(const std::vector<Scene>& train_set, const DetectorConfig& config, const TrainConfig& tc,
                  const std::vector<Scene>* val_set = nullptr);

// forward -> decode -> per-class NMS for one image
std::vector<Detection> detect(const DetectorParams& params, const Tensor& image, double conf_threshold,
                              double nms_iou = 0.45);

// Dataset-level mAP-50 without patching (patched evaluation lives in attack).
EvalReport evaluate_map50(const DetectorParams& params, const std::vector<Scene>& dataset, double conf_threshold,
                          double nms_iou = 0.45);

std::vector<std::string> class_name_list(const SceneConfig& scene_config);

}  // namespace patchforge
