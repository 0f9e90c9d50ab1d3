#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patchforge/detector.hpp"
#include "patchforge/eot.hpp"

namespace patchforge {

enum class AttackMethod { PgdUntargeted, Dpatch };
enum class PlacementMode { FixedTopLeft, Eot };
enum class SignMode { SignOfBuffer, BufferOfSign };
enum class PatchInit { Uniform, Constant };

struct AttackConfig {
    AttackMethod method = AttackMethod::PgdUntargeted;
    bool clip = true;
    double lr = 0.1;
    double momentum = 0.9;
    double decay = 0.95;
    int decay_every = 5;
    int iters_per_step = 100;
    int steps = 30;
    int restarts = 5;
    int batch = 8;
    PlacementMode placement = PlacementMode::Eot;
    TransformRanges ranges;
    double fixed_scale = 37;  // 128-px analog of a fixed 120x120 patch on 416
    int patch_size = 32;
    int dpatch_target = 0;
    SignMode sign_mode = SignMode::SignOfBuffer;
    PatchInit init = PatchInit::Uniform;
    int val_every = 5;
    double val_conf = 0.5;
    double nms_iou = 0.45;
    bool verbose = false;

    void validate(int image_size) const;
};

// learning-rate schedule: lr * decay^floor(step / decay_every)
double scheduled_lr(const AttackConfig& config, int step);

struct StepRecord {
    int step = 0;
    double mean_loss = 0;
    double lr = 0;
    double val_map = 0;
    bool has_val = false;
    double patch_min = 0, patch_max = 0;
};

struct RestartHistory {
    std::vector<StepRecord> steps;
    double final_val_map = 0;
    double final_loss = 0;
    double wall_seconds = 0;
};

struct AttackResult {
    Tensor best_patch;
    int best_restart = 0;
    std::vector<RestartHistory> history;
};

struct BatchItem {
    const Tensor* image;
    const GroundTruth* truth;
};

// Untargeted sign-ascent step: the patch climbs the detection loss under the
// ORIGINAL labels; momentum accumulates raw gradients and the sign is taken
// of the buffer (SignMode::BufferOfSign instead accumulates signed steps).
// Returns the mean batch loss before the update.
double attack_step_pgd(Tensor& patch, const std::vector<BatchItem>& batch, const std::vector<TransformSample>& transforms,
                       const DetectorParams& params, double lr, Tensor& velocity, double momentum, bool clip,
                       SignMode sign_mode);

// DPatch's crafted target: a single box of target_class covering the warped
// patch footprint; all original ground truth discarded.
GroundTruth build_dpatch_target(const TransformSample& t, int patch_size, int image_size, int target_class);

// Gradient-descent step toward the crafted target (Dpatch baseline); in
// unclipped mode patch values may leave [0,1].
double attack_step_dpatch(Tensor& patch, const std::vector<BatchItem>& batch, const std::vector<TransformSample>& transforms,
                          const DetectorParams& params, double lr, Tensor& velocity, double momentum, bool clip,
                          int target_class);

struct PlacementPolicy {
    PlacementMode mode = PlacementMode::FixedTopLeft;
    double fixed_scale = 37;
    TransformRanges ranges;
    std::uint64_t seed = 0;  // random per-image placement stream
};

// mAP-50 of the detector on a dataset with the patch composited per the
// placement policy (pass patch = nullptr for the plain baseline report).
EvalReport evaluate_patched_map50(const DetectorParams& params, const std::vector<Scene>& dataset, const Tensor* patch,
                                  const PlacementPolicy& policy, double conf_threshold, double nms_iou = 0.45);

// Full driver: restarts x steps x iterations with lr decay and periodic
// validation; the winner is the restart with the lowest final validation mAP.
AttackResult run_attack(const AttackConfig& config, const std::vector<Scene>& train_set,
                        const std::vector<Scene>& val_set, const DetectorParams& params, std::uint64_t seed);

void write_history_csv(const std::string& path, const RestartHistory& history);

}  // namespace patchforge
