#include "patchforge/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace patchforge {

void AttackConfig::validate(int image_size) const {
    if (lr <= 0) throw std::invalid_argument("attack lr must be positive");
    if (momentum < 0 || momentum >= 1) throw std::invalid_argument("momentum must be in [0,1)");
    if (restarts < 1) throw std::invalid_argument("need at least one restart");
    if (batch < 1 || iters_per_step < 1 || steps < 0) throw std::invalid_argument("bad attack schedule");
    if (patch_size < 1 || patch_size > image_size) throw std::invalid_argument("bad patch size");
    if (placement == PlacementMode::Eot) ranges.validate(image_size);
}

double scheduled_lr(const AttackConfig& config, int step) {
    return config.lr * std::pow(config.decay, step / config.decay_every);
}

namespace {

// mean over the batch of d J / d patch; parallel per image, reduced in index order
double patch_gradient(const Tensor& patch, const std::vector<BatchItem>& batch,
                      const std::vector<TransformSample>& transforms, const DetectorParams& params,
                      const std::vector<GroundTruth>* target_override, Tensor& grad) {
    const int n = static_cast<int>(batch.size());
    std::vector<Tensor> per_image(static_cast<std::size_t>(n));
    std::vector<double> losses(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        Graph g;
        NodeId pnode = g.leaf(patch, true);
        NodeId patched = apply_patch_node(g, pnode, *batch[static_cast<std::size_t>(i)].image,
                                          transforms[static_cast<std::size_t>(i)]);
        auto pn = param_leaves(g, params, false);
        NodeId grid = forward_node(g, pn, patched, params.config);
        const GroundTruth& truth = target_override ? (*target_override)[static_cast<std::size_t>(i)]
                                                   : *batch[static_cast<std::size_t>(i)].truth;
        NodeId loss = detection_loss_node(g, grid, truth, params.config);
        losses[static_cast<std::size_t>(i)] = g.value(loss)[0];
        GradientMap gm = g.backward(loss);
        per_image[static_cast<std::size_t>(i)] = std::move(gm.at(pnode));
    }

    grad = Tensor(patch.shape());
    const float inv = 1.0f / static_cast<float>(n);
    double mean_loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const Tensor& gi = per_image[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += gi[j] * inv;
        mean_loss += losses[static_cast<std::size_t>(i)] / n;
    }
    if (!grad.all_finite() || !std::isfinite(mean_loss))
        throw std::runtime_error("attack: non-finite gradient (loss " + std::to_string(mean_loss) + ")");
    return mean_loss;
}

float sign_of(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

}  // namespace

double attack_step_pgd(Tensor& patch, const std::vector<BatchItem>& batch, const std::vector<TransformSample>& transforms,
                       const DetectorParams& params, double lr, Tensor& velocity, double momentum, bool clip,
                       SignMode sign_mode) {
    Tensor grad;
    const double mean_loss = patch_gradient(patch, batch, transforms, params, nullptr, grad);
    const float m = static_cast<float>(momentum);
    const float a = static_cast<float>(lr);
    for (std::size_t i = 0; i < patch.size(); ++i) {
        float step;
        if (sign_mode == SignMode::SignOfBuffer) {
            velocity[i] = m * velocity[i] + grad[i];
            step = sign_of(velocity[i]);
        } else {
            velocity[i] = m * velocity[i] + sign_of(grad[i]);
            step = velocity[i];
        }
        patch[i] += a * step;
        if (clip) patch[i] = std::clamp(patch[i], 0.0f, 1.0f);
    }
    return mean_loss;
}

GroundTruth build_dpatch_target(const TransformSample& t, int patch_size, int image_size, int target_class) {
    Box fp = footprint_box(t, patch_size, image_size);
    fp.x1 = std::clamp<double>(fp.x1, 0, image_size);
    fp.y1 = std::clamp<double>(fp.y1, 0, image_size);
    fp.x2 = std::clamp<double>(fp.x2, 0, image_size);
    fp.y2 = std::clamp<double>(fp.y2, 0, image_size);
    return {LabeledBox{target_class, fp}};
}

double attack_step_dpatch(Tensor& patch, const std::vector<BatchItem>& batch, const std::vector<TransformSample>& transforms,
                          const DetectorParams& params, double lr, Tensor& velocity, double momentum, bool clip,
                          int target_class) {
    const int image_size = params.config.image_size;
    std::vector<GroundTruth> targets;
    targets.reserve(batch.size());
    for (const auto& t : transforms)
        targets.push_back(build_dpatch_target(t, patch.dim(1), image_size, target_class));
    Tensor grad;
    const double mean_loss = patch_gradient(patch, batch, transforms, params, &targets, grad);
    const float m = static_cast<float>(momentum);
    const float a = static_cast<float>(lr);
    for (std::size_t i = 0; i < patch.size(); ++i) {
        velocity[i] = m * velocity[i] + grad[i];
        patch[i] -= a * velocity[i];
        if (clip) patch[i] = std::clamp(patch[i], 0.0f, 1.0f);
    }
    return mean_loss;
}

EvalReport evaluate_patched_map50(const DetectorParams& params, const std::vector<Scene>& dataset, const Tensor* patch,
                                  const PlacementPolicy& policy, double conf_threshold, double nms_iou) {
    const int n = static_cast<int>(dataset.size());
    std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(n));
    std::vector<GroundTruth> truths(static_cast<std::size_t>(n));
    Rng master(policy.seed);
    std::vector<TransformSample> transforms(static_cast<std::size_t>(n));
    if (patch) {
        for (int i = 0; i < n; ++i) {
            if (policy.mode == PlacementMode::Eot) {
                Rng r = master.fork(static_cast<std::uint64_t>(i));
                transforms[static_cast<std::size_t>(i)] =
                    sample_transform(policy.ranges, patch->dim(1), params.config.image_size, r);
            } else {
                transforms[static_cast<std::size_t>(i)] = TransformSample::identity(policy.fixed_scale);
            }
        }
    }
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        const Scene& scene = dataset[static_cast<std::size_t>(i)];
        truths[static_cast<std::size_t>(i)] = scene.truth;
        if (patch) {
            ApplyResult applied = apply_patch(*patch, scene.image, transforms[static_cast<std::size_t>(i)]);
            dets[static_cast<std::size_t>(i)] = detect(params, applied.image, conf_threshold, nms_iou);
        } else {
            dets[static_cast<std::size_t>(i)] = detect(params, scene.image, conf_threshold, nms_iou);
        }
    }
    std::vector<std::string> names;
    for (int c = 0; c < params.config.classes; ++c) names.push_back(shape_name(static_cast<ShapeKind>(c)));
    return aggregate_map(dets, truths, names, conf_threshold);
}

AttackResult run_attack(const AttackConfig& config, const std::vector<Scene>& train_set,
                        const std::vector<Scene>& val_set, const DetectorParams& params, std::uint64_t seed) {
    config.validate(params.config.image_size);
    if (train_set.empty()) throw std::invalid_argument("attack: empty training set");
    const int image_size = params.config.image_size;
    const int P = config.patch_size;

    AttackResult result;
    double best_map = 0.0;
    double best_loss = 0.0;

    for (int restart = 0; restart < config.restarts; ++restart) {
        Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(restart));
        Tensor patch({3, P, P});
        if (config.init == PatchInit::Uniform) {
            for (std::size_t i = 0; i < patch.size(); ++i) patch[i] = static_cast<float>(rng.uniform());
        } else {
            patch.fill(0.5f);
        }
        Tensor velocity(patch.shape());

        RestartHistory history;
        const auto t_start = std::chrono::steady_clock::now();
        double final_loss = 0.0;
        double final_val = 0.0;
        bool validated = false;

        for (int step = 0; step < config.steps; ++step) {
            const double lr = scheduled_lr(config, step);
            double step_loss = 0.0;
            for (int iter = 0; iter < config.iters_per_step; ++iter) {
                std::vector<BatchItem> batch;
                std::vector<TransformSample> transforms;
                batch.reserve(static_cast<std::size_t>(config.batch));
                for (int i = 0; i < config.batch; ++i) {
                    const auto idx = static_cast<std::size_t>(
                        rng.uniform_int(0, static_cast<std::int64_t>(train_set.size()) - 1));
                    batch.push_back({&train_set[idx].image, &train_set[idx].truth});
                    if (config.placement == PlacementMode::Eot)
                        transforms.push_back(sample_transform(config.ranges, P, image_size, rng));
                    else
                        transforms.push_back(TransformSample::identity(config.fixed_scale));
                }
                double loss;
                if (config.method == AttackMethod::PgdUntargeted)
                    loss = attack_step_pgd(patch, batch, transforms, params, lr, velocity, config.momentum, config.clip,
                                           config.sign_mode);
                else
                    loss = attack_step_dpatch(patch, batch, transforms, params, lr, velocity, config.momentum,
                                              config.clip, config.dpatch_target);
                step_loss += loss / config.iters_per_step;
                if (config.clip && (patch.min_value() < 0.0f || patch.max_value() > 1.0f))
                    throw std::logic_error("clip invariant violated");
            }

            StepRecord rec;
            rec.step = step;
            rec.mean_loss = step_loss;
            rec.lr = lr;
            rec.patch_min = patch.min_value();
            rec.patch_max = patch.max_value();
            final_loss = step_loss;

            const bool last = step + 1 == config.steps;
            if (!val_set.empty() && ((step + 1) % config.val_every == 0 || last)) {
                PlacementPolicy policy;
                policy.mode = config.placement;
                policy.fixed_scale = config.fixed_scale;
                policy.ranges = config.ranges;
                policy.seed = seed ^ 0x7a11da7eULL;
                rec.val_map = evaluate_patched_map50(params, val_set, &patch, policy, config.val_conf, config.nms_iou).map;
                rec.has_val = true;
                final_val = rec.val_map;
                validated = true;
            }
            history.steps.push_back(rec);
            if (config.verbose)
                std::fprintf(stderr, "restart %d step %d lr %.5f loss %.4f%s val_map %.4f\n", restart, step, lr,
                             step_loss, rec.has_val ? "" : " (no-val)", rec.has_val ? rec.val_map : -1.0);
        }

        history.final_loss = final_loss;
        history.final_val_map = validated ? final_val : 0.0;
        history.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

        const bool better = result.history.empty() || history.final_val_map < best_map ||
                            (history.final_val_map == best_map && history.final_loss > best_loss);
        if (better) {
            best_map = history.final_val_map;
            best_loss = history.final_loss;
            result.best_patch = patch;
            result.best_restart = restart;
        }
        result.history.push_back(std::move(history));
    }
    return result;
}

void write_history_csv(const std::string& path, const RestartHistory& history) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "step,loss,lr,map50\n";
    char buf[160];
    for (const auto& rec : history.steps) {
        if (rec.has_val)
            std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f", rec.step, rec.mean_loss, rec.lr, rec.val_map);
        else
            std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,", rec.step, rec.mean_loss, rec.lr);
        os << buf << '\n';
    }
    if (!os) throw std::runtime_error("write failed for " + path);
}

}  // namespace patchforge
