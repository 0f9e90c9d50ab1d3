// patchforge: synthetic-scene detector training and adversarial patch
// experiments, driven by reproducible manifest-writing subcommands.

#include <omp.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>

#include "patchforge/attack.hpp"
#include "patchforge/detector.hpp"
#include "patchforge/image_io.hpp"
#include "patchforge/scenegen.hpp"

namespace fs = std::filesystem;
using namespace patchforge;

namespace {

void apply_thread_cap() {
    if (const char* env = std::getenv("PATCHFORGE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
}

void write_snapshot(const std::string& out_dir, const std::vector<std::pair<std::string, std::string>>& kv) {
    fs::create_directories(out_dir);
    std::ofstream os((fs::path(out_dir) / "config_resolved.txt").string());
    for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

struct EvalArgs {
    std::string weights, data, out, patch_path, placement = "random", label = "baseline";
    std::vector<double> confs = {0.001, 0.1, 0.5};
    double fixed_scale = 37, nms_iou = 0.45;
    std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& a) {
    DetectorParams params = load_weights(a.weights);
    std::vector<Scene> dataset = load_dataset(a.data);
    Tensor patch;
    const bool have_patch = !a.patch_path.empty();
    if (have_patch) patch = load_tensor_file(a.patch_path);
    PlacementPolicy policy;
    policy.mode = a.placement == "topleft" ? PlacementMode::FixedTopLeft : PlacementMode::Eot;
    policy.fixed_scale = a.fixed_scale;
    policy.seed = a.seed;
    fs::create_directories(a.out);
    for (double conf : a.confs) {
        EvalReport report = evaluate_patched_map50(params, dataset, have_patch ? &patch : nullptr, policy, conf, a.nms_iou);
        const std::string path = (fs::path(a.out) / (a.label + "_conf" + fmt(conf) + ".csv")).string();
        write_report_csv(path, report);
        std::printf("%s conf %g mAP-50 %.4f -> %s\n", a.label.c_str(), conf, report.map, path.c_str());
    }
    write_snapshot(a.out, {{"command", "eval"},
                           {"weights", a.weights},
                           {"data", a.data},
                           {"patch", a.patch_path},
                           {"placement", a.placement},
                           {"fixed_scale", fmt(a.fixed_scale)},
                           {"nms_iou", fmt(a.nms_iou)},
                           {"label", a.label},
                           {"seed", std::to_string(a.seed)}});
    return 0;
}

int run_report(const std::string& dir) {
    struct Row {
        std::string method;
        double conf;
        EvalReport report;
    };
    std::vector<Row> rows;
    const std::regex name_re(R"((.+)_conf([0-9.eE+-]+)\.csv)");
    for (const auto& entry : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (!std::regex_match(name, m, name_re)) continue;
        rows.push_back({m[1].str(), std::stod(m[2].str()), read_report_csv(entry.path().string())});
    }
    if (rows.empty()) {
        std::cerr << "no evaluation CSVs found in " << dir << "\n";
        return 2;
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return a.method != b.method ? a.method < b.method : a.conf < b.conf;
    });
    std::printf("%-16s %-7s %-8s %-22s %-22s\n", "Method", "Conf.", "mAP (%)", "Smallest AP (%)", "Largest AP (%)");
    for (const auto& row : rows) {
        int lo = -1, hi = -1;
        for (std::size_t c = 0; c < row.report.class_names.size(); ++c) {
            if (row.report.class_excluded[c]) continue;
            if (lo < 0 || row.report.class_ap[c] < row.report.class_ap[static_cast<std::size_t>(lo)]) lo = static_cast<int>(c);
            if (hi < 0 || row.report.class_ap[c] > row.report.class_ap[static_cast<std::size_t>(hi)]) hi = static_cast<int>(c);
        }
        char small[48] = "-", large[48] = "-";
        if (lo >= 0)
            std::snprintf(small, sizeof(small), "%.2f (%s)", 100 * row.report.class_ap[static_cast<std::size_t>(lo)],
                          row.report.class_names[static_cast<std::size_t>(lo)].c_str());
        if (hi >= 0)
            std::snprintf(large, sizeof(large), "%.2f (%s)", 100 * row.report.class_ap[static_cast<std::size_t>(hi)],
                          row.report.class_names[static_cast<std::size_t>(hi)].c_str());
        std::printf("%-16s %-7g %-8.2f %-22s %-22s\n", row.method.c_str(), row.conf, 100 * row.report.map, small, large);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    CLI::App app{"patchforge: miniature grid detector + adversarial patch toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a labeled synthetic shape dataset");
    int gen_count = 100, gen_image_size = 128, gen_min_obj = 1, gen_max_obj = 4;
    double gen_min_size = 16, gen_max_size = 48;
    std::uint64_t gen_seed = 1;
    std::string gen_out, gen_background = "mixed";
    gen->add_option("--count", gen_count, "number of images");
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--image-size", gen_image_size);
    gen->add_option("--min-objects", gen_min_obj);
    gen->add_option("--max-objects", gen_max_obj);
    gen->add_option("--min-size", gen_min_size);
    gen->add_option("--max-size", gen_max_size);
    gen->add_option("--background", gen_background, "flat|gradient|noise|mixed");
    gen->set_config("--config");

    // train
    auto* tr = app.add_subcommand("train", "train the MiniYOLO detector");
    std::string tr_data, tr_val, tr_out;
    TrainConfig tr_cfg;
    int tr_grid = 8;
    tr->add_option("--data", tr_data, "training dataset directory")->required();
    tr->add_option("--val-data", tr_val, "validation dataset directory");
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--epochs", tr_cfg.epochs);
    tr->add_option("--lr", tr_cfg.lr);
    tr->add_option("--momentum", tr_cfg.momentum);
    tr->add_option("--batch", tr_cfg.batch);
    tr->add_option("--grad-clip", tr_cfg.grad_clip, "global gradient-norm cap (0 disables)");
    tr->add_option("--lr-decay", tr_cfg.lr_decay, "per-epoch multiplicative lr factor");
    tr->add_option("--seed", tr_cfg.seed);
    tr->add_option("--grid", tr_grid);
    tr->add_flag("--verbose", tr_cfg.verbose);
    tr->set_config("--config");

    // attack
    auto* at = app.add_subcommand("attack", "optimize an adversarial patch against trained weights");
    std::string at_weights, at_data, at_val, at_out, at_method = "pgd", at_placement = "eot", at_sign = "buffer",
                at_init = "uniform";
    AttackConfig at_cfg;
    std::uint64_t at_seed = 1;
    bool at_no_clip = false;
    at->add_option("--weights", at_weights)->required();
    at->add_option("--data", at_data, "attack training dataset")->required();
    at->add_option("--val-data", at_val, "attack validation dataset")->required();
    at->add_option("--out", at_out)->required();
    at->add_option("--method", at_method, "pgd|dpatch");
    at->add_flag("--no-clip", at_no_clip, "disable [0,1] clipping of the patch");
    at->add_option("--lr", at_cfg.lr);
    at->add_option("--momentum", at_cfg.momentum);
    at->add_option("--decay", at_cfg.decay);
    at->add_option("--steps", at_cfg.steps);
    at->add_option("--iters", at_cfg.iters_per_step, "iterations per step");
    at->add_option("--restarts", at_cfg.restarts);
    at->add_option("--batch", at_cfg.batch);
    at->add_option("--patch-size", at_cfg.patch_size);
    at->add_option("--placement", at_placement, "eot|topleft");
    at->add_option("--fixed-scale", at_cfg.fixed_scale);
    at->add_option("--target-class", at_cfg.dpatch_target);
    at->add_option("--sign-mode", at_sign, "buffer (sign of momentum buffer) | presign");
    at->add_option("--init", at_init, "uniform|constant");
    at->add_option("--val-conf", at_cfg.val_conf);
    at->add_option("--seed", at_seed);
    at->add_flag("--verbose", at_cfg.verbose);
    at->set_config("--config");

    // eval
    auto* ev = app.add_subcommand("eval", "mAP-50 evaluation, optionally with a patch applied");
    EvalArgs ev_args;
    ev->add_option("--weights", ev_args.weights)->required();
    ev->add_option("--data", ev_args.data)->required();
    ev->add_option("--out", ev_args.out)->required();
    ev->add_option("--conf", ev_args.confs, "confidence thresholds")->expected(-1);
    ev->add_option("--patch", ev_args.patch_path, "patch tensor file");
    ev->add_option("--placement", ev_args.placement, "random|topleft");
    ev->add_option("--fixed-scale", ev_args.fixed_scale);
    ev->add_option("--nms-iou", ev_args.nms_iou);
    ev->add_option("--label", ev_args.label, "report label (e.g. baseline, ours, dpatch)");
    ev->add_option("--seed", ev_args.seed);
    ev->set_config("--config");

    // heatmap
    auto* hm = app.add_subcommand("heatmap", "export the pre-NMS confidence heatmap of an image");
    std::string hm_weights, hm_image, hm_patch, hm_out, hm_placement = "topleft";
    double hm_scale = 37;
    std::uint64_t hm_seed = 0;
    hm->add_option("--weights", hm_weights)->required();
    hm->add_option("--image", hm_image, "input image (png)")->required();
    hm->add_option("--patch", hm_patch, "optional patch tensor file");
    hm->add_option("--placement", hm_placement, "random|topleft");
    hm->add_option("--fixed-scale", hm_scale);
    hm->add_option("--seed", hm_seed);
    hm->add_option("--out", hm_out)->required();
    hm->set_config("--config");

    // report
    auto* rp = app.add_subcommand("report", "summarize evaluation CSVs as a method/confidence table");
    std::string rp_dir;
    rp->add_option("dir", rp_dir, "run directory containing evaluation CSVs")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) {
            SceneConfig cfg;
            cfg.image_size = gen_image_size;
            cfg.min_objects = gen_min_obj;
            cfg.max_objects = gen_max_obj;
            cfg.min_object_size = gen_min_size;
            cfg.max_object_size = gen_max_size;
            if (gen_background == "flat") cfg.background = BackgroundKind::Flat;
            else if (gen_background == "gradient") cfg.background = BackgroundKind::Gradient;
            else if (gen_background == "noise") cfg.background = BackgroundKind::Noise;
            else cfg.background = BackgroundKind::Mixed;
            generate_dataset(gen_seed, cfg, gen_count, gen_out);
            write_snapshot(gen_out, {{"command", "gen-data"},
                                     {"count", std::to_string(gen_count)},
                                     {"seed", std::to_string(gen_seed)},
                                     {"image_size", std::to_string(gen_image_size)},
                                     {"min_objects", std::to_string(gen_min_obj)},
                                     {"max_objects", std::to_string(gen_max_obj)},
                                     {"min_size", fmt(gen_min_size)},
                                     {"max_size", fmt(gen_max_size)},
                                     {"background", gen_background}});
            std::printf("wrote %d images to %s\n", gen_count, gen_out.c_str());
        } else if (tr->parsed()) {
            std::vector<Scene> data = load_dataset(tr_data);
            std::vector<Scene> val;
            if (!tr_val.empty()) {
                val = load_dataset(tr_val);
                tr_cfg.validate_each_epoch = true;
            }
            DetectorConfig dcfg;
            if (!data.empty()) dcfg.image_size = data.front().image.dim(1);
            dcfg.grid = tr_grid;
            TrainResult result = train(data, dcfg, tr_cfg, tr_val.empty() ? nullptr : &val);
            fs::create_directories(tr_out);
            save_weights((fs::path(tr_out) / "weights.pft").string(), result.params);
            {
                std::ofstream os((fs::path(tr_out) / "loss_history.csv").string());
                os << "epoch,loss,val_map50\n";
                for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
                    char buf[96];
                    if (e < result.epoch_val_map.size())
                        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f", e, result.epoch_loss[e], result.epoch_val_map[e]);
                    else
                        std::snprintf(buf, sizeof(buf), "%zu,%.6f,", e, result.epoch_loss[e]);
                    os << buf << '\n';
                }
            }
            write_snapshot(tr_out, {{"command", "train"},
                                    {"data", tr_data},
                                    {"val_data", tr_val},
                                    {"epochs", std::to_string(tr_cfg.epochs)},
                                    {"lr", fmt(tr_cfg.lr)},
                                    {"momentum", fmt(tr_cfg.momentum)},
                                    {"batch", std::to_string(tr_cfg.batch)},
                                    {"grad_clip", fmt(tr_cfg.grad_clip)},
                                    {"lr_decay", fmt(tr_cfg.lr_decay)},
                                    {"grid", std::to_string(tr_grid)},
                                    {"seed", std::to_string(tr_cfg.seed)}});
            std::printf("final training loss %.4f, weights at %s\n", result.epoch_loss.back(),
                        (fs::path(tr_out) / "weights.pft").string().c_str());
        } else if (at->parsed()) {
            DetectorParams params = load_weights(at_weights);
            const std::uint64_t weights_checksum = params.checksum();
            std::vector<Scene> data = load_dataset(at_data);
            std::vector<Scene> val = load_dataset(at_val);
            at_cfg.method = at_method == "dpatch" ? AttackMethod::Dpatch : AttackMethod::PgdUntargeted;
            at_cfg.clip = !at_no_clip;
            at_cfg.placement = at_placement == "topleft" ? PlacementMode::FixedTopLeft : PlacementMode::Eot;
            at_cfg.sign_mode = at_sign == "presign" ? SignMode::BufferOfSign : SignMode::SignOfBuffer;
            at_cfg.init = at_init == "constant" ? PatchInit::Constant : PatchInit::Uniform;
            AttackResult result = run_attack(at_cfg, data, val, params, at_seed);
            fs::create_directories(at_out);
            save_tensor_file((fs::path(at_out) / "best_patch.pft").string(), result.best_patch);
            write_png((fs::path(at_out) / "best_patch.png").string(), result.best_patch);
            for (std::size_t r = 0; r < result.history.size(); ++r)
                write_history_csv((fs::path(at_out) / ("history_restart" + std::to_string(r) + ".csv")).string(),
                                  result.history[r]);
            write_snapshot(at_out, {{"command", "attack"},
                                    {"weights", at_weights},
                                    {"weights_checksum", std::to_string(weights_checksum)},
                                    {"data", at_data},
                                    {"val_data", at_val},
                                    {"method", at_method},
                                    {"clip", at_cfg.clip ? "1" : "0"},
                                    {"lr", fmt(at_cfg.lr)},
                                    {"momentum", fmt(at_cfg.momentum)},
                                    {"decay", fmt(at_cfg.decay)},
                                    {"steps", std::to_string(at_cfg.steps)},
                                    {"iters", std::to_string(at_cfg.iters_per_step)},
                                    {"restarts", std::to_string(at_cfg.restarts)},
                                    {"batch", std::to_string(at_cfg.batch)},
                                    {"patch_size", std::to_string(at_cfg.patch_size)},
                                    {"placement", at_placement},
                                    {"fixed_scale", fmt(at_cfg.fixed_scale)},
                                    {"target_class", std::to_string(at_cfg.dpatch_target)},
                                    {"sign_mode", at_sign},
                                    {"init", at_init},
                                    {"val_conf", fmt(at_cfg.val_conf)},
                                    {"seed", std::to_string(at_seed)},
                                    {"best_restart", std::to_string(result.best_restart)}});
            std::printf("best restart %d, final val mAP-50 %.4f\n", result.best_restart,
                        result.history[static_cast<std::size_t>(result.best_restart)].final_val_map);
        } else if (ev->parsed()) {
            return run_eval(ev_args);
        } else if (hm->parsed()) {
            DetectorParams params = load_weights(hm_weights);
            Tensor image = read_png(hm_image);
            fs::create_directories(hm_out);
            if (!hm_patch.empty()) {
                Tensor patch = load_tensor_file(hm_patch);
                TransformSample t;
                if (hm_placement == "random") {
                    TransformRanges ranges;
                    Rng rng(hm_seed);
                    t = sample_transform(ranges, patch.dim(1), params.config.image_size, rng);
                } else {
                    t = TransformSample::identity(hm_scale);
                }
                ApplyResult applied = apply_patch(patch, image, t);
                image = applied.image;
                write_png((fs::path(hm_out) / "patched.png").string(), image);
            }
            Heatmap heat = roi_heatmap(infer(params, image));
            write_heatmap_png((fs::path(hm_out) / "heatmap.png").string(), heat);
            write_heatmap_csv((fs::path(hm_out) / "heatmap.csv").string(), heat);
            write_snapshot(hm_out, {{"command", "heatmap"},
                                    {"weights", hm_weights},
                                    {"image", hm_image},
                                    {"patch", hm_patch},
                                    {"placement", hm_placement},
                                    {"fixed_scale", fmt(hm_scale)},
                                    {"seed", std::to_string(hm_seed)}});
            std::printf("heatmap written to %s\n", hm_out.c_str());
        } else if (rp->parsed()) {
            return run_report(rp_dir);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
