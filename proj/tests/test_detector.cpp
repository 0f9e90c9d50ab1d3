#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "patchforge/detector.hpp"
#include "patchforge/rng.hpp"

#include "detector_ref.hpp"
#include "fd_check.hpp"

using namespace patchforge;

namespace {

// small configuration to keep finite-difference passes fast
DetectorConfig tiny_config() {
    DetectorConfig cfg;
    cfg.image_size = 32;
    cfg.grid = 2;
    cfg.blocks = {{4, 2}, {8, 2}, {8, 2}, {8, 2}, {8, 1}};
    return cfg;
}

Tensor random_image(int size, Rng& rng) {
    Tensor t({3, size, size});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(0.0, 1.0));
    return t;
}

double softplus_ref(double z) { return std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0); }
double sigmoid_ref(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST_CASE("forward output shape is [B*(5+C), S, S] and deterministic") {
    DetectorConfig cfg;  // defaults: 128 px, S=8, B=2, C=4
    DetectorParams params = DetectorParams::init(cfg, 5);
    Rng rng(1);
    Tensor image = random_image(cfg.image_size, rng);
    GridPrediction a = infer(params, image);
    REQUIRE(a.logits.shape() == std::vector<int>({cfg.head_channels(), cfg.grid, cfg.grid}));
    GridPrediction b = infer(params, image);
    for (std::size_t i = 0; i < a.logits.size(); ++i) CHECK(a.logits[i] == b.logits[i]);
    CHECK(a.logits.all_finite());
}

TEST_CASE("graph forward pass is bit-identical to infer") {
    DetectorConfig cfg = tiny_config();
    DetectorParams params = DetectorParams::init(cfg, 9);
    Rng rng(2);
    Tensor image = random_image(cfg.image_size, rng);
    Graph g;
    NodeId out = forward_node(g, param_leaves(g, params, false), g.leaf(image, false), cfg);
    const Tensor& graph_logits = g.value(out);
    GridPrediction direct = infer(params, image);
    REQUIRE(graph_logits.shape() == direct.logits.shape());
    for (std::size_t i = 0; i < graph_logits.size(); ++i) CHECK(graph_logits[i] == direct.logits[i]);
}

TEST_CASE("forward rejects image size mismatch") {
    DetectorConfig cfg = tiny_config();
    DetectorParams params = DetectorParams::init(cfg, 3);
    Tensor wrong({3, 16, 16});
    CHECK_THROWS_AS(infer(params, wrong), std::invalid_argument);
}

TEST_CASE("decode: all objectness logits -100 gives an empty list") {
    DetectorConfig cfg;
    GridPrediction grid{Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid}), cfg};
    for (int b = 0; b < cfg.boxes; ++b)
        for (int r = 0; r < cfg.grid; ++r)
            for (int c = 0; c < cfg.grid; ++c) grid.logits.at3(b * (5 + cfg.classes) + 4, r, c) = -100.0f;
    CHECK(decode(grid, 0.001).empty());
    CHECK(decode(grid, 0.5).empty());
}

TEST_CASE("decode: tx=ty=0 in cell (0,0) centers the box at the cell midpoint") {
    DetectorConfig cfg;
    GridPrediction grid{Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid}), cfg};
    grid.logits.at3(2, 0, 0) = -5.0f;   // shrink the box so clamping at the
    grid.logits.at3(3, 0, 0) = -5.0f;   // image border cannot move its center
    grid.logits.at3(4, 0, 0) = 100.0f;  // objectness of box 0, cell (0,0)
    grid.logits.at3(5, 0, 0) = 10.0f;   // dominant class 0
    std::vector<Detection> dets = decode(grid, 0.9);
    REQUIRE(!dets.empty());
    const Detection& best = dets.front();
    CHECK(best.box.cx() == doctest::Approx(cfg.cell_size() / 2).epsilon(1e-6));
    CHECK(best.box.cy() == doctest::Approx(cfg.cell_size() / 2).epsilon(1e-6));
    CHECK(best.class_id == 0);
}

TEST_CASE("decode recovers a hand-encoded box within 0.5 px") {
    DetectorConfig cfg;
    const double cell = cfg.cell_size();
    // target box: center (52, 36), size 30x20, encoded in cell (2,3), anchor 0
    const double cx = 52, cy = 36, w = 30, h = 20;
    const int col = 3, row = 2;
    const double ox = cx / cell - col, oy = cy / cell - row;
    GridPrediction grid{Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid}), cfg};
    grid.logits.at3(0, row, col) = static_cast<float>(std::log(ox / (1 - ox)));
    grid.logits.at3(1, row, col) = static_cast<float>(std::log(oy / (1 - oy)));
    grid.logits.at3(2, row, col) = static_cast<float>(std::log(w / cfg.anchors[0].first));
    grid.logits.at3(3, row, col) = static_cast<float>(std::log(h / cfg.anchors[0].second));
    grid.logits.at3(4, row, col) = 100.0f;
    grid.logits.at3(5 + 2, row, col) = 10.0f;  // class 2
    std::vector<Detection> dets = decode(grid, 0.9);
    REQUIRE(dets.size() == 1);
    const Box& b = dets[0].box;
    CHECK(std::abs(b.x1 - (cx - w / 2)) <= 0.5);
    CHECK(std::abs(b.y1 - (cy - h / 2)) <= 0.5);
    CHECK(std::abs(b.x2 - (cx + w / 2)) <= 0.5);
    CHECK(std::abs(b.y2 - (cy + h / 2)) <= 0.5);
    CHECK(dets[0].class_id == 2);
}

TEST_CASE("decode monotonicity: higher threshold never yields more detections") {
    DetectorConfig cfg;
    Rng rng(4);
    GridPrediction grid{Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid}), cfg};
    for (std::size_t i = 0; i < grid.logits.size(); ++i) grid.logits[i] = static_cast<float>(rng.uniform(-3.0, 3.0));
    std::size_t prev = decode(grid, 0.001).size();
    for (double conf : {0.01, 0.1, 0.3, 0.5, 0.9}) {
        const std::size_t n = decode(grid, conf).size();
        CHECK(n <= prev);
        prev = n;
    }
}

TEST_CASE("softmax class probabilities are shift invariant") {
    DetectorConfig cfg;
    Rng rng(5);
    GridPrediction grid{Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid}), cfg};
    for (std::size_t i = 0; i < grid.logits.size(); ++i) grid.logits[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
    std::vector<Detection> before = decode(grid, 0.0);
    // shift every class logit by the same constant
    for (int b = 0; b < cfg.boxes; ++b)
        for (int k = 0; k < cfg.classes; ++k)
            for (int r = 0; r < cfg.grid; ++r)
                for (int c = 0; c < cfg.grid; ++c) grid.logits.at3(b * (5 + cfg.classes) + 5 + k, r, c) += 1.5f;
    std::vector<Detection> after = decode(grid, 0.0);
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
        CHECK(before[i].class_id == after[i].class_id);
        CHECK(before[i].class_prob == doctest::Approx(after[i].class_prob).epsilon(1e-4));
    }
}

TEST_CASE("detection loss: empty scene with objectness sigmoids near 0 is near 0") {
    DetectorConfig cfg;
    Tensor logits = Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid});
    for (int b = 0; b < cfg.boxes; ++b)
        for (int r = 0; r < cfg.grid; ++r)
            for (int c = 0; c < cfg.grid; ++c) logits.at3(b * (5 + cfg.classes) + 4, r, c) = -100.0f;
    CHECK(detection_loss_value(logits, {}, cfg) <= 1e-4);
}

TEST_CASE("detection loss: exact responsible prediction contributes near 0") {
    DetectorConfig cfg;
    Tensor logits = Tensor::full({cfg.head_channels(), cfg.grid, cfg.grid}, -100.0f);
    // truth box exactly covering cell (1,1): center (24,24), 16x16
    GroundTruth truth = {{1, Box{16, 16, 32, 32}}};
    const int base = 0;  // anchor 0 (24x24) has the higher IoU with a 16x16 box
    logits.at3(base + 0, 1, 1) = 0.0f;  // sigmoid(0)=0.5 = center offset
    logits.at3(base + 1, 1, 1) = 0.0f;
    logits.at3(base + 2, 1, 1) = static_cast<float>(std::log(16.0 / cfg.anchors[0].first));
    logits.at3(base + 3, 1, 1) = static_cast<float>(std::log(16.0 / cfg.anchors[0].second));
    logits.at3(base + 4, 1, 1) = 100.0f;
    for (int k = 0; k < cfg.classes; ++k) logits.at3(base + 5 + k, 1, 1) = (k == 1) ? 100.0f : -100.0f;
    CHECK(detection_loss_value(logits, truth, cfg) <= 1e-4);
}

TEST_CASE("detection loss equals the hand-computed three-term sum") {
    DetectorConfig cfg;
    Tensor logits = Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid});
    // one truth box inside cell (1,1) only: 14x14 centered at (24,24)
    GroundTruth truth = {{2, Box{17, 17, 31, 31}}};
    const float tx = 0.3f, ty = -0.2f, tw = 0.1f, th = 0.0f, to = 0.8f;
    const float cls[4] = {0.5f, -0.3f, 0.2f, 0.0f};
    logits.at3(0, 1, 1) = tx;
    logits.at3(1, 1, 1) = ty;
    logits.at3(2, 1, 1) = tw;
    logits.at3(3, 1, 1) = th;
    logits.at3(4, 1, 1) = to;
    for (int k = 0; k < 4; ++k) logits.at3(5 + k, 1, 1) = cls[k];

    // hand computation: targets ox=oy=0.5, tw*=th*=log(14/24), anchor 0 wins
    const double tstar = std::log(14.0 / 24.0);
    double expected = 0.0;
    expected += 5.0 * (std::pow(sigmoid_ref(tx) - 0.5, 2) + std::pow(sigmoid_ref(ty) - 0.5, 2) +
                       std::pow(tw - tstar, 2) + std::pow(th - tstar, 2));
    expected += softplus_ref(-to);  // objectness BCE toward 1
    for (int k = 0; k < 4; ++k) expected += softplus_ref(cls[k]) - (k == 2 ? cls[k] : 0.0);
    // remaining 127 (cell,box) slots: objectness logit 0 toward target 0
    expected += 127 * 0.5 * softplus_ref(0.0);

    CHECK(detection_loss_value(logits, truth, cfg) == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("detection loss is non-negative on random inputs") {
    DetectorConfig cfg;
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits({cfg.head_channels(), cfg.grid, cfg.grid});
        for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = static_cast<float>(rng.uniform(-4.0, 4.0));
        GroundTruth truth;
        const int n = rng.uniform_int(0, 3);
        for (int i = 0; i < n; ++i) {
            const double x1 = rng.uniform(0.0, 90.0), y1 = rng.uniform(0.0, 90.0);
            const double w = rng.uniform(16.0, 38.0), h = rng.uniform(16.0, 38.0);
            truth.push_back({static_cast<int>(rng.uniform_int(0, 3)), Box{x1, y1, x1 + w, y1 + h}});
        }
        CHECK(detection_loss_value(logits, truth, cfg) >= 0.0);
    }
}

TEST_CASE("detection loss gradient matches finite differences on the logits") {
    DetectorConfig cfg;
    Rng rng(7);
    Tensor logits({cfg.head_channels(), cfg.grid, cfg.grid});
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
    GroundTruth truth = {{0, Box{10, 12, 40, 44}}, {3, Box{60, 70, 100, 118}}};
    Tensor grad;
    detection_loss_value(logits, truth, cfg, &grad);
    auto f = [&](const Tensor& l) { return detection_loss_value(l, truth, cfg); };
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < logits.size(); i += 7) coords.push_back(i);
    std::vector<float> fd = finite_difference_gradient(f, logits, coords, 1e-4);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double denom = std::max({std::abs(static_cast<double>(grad[coords[i]])),
                                       std::abs(static_cast<double>(fd[i])), 1e-4});
        CHECK(std::abs(grad[coords[i]] - fd[i]) / denom <= 1e-3);
    }
}

TEST_CASE("loss gradient reaches input pixels and matches finite differences") {
    DetectorConfig cfg = tiny_config();
    DetectorParams params = DetectorParams::init(cfg, 11);
    Rng rng(8);
    Tensor image = random_image(cfg.image_size, rng);
    GroundTruth truth = {{1, Box{4, 4, 28, 28}}};

    // double-precision reimplementation as the finite-difference oracle: a
    // float32 probe at this scale is dominated by forward rounding noise
    auto loss_of = [&](const Tensor& img) { return detector_ref::loss_ref(params, img, truth); };

    Graph g;
    NodeId img = g.leaf(image, true);
    NodeId out = forward_node(g, param_leaves(g, params, false), img, cfg);
    GradientMap grads = g.backward(detection_loss_node(g, out, truth, cfg));
    const Tensor& gx = grads.at(img);

    fd_check::Result res = fd_check::compare(loss_of, image, gx, 100, 1e-3);
    CHECK(res.checked >= 100);
    CHECK(res.max_rel <= 1e-3);
}

TEST_CASE("weights round trip through save/load with matching checksum") {
    DetectorConfig cfg = tiny_config();
    DetectorParams params = DetectorParams::init(cfg, 21);
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "patchforge_weights_test.pft").string();
    save_weights(path, params);
    DetectorParams back = load_weights(path);
    CHECK(back.checksum() == params.checksum());
    CHECK(back.config.image_size == cfg.image_size);
    CHECK(back.config.grid == cfg.grid);
    CHECK(back.config.blocks == cfg.blocks);
    CHECK(back.config.anchors == cfg.anchors);
    REQUIRE(back.tensors.size() == params.tensors.size());
    for (std::size_t t = 0; t < params.tensors.size(); ++t)
        for (std::size_t i = 0; i < params.tensors[t].size(); ++i)
            CHECK(back.tensors[t][i] == params.tensors[t][i]);
    fs::remove(path);
}

TEST_CASE("roi heatmap: suppressed objectness gives near-zero cells") {
    DetectorConfig cfg;
    GridPrediction grid{Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid}), cfg};
    for (int b = 0; b < cfg.boxes; ++b)
        for (int r = 0; r < cfg.grid; ++r)
            for (int c = 0; c < cfg.grid; ++c) grid.logits.at3(b * (5 + cfg.classes) + 4, r, c) = -100.0f;
    Heatmap hm = roi_heatmap(grid);
    REQUIRE(hm.grid == cfg.grid);
    for (double v : hm.values) CHECK(v <= 1e-4);
}

TEST_CASE("roi heatmap: one confident cell stands out and matches decode's best cell") {
    DetectorConfig cfg;
    GridPrediction grid{Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid}), cfg};
    for (int b = 0; b < cfg.boxes; ++b)
        for (int r = 0; r < cfg.grid; ++r)
            for (int c = 0; c < cfg.grid; ++c) grid.logits.at3(b * (5 + cfg.classes) + 4, r, c) = -100.0f;
    grid.logits.at3(4, 5, 3) = 100.0f;
    grid.logits.at3(5 + 1, 5, 3) = 100.0f;
    for (int k = 0; k < cfg.classes; ++k)
        if (k != 1) grid.logits.at3(5 + k, 5, 3) = -100.0f;
    Heatmap hm = roi_heatmap(grid);
    CHECK(hm.at(5, 3) >= 0.99);
    CHECK(hm.argmax_cell() == std::make_pair(5, 3));

    // cross-check: argmax cell equals the cell of the best decoded detection
    Rng rng(9);
    GridPrediction rnd{Tensor::zeros({cfg.head_channels(), cfg.grid, cfg.grid}), cfg};
    for (std::size_t i = 0; i < rnd.logits.size(); ++i) rnd.logits[i] = static_cast<float>(rng.uniform(-3.0, 3.0));
    std::vector<Detection> dets = decode(rnd, 0.0);
    REQUIRE(!dets.empty());
    const Detection* best = &dets[0];
    for (const Detection& d : dets)
        if (d.confidence > best->confidence) best = &d;
    Heatmap hm2 = roi_heatmap(rnd);
    const auto cell = hm2.argmax_cell();
    CHECK(static_cast<int>(best->box.cy() / cfg.cell_size()) == cell.first);
    CHECK(static_cast<int>(best->box.cx() / cfg.cell_size()) == cell.second);
}

TEST_CASE("training reduces the loss and is seed reproducible") {
    SceneConfig scfg;
    scfg.image_size = 64;
    DetectorConfig cfg;
    cfg.image_size = 64;
    cfg.grid = 4;
    std::vector<Scene> data = generate_scenes(31, scfg, 48);
    TrainConfig tc;
    tc.epochs = 10;
    tc.batch = 16;
    tc.seed = 2;
    TrainResult r1 = train(data, cfg, tc);
    REQUIRE(r1.epoch_loss.size() == 10);
    CHECK(r1.epoch_loss.back() < r1.epoch_loss.front());
    TrainResult r2 = train(data, cfg, tc);
    CHECK(r1.params.checksum() == r2.params.checksum());
}

TEST_CASE("overfit run on 10 images reaches mAP-50 of 1.0 at confidence 0.1") {
    // Shapes centered on grid-cell corners: every cell a box overlaps touches
    // the box center, so at convergence the duplicate per-cell predictions
    // coincide and NMS keeps exactly one detection per object.
    DetectorConfig cfg;
    cfg.image_size = 64;
    cfg.grid = 4;
    const float colors[4][3] = {{0.9f, 0.2f, 0.2f}, {0.2f, 0.9f, 0.2f}, {0.3f, 0.4f, 0.95f}, {0.95f, 0.9f, 0.25f}};
    std::vector<Scene> data;
    int cls = 0;
    for (int i = 0; i < 10; ++i) {
        Scene s;
        s.image = Tensor::full({3, 64, 64}, 0.12f);
        auto add = [&](double cx, double cy) {
            const int k = cls++ % 4;
            render_shape(s.image, static_cast<ShapeKind>(k), cx, cy, 30.0, colors[k]);
            s.truth.push_back({k, Box{cx - 15, cy - 15, cx + 15, cy + 15}});
        };
        add(16 + 16 * (i % 2), 16);
        if (i % 2 == 0) add(48, 48);
        data.push_back(std::move(s));
    }
    TrainConfig tc;
    tc.epochs = 250;
    tc.batch = 10;
    tc.lr = 0.02;
    tc.seed = 5;
    TrainResult r = train(data, cfg, tc);
    EvalReport report = evaluate_map50(r.params, data, 0.1);
    CHECK(report.map == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("training divergence raises DivergenceError with the epoch") {
    SceneConfig scfg;
    scfg.image_size = 64;
    DetectorConfig cfg;
    cfg.image_size = 64;
    cfg.grid = 4;
    std::vector<Scene> data = generate_scenes(1, scfg, 8);
    TrainConfig tc;
    tc.epochs = 20;
    tc.batch = 8;
    tc.lr = 1e4;
    tc.grad_clip = 0;  // uncapped updates so the loss genuinely explodes
    CHECK_THROWS_AS(train(data, cfg, tc), DivergenceError);
}

TEST_CASE("config validation rejects inconsistent geometry") {
    DetectorConfig cfg;
    cfg.grid = 7;  // 128 not divisible into 7 cells by the stride product
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    DetectorConfig cfg2;
    cfg2.boxes = 0;
    CHECK_THROWS_AS(cfg2.validate(), std::invalid_argument);
}
