#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "patchforge/evalkit.hpp"
#include "patchforge/rng.hpp"

using namespace patchforge;

namespace {

Detection make_det(double x1, double y1, double x2, double y2, double conf, int cls = 0, int image_id = 0) {
    Detection d;
    d.box = Box{x1, y1, x2, y2};
    d.objectness = conf;
    d.class_prob = 1.0;
    d.confidence = conf;
    d.class_id = cls;
    d.image_id = image_id;
    return d;
}

// brute-force greedy NMS oracle, written independently of the library
std::vector<Detection> nms_oracle(std::vector<Detection> dets, double thr) {
    auto before = [](const Detection& a, const Detection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        if (a.class_id != b.class_id) return a.class_id < b.class_id;
        return a.box.x1 < b.box.x1;
    };
    std::sort(dets.begin(), dets.end(), before);
    std::vector<bool> dead(dets.size(), false);
    std::vector<Detection> kept;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dead[i]) continue;
        kept.push_back(dets[i]);
        for (std::size_t j = i + 1; j < dets.size(); ++j)
            if (!dead[j] && dets[j].class_id == dets[i].class_id && iou(dets[j].box, dets[i].box) >= thr)
                dead[j] = true;
    }
    return kept;
}

bool same_dets(const std::vector<Detection>& a, const std::vector<Detection>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].confidence != b[i].confidence || a[i].class_id != b[i].class_id || a[i].box.x1 != b[i].box.x1 ||
            a[i].box.y2 != b[i].box.y2)
            return false;
    return true;
}

}  // namespace

TEST_CASE("iou: identical, disjoint, and the 1/3 overlap case") {
    Box a{0, 0, 2, 2};
    CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(iou(Box{0, 0, 1, 1}, Box{5, 5, 6, 6}) == 0.0);
    CHECK(iou(Box{0, 0, 2, 2}, Box{1, 0, 3, 2}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("iou matches a rasterized pixel-count oracle on a fine grid") {
    Rng rng(1);
    for (int trial = 0; trial < 25; ++trial) {
        const double ax = rng.uniform(0.0, 50.0), ay = rng.uniform(0.0, 50.0);
        Box a{ax, ay, ax + rng.uniform(5.0, 40.0), ay + rng.uniform(5.0, 40.0)};
        const double bx = rng.uniform(0.0, 50.0), by = rng.uniform(0.0, 50.0);
        Box b{bx, by, bx + rng.uniform(5.0, 40.0), by + rng.uniform(5.0, 40.0)};
        // count sub-pixel cells on a 0.25 grid
        const double step = 0.25;
        long inter = 0, uni = 0;
        for (double y = 0; y < 100; y += step)
            for (double x = 0; x < 100; x += step) {
                const double px = x + step / 2, py = y + step / 2;
                const bool ina = px > a.x1 && px < a.x2 && py > a.y1 && py < a.y2;
                const bool inb = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
                inter += ina && inb;
                uni += ina || inb;
            }
        CHECK(iou(a, b) == doctest::Approx(static_cast<double>(inter) / uni).epsilon(0.02));
    }
}

TEST_CASE("iou: degenerate boxes give 0; symmetry holds") {
    CHECK(iou(Box{1, 1, 1, 5}, Box{0, 0, 4, 4}) == 0.0);
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        Box a{rng.uniform(0.0, 20.0), rng.uniform(0.0, 20.0), 0, 0};
        a.x2 = a.x1 + rng.uniform(1.0, 20.0);
        a.y2 = a.y1 + rng.uniform(1.0, 20.0);
        Box b{rng.uniform(0.0, 20.0), rng.uniform(0.0, 20.0), 0, 0};
        b.x2 = b.x1 + rng.uniform(1.0, 20.0);
        b.y2 = b.y1 + rng.uniform(1.0, 20.0);
        CHECK(iou(a, b) == iou(b, a));
    }
}

TEST_CASE("nms: single detection survives; duplicate loses to higher confidence") {
    std::vector<Detection> one = {make_det(0, 0, 10, 10, 0.7)};
    CHECK(nms(one, 0.45).size() == 1);

    std::vector<Detection> two = {make_det(0, 0, 10, 10, 0.8), make_det(0, 0, 10, 10, 0.9)};
    std::vector<Detection> kept = nms(two, 0.45);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].confidence == 0.9);
}

TEST_CASE("nms keeps equal boxes of different classes") {
    std::vector<Detection> dets = {make_det(0, 0, 10, 10, 0.9, 0), make_det(0, 0, 10, 10, 0.8, 1)};
    CHECK(nms(dets, 0.45).size() == 2);
}

TEST_CASE("nms equals the brute-force oracle on 200 random instances") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Detection> dets;
        const int n = rng.uniform_int(0, 10);
        for (int i = 0; i < n; ++i) {
            const double x1 = rng.uniform(0.0, 80.0), y1 = rng.uniform(0.0, 80.0);
            dets.push_back(make_det(x1, y1, x1 + rng.uniform(4.0, 40.0), y1 + rng.uniform(4.0, 40.0),
                                    rng.uniform(0.05, 1.0), rng.uniform_int(0, 2)));
        }
        const double thr = rng.uniform(0.2, 0.7);
        CHECK(same_dets(nms(dets, thr), nms_oracle(dets, thr)));
    }
}

TEST_CASE("nms is idempotent") {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Detection> dets;
        for (int i = 0; i < 8; ++i) {
            const double x1 = rng.uniform(0.0, 60.0), y1 = rng.uniform(0.0, 60.0);
            dets.push_back(make_det(x1, y1, x1 + 20, y1 + 20, rng.uniform(0.1, 1.0), rng.uniform_int(0, 1)));
        }
        std::vector<Detection> once = nms(dets, 0.45);
        CHECK(same_dets(nms(once, 0.45), once));
    }
}

TEST_CASE("average precision: perfect detections give 1, hopeless give 0") {
    std::vector<TruthInstance> truths = {{0, Box{0, 0, 10, 10}}, {1, Box{5, 5, 20, 20}}};
    std::vector<Detection> perfect = {make_det(0, 0, 10, 10, 0.9, 0, 0), make_det(5, 5, 20, 20, 0.8, 0, 1)};
    CHECK(average_precision(perfect, truths) == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<Detection> miss = {make_det(50, 50, 60, 60, 0.9, 0, 0), make_det(70, 70, 90, 90, 0.8, 0, 1)};
    CHECK(average_precision(miss, truths) == 0.0);
}

TEST_CASE("average precision hand case: [TP 0.9, FP 0.8, TP 0.7] over 2 truths is 5/6") {
    std::vector<TruthInstance> truths = {{0, Box{0, 0, 10, 10}}, {0, Box{30, 30, 40, 40}}};
    std::vector<Detection> dets = {
        make_det(0, 0, 10, 10, 0.9),
        make_det(60, 60, 70, 70, 0.8),
        make_det(30, 30, 40, 40, 0.7),
    };
    CHECK(average_precision(dets, truths) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("average precision: monotone interpolation and duplicate matching") {
    // [FP 0.9, TP 0.8] over 1 truth: precision at full recall is 1/2
    std::vector<TruthInstance> one = {{0, Box{0, 0, 10, 10}}};
    std::vector<Detection> fp_first = {make_det(50, 50, 60, 60, 0.9), make_det(0, 0, 10, 10, 0.8)};
    CHECK(average_precision(fp_first, one) == doctest::Approx(0.5).epsilon(1e-12));

    // a second detection on an already-matched truth counts as a false positive
    std::vector<Detection> dup = {make_det(0, 0, 10, 10, 0.9), make_det(0.5, 0, 10, 10, 0.8)};
    CHECK(average_precision(dup, one) == doctest::Approx(1.0).epsilon(1e-12));  // TP first; dup FP after full recall
}

TEST_CASE("average precision is invariant to order-preserving confidence rescaling") {
    Rng rng(5);
    std::vector<TruthInstance> truths;
    std::vector<Detection> dets;
    for (int i = 0; i < 6; ++i) {
        const double x1 = 15.0 * i;
        truths.push_back({i, Box{x1, 0, x1 + 10, 10}});
        dets.push_back(make_det(x1 + rng.uniform(-6.0, 6.0), rng.uniform(-4.0, 4.0), x1 + 10, 10,
                                rng.uniform(0.1, 0.9), 0, i));
    }
    const double base = average_precision(dets, truths);
    for (Detection& d : dets) d.confidence = 0.05 + d.confidence * 0.5;  // strictly increasing remap
    CHECK(average_precision(dets, truths) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("aggregate_map excludes classes without ground truth") {
    std::vector<std::vector<Detection>> dets(2);
    std::vector<GroundTruth> truths(2);
    truths[0].push_back({0, Box{0, 0, 10, 10}});
    truths[1].push_back({1, Box{20, 20, 40, 40}});
    dets[0].push_back(make_det(0, 0, 10, 10, 0.9, 0, 0));
    dets[1].push_back(make_det(20, 20, 40, 40, 0.8, 1, 1));
    EvalReport r = aggregate_map(dets, truths, {"a", "b", "c"}, 0.1);
    REQUIRE(r.class_ap.size() == 3);
    CHECK(r.class_ap[0] == doctest::Approx(1.0));
    CHECK(r.class_ap[1] == doctest::Approx(1.0));
    CHECK(r.class_excluded[2]);
    CHECK(!r.class_excluded[0]);
    CHECK(r.map == doctest::Approx(1.0));
    CHECK(r.num_images == 2);
    CHECK(r.num_objects == 2);
}

TEST_CASE("raising the confidence threshold on a fixed detection set never adds detections") {
    Rng rng(6);
    std::vector<std::vector<Detection>> dets(3);
    std::vector<GroundTruth> truths(3);
    for (int img = 0; img < 3; ++img) {
        truths[img].push_back({0, Box{10, 10, 40, 40}});
        for (int i = 0; i < 6; ++i) {
            const double x1 = rng.uniform(0.0, 60.0);
            dets[img].push_back(make_det(x1, x1, x1 + 30, x1 + 30, rng.uniform(0.0, 1.0), 0, img));
        }
    }
    EvalReport low = aggregate_map(dets, truths, {"a"}, 0.001);
    EvalReport high = aggregate_map(dets, truths, {"a"}, 0.6);
    CHECK(low.class_ap[0] >= high.class_ap[0] - 1e-12);  // dropping dets can only lose recall here
}

TEST_CASE("report CSV round trip preserves values and exclusions") {
    namespace fs = std::filesystem;
    EvalReport r;
    r.conf_threshold = 0.1;
    r.class_names = {"circle", "square", "triangle"};
    r.class_ap = {0.75, std::nan(""), 0.5};
    r.class_excluded = {false, true, false};
    r.map = 0.625;
    r.num_images = 12;
    r.num_objects = 30;
    const std::string path = (fs::temp_directory_path() / "patchforge_report_test.csv").string();
    write_report_csv(path, r);
    EvalReport back = read_report_csv(path);
    CHECK(back.class_names == r.class_names);
    CHECK(back.class_ap[0] == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(back.class_excluded[1]);
    CHECK(back.class_ap[2] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(back.map == doctest::Approx(0.625).epsilon(1e-9));
    fs::remove(path);
}

TEST_CASE("heatmap argmax and exporters") {
    namespace fs = std::filesystem;
    Heatmap hm;
    hm.grid = 4;
    hm.values.assign(16, 0.1);
    hm.values[2 * 4 + 3] = 0.9;
    CHECK(hm.argmax_cell() == std::make_pair(2, 3));
    const std::string csv = (fs::temp_directory_path() / "patchforge_hm_test.csv").string();
    const std::string png = (fs::temp_directory_path() / "patchforge_hm_test.png").string();
    write_heatmap_csv(csv, hm);
    write_heatmap_png(png, hm);
    CHECK(fs::exists(csv));
    CHECK(fs::exists(png));
    fs::remove(csv);
    fs::remove(png);
}
