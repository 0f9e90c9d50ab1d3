#include "patchforge/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "patchforge/evalkit.hpp"
#include "patchforge/image_io.hpp"
#include "patchforge/rng.hpp"

namespace fs = std::filesystem;

namespace patchforge {

void SceneConfig::validate() const {
    if (image_size < 8) throw std::invalid_argument("image_size too small");
    if (num_classes() < 2) throw std::invalid_argument("need at least 2 classes");
    if (min_object_size > max_object_size) throw std::invalid_argument("min_object_size > max_object_size");
    if (max_object_size > image_size) throw std::invalid_argument("max_object_size exceeds image_size");
    if (min_objects < 0 || min_objects > max_objects) throw std::invalid_argument("bad objects_per_image range");
}

const char* shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Square: return "square";
        case ShapeKind::Triangle: return "triangle";
        case ShapeKind::Star: return "star";
    }
    return "?";
}

ShapeKind shape_from_name(const std::string& name) {
    for (ShapeKind k : {ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Star})
        if (name == shape_name(k)) return k;
    throw std::invalid_argument("unknown shape class: " + name);
}

namespace {

// 5-point star outline (10 vertices), normalized so its tight bounding box is
// exactly [-0.5,0.5]^2. Every shape kind fills its box the same way, which
// keeps ground-truth areas exactly size^2.
struct StarPoly {
    double xs[10], ys[10];
    StarPoly() {
        const double pi = 3.14159265358979323846;
        double rawx[10], rawy[10];
        for (int i = 0; i < 10; ++i) {
            const double r = (i % 2 == 0) ? 1.0 : 0.381966;
            const double a = -pi / 2 + i * pi / 5;
            rawx[i] = r * std::cos(a);
            rawy[i] = r * std::sin(a);
        }
        const double x0 = *std::min_element(rawx, rawx + 10), x1 = *std::max_element(rawx, rawx + 10);
        const double y0 = *std::min_element(rawy, rawy + 10), y1 = *std::max_element(rawy, rawy + 10);
        for (int i = 0; i < 10; ++i) {
            xs[i] = (rawx[i] - x0) / (x1 - x0) - 0.5;
            ys[i] = (rawy[i] - y0) / (y1 - y0) - 0.5;
        }
    }
};

const StarPoly& star_poly() {
    static const StarPoly p;
    return p;
}

bool point_in_polygon(const double* xs, const double* ys, int n, double px, double py) {
    bool inside = false;
    for (int i = 0, j = n - 1; i < n; j = i++) {
        if ((ys[i] > py) != (ys[j] > py) &&
            px < (xs[j] - xs[i]) * (py - ys[i]) / (ys[j] - ys[i]) + xs[i])
            inside = !inside;
    }
    return inside;
}

// u,v in box-normalized coordinates [-0.5,0.5]
bool inside_shape(ShapeKind kind, double u, double v) {
    switch (kind) {
        case ShapeKind::Circle:
            return u * u + v * v <= 0.25;
        case ShapeKind::Square:
            return std::abs(u) <= 0.5 && std::abs(v) <= 0.5;
        case ShapeKind::Triangle: {
            // apex (0,-0.5), base corners (+-0.5, 0.5)
            if (v < -0.5 || v > 0.5) return false;
            const double half_width = 0.5 * (v + 0.5);
            return std::abs(u) <= half_width;
        }
        case ShapeKind::Star: {
            const StarPoly& p = star_poly();
            return point_in_polygon(p.xs, p.ys, 10, u, v);
        }
    }
    return false;
}

double luminance(const float c[3]) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

void paint_background(Tensor& image, BackgroundKind kind, Rng& rng, float mean_color[3]) {
    const int h = image.dim(1), w = image.dim(2);
    if (kind == BackgroundKind::Mixed) {
        kind = static_cast<BackgroundKind>(rng.uniform_int(0, 2));
    }
    switch (kind) {
        case BackgroundKind::Flat: {
            float c[3];
            for (auto& v : c) v = static_cast<float>(rng.uniform(0.0, 0.5));
            for (int ch = 0; ch < 3; ++ch) {
                mean_color[ch] = c[ch];
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) image.at3(ch, y, x) = c[ch];
            }
            break;
        }
        case BackgroundKind::Gradient: {
            float a[3], b[3];
            for (auto& v : a) v = static_cast<float>(rng.uniform(0.0, 0.5));
            for (auto& v : b) v = static_cast<float>(rng.uniform(0.0, 0.5));
            const bool horizontal = rng.uniform() < 0.5;
            for (int ch = 0; ch < 3; ++ch) {
                mean_color[ch] = 0.5f * (a[ch] + b[ch]);
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        const float t = horizontal ? static_cast<float>(x) / (w - 1) : static_cast<float>(y) / (h - 1);
                        image.at3(ch, y, x) = a[ch] + t * (b[ch] - a[ch]);
                    }
            }
            break;
        }
        default: {  // Noise
            float base[3];
            for (auto& v : base) v = static_cast<float>(rng.uniform(0.05, 0.45));
            for (int ch = 0; ch < 3; ++ch) mean_color[ch] = base[ch];
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float n = static_cast<float>(rng.uniform(-0.08, 0.08));
                    for (int ch = 0; ch < 3; ++ch)
                        image.at3(ch, y, x) = std::clamp(base[ch] + n, 0.0f, 1.0f);
                }
        }
    }
}

}  // namespace

void render_shape(Tensor& image, ShapeKind kind, double cx, double cy, double size, const float color[3]) {
    const int h = image.dim(1), w = image.dim(2);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - size / 2)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + size / 2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - size / 2)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + size / 2)));
    // fixed 2x2 supersampling
    static const double sub[2] = {0.25, 0.75};
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            int hits = 0;
            for (double sy : sub)
                for (double sx : sub) {
                    const double u = (x + sx - cx) / size;
                    const double v = (y + sy - cy) / size;
                    if (inside_shape(kind, u, v)) ++hits;
                }
            if (hits == 0) continue;
            const float cov = static_cast<float>(hits) / 4.0f;
            for (int ch = 0; ch < 3; ++ch)
                image.at3(ch, y, x) = image.at3(ch, y, x) * (1.0f - cov) + color[ch] * cov;
        }
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
    config.validate();
    Rng rng(seed);
    Scene scene;
    scene.image = Tensor({3, config.image_size, config.image_size});
    float bg_mean[3];
    paint_background(scene.image, config.background, rng, bg_mean);
    const double bg_lum = luminance(bg_mean);

    const int target = static_cast<int>(rng.uniform_int(config.min_objects, config.max_objects));
    for (int obj = 0; obj < target; ++obj) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            const int cls = static_cast<int>(rng.uniform_int(0, config.num_classes() - 1));
            const double size = rng.uniform(config.min_object_size, config.max_object_size);
            const double cx = rng.uniform(size / 2, config.image_size - size / 2);
            const double cy = rng.uniform(size / 2, config.image_size - size / 2);
            Box box{cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2};
            bool ok = true;
            for (const auto& other : scene.truth)
                if (iou(box, other.box) > 0.5) { ok = false; break; }
            if (!ok) continue;

            float color[3];
            for (int tries = 0; tries < 100; ++tries) {
                for (auto& v : color) v = static_cast<float>(rng.uniform(0.2, 1.0));
                if (std::abs(luminance(color) - bg_lum) >= 0.25) break;
            }
            render_shape(scene.image, config.classes[static_cast<std::size_t>(cls)], cx, cy, size, color);
            scene.truth.push_back({cls, box});
            placed = true;
        }
    }
    return scene;
}

std::vector<Scene> generate_scenes(std::uint64_t seed, const SceneConfig& config, int count) {
    Rng master(seed);
    std::vector<Scene> scenes(static_cast<std::size_t>(count));
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < count; ++i)
        scenes[static_cast<std::size_t>(i)] = generate_scene(master.fork(static_cast<std::uint64_t>(i)).next_u64(), config);
    return scenes;
}

namespace {

const char* background_name(BackgroundKind k) {
    switch (k) {
        case BackgroundKind::Flat: return "flat";
        case BackgroundKind::Gradient: return "gradient";
        case BackgroundKind::Noise: return "noise";
        default: return "mixed";
    }
}

BackgroundKind background_from_name(const std::string& s) {
    for (BackgroundKind k : {BackgroundKind::Flat, BackgroundKind::Gradient, BackgroundKind::Noise, BackgroundKind::Mixed})
        if (s == background_name(k)) return k;
    throw std::invalid_argument("unknown background kind: " + s);
}

std::string format_box(const LabeledBox& lb) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%d %.4f %.4f %.4f %.4f", lb.class_id, lb.box.x1, lb.box.y1, lb.box.x2, lb.box.y2);
    return buf;
}

}  // namespace

std::string generate_dataset(std::uint64_t seed, const SceneConfig& config, int count, const std::string& out_dir) {
    config.validate();
    if (count < 0) throw std::invalid_argument("count must be non-negative");
    fs::create_directories(out_dir);
    std::vector<std::string> written;
    try {
        std::vector<Scene> scenes = generate_scenes(seed, config, count);
        std::ostringstream labels;
        for (int i = 0; i < count; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "img_%05d.png", i);
            const std::string path = (fs::path(out_dir) / name).string();
            write_png(path, scenes[static_cast<std::size_t>(i)].image);
            written.push_back(path);
            labels << name << ' ' << scenes[static_cast<std::size_t>(i)].truth.size();
            for (const auto& lb : scenes[static_cast<std::size_t>(i)].truth) labels << ' ' << format_box(lb);
            labels << '\n';
        }
        const std::string labels_path = (fs::path(out_dir) / "labels.txt").string();
        {
            std::ofstream os(labels_path);
            if (!os) throw std::runtime_error("cannot write " + labels_path);
            os << labels.str();
            if (!os) throw std::runtime_error("write failed for " + labels_path);
        }
        written.push_back(labels_path);

        const std::string manifest_path = (fs::path(out_dir) / "manifest.txt").string();
        std::ofstream os(manifest_path);
        if (!os) throw std::runtime_error("cannot write " + manifest_path);
        os << "seed=" << seed << "\n";
        os << "count=" << count << "\n";
        os << "image_size=" << config.image_size << "\n";
        os << "classes=";
        for (std::size_t i = 0; i < config.classes.size(); ++i)
            os << (i ? "," : "") << shape_name(config.classes[i]);
        os << "\n";
        os << "min_objects=" << config.min_objects << "\n";
        os << "max_objects=" << config.max_objects << "\n";
        os << "min_object_size=" << config.min_object_size << "\n";
        os << "max_object_size=" << config.max_object_size << "\n";
        os << "background=" << background_name(config.background) << "\n";
        if (!os) throw std::runtime_error("write failed for " + manifest_path);
        return manifest_path;
    } catch (...) {
        for (const auto& p : written) fs::remove(p);
        throw;
    }
}

std::vector<DatasetEntry> read_labels(const std::string& labels_path) {
    std::ifstream is(labels_path);
    if (!is) throw std::runtime_error("cannot open " + labels_path);
    std::vector<DatasetEntry> entries;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        DatasetEntry e;
        int n = 0;
        ls >> e.filename >> n;
        for (int i = 0; i < n; ++i) {
            LabeledBox lb;
            ls >> lb.class_id >> lb.box.x1 >> lb.box.y1 >> lb.box.x2 >> lb.box.y2;
            e.truth.push_back(lb);
        }
        if (!ls) throw std::runtime_error("malformed label line: " + line);
        entries.push_back(std::move(e));
    }
    return entries;
}

SceneConfig read_manifest(const std::string& manifest_path, std::uint64_t* seed_out, int* count_out) {
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("cannot open " + manifest_path);
    SceneConfig config;
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "seed" && seed_out) *seed_out = std::stoull(val);
        else if (key == "count" && count_out) *count_out = std::stoi(val);
        else if (key == "image_size") config.image_size = std::stoi(val);
        else if (key == "min_objects") config.min_objects = std::stoi(val);
        else if (key == "max_objects") config.max_objects = std::stoi(val);
        else if (key == "min_object_size") config.min_object_size = std::stod(val);
        else if (key == "max_object_size") config.max_object_size = std::stod(val);
        else if (key == "background") config.background = background_from_name(val);
        else if (key == "classes") {
            config.classes.clear();
            std::istringstream cs(val);
            std::string name;
            while (std::getline(cs, name, ',')) config.classes.push_back(shape_from_name(name));
        }
    }
    return config;
}

std::vector<Scene> load_dataset(const std::string& dir) {
    const auto entries = read_labels((fs::path(dir) / "labels.txt").string());
    std::vector<Scene> scenes(entries.size());
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < static_cast<int>(entries.size()); ++i) {
        const auto& e = entries[static_cast<std::size_t>(i)];
        scenes[static_cast<std::size_t>(i)].image = read_png((fs::path(dir) / e.filename).string());
        scenes[static_cast<std::size_t>(i)].truth = e.truth;
    }
    return scenes;
}

}  // namespace patchforge
