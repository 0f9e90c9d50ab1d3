#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patchforge/boxes.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

enum class BackgroundKind { Flat, Gradient, Noise, Mixed };

enum class ShapeKind { Circle, Square, Triangle, Star };

struct SceneConfig {
    int image_size = 128;
    std::vector<ShapeKind> classes = {ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Star};
    int min_objects = 1;
    int max_objects = 4;
    double min_object_size = 16;
    double max_object_size = 48;
    BackgroundKind background = BackgroundKind::Mixed;

    int num_classes() const { return static_cast<int>(classes.size()); }
    void validate() const;
};

struct Scene {
    Tensor image;  // [3,S,S] in [0,1]
    GroundTruth truth;
};

const char* shape_name(ShapeKind k);
ShapeKind shape_from_name(const std::string& name);

// Rasterizes one shape with the fixed 2x2 supersampling rule. The tight
// ground-truth box of the shape is [cx-size/2, cx+size/2] x [cy-size/2, cy+size/2].
void render_shape(Tensor& image, ShapeKind kind, double cx, double cy, double size, const float color[3]);

// Deterministic in (seed, config). Objects are rejection-placed so pairwise
// IoU stays <= 0.5; if 1000 attempts fail the scene simply has fewer objects.
Scene generate_scene(std::uint64_t seed, const SceneConfig& config);

// Writes <count> PNGs plus labels.txt and manifest.txt; returns manifest path.
// Aborts with partial files removed on I/O failure.
std::string generate_dataset(std::uint64_t seed, const SceneConfig& config, int count, const std::string& out_dir);

struct DatasetEntry {
    std::string filename;
    GroundTruth truth;
};

std::vector<DatasetEntry> read_labels(const std::string& labels_path);
SceneConfig read_manifest(const std::string& manifest_path, std::uint64_t* seed_out, int* count_out);

// Loads images + labels from a gen-data output directory.
std::vector<Scene> load_dataset(const std::string& dir);

// In-memory dataset, per-scene seeds derived as fork(index).
std::vector<Scene> generate_scenes(std::uint64_t seed, const SceneConfig& config, int count);

}  // namespace patchforge
