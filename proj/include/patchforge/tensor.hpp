#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace patchforge {

// Dense row-major float32 tensor. Shapes are immutable after construction.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<float> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float value);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    // CHW / OIHW style indexing
    float& at3(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    float at3(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    float& at4(int o, int i, int y, int x) {
        return data_[((static_cast<std::size_t>(o) * shape_[1] + i) * shape_[2] + y) * shape_[3] + x];
    }
    float at4(int o, int i, int y, int x) const {
        return data_[((static_cast<std::size_t>(o) * shape_[1] + i) * shape_[2] + y) * shape_[3] + x];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    float min_value() const;
    float max_value() const;

    void fill(float value);

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

std::size_t shape_numel(const std::vector<int>& shape);

// "PFT1" tensor records: magic, u32 rank, rank x u32 extents, raw little-endian
// f32 payload. Files may hold several consecutive records.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace patchforge
