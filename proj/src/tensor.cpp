#include "patchforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace patchforge {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0f) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) throw std::invalid_argument("tensor data length does not match shape");
}

Tensor Tensor::full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float Tensor::min_value() const {
    return *std::min_element(data_.begin(), data_.end());
}

float Tensor::max_value() const {
    return *std::max_element(data_.begin(), data_.end());
}

void Tensor::fill(float value) {
    std::fill(data_.begin(), data_.end(), value);
}

namespace {
constexpr char kMagic[4] = {'P', 'F', 'T', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("truncated tensor record");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::uint32_t bits;
        float v = t[i];
        std::memcpy(&bits, &v, 4);
        write_u32(os, bits);
    }
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("bad tensor magic (expected PFT1)");
    const std::uint32_t rank = read_u32(is);
    if (rank > 8) throw std::runtime_error("implausible tensor rank");
    std::vector<int> shape(rank);
    for (auto& e : shape) e = static_cast<int>(read_u32(is));
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) {
        std::uint32_t bits = read_u32(is);
        std::memcpy(&v, &bits, 4);
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_tensor(os, t);
    if (!os) throw std::runtime_error("write failed for " + path);
}

Tensor load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_tensor(is);
}

}  // namespace patchforge
