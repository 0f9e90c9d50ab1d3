// Compares the OpenMP convolution kernels against the serial reference on the
// MiniYOLO backbone shapes. Run with PATCHFORGE_THREADS to cap workers.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>

#include "patchforge/conv.hpp"
#include "patchforge/rng.hpp"

using namespace patchforge;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}

double time_ms(const std::function<void()>& fn, int reps) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
    if (const char* env = std::getenv("PATCHFORGE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
    std::printf("threads: %d\n", omp_get_max_threads());
    std::printf("%-28s %12s %12s %8s\n", "layer", "serial (ms)", "openmp (ms)", "speedup");

    Rng rng(7);
    struct Case {
        int cin, size, cout, k, stride;
    };
    const Case cases[] = {
        {3, 128, 8, 3, 2}, {8, 64, 16, 3, 2}, {16, 32, 32, 3, 2}, {32, 16, 64, 3, 2}, {64, 8, 64, 3, 1},
    };
    for (const Case& c : cases) {
        Tensor input = random_tensor({c.cin, c.size, c.size}, rng);
        Tensor kernel = random_tensor({c.cout, c.cin, c.k, c.k}, rng);
        Tensor serial_out, parallel_out;
        const int reps = 20;
        const double serial = time_ms(
            [&] { serial_out = reference::conv2d_forward_serial(input, kernel, nullptr, c.stride, 1); }, reps);
        const double parallel = time_ms([&] { parallel_out = conv2d_forward(input, kernel, nullptr, c.stride, 1); }, reps);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < serial_out.size(); ++i)
            max_diff = std::max(max_diff, static_cast<double>(std::abs(serial_out[i] - parallel_out[i])));
        char name[64];
        std::snprintf(name, sizeof(name), "conv %dx%dx%d -> %d (s%d)", c.cin, c.size, c.size, c.cout, c.stride);
        std::printf("%-28s %12.3f %12.3f %7.2fx  (max |diff| %.2g)\n", name, serial, parallel, serial / parallel, max_diff);
    }
    return 0;
}
