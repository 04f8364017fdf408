#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dygfm/matrix.hpp"

namespace dygfm {

// Deterministic RNG wrapper. mt19937_64 gives a portable bit stream; the
// distributions below are hand-written because the std:: distribution
// objects are implementation-defined and would break cross-platform
// reproducibility of emitted metrics.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed), seed_mix_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Modulo bias is < 2^-53 for desk-scale n.
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Box-Muller, one value per call (the paired value is discarded so the
    // stream position stays a simple function of call count).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double exponential(double rate) {
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return -std::log(u) / rate;
    }

    Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
        Matrix m(rows, cols);
        for (double& v : m.values()) v = stddev * normal();
        return m;
    }

    Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi) {
        Matrix m(rows, cols);
        for (double& v : m.values()) v = uniform(lo, hi);
        return m;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = uniform_index(i + 1);
            std::swap(v[i], v[j]);
        }
    }

    // Derive an independent stream for a named purpose; keeps sub-components
    // insensitive to each other's draw counts.
    Rng fork(const std::string& purpose) const {
        std::uint64_t h = 1469598103934665603ull;
        for (unsigned char c : purpose) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return Rng(seed_mix_ ^ h);
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_mix_ = 0;
};

}  // namespace dygfm
