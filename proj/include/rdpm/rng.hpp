#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace rdpm {

// Counter-based deterministic generator. Output depends only on
// (seed, stream, counter), so per-item streams can be derived from a base
// seed without sharing mutable state. Identical seed + call sequence gives
// identical draws on every platform (pure 64-bit integer mixing plus IEEE
// doubles).
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream) {}

    // Independent stream for item `idx` (data loading, per-record noise).
    Rng derive(std::uint64_t idx) const {
        return Rng(seed_, mix64(stream_ ^ 0x9e3779b97f4a7c15ULL, idx));
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        std::uint64_t c = counter_++;
        return mix64(mix64(seed_, stream_), c);
    }

    // Uniform draw in the open interval (0,1).
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; second value of each pair is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // idx in [0, n)
    std::uint64_t next_index(std::uint64_t n) { return next_u64() % n; }

    std::vector<double> normal_vec(std::size_t n) {
        std::vector<double> out(n);
        for (auto& v : out) v = normal();
        return out;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = next_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
        // splitmix64 finalizer over a simple combine
        std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace rdpm
