#pragma once

// Deterministic random streams. Every stochastic component receives an Rng
// forked from the run seed with a fixed tag, so draws never depend on
// iteration order elsewhere in the program. The generator and the
// uint64 -> double mappings are implemented here so that results are
// identical across platforms and standard libraries.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace astra {

namespace detail {

// splitmix64 output function (Steele, Lea, Flood 2014 public-domain constants).
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace detail

class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(seed), state_(detail::mix64(seed)) {}

    // Independent stream derived from this stream's key and a caller tag.
    // Forking does not consume or depend on draws made from the parent.
    Rng fork(std::uint64_t tag) const {
        return Rng(detail::mix64(key_ ^ (0x9e3779b97f4a7c15ull * (tag + 1))));
    }

    Rng fork(std::uint64_t tag_a, std::uint64_t tag_b) const {
        return fork(tag_a).fork(tag_b);
    }

    Rng fork(std::uint64_t tag_a, std::uint64_t tag_b, std::uint64_t tag_c) const {
        return fork(tag_a).fork(tag_b).fork(tag_c);
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Standard normal via Box-Muller; the second deviate of each pair is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform index in [0, n). n must be positive.
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[index(i)]);
        }
    }

private:
    std::uint64_t key_;
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace astra
