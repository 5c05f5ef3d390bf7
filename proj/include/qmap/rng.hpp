#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

namespace qmap {

/// The single seeded random stream used everywhere. Draws are derived from the
/// raw 64-bit engine output, so a given seed gives the same numbers on any
/// standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Uniform on the open interval (0, 1).
    double uniform() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; consumes two engine outputs per draw.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Index drawn with probability proportional to `weights`.
    template <class Weights>
    std::size_t categorical(const Weights& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform() * total;
        std::size_t k = 0;
        for (double w : weights) {
            if (u < w) return k;
            u -= w;
            ++k;
        }
        return k - 1;
    }

    std::uint64_t next_u64() { return engine_(); }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace qmap
