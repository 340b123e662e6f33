#pragma once

#include <cmath>
#include <cstdint>
#include <Eigen/Dense>

namespace specs {

// Counter-derived random streams. Every random decision in an episode draws
// from a stream keyed by (seed, step, purpose, index), so results are
// independent of evaluation order and thread count, and matched-seed runs of
// different methods consume identical candidate/selection draws.

enum class StreamPurpose : std::uint64_t {
    Candidate = 1,
    Selection = 2,
    Switch = 3,
    BeamWidth = 4,
    TargetRedraw = 5,
    Perturb = 6,
    Episode = 7,
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}
} // namespace detail

class RngStream {
  public:
    explicit RngStream(std::uint64_t state) : state_(state) {}

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    /// Uniform in [0,1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 <= 0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Categorical draw from a probability vector (assumed to sum to ~1).
    Eigen::Index categorical(const Eigen::Ref<const Eigen::VectorXd>& probs) {
        double u = uniform01();
        double acc = 0.0;
        for (Eigen::Index i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return i;
        }
        return probs.size() - 1; // rounding slack lands on the last entry
    }

    /// Poisson(mean) conditioned on being >= 1, by CDF inversion.
    int poisson_truncated(double mean) {
        double p0 = std::exp(-mean);
        double u = p0 + uniform01() * (1.0 - p0);
        double pk = p0;
        double cdf = p0;
        int k = 0;
        while (cdf < u && k < 100000) {
            ++k;
            pk *= mean / k;
            cdf += pk;
        }
        return k < 1 ? 1 : k;
    }

  private:
    std::uint64_t state_;
};

inline RngStream derive_stream(std::uint64_t seed, std::uint64_t step,
                               StreamPurpose purpose, std::uint64_t index = 0) {
    std::uint64_t h = detail::mix(seed, 0x5350454353ULL); // domain separation
    h = detail::mix(h, step);
    h = detail::mix(h, static_cast<std::uint64_t>(purpose));
    h = detail::mix(h, index);
    return RngStream(h);
}

} // namespace specs
