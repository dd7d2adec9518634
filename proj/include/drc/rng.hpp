#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

namespace drc {

/// SplitMix64 generator. The exact update and output mixing below are part of
/// the on-disk/cross-process contract: shuffles and weight initialization must
/// reproduce bit-identically from a seed alone.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Value in [0, bound). Plain modulo; the tiny bias is irrelevant here and
    /// determinism matters more than uniformity in the last bit.
    uint64_t next_below(uint64_t bound) { return next() % bound; }

    /// Double in [0, 1) using the top 53 bits.
    double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Double uniform in [lo, hi).
    double next_uniform(double lo, double hi) { return lo + next_unit() * (hi - lo); }

private:
    uint64_t state_;
};

/// Fisher-Yates permutation of [0, n), swapping from the back:
/// for i = n-1 .. 1: j = rng.next() % (i + 1); swap(a[i], a[j]).
inline std::vector<uint64_t> fisher_yates_permutation(uint64_t n, uint64_t seed) {
    std::vector<uint64_t> order(n);
    std::iota(order.begin(), order.end(), uint64_t{0});
    SplitMix64 rng(seed);
    for (uint64_t i = n; i-- > 1;) {
        uint64_t j = rng.next_below(i + 1);
        std::swap(order[i], order[j]);
    }
    return order;
}

}  // namespace drc
