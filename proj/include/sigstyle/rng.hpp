#pragma once

#include <cstdint>
#include <random>

#include "sigstyle/tensor.hpp"

namespace sigstyle {

// Seeded generator with a portable normal sampler (Box-Muller on top of
// mt19937_64) so that seeded draws do not depend on the standard library's
// distribution implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n);
    double normal();
    Tensor normal_tensor(Shape shape, double stddev = 1.0);

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace sigstyle
