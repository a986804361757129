#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mhc/tensor.hpp"

namespace mhc {

// Deterministic RNG with pinned transforms (uniform via 53-bit mantissa,
// normal via Box-Muller) so identical seeds give identical streams on any
// standard-conforming mt19937_64.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    double uniform() {   // [0,1)
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    int64_t next_below(int64_t n) {   // [0,n)
        return static_cast<int64_t>(gen_() % static_cast<uint64_t>(n));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            int64_t j = next_below(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> d(static_cast<size_t>(shape_size(shape)));
    for (auto& v : d) v = stddev * rng.normal();
    return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

} // namespace mhc
