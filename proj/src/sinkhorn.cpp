#include "mhc/sinkhorn.hpp"

#include <cmath>

namespace mhc {

Tensor sinkhorn_project(const Tensor& logits, const SinkhornConfig& cfg) {
    if (cfg.iterations < 1) throw ConfigError("sinkhorn: iterations must be >= 1");
    if (!(cfg.temperature > 0.0)) throw ConfigError("sinkhorn: temperature must be > 0");
    if (logits.rank() < 2) {
        throw DimensionError("sinkhorn: need trailing [n,n] axes, got " +
                             shape_str(logits.shape()));
    }
    int64_t n = logits.shape().back();
    int64_t n2 = logits.shape()[logits.shape().size() - 2];
    if (n != n2 || n < 1) {
        throw DimensionError("sinkhorn: trailing axes must be square, got " +
                             shape_str(logits.shape()));
    }
    for (double v : logits.data()) {
        if (!std::isfinite(v)) throw NumericError("sinkhorn: non-finite entry in logits");
    }

    Tensor m = exp(scale(logits, 1.0 / cfg.temperature));
    for (int64_t it = 0; it < cfg.iterations; ++it) {
        m = div(m, sum_axis(m, -1, true));   // rows
        m = div(m, sum_axis(m, -2, true));   // columns
    }
    return m;
}

Tensor doubly_stochastic_residual(const Tensor& m, const Tensor& r) {
    if (m.rank() < 2 || m.shape().back() != m.shape()[m.shape().size() - 2]) {
        throw DimensionError("doubly_stochastic_residual: M must have square trailing axes, got " +
                             shape_str(m.shape()));
    }
#ifndef NDEBUG
    double dev = max_marginal_deviation(m);
    if (dev > 1e-4) {
        throw ContractError("doubly_stochastic_residual: M deviates from doubly stochastic by " +
                            std::to_string(dev));
    }
#endif
    return matmul(m, r);
}

double max_marginal_deviation(const Tensor& m) {
    int64_t n = m.shape().back();
    int64_t batches = m.size() / (n * n);
    const double* md = m.data().data();
    double worst = 0.0;
    for (int64_t b = 0; b < batches; ++b) {
        const double* p = md + b * n * n;
        for (int64_t i = 0; i < n; ++i) {
            double rs = 0.0, cs = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                rs += p[i * n + j];
                cs += p[j * n + i];
            }
            worst = std::max({worst, std::abs(rs - 1.0), std::abs(cs - 1.0)});
        }
    }
    return worst;
}

} // namespace mhc
