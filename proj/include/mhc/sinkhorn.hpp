#pragma once

// Differentiable projection of per-pixel square matrices onto the Birkhoff
// polytope (doubly stochastic matrices) via unrolled Sinkhorn-Knopp passes.

#include "mhc/tensor.hpp"

namespace mhc {

struct SinkhornConfig {
    int64_t iterations = 10;
    double temperature = 1.0;
    double tolerance = 1e-6;   // diagnostics threshold, not a stopping rule
};

// exp(logits / temperature), then `iterations` row-normalize / column-normalize
// passes (rows first, columns last, so column sums are exact to round-off).
// Trailing two axes must be square; leading axes are independent batches.
// Gradients flow through every unrolled iteration.
Tensor sinkhorn_project(const Tensor& logits, const SinkhornConfig& cfg = {});

// Per-batch matrix product M.R mixing the stream axis. M: [...,n,n], R: [...,n,D].
// In debug builds M is checked to be doubly stochastic to 1e-4.
Tensor doubly_stochastic_residual(const Tensor& m, const Tensor& r);

// max |row sum - 1| and |column sum - 1| over all batch elements
double max_marginal_deviation(const Tensor& m);

} // namespace mhc
