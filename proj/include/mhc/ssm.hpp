#pragma once

// Minimal selective state-space scanner: per-token input-dependent B, C and
// step size, diagonal decay exp(-exp(a_log) * delta), sigmoid-gated output
// projection. Single direction, strictly causal.

#include <string>

#include "mhc/rng.hpp"
#include "mhc/tensor.hpp"

namespace mhc {

struct SsmParams {
    int64_t d_in = 0;
    int64_t state = 0;
    Tensor w_in;      // [d_in, d_in] channel mixing in
    Tensor a_log;     // [d_in, state]; decay rate is -exp(a_log)
    Tensor w_b;       // [d_in, state] token -> B_t
    Tensor w_c;       // [d_in, state] token -> C_t
    Tensor w_delta;   // [d_in, d_in]  token -> step pre-activation
    Tensor b_delta;   // [d_in]
    Tensor w_gate;    // [d_in, d_in]  sigmoid-gated multiplicative skip
    Tensor b_gate;    // [d_in]
    Tensor w_out;     // [d_in, d_in] channel mixing out
};

SsmParams make_ssm_params(int64_t d_in, int64_t state, ParameterRegistry& reg, Rng& rng,
                          const std::string& prefix);

// tokens: [T, d_in] or [B, T, d_in]; output has the input shape.
Tensor selective_scan(const Tensor& tokens, const SsmParams& p);

struct ScanCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
};

// Central-difference validation of all SsmParams gradients. Desk-scale only:
// requires T <= 8, d_in <= 4, state <= 4.
ScanCheckReport scan_backward_check(const SsmParams& p, const Tensor& tokens);

} // namespace mhc
