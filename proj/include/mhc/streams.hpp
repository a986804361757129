#pragma once

// Electromagnetic-spectrum-aware residual streams: FULL plus the four
// physical band groups, embedded to a shared hidden width. Stream order is
// fixed as [FULL, VIS, NIR, SWIR1, SWIR2]; the H_res map (i,j) semantics
// depend on it.

#include <string>
#include <vector>

#include "mhc/dataio.hpp"
#include "mhc/rng.hpp"
#include "mhc/tensor.hpp"

namespace mhc {

struct StreamSpec {
    std::string name;
    std::vector<int64_t> band_indices;   // ordered, into [0, C)
};

// Range bounds in nm. Intervals are half-open except the final closed bound:
// VIS [vis_lo, nir_lo), NIR [nir_lo, swir1_lo), SWIR1 [swir1_lo, swir2_lo),
// SWIR2 [swir2_lo, swir2_hi]. Bands outside join the nearest range.
struct StreamRanges {
    double vis_lo = 400.0;
    double nir_lo = 700.0;
    double swir1_lo = 1000.0;
    double swir2_lo = 1800.0;
    double swir2_hi = 2500.0;
};

std::vector<StreamSpec> split_bands(const WavelengthTable& wavelengths,
                                    const StreamRanges& ranges = {});

// override for sensors the range rule cannot serve: FULL + caller-named groups
std::vector<StreamSpec> explicit_streams(const std::vector<std::vector<int64_t>>& groups,
                                         int64_t bands);

// ablation mode: n copies of the full band set
std::vector<StreamSpec> duplicate_streams(int64_t bands, int64_t n);

// Fixed 2-D sinusoidal table [H*W, D]: first D/2 channels encode the row
// index, last D/2 the column index, each with the sin/cos frequency ladder.
Tensor positional_encoding(int64_t h, int64_t w, int64_t d);

struct StreamEmbedding {
    std::vector<Tensor> weights;   // per stream, [C_e, D]
    std::vector<Tensor> biases;    // per stream, [D]
    Tensor positional;             // [L, D] constant, added to stream 0 only
};

// tie_init copies stream 0's draw into every head (duplicate-stream ablation)
StreamEmbedding make_stream_embedding(const std::vector<StreamSpec>& specs, int64_t d,
                                      int64_t h, int64_t w, ParameterRegistry& reg, Rng& rng,
                                      const std::string& prefix, bool tie_init);

// [L, n, D] residual stream state
Tensor embed_streams(const HsiCube& cube, const std::vector<StreamSpec>& specs,
                     const StreamEmbedding& emb);

} // namespace mhc
