#pragma once

// One manifold-constrained hyper-connection block: dynamic per-pixel
// mappings generated from the RMS-normalized stream state, a CGM sublayer
// and an FFN sublayer. Each sublayer owns an independent generator set.

#include <functional>
#include <string>

#include "mhc/cgm.hpp"
#include "mhc/sinkhorn.hpp"

namespace mhc {

struct MappingGenerator {
    int64_t streams = 0;   // n
    Tensor theta_pre;      // [D, n]
    Tensor alpha_pre;      // scalar
    Tensor b_pre;          // [n]
    Tensor theta_post;     // [D, n]
    Tensor alpha_post;     // scalar
    Tensor b_post;         // [n]
    Tensor theta_res;      // [D, n*n]
    Tensor alpha_res;      // scalar
    Tensor b_res;          // [n*n], diagonal-biased at init
};

struct MappingSet {
    Tensor hpre;    // [L,1,n] sigmoid gates
    Tensor hpost;   // [L,1,n] 2*sigmoid gates
    Tensor hres;    // [L,n,n] doubly stochastic per pixel
};

struct FfnParams {
    Tensor w1;   // [D, 4D]
    Tensor b1;   // [4D]
    Tensor w2;   // [4D, D]
    Tensor b2;   // [D]
};

Tensor ffn_forward(const Tensor& x, const FfnParams& p);

struct BlockParams {
    int64_t streams = 0;
    int64_t d = 0;
    SinkhornConfig sinkhorn;
    MappingGenerator gen_cgm;
    MappingGenerator gen_ffn;
    Tensor gain_cgm;   // RMSNorm gain, [D]
    Tensor gain_ffn;
    CgmParams cgm;
    FfnParams ffn;
};

MappingGenerator make_mapping_generator(int64_t d, int64_t n, ParameterRegistry& reg, Rng& rng,
                                        const std::string& prefix);
FfnParams make_ffn_params(int64_t d, ParameterRegistry& reg, Rng& rng,
                          const std::string& prefix);
BlockParams make_block_params(int64_t d, int64_t n, int64_t g, int64_t state, double rho,
                              const SinkhornConfig& sk, ParameterRegistry& reg, Rng& rng,
                              const std::string& prefix);

// rn must be the RMS-normalized state [L,n,D]
MappingSet generate_mappings(const Tensor& rn, const MappingGenerator& g,
                             const SinkhornConfig& cfg);

// feature function over the aggregated feature; the CGM sublayer also
// receives this sublayer's hres as its cluster maps
using FeatureFn = std::function<Tensor(const Tensor& x_agg, const Tensor& hres)>;

Tensor sublayer(const Tensor& rin, const FeatureFn& f, const MappingGenerator& g,
                const Tensor& gain, const SinkhornConfig& cfg, MappingSet* captured = nullptr);

struct BlockTrace {
    MappingSet cgm;
    MappingSet ffn;
};

Tensor block_forward(const Tensor& rl, const BlockParams& p, BlockTrace* trace = nullptr);

} // namespace mhc
