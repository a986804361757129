#include "mhc/mhc_block.hpp"

#include <cmath>

namespace mhc {

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
    return add(matmul(gelu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

MappingGenerator make_mapping_generator(int64_t d, int64_t n, ParameterRegistry& reg, Rng& rng,
                                        const std::string& prefix) {
    MappingGenerator g;
    g.streams = n;
    double sd = 1.0 / std::sqrt(static_cast<double>(d));
    g.theta_pre = reg.add(prefix + ".theta_pre", randn({d, n}, rng, sd));
    g.alpha_pre = reg.add(prefix + ".alpha_pre", Tensor::full({1}, 0.01));
    g.b_pre = reg.add(prefix + ".b_pre", Tensor::zeros({n}));
    g.theta_post = reg.add(prefix + ".theta_post", randn({d, n}, rng, sd));
    g.alpha_post = reg.add(prefix + ".alpha_post", Tensor::full({1}, 0.01));
    g.b_post = reg.add(prefix + ".b_post", Tensor::zeros({n}));
    g.theta_res = reg.add(prefix + ".theta_res", randn({d, n * n}, rng, sd));
    g.alpha_res = reg.add(prefix + ".alpha_res", Tensor::full({1}, 0.01));
    // diagonal bias keeps the initial mixing close to the identity routing
    std::vector<double> br(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) br[static_cast<size_t>(i * n + i)] = 2.0;
    g.b_res = reg.add(prefix + ".b_res", Tensor::from_data({n * n}, std::move(br)));
    return g;
}

FfnParams make_ffn_params(int64_t d, ParameterRegistry& reg, Rng& rng,
                          const std::string& prefix) {
    FfnParams p;
    p.w1 = reg.add(prefix + ".w1", randn({d, 4 * d}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
    p.b1 = reg.add(prefix + ".b1", Tensor::zeros({4 * d}));
    p.w2 = reg.add(prefix + ".w2",
                   randn({4 * d, d}, rng, 1.0 / std::sqrt(static_cast<double>(4 * d))));
    p.b2 = reg.add(prefix + ".b2", Tensor::zeros({d}));
    return p;
}

BlockParams make_block_params(int64_t d, int64_t n, int64_t g, int64_t state, double rho,
                              const SinkhornConfig& sk, ParameterRegistry& reg, Rng& rng,
                              const std::string& prefix) {
    BlockParams p;
    p.streams = n;
    p.d = d;
    p.sinkhorn = sk;
    p.gen_cgm = make_mapping_generator(d, n, reg, rng, prefix + ".gen_cgm");
    p.gen_ffn = make_mapping_generator(d, n, reg, rng, prefix + ".gen_ffn");
    p.gain_cgm = reg.add(prefix + ".gain_cgm", Tensor::full({d}, 1.0));
    p.gain_ffn = reg.add(prefix + ".gain_ffn", Tensor::full({d}, 1.0));
    p.cgm = make_cgm_params(d, g, n, state, rho, reg, rng, prefix + ".cgm");
    p.ffn = make_ffn_params(d, reg, rng, prefix + ".ffn");
    return p;
}

MappingSet generate_mappings(const Tensor& rn, const MappingGenerator& g,
                             const SinkhornConfig& cfg) {
    if (rn.rank() != 3) throw DimensionError("generate_mappings: expected [L,n,D]");
    int64_t l = rn.shape()[0], n = rn.shape()[1], d = rn.shape()[2];
    if (n != g.streams)
        throw DimensionError("generate_mappings: state has " + std::to_string(n) +
                             " streams, generator expects " + std::to_string(g.streams));
    if (g.theta_pre.shape()[0] != d)
        throw DimensionError("generate_mappings: hidden width " + std::to_string(d) +
                             " != generator width " + std::to_string(g.theta_pre.shape()[0]));

    Tensor flat = reshape(rn, {l * n, d});
    // per-stream D->m map, reduced over streams, then the bounded tanh gate
    auto pre_activation = [&](const Tensor& theta, const Tensor& alpha, const Tensor& bias) {
        int64_t m = theta.shape()[1];
        Tensor per_stream = reshape(matmul(flat, theta), {l, n, m});
        Tensor reduced = sum_axis(per_stream, 1, false);   // [L, m]
        return add(mul(tanh(reduced), alpha), bias);
    };

    MappingSet maps;
    maps.hpre = reshape(sigmoid(pre_activation(g.theta_pre, g.alpha_pre, g.b_pre)), {l, 1, n});
    maps.hpost =
        scale(sigmoid(pre_activation(g.theta_post, g.alpha_post, g.b_post)), 2.0);
    maps.hpost = reshape(maps.hpost, {l, 1, n});
    Tensor res_pre = reshape(pre_activation(g.theta_res, g.alpha_res, g.b_res), {l, n, n});
    maps.hres = sinkhorn_project(res_pre, cfg);
    return maps;
}

Tensor sublayer(const Tensor& rin, const FeatureFn& f, const MappingGenerator& g,
                const Tensor& gain, const SinkhornConfig& cfg, MappingSet* captured) {
    if (rin.rank() != 3) throw DimensionError("sublayer: expected [L,n,D]");
    int64_t l = rin.shape()[0], n = rin.shape()[1], d = rin.shape()[2];

    Tensor rn = rms_norm(rin, gain);
    MappingSet maps = generate_mappings(rn, g, cfg);

    Tensor x_agg = reshape(matmul(maps.hpre, rn), {l, d});   // sum over streams of hpre_s * rn_s
    Tensor y = f(x_agg, maps.hres);
    if (y.rank() != 2 || y.shape()[0] != l || y.shape()[1] != d)
        throw DimensionError("sublayer: feature function returned " + shape_str(y.shape()) +
                             ", expected [" + std::to_string(l) + "x" + std::to_string(d) + "]");

    // plain batched product: at 10 Sinkhorn iterations the projection only
    // guarantees 1e-3 marginals, under the 1e-4 debug precondition of
    // doubly_stochastic_residual (which callers with converged inputs keep)
    Tensor mixed = matmul(maps.hres, rin);
    Tensor expanded = matmul(reshape(maps.hpost, {l, n, 1}), reshape(y, {l, 1, d}));
    if (captured) *captured = maps;
    return add(mixed, expanded);
}

Tensor block_forward(const Tensor& rl, const BlockParams& p, BlockTrace* trace) {
    FeatureFn cgm_fn = [&p](const Tensor& x_agg, const Tensor& hres) {
        return cgm_forward(x_agg, hres, p.cgm);
    };
    FeatureFn ffn_fn = [&p](const Tensor& x_agg, const Tensor&) {
        return ffn_forward(x_agg, p.ffn);
    };
    Tensor r_hat = sublayer(rl, cgm_fn, p.gen_cgm, p.gain_cgm, p.sinkhorn,
                            trace ? &trace->cgm : nullptr);
    return sublayer(r_hat, ffn_fn, p.gen_ffn, p.gain_ffn, p.sinkhorn,
                    trace ? &trace->ffn : nullptr);
}

} // namespace mhc
