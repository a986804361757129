#pragma once

// Clustering-guided Mamba feature function: a spectral scan over channel
// groups followed by n^2 cluster-guided spatial scans. Cluster c = (i,j)
// selects the Top-k pixels of the soft membership map hres[:, i, j], scans
// them in score order, and scatter-adds the processed tokens back to their
// source pixels. Top-k is hard: no gradient reaches hres through selection.

#include <functional>
#include <string>
#include <vector>

#include "mhc/ssm.hpp"
#include "mhc/tensor.hpp"

namespace mhc {

struct ClusterSelection {
    int64_t row = 0;   // i
    int64_t col = 0;   // j
    std::vector<int64_t> indices;   // descending score, ties by ascending pixel index
    std::vector<double> scores;
};

// The n^2 scan heads, stacked so all clusters batch through one recurrence.
// Each cluster owns an independent slice.
struct ClusterScanParams {
    int64_t clusters = 0;
    int64_t d_in = 0;
    int64_t state = 0;
    Tensor w_in;      // [nc, d, d]
    Tensor a_log;     // [nc, d, s]
    Tensor w_b;       // [nc, d, s]
    Tensor w_c;       // [nc, d, s]
    Tensor w_delta;   // [nc, d, d]
    Tensor b_delta;   // [nc, 1, d]
    Tensor w_gate;    // [nc, d, d]
    Tensor b_gate;    // [nc, 1, d]
    Tensor w_out;     // [nc, d, d]

    // detached copy of one cluster's head, for reference-path comparisons
    SsmParams head(int64_t c) const;
};

struct CgmParams {
    int64_t groups = 0;        // G
    int64_t group_width = 0;   // M, with D = G*M
    double topk_fraction = 0.25;
    SsmParams spectral;        // d_in = M
    ClusterScanParams cluster; // d_in = D
};

CgmParams make_cgm_params(int64_t d, int64_t g, int64_t n, int64_t state, double rho,
                          ParameterRegistry& reg, Rng& rng, const std::string& prefix);

// k = max(1, floor(rho * L))
int64_t topk_count(double rho, int64_t l);

// x: [L, D] -> [L, D]; per pixel, the D channels form a G-token sequence
Tensor spectral_mamba(const Tensor& x, const CgmParams& p);

ClusterSelection select_topk(const Tensor& hres, int64_t i, int64_t j, int64_t k);
Tensor gather_selection(const Tensor& spec_out, const ClusterSelection& sel);

using ClusterScanFn = std::function<Tensor(int64_t cluster, const Tensor& tokens)>;

// reference-shaped path with an injectable per-cluster scan (tests use identity)
Tensor cluster_scan_and_remap(const Tensor& spec_out, const Tensor& hres, double rho,
                              const ClusterScanFn& scan);
// production path: all clusters batched; bit-identical to the injectable path
// run with the same heads
Tensor cluster_scan_and_remap(const Tensor& spec_out, const Tensor& hres, const CgmParams& p);

Tensor cgm_forward(const Tensor& x_agg, const Tensor& hres, const CgmParams& p);

} // namespace mhc
