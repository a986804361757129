#include "mhc/cgm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mhc {

namespace {

Tensor slice_batch(const Tensor& t, int64_t c) {
    // [nc, a, b] -> detached [a, b]
    int64_t a = t.shape()[1], b = t.shape()[2];
    std::vector<double> d(t.data().begin() + c * a * b, t.data().begin() + (c + 1) * a * b);
    return Tensor::from_data({a, b}, std::move(d));
}

std::vector<std::vector<int64_t>> all_selections(const Tensor& hres, int64_t k,
                                                 std::vector<ClusterSelection>* out_sel) {
    int64_t n = hres.shape()[1];
    std::vector<std::vector<int64_t>> idx;
    idx.reserve(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            ClusterSelection sel = select_topk(hres, i, j, k);
            idx.push_back(sel.indices);
            if (out_sel) out_sel->push_back(std::move(sel));
        }
    return idx;
}

} // namespace

SsmParams ClusterScanParams::head(int64_t c) const {
    if (c < 0 || c >= clusters)
        throw IndexError("cluster head " + std::to_string(c) + " out of range [0," +
                         std::to_string(clusters) + ")");
    SsmParams p;
    p.d_in = d_in;
    p.state = state;
    p.w_in = slice_batch(w_in, c);
    p.a_log = slice_batch(a_log, c);
    p.w_b = slice_batch(w_b, c);
    p.w_c = slice_batch(w_c, c);
    p.w_delta = slice_batch(w_delta, c);
    p.b_delta = reshape(slice_batch(b_delta, c), {d_in});
    p.w_gate = slice_batch(w_gate, c);
    p.b_gate = reshape(slice_batch(b_gate, c), {d_in});
    p.w_out = slice_batch(w_out, c);
    return p;
}

CgmParams make_cgm_params(int64_t d, int64_t g, int64_t n, int64_t state, double rho,
                          ParameterRegistry& reg, Rng& rng, const std::string& prefix) {
    if (g < 1 || d % g != 0)
        throw ConfigError("spectral groups: D = " + std::to_string(d) +
                          " not divisible by G = " + std::to_string(g));
    if (!(rho > 0.0 && rho <= 1.0))
        throw ConfigError("rho must be in (0,1], got " + std::to_string(rho));

    CgmParams p;
    p.groups = g;
    p.group_width = d / g;
    p.topk_fraction = rho;
    p.spectral = make_ssm_params(p.group_width, state, reg, rng, prefix + ".spectral");

    int64_t nc = n * n;
    ClusterScanParams& c = p.cluster;
    c.clusters = nc;
    c.d_in = d;
    c.state = state;
    // same init scheme as make_ssm_params, stacked per cluster
    double sd = 0.5 / std::sqrt(static_cast<double>(d));
    c.w_in = reg.add(prefix + ".cluster.w_in", randn({nc, d, d}, rng, sd));
    std::vector<double> al(static_cast<size_t>(nc * d * state));
    for (int64_t cc = 0; cc < nc; ++cc)
        for (int64_t dd = 0; dd < d; ++dd)
            for (int64_t s = 0; s < state; ++s)
                al[static_cast<size_t>((cc * d + dd) * state + s)] =
                    std::log(static_cast<double>(s + 1));
    c.a_log = reg.add(prefix + ".cluster.a_log", Tensor::from_data({nc, d, state}, std::move(al)));
    c.w_b = reg.add(prefix + ".cluster.w_b", randn({nc, d, state}, rng, sd));
    c.w_c = reg.add(prefix + ".cluster.w_c", randn({nc, d, state}, rng, sd));
    c.w_delta = reg.add(prefix + ".cluster.w_delta", Tensor::zeros({nc, d, d}));
    c.b_delta = reg.add(prefix + ".cluster.b_delta", Tensor::full({nc, 1, d}, -4.0));
    c.w_gate = reg.add(prefix + ".cluster.w_gate", randn({nc, d, d}, rng, sd));
    c.b_gate = reg.add(prefix + ".cluster.b_gate", Tensor::zeros({nc, 1, d}));
    c.w_out = reg.add(prefix + ".cluster.w_out", randn({nc, d, d}, rng, sd));
    return p;
}

int64_t topk_count(double rho, int64_t l) {
    if (!(rho > 0.0 && rho <= 1.0))
        throw ConfigError("rho must be in (0,1], got " + std::to_string(rho));
    return std::max<int64_t>(1, static_cast<int64_t>(std::floor(rho * static_cast<double>(l))));
}

Tensor spectral_mamba(const Tensor& x, const CgmParams& p) {
    if (x.rank() != 2) throw DimensionError("spectral_mamba: expected [L,D]");
    int64_t l = x.shape()[0], d = x.shape()[1];
    if (d != p.groups * p.group_width)
        throw ConfigError("spectral_mamba: D = " + std::to_string(d) + " != G*M = " +
                          std::to_string(p.groups * p.group_width));
    Tensor tokens = reshape(x, {l, p.groups, p.group_width});
    Tensor y = selective_scan(tokens, p.spectral);
    return add(x, reshape(y, {l, d}));
}

ClusterSelection select_topk(const Tensor& hres, int64_t i, int64_t j, int64_t k) {
    if (hres.rank() != 3 || hres.shape()[1] != hres.shape()[2])
        throw DimensionError("select_topk: hres must be [L,n,n], got " + shape_str(hres.shape()));
    int64_t l = hres.shape()[0], n = hres.shape()[1];
    if (i < 0 || i >= n || j < 0 || j >= n)
        throw IndexError("select_topk: cluster (" + std::to_string(i) + "," + std::to_string(j) +
                         ") out of range for n = " + std::to_string(n));
    if (k < 1 || k > l)
        throw ContractError("select_topk: k = " + std::to_string(k) + " outside [1," +
                            std::to_string(l) + "]");

    const double* hd = hres.data().data();
    std::vector<int64_t> order(static_cast<size_t>(l));
    std::iota(order.begin(), order.end(), 0);
    auto score = [&](int64_t pix) { return hd[(pix * n + i) * n + j]; };
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return score(a) > score(b); });

    ClusterSelection sel;
    sel.row = i;
    sel.col = j;
    sel.indices.assign(order.begin(), order.begin() + k);
    sel.scores.reserve(static_cast<size_t>(k));
    for (int64_t t = 0; t < k; ++t) sel.scores.push_back(score(sel.indices[static_cast<size_t>(t)]));
    return sel;
}

Tensor gather_selection(const Tensor& spec_out, const ClusterSelection& sel) {
    return gather_rows(spec_out, sel.indices);
}

Tensor cluster_scan_and_remap(const Tensor& spec_out, const Tensor& hres, double rho,
                              const ClusterScanFn& scan) {
    int64_t l = spec_out.shape()[0], d = spec_out.shape()[1];
    int64_t k = topk_count(rho, l);
    std::vector<std::vector<int64_t>> idx = all_selections(hres, k, nullptr);
    Tensor accum = Tensor::zeros({l, d});
    for (size_t c = 0; c < idx.size(); ++c) {
        Tensor tokens = gather_rows(spec_out, idx[c]);
        Tensor processed = scan(static_cast<int64_t>(c), tokens);
        accum = scatter_add_rows(accum, idx[c], processed);
    }
    return add(spec_out, accum);
}

Tensor cluster_scan_and_remap(const Tensor& spec_out, const Tensor& hres, const CgmParams& p) {
    if (spec_out.rank() != 2) throw DimensionError("cluster_scan_and_remap: expected [L,D]");
    int64_t l = spec_out.shape()[0];
    const ClusterScanParams& c = p.cluster;
    if (hres.shape()[1] * hres.shape()[2] != c.clusters)
        throw DimensionError("cluster_scan_and_remap: hres stream count does not match the " +
                             std::to_string(c.clusters) + " scan heads");
    int64_t k = topk_count(p.topk_fraction, l);
    std::vector<std::vector<int64_t>> idx = all_selections(hres, k, nullptr);

    Tensor tokens = gather_rows_batched(spec_out, idx);          // [nc, k, D]
    Tensor u = matmul(tokens, c.w_in);
    Tensor bmat = matmul(u, c.w_b);
    Tensor cmat = matmul(u, c.w_c);
    Tensor delta = softplus(add(matmul(u, c.w_delta), c.b_delta));
    Tensor y = ssm_recurrence(u, delta, bmat, cmat, c.a_log);
    Tensor gate = sigmoid(add(matmul(tokens, c.w_gate), c.b_gate));
    Tensor processed = matmul(mul(y, gate), c.w_out);            // [nc, k, D]
    Tensor accum = scatter_add_rows_batched(l, idx, processed);
    return add(spec_out, accum);
}

Tensor cgm_forward(const Tensor& x_agg, const Tensor& hres, const CgmParams& p) {
    return cluster_scan_and_remap(spectral_mamba(x_agg, p), hres, p);
}

} // namespace mhc
