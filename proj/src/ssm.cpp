#include "mhc/ssm.hpp"

#include <cmath>

namespace mhc {

SsmParams make_ssm_params(int64_t d_in, int64_t state, ParameterRegistry& reg, Rng& rng,
                          const std::string& prefix) {
    if (d_in < 1 || state < 1) throw ConfigError("ssm: d_in and state must be >= 1");
    SsmParams p;
    p.d_in = d_in;
    p.state = state;
    // B_t, C_t and delta_t are all linear in the token, so the scan response
    // grows polynomially with input scale; half-scale projections and an
    // input-independent step size at init keep stacked scans stable
    double sd = 0.5 / std::sqrt(static_cast<double>(d_in));
    p.w_in = reg.add(prefix + ".w_in", randn({d_in, d_in}, rng, sd));
    std::vector<double> al(static_cast<size_t>(d_in * state));
    for (int64_t d = 0; d < d_in; ++d)
        for (int64_t s = 0; s < state; ++s)
            al[static_cast<size_t>(d * state + s)] = std::log(static_cast<double>(s + 1));
    p.a_log = reg.add(prefix + ".a_log", Tensor::from_data({d_in, state}, std::move(al)));
    p.w_b = reg.add(prefix + ".w_b", randn({d_in, state}, rng, sd));
    p.w_c = reg.add(prefix + ".w_c", randn({d_in, state}, rng, sd));
    p.w_delta = reg.add(prefix + ".w_delta", Tensor::zeros({d_in, d_in}));
    // softplus(-4) ~ 0.018: small steps, long memory at init
    p.b_delta = reg.add(prefix + ".b_delta", Tensor::full({d_in}, -4.0));
    p.w_gate = reg.add(prefix + ".w_gate", randn({d_in, d_in}, rng, sd));
    p.b_gate = reg.add(prefix + ".b_gate", Tensor::zeros({d_in}));
    p.w_out = reg.add(prefix + ".w_out", randn({d_in, d_in}, rng, sd));
    return p;
}

Tensor selective_scan(const Tensor& tokens, const SsmParams& p) {
    bool flat = tokens.rank() == 2;
    if (!flat && tokens.rank() != 3)
        throw DimensionError("selective_scan: tokens must be [T,D] or [B,T,D], got " +
                             shape_str(tokens.shape()));
    Tensor x = flat ? reshape(tokens, {1, tokens.shape()[0], tokens.shape()[1]}) : tokens;
    if (x.shape()[1] < 1) throw ContractError("selective_scan: empty sequence (T = 0)");
    if (x.shape()[2] != p.d_in)
        throw DimensionError("selective_scan: token width " + std::to_string(x.shape()[2]) +
                             " != d_in " + std::to_string(p.d_in));

    Tensor u = matmul(x, p.w_in);
    Tensor bmat = matmul(u, p.w_b);
    Tensor cmat = matmul(u, p.w_c);
    Tensor delta = softplus(add(matmul(u, p.w_delta), p.b_delta));
    Tensor y = ssm_recurrence(u, delta, bmat, cmat, p.a_log);
    Tensor gate = sigmoid(add(matmul(x, p.w_gate), p.b_gate));
    Tensor out = matmul(mul(y, gate), p.w_out);
    return flat ? reshape(out, tokens.shape()) : out;
}

ScanCheckReport scan_backward_check(const SsmParams& p, const Tensor& tokens) {
    Tensor x = tokens.rank() == 2
                   ? Tensor::from_data({1, tokens.shape()[0], tokens.shape()[1]}, tokens.data())
                   : Tensor::from_data(tokens.shape(), tokens.data());
    if (x.shape()[1] > 8 || x.shape()[2] > 4 || p.state > 4)
        throw ContractError("scan_backward_check: desk-scale limits are T<=8, d_in<=4, state<=4");

    // fixed probe weights make the scalar loss sensitive to every output
    Rng wrng(0xC0FFEE);
    Tensor probe = randn(x.shape(), wrng, 1.0, false);
    auto build = [&]() { return sum(mul(selective_scan(x, p), probe)); };

    struct Named {
        const char* name;
        Tensor t;
    };
    Named params[] = {{"w_in", p.w_in},       {"a_log", p.a_log},   {"w_b", p.w_b},
                      {"w_c", p.w_c},         {"w_delta", p.w_delta}, {"b_delta", p.b_delta},
                      {"w_gate", p.w_gate},   {"b_gate", p.b_gate}, {"w_out", p.w_out}};

    ScanCheckReport report;
    for (auto& np : params) {
        np.t.zero_grad();
        backward(build());
        std::vector<double> analytic = np.t.grad();
        np.t.zero_grad();
        const double h = 1e-5;
        for (size_t i = 0; i < analytic.size(); ++i) {
            double saved = np.t.data()[i];
            double fp, fm;
            {
                NoGradGuard ng;
                np.t.data()[i] = saved + h;
                fp = build().value();
                np.t.data()[i] = saved - h;
                fm = build().value();
            }
            np.t.data()[i] = saved;
            double numeric = (fp - fm) / (2.0 * h);
            double denom = std::max({1e-3, std::abs(analytic[i]), std::abs(numeric)});
            double rel = std::abs(analytic[i] - numeric) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = np.name;
            }
        }
    }
    return report;
}

} // namespace mhc
