// Acceptance suite: one line of output per criterion, nonzero exit if any
// criterion fails. Budgeted criteria also assert their wall-clock limits.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mhc/cgm.hpp"
#include "mhc/model.hpp"
#include "mhc/rng.hpp"
#include "mhc/runner.hpp"
#include "mhc/sinkhorn.hpp"
#include "mhc/ssm.hpp"

using namespace mhc;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s — %s\n", pass ? "PASS" : "FAIL", id, name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

void run_criterion(int id, const std::string& name,
                   const std::function<std::pair<bool, std::string>()>& body) {
    try {
        auto [pass, detail] = body();
        report(id, name, pass, detail);
    } catch (const std::exception& e) {
        report(id, name, false, std::string("exception: ") + e.what());
    }
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path fresh_dir(const std::string& leaf) {
    auto p = fs::temp_directory_path() / "mhc_acceptance" / leaf;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

char buf[512];

// --- criterion 1 -----------------------------------------------------------

std::pair<bool, std::string> sinkhorn_marginals() {
    NoGradGuard ng;
    Rng rng(101);
    auto t0 = std::chrono::steady_clock::now();
    double worst10 = 0.0, worst200 = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> d(25);
        for (auto& v : d) v = rng.uniform(-1.0, 1.0);   // tanh-bounded operating regime
        Tensor logits = Tensor::from_data({5, 5}, d);
        worst10 = std::max(worst10,
                           max_marginal_deviation(sinkhorn_project(logits, {10, 1.0, 1e-6})));
        worst200 = std::max(worst200,
                            max_marginal_deviation(sinkhorn_project(logits, {200, 1.0, 1e-6})));
    }
    double dt = seconds_since(t0);
    bool pass = worst10 < 1e-3 && worst200 < 1e-9 && dt < 5.0;
    std::snprintf(buf, sizeof(buf),
                  "1000 matrices: worst |marginal-1| %.2e @10 iters (tol 1e-3), %.2e @200 iters "
                  "(tol 1e-9), %.2fs (budget 5s)",
                  worst10, worst200, dt);
    return {pass, buf};
}

// --- criterion 2 -----------------------------------------------------------

std::pair<bool, std::string> mean_preservation() {
    NoGradGuard ng;
    Rng rng(202);
    int64_t n = 5, d = 32;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> ld(static_cast<size_t>(n * n));
        for (auto& v : ld) v = rng.uniform(-1.0, 1.0);
        Tensor m = sinkhorn_project(Tensor::from_data({n, n}, ld), {200, 1.0, 1e-6});
        Tensor r = randn({n, d}, rng);
        Tensor mixed = doubly_stochastic_residual(m, r);
        for (int64_t j = 0; j < d; ++j) {
            double mi = 0.0, mo = 0.0;
            for (int64_t s = 0; s < n; ++s) {
                mi += r.at(s * d + j);
                mo += mixed.at(s * d + j);
            }
            worst = std::max(worst, std::abs(mi - mo) / static_cast<double>(n));
        }
    }
    bool pass = worst < 1e-10;
    std::snprintf(buf, sizeof(buf),
                  "100 trials (n=5, D=32, 200-iter projections): worst stream-mean drift %.2e "
                  "(tol 1e-10)",
                  worst);
    return {pass, buf};
}

// --- criterion 3 -----------------------------------------------------------

std::pair<bool, std::string> gradient_suite() {
    auto t0 = std::chrono::steady_clock::now();
    HsiCube cube = synth_cube(4, 4, 3, 12, 11);
    ModelConfig cfg;
    cfg.hidden_dim = 8;
    cfg.spectral_groups = 2;
    cfg.state_size = 4;
    cfg.blocks = 2;
    cfg.classes = cube.class_count;
    cfg.bands = cube.bands;
    cfg.height = 4;
    cfg.width = 4;
    cfg.seed = 5;
    Model model(cfg, cube.wavelengths);
    std::vector<int32_t> labels = cube.zero_based_labels();
    std::vector<uint8_t> mask(16, 1);
    auto build = [&]() { return masked_cross_entropy(model.forward(cube), labels, mask); };

    model.params().zero_grads();
    backward(build());
    std::vector<std::vector<double>> analytic;
    for (auto& p : model.params().items()) {
        analytic.push_back(p.tensor.has_grad()
                               ? p.tensor.grad()
                               : std::vector<double>(p.tensor.data().size(), 0.0));
    }

    const double h = 1e-5;
    double worst = 0.0;
    std::string worst_name;
    int64_t checked = 0;
    for (size_t pi = 0; pi < model.params().items().size(); ++pi) {
        Tensor t = model.params().items()[pi].tensor;
        for (size_t i = 0; i < t.data().size(); ++i) {
            double saved = t.data()[i];
            double fp, fm;
            {
                NoGradGuard ng;
                t.data()[i] = saved + h;
                fp = build().value();
                t.data()[i] = saved - h;
                fm = build().value();
            }
            t.data()[i] = saved;
            double numeric = (fp - fm) / (2.0 * h);
            double rel = std::abs(analytic[pi][i] - numeric) /
                         std::max({1e-3, std::abs(analytic[pi][i]), std::abs(numeric)});
            if (rel > worst) {
                worst = rel;
                worst_name = model.params().items()[pi].name;
            }
            ++checked;
        }
    }
    double dt = seconds_since(t0);
    bool pass = worst < 1e-4 && dt < 60.0;
    std::snprintf(buf, sizeof(buf),
                  "L=16 C=12 D=8 n=5 G=2 S=4 blocks=2: %lld gradients, worst rel err %.2e "
                  "(tol 1e-4, at %s), %.1fs (budget 60s)",
                  static_cast<long long>(checked), worst, worst_name.c_str(), dt);
    return {pass, buf};
}

// --- criterion 4 -----------------------------------------------------------

std::pair<bool, std::string> remap_exactness() {
    NoGradGuard ng;
    Rng rng(404);
    int64_t l = 12, d = 3, n = 2;
    Tensor spec_out = randn({l, d}, rng);
    Tensor hres = randn({l, n, n}, rng);
    auto identity = [](int64_t, const Tensor& t) { return t; };

    for (int64_t k = 1; k <= l; ++k) {
        double rho = k == l ? 1.0 : (static_cast<double>(k) + 0.5) / static_cast<double>(l);
        Tensor out = cluster_scan_and_remap(spec_out, hres, rho, identity);

        // independent reference: stable-sorted selection, cluster-major accumulation
        std::vector<double> accum(static_cast<size_t>(l * d), 0.0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                std::vector<int64_t> order(static_cast<size_t>(l));
                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
                    return hres.at((a * n + i) * n + j) > hres.at((b * n + i) * n + j);
                });
                for (int64_t t = 0; t < k; ++t) {
                    int64_t pix = order[static_cast<size_t>(t)];
                    for (int64_t c = 0; c < d; ++c)
                        accum[static_cast<size_t>(pix * d + c)] += spec_out.at(pix * d + c);
                }
            }
        for (int64_t i = 0; i < l * d; ++i) {
            double expect = spec_out.at(i) + accum[static_cast<size_t>(i)];
            if (out.at(i) != expect) {
                std::snprintf(buf, sizeof(buf),
                              "k=%lld: element %lld differs (%.17g vs %.17g)",
                              static_cast<long long>(k), static_cast<long long>(i), out.at(i),
                              expect);
                return {false, buf};
            }
        }
    }
    return {true, "identity scans, L=12, n=2, every k in 1..12: bit-exact against the naive "
                  "gather-scan-scatter reference"};
}

// --- criterion 5 -----------------------------------------------------------

std::pair<bool, std::string> causality_probes() {
    NoGradGuard ng;
    Rng rng(505);
    int64_t violations = 0;
    for (int probe = 0; probe < 200; ++probe) {
        ParameterRegistry reg;
        Rng prng(600 + static_cast<uint64_t>(probe % 10));
        SsmParams p = make_ssm_params(4, 4, reg, prng, "scan");
        int64_t t_len = 2 + rng.next_below(15);
        Tensor tokens = randn({t_len, 4}, rng);
        Tensor base = selective_scan(tokens, p);
        int64_t pos = 1 + rng.next_below(t_len - 1);
        Tensor bumped = Tensor::from_data({t_len, 4}, tokens.data());
        for (int64_t j = 0; j < 4; ++j)
            bumped.data()[static_cast<size_t>(pos * 4 + j)] += rng.uniform(-2.0, 2.0);
        Tensor out = selective_scan(bumped, p);
        for (int64_t t = 0; t < pos && !violations; ++t)
            for (int64_t j = 0; j < 4; ++j)
                if (base.at(t * 4 + j) != out.at(t * 4 + j)) {
                    ++violations;
                    break;
                }
    }
    std::snprintf(buf, sizeof(buf),
                  "200 random probes: %lld bit-level violations before the perturbed position",
                  static_cast<long long>(violations));
    return {violations == 0, buf};
}

// --- criterion 6 -----------------------------------------------------------

std::pair<bool, std::string> overfit_smoke() {
    auto t0 = std::chrono::steady_clock::now();
    HsiCube cube = synth_cube(24, 24, 5, 20, 7);
    ModelConfig cfg;   // default model
    cfg.classes = cube.class_count;
    cfg.bands = cube.bands;
    cfg.height = 24;
    cfg.width = 24;
    cfg.seed = 3;
    cfg.steps = 160;
    Model model(cfg, cube.wavelengths);
    SplitMasks masks = stratified_split(cube.labels, cube.class_count, {0.10, {}, cfg.seed});
    TrainResult r = train(model, cube, masks);

    double best_train = 0.0;
    int64_t reach_step = -1;
    for (const auto& rec : r.history) {
        if (rec.train_oa > best_train) best_train = rec.train_oa;
        if (reach_step < 0 && rec.train_oa >= 99.0) reach_step = rec.step;
    }
    NoGradGuard ng;
    Metrics test = evaluate(model.forward(cube), cube.zero_based_labels(), masks.test);
    double dt = seconds_since(t0);
    bool pass = reach_step >= 0 && reach_step < 1000 && test.oa >= 90.0 && dt < 600.0;
    std::snprintf(buf, sizeof(buf),
                  "synth 24x24x20 K=5, 10%% split, default model: train OA >= 99%% at step %lld "
                  "(limit 1000), test OA %.2f%% (tol >= 90%%), %.0fs single-threaded (budget 600s)",
                  static_cast<long long>(reach_step), test.oa, dt);
    return {pass, buf};
}

// --- criterion 7 -----------------------------------------------------------

std::pair<bool, std::string> ablation_harness() {
    auto dir = fresh_dir("ablation");
    auto data = (dir / "cube.hsic").string();
    run_synth(24, 24, 5, 20, 7, 0.01, data);

    struct Arm {
        const char* label;
        StreamMode mode;
        int64_t n;
    };
    Arm arms[] = {{"duplicate n=2", StreamMode::Duplicate, 2},
                  {"duplicate n=4", StreamMode::Duplicate, 4},
                  {"spectrum n=5", StreamMode::SpectrumSplit, 5}};

    std::string summary;
    for (const Arm& arm : arms) {
        ModelConfig cfg;
        cfg.mode = arm.mode;
        cfg.streams = arm.n;
        cfg.steps = 30;
        cfg.seed = 3;
        auto arm_dir = dir / arm.label;
        run_train(data, arm_dir.string(), cfg);
        EvalArtifacts ev =
            run_eval(data, (arm_dir / "checkpoint.mhc").string(), (arm_dir / "eval").string());
        // comparable report: same schema, finite headline metrics
        nlohmann::json rep = nlohmann::json::parse(file_bytes(ev.report_file));
        for (const char* key : {"oa", "aa", "kappa"}) {
            double v = rep.at("test").at(key).get<double>();
            if (!std::isfinite(v)) {
                std::snprintf(buf, sizeof(buf), "%s: non-finite %s in report", arm.label, key);
                return {false, buf};
            }
        }
        std::snprintf(buf, sizeof(buf), "%s OA %.1f%%; ", arm.label,
                      rep.at("test").at("oa").get<double>());
        summary += buf;
    }
    return {true, summary + "all runs completed with comparable reports (no ordering asserted)"};
}

// --- criterion 8 -----------------------------------------------------------

std::pair<bool, std::string> hres_export() {
    HsiCube cube = synth_cube(8, 8, 3, 12, 31);
    ModelConfig cfg;
    cfg.hidden_dim = 8;
    cfg.spectral_groups = 2;
    cfg.state_size = 4;
    cfg.blocks = 2;
    cfg.classes = cube.class_count;
    cfg.bands = cube.bands;
    cfg.height = 8;
    cfg.width = 8;
    cfg.seed = 9;
    Model model(cfg, cube.wavelengths);
    // untrained configuration of the mapping generators: theta = alpha = 0
    for (auto& p : model.params().items()) {
        if (p.name.find("theta_") != std::string::npos ||
            p.name.find("alpha_") != std::string::npos)
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
    }

    auto dir = fresh_dir("hres");
    auto files = export_hres_maps(model, cube, 0, SublayerKind::Cgm, dir.string());
    int64_t pgms = 0;
    for (const auto& f : files)
        if (f.size() > 4 && f.substr(f.size() - 4) == ".pgm") ++pgms;

    HresMaps maps = hres_maps(model, cube, 0, SublayerKind::Cgm);
    int64_t n = maps.streams, l = maps.height * maps.width;
    double lo = 2.0, hi = -2.0, worst_span = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double mn = 2.0, mx = -2.0;
            for (int64_t pix = 0; pix < l; ++pix) {
                double v = maps.values.at((pix * n + i) * n + j);
                mn = std::min(mn, v);
                mx = std::max(mx, v);
            }
            lo = std::min(lo, mn);
            hi = std::max(hi, mx);
            worst_span = std::max(worst_span, mx - mn);
        }
    double ds_dev = max_marginal_deviation(maps.values);
    bool pass = pgms == n * n && lo > 0.0 && hi <= 1.0 && ds_dev < 1e-3 && worst_span < 1e-6;
    std::snprintf(buf, sizeof(buf),
                  "%lld maps (n^2=%lld), raw values in (%.3g, %.3g], marginal dev %.2e "
                  "(tol 1e-3), untrained max-min %.2e (tol 1e-6)",
                  static_cast<long long>(pgms), static_cast<long long>(n * n), lo, hi, ds_dev,
                  worst_span);
    return {pass, buf};
}

// --- criterion 9 -----------------------------------------------------------

std::pair<bool, std::string> metrics_oracle() {
    Rng rng(909);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        int64_t k = 2 + rng.next_below(6);
        std::vector<int64_t> cm(static_cast<size_t>(k * k));
        for (auto& v : cm) v = rng.next_below(50);
        cm[0] += 1;
        Metrics m = metrics_from_confusion(cm, k);

        // brute-force recomputation
        double total = 0, diag = 0, pe = 0, aa = 0;
        int64_t support = 0;
        for (int64_t t = 0; t < k; ++t)
            for (int64_t p = 0; p < k; ++p) {
                total += static_cast<double>(cm[static_cast<size_t>(t * k + p)]);
                if (t == p) diag += static_cast<double>(cm[static_cast<size_t>(t * k + p)]);
            }
        for (int64_t t = 0; t < k; ++t) {
            double row = 0, col = 0;
            for (int64_t p = 0; p < k; ++p) {
                row += static_cast<double>(cm[static_cast<size_t>(t * k + p)]);
                col += static_cast<double>(cm[static_cast<size_t>(p * k + t)]);
            }
            if (row > 0) {
                aa += 100.0 * static_cast<double>(cm[static_cast<size_t>(t * k + t)]) / row;
                ++support;
            }
            pe += row * col;
        }
        double oa = 100.0 * diag / total;
        aa /= static_cast<double>(support);
        pe /= total * total;
        double kappa = 100.0 * (oa / 100.0 - pe) / (1.0 - pe);
        worst = std::max(worst, std::abs(m.oa - oa) / std::max(1.0, std::abs(oa)));
        worst = std::max(worst, std::abs(m.aa - aa) / std::max(1.0, std::abs(aa)));
        worst = std::max(worst, std::abs(m.kappa - kappa) / std::max(1.0, std::abs(kappa)));
    }

    Metrics hand = metrics_from_confusion({9, 1, 2, 8}, 2);
    bool hand_ok = std::abs(hand.oa - 85.0) < 1e-10 && std::abs(hand.aa - 85.0) < 1e-10 &&
                   std::abs(hand.kappa - 70.0) < 1e-9;
    bool pass = worst < 1e-10 && hand_ok;
    std::snprintf(buf, sizeof(buf),
                  "50 random matrices: worst rel diff %.2e (tol 1e-10); hand case [[9,1],[2,8]] "
                  "-> OA %.1f%% AA %.1f%% kappa %.2f%%",
                  worst, hand.oa, hand.aa, hand.kappa);
    return {pass, buf};
}

// --- criterion 10 ------------------------------------------------------------

std::pair<bool, std::string> determinism() {
    auto dir = fresh_dir("determinism");
    auto data = (dir / "cube.hsic").string();
    run_synth(16, 16, 4, 12, 21, 0.01, data);

    auto one_run = [&](const std::string& leaf) {
        ModelConfig cfg;
        cfg.hidden_dim = 8;
        cfg.spectral_groups = 2;
        cfg.state_size = 4;
        cfg.blocks = 2;
        cfg.steps = 25;
        cfg.seed = 77;
        auto out = (dir / leaf).string();
        TrainArtifacts tr = run_train(data, out, cfg);
        run_eval(data, tr.checkpoint_file, out + "/eval");
        return out;
    };
    std::string a = one_run("a");
    std::string b = one_run("b");

    struct Pair {
        const char* what;
        std::string pa, pb;
    };
    Pair pairs[] = {{"checkpoint", a + "/checkpoint.mhc", b + "/checkpoint.mhc"},
                    {"history", a + "/history.csv", b + "/history.csv"},
                    {"report", a + "/eval/report.json", b + "/eval/report.json"},
                    {"per-class table", a + "/eval/per_class.txt", b + "/eval/per_class.txt"},
                    {"class map", a + "/eval/classmap.pgm", b + "/eval/classmap.pgm"}};
    for (const auto& p : pairs) {
        if (file_bytes(p.pa) != file_bytes(p.pb)) {
            std::snprintf(buf, sizeof(buf), "%s differs between identical-seed runs", p.what);
            return {false, buf};
        }
    }
    return {true, "two identical-seed train+eval runs: checkpoint, history, report, per-class "
                  "table and class map are byte-identical"};
}

} // namespace

int main() {
    std::printf("acceptance suite (%s)\n", kVersionString);
    run_criterion(1, "Sinkhorn correctness", sinkhorn_marginals);
    run_criterion(2, "mean preservation", mean_preservation);
    run_criterion(3, "whole-model gradient suite", gradient_suite);
    run_criterion(4, "remap exactness", remap_exactness);
    run_criterion(5, "scan causality", causality_probes);
    run_criterion(6, "overfit smoke", overfit_smoke);
    run_criterion(7, "expansion-rate ablation harness", ablation_harness);
    run_criterion(8, "H_res map export", hres_export);
    run_criterion(9, "metrics oracle", metrics_oracle);
    run_criterion(10, "determinism", determinism);
    if (g_failures) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all 10 criteria passed\n");
    return 0;
}
