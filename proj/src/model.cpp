#include "mhc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mhc {

using nlohmann::json;

std::string stream_mode_name(StreamMode m) {
    return m == StreamMode::SpectrumSplit ? "spectrum" : "duplicate";
}

StreamMode stream_mode_from_name(const std::string& name) {
    if (name == "spectrum") return StreamMode::SpectrumSplit;
    if (name == "duplicate") return StreamMode::Duplicate;
    throw ConfigError("unknown stream mode \"" + name + "\" (use spectrum or duplicate)");
}

void ModelConfig::validate() const {
    if (hidden_dim < 4 || hidden_dim % 4 != 0)
        throw ConfigError("hidden_dim must be a positive multiple of 4, got " +
                          std::to_string(hidden_dim));
    if (spectral_groups < 1 || hidden_dim % spectral_groups != 0)
        throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                          " must be divisible by spectral_groups " +
                          std::to_string(spectral_groups));
    if (mode == StreamMode::SpectrumSplit && streams != 5)
        throw ConfigError("spectrum-split mode defines exactly 5 streams, got n = " +
                          std::to_string(streams));
    if (streams < 1) throw ConfigError("need at least one stream");
    if (blocks < 1) throw ConfigError("need at least one block");
    if (!(topk_fraction > 0.0 && topk_fraction <= 1.0))
        throw ConfigError("rho must be in (0,1]");
    if (sinkhorn_iterations < 1) throw ConfigError("sinkhorn_iterations must be >= 1");
    if (state_size < 1) throw ConfigError("state_size must be >= 1");
    if (classes < 1) throw ConfigError("class count must be >= 1");
    if (bands < 1) throw ConfigError("band count must be >= 1");
    if (height < 1 || width < 1) throw ConfigError("image extents must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0))
        throw ConfigError("train fraction must be in (0,1]");
}

Model::Model(const ModelConfig& cfg, const WavelengthTable& wavelengths) : cfg_(cfg) {
    cfg_.validate();
    if (wavelengths.bands() != cfg_.bands)
        throw ConfigError("wavelength table has " + std::to_string(wavelengths.bands()) +
                          " bands, config expects " + std::to_string(cfg_.bands));
    specs_ = cfg_.mode == StreamMode::SpectrumSplit
                 ? split_bands(wavelengths)
                 : duplicate_streams(cfg_.bands, cfg_.streams);
    build();
}

Model::Model(const ModelConfig& cfg, std::vector<StreamSpec> specs)
    : cfg_(cfg), specs_(std::move(specs)) {
    cfg_.validate();
    if (static_cast<int64_t>(specs_.size()) != cfg_.streams)
        throw ConfigError("got " + std::to_string(specs_.size()) + " stream specs for n = " +
                          std::to_string(cfg_.streams));
    build();
}

void Model::build() {
    Rng rng(cfg_.seed);
    bool tie = cfg_.mode == StreamMode::Duplicate;
    embedding_ = make_stream_embedding(specs_, cfg_.hidden_dim, cfg_.height, cfg_.width, reg_,
                                       rng, "model", tie);
    SinkhornConfig sk{cfg_.sinkhorn_iterations, 1.0, 1e-6};
    for (int64_t b = 0; b < cfg_.blocks; ++b) {
        blocks_.push_back(make_block_params(cfg_.hidden_dim, cfg_.streams, cfg_.spectral_groups,
                                            cfg_.state_size, cfg_.topk_fraction, sk, reg_, rng,
                                            "block" + std::to_string(b)));
    }
    head_w_ = reg_.add("head.w", randn({cfg_.hidden_dim, cfg_.classes}, rng,
                                       1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim))));
    head_b_ = reg_.add("head.b", Tensor::zeros({cfg_.classes}));
}

Tensor Model::forward(const HsiCube& cube, std::vector<BlockTrace>* trace) const {
    if (cube.bands != cfg_.bands)
        throw DataError("cube has " + std::to_string(cube.bands) + " bands, model expects " +
                        std::to_string(cfg_.bands));
    if (cube.height != cfg_.height || cube.width != cfg_.width)
        throw DataError("cube is " + std::to_string(cube.height) + "x" +
                        std::to_string(cube.width) + ", model expects " +
                        std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
    if (trace) trace->assign(static_cast<size_t>(cfg_.blocks), BlockTrace{});

    Tensor r = embed_streams(cube, specs_, embedding_);
    for (int64_t b = 0; b < cfg_.blocks; ++b)
        r = block_forward(r, blocks_[static_cast<size_t>(b)],
                          trace ? &(*trace)[static_cast<size_t>(b)] : nullptr);
    Tensor h = mean_axis(r, 1, false);
    return add(matmul(h, head_w_), head_b_);
}

std::vector<std::string> Model::stream_names() const {
    std::vector<std::string> names;
    for (const auto& s : specs_) names.push_back(s.name);
    return names;
}

// ---- training -----------------------------------------------------------

namespace {

double accuracy_on_mask(const Tensor& logits, const std::vector<int32_t>& labels,
                        const std::vector<uint8_t>& mask) {
    std::vector<int32_t> pred = argmax_rows(logits);
    int64_t hit = 0, total = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        ++total;
        if (pred[i] == labels[i]) ++hit;
    }
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(hit) / static_cast<double>(total);
}

} // namespace

TrainResult train(Model& model, const HsiCube& cube, const SplitMasks& masks,
                  const TrainOptions& opts) {
    const ModelConfig& cfg = model.config();
    std::vector<int32_t> labels = cube.zero_based_labels();

    auto& params = model.params().items();
    std::vector<std::vector<double>> adam_m(params.size()), adam_v(params.size());
    for (size_t p = 0; p < params.size(); ++p) {
        adam_m[p].assign(params[p].tensor.data().size(), 0.0);
        adam_v[p].assign(params[p].tensor.data().size(), 0.0);
    }
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    TrainResult result;
    double prev_max_grad = 0.0;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        Tensor logits = model.forward(cube);
        Tensor loss = masked_cross_entropy(logits, labels, masks.train);
        double loss_val = loss.value();
        if (!std::isfinite(loss_val)) {
            throw DivergenceError("training diverged at step " + std::to_string(step) +
                                      " (loss not finite); max |grad| at previous step was " +
                                      std::to_string(prev_max_grad),
                                  step, prev_max_grad);
        }
        double train_oa = accuracy_on_mask(logits, labels, masks.train);
        result.history.push_back({step, loss_val, train_oa});
        result.final_loss = loss_val;
        result.steps_run = step + 1;
        if (opts.stop_at_train_oa && train_oa >= *opts.stop_at_train_oa) break;

        model.params().zero_grads();
        backward(loss);

        double max_grad = 0.0;
        double t = static_cast<double>(step + 1);
        double bc1 = 1.0 - std::pow(beta1, t);
        double bc2 = 1.0 - std::pow(beta2, t);
        for (size_t p = 0; p < params.size(); ++p) {
            Tensor& w = params[p].tensor;
            if (!w.has_grad()) continue;
            auto& g = w.grad();
            auto& m = adam_m[p];
            auto& v = adam_v[p];
            auto& d = w.data();
            for (size_t i = 0; i < d.size(); ++i) {
                max_grad = std::max(max_grad, std::abs(g[i]));
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                d[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            }
        }
        prev_max_grad = max_grad;
    }
    return result;
}

// ---- metrics --------------------------------------------------------------

Metrics metrics_from_confusion(const std::vector<int64_t>& confusion, int64_t classes) {
    if (static_cast<int64_t>(confusion.size()) != classes * classes)
        throw DimensionError("confusion matrix size != K*K");
    Metrics m;
    m.classes = classes;
    m.confusion = confusion;
    m.per_class.assign(static_cast<size_t>(classes), -1.0);
    m.per_class_support.assign(static_cast<size_t>(classes), 0);

    int64_t total = 0, diag = 0;
    for (int64_t t = 0; t < classes; ++t)
        for (int64_t p = 0; p < classes; ++p) {
            int64_t v = confusion[static_cast<size_t>(t * classes + p)];
            total += v;
            if (t == p) diag += v;
            m.per_class_support[static_cast<size_t>(t)] += v;
        }
    if (total == 0) throw ContractError("confusion matrix is empty");

    m.oa = 100.0 * static_cast<double>(diag) / static_cast<double>(total);

    double recall_sum = 0.0;
    int64_t with_support = 0;
    for (int64_t t = 0; t < classes; ++t) {
        int64_t row = m.per_class_support[static_cast<size_t>(t)];
        if (row == 0) {
            m.excluded_classes.push_back(t + 1);
            continue;
        }
        double recall = 100.0 *
                        static_cast<double>(confusion[static_cast<size_t>(t * classes + t)]) /
                        static_cast<double>(row);
        m.per_class[static_cast<size_t>(t)] = recall;
        recall_sum += recall;
        ++with_support;
    }
    m.aa = with_support == 0 ? 0.0 : recall_sum / static_cast<double>(with_support);

    double pe = 0.0;
    for (int64_t c = 0; c < classes; ++c) {
        int64_t rowsum = m.per_class_support[static_cast<size_t>(c)];
        int64_t colsum = 0;
        for (int64_t t = 0; t < classes; ++t)
            colsum += confusion[static_cast<size_t>(t * classes + c)];
        pe += static_cast<double>(rowsum) * static_cast<double>(colsum);
    }
    pe /= static_cast<double>(total) * static_cast<double>(total);
    double po = m.oa / 100.0;
    if (1.0 - pe < 1e-15) {
        m.kappa = po >= 1.0 - 1e-15 ? 100.0 : 0.0;
    } else {
        m.kappa = 100.0 * (po - pe) / (1.0 - pe);
    }
    return m;
}

Metrics evaluate(const Tensor& logits, const std::vector<int32_t>& labels,
                 const std::vector<uint8_t>& mask) {
    if (logits.rank() != 2) throw DimensionError("evaluate: logits must be [L,K]");
    int64_t l = logits.shape()[0], k = logits.shape()[1];
    if (static_cast<int64_t>(labels.size()) != l || static_cast<int64_t>(mask.size()) != l)
        throw DimensionError("evaluate: labels/mask length mismatch");
    std::vector<int32_t> pred = argmax_rows(logits);
    std::vector<int64_t> cm(static_cast<size_t>(k * k), 0);
    for (int64_t i = 0; i < l; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        int32_t t = labels[static_cast<size_t>(i)];
        if (t < 0 || t >= k)
            throw ContractError("evaluate: masked pixel " + std::to_string(i) +
                                " has label outside [0,K)");
        ++cm[static_cast<size_t>(t * k + pred[static_cast<size_t>(i)])];
    }
    return metrics_from_confusion(cm, k);
}

// ---- H_res map export --------------------------------------------------------

HresMaps hres_maps(const Model& model, const HsiCube& cube, int64_t layer, SublayerKind kind) {
    if (layer < 0 || layer >= model.config().blocks)
        throw ConfigError("layer " + std::to_string(layer) + " out of range [0," +
                          std::to_string(model.config().blocks) + ")");
    NoGradGuard ng;
    std::vector<BlockTrace> trace;
    model.forward(cube, &trace);
    HresMaps maps;
    maps.height = cube.height;
    maps.width = cube.width;
    maps.streams = model.config().streams;
    maps.names = model.stream_names();
    maps.values = kind == SublayerKind::Cgm ? trace[static_cast<size_t>(layer)].cgm.hres
                                            : trace[static_cast<size_t>(layer)].ffn.hres;
    return maps;
}

std::vector<std::string> export_hres_maps(const Model& model, const HsiCube& cube,
                                          int64_t layer, SublayerKind kind,
                                          const std::string& out_dir) {
    HresMaps maps = hres_maps(model, cube, layer, kind);
    int64_t l = maps.height * maps.width, n = maps.streams;
    std::filesystem::create_directories(out_dir);

    std::vector<std::string> written;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            // map (i,j) routes stream j into stream i
            double lo = 1e300, hi = -1e300;
            for (int64_t pix = 0; pix < l; ++pix) {
                double v = maps.values.at((pix * n + i) * n + j);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            double span = hi - lo;
            std::vector<uint8_t> img(static_cast<size_t>(l));
            for (int64_t pix = 0; pix < l; ++pix) {
                double v = maps.values.at((pix * n + i) * n + j);
                double scaled = span > 0.0 ? (v - lo) / span : 0.0;
                img[static_cast<size_t>(pix)] =
                    static_cast<uint8_t>(std::lround(255.0 * scaled));
            }
            std::string name = "H" + std::to_string(layer) + "_" +
                               maps.names[static_cast<size_t>(j)] + "_to_" +
                               maps.names[static_cast<size_t>(i)] + ".pgm";
            write_pgm(out_dir + "/" + name, maps.width, maps.height, img);
            written.push_back(name);
        }
    }

    // per-map per-class mean membership
    std::ofstream csv(out_dir + "/class_membership.csv");
    if (!csv) throw DataError("cannot open " + out_dir + "/class_membership.csv");
    csv << "map_src,map_dst,class,pixel_count,mean_membership\n";
    char buf[64];
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t cls = 1; cls <= cube.class_count; ++cls) {
                double sum = 0.0;
                int64_t count = 0;
                for (int64_t pix = 0; pix < l; ++pix) {
                    if (cube.labels[static_cast<size_t>(pix)] != cls) continue;
                    sum += maps.values.at((pix * n + i) * n + j);
                    ++count;
                }
                std::snprintf(buf, sizeof(buf), "%.12g",
                              count ? sum / static_cast<double>(count) : 0.0);
                csv << maps.names[static_cast<size_t>(j)] << ","
                    << maps.names[static_cast<size_t>(i)] << "," << cls << "," << count << ","
                    << buf << "\n";
            }
    written.push_back("class_membership.csv");
    return written;
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'M', 'H', 'C', '1'};
constexpr uint32_t kCkptVersion = 1;

json config_to_json(const ModelConfig& c, const std::vector<StreamSpec>& specs) {
    json j;
    j["hidden_dim"] = c.hidden_dim;
    j["streams"] = c.streams;
    j["blocks"] = c.blocks;
    j["spectral_groups"] = c.spectral_groups;
    j["topk_fraction"] = c.topk_fraction;
    j["sinkhorn_iterations"] = c.sinkhorn_iterations;
    j["state_size"] = c.state_size;
    j["classes"] = c.classes;
    j["bands"] = c.bands;
    j["height"] = c.height;
    j["width"] = c.width;
    j["learning_rate"] = c.learning_rate;
    j["steps"] = c.steps;
    j["seed"] = c.seed;
    j["train_fraction"] = c.train_fraction;
    j["mode"] = stream_mode_name(c.mode);
    json sj = json::array();
    for (const auto& s : specs) {
        json one;
        one["name"] = s.name;
        one["bands"] = s.band_indices;
        sj.push_back(one);
    }
    j["stream_specs"] = sj;
    return j;
}

void config_from_json(const json& j, ModelConfig& c, std::vector<StreamSpec>& specs) {
    c.hidden_dim = j.at("hidden_dim").get<int64_t>();
    c.streams = j.at("streams").get<int64_t>();
    c.blocks = j.at("blocks").get<int64_t>();
    c.spectral_groups = j.at("spectral_groups").get<int64_t>();
    c.topk_fraction = j.at("topk_fraction").get<double>();
    c.sinkhorn_iterations = j.at("sinkhorn_iterations").get<int64_t>();
    c.state_size = j.at("state_size").get<int64_t>();
    c.classes = j.at("classes").get<int64_t>();
    c.bands = j.at("bands").get<int64_t>();
    c.height = j.at("height").get<int64_t>();
    c.width = j.at("width").get<int64_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.steps = j.at("steps").get<int64_t>();
    c.seed = j.at("seed").get<uint64_t>();
    c.train_fraction = j.at("train_fraction").get<double>();
    c.mode = stream_mode_from_name(j.at("mode").get<std::string>());
    specs.clear();
    for (const auto& one : j.at("stream_specs")) {
        StreamSpec s;
        s.name = one.at("name").get<std::string>();
        s.band_indices = one.at("bands").get<std::vector<int64_t>>();
        specs.push_back(std::move(s));
    }
}

} // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out.write(kCkptMagic, 4);
    uint32_t version = kCkptVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);

    std::string cfg = config_to_json(model.config(), model.stream_specs()).dump();
    uint32_t cfg_len = static_cast<uint32_t>(cfg.size());
    out.write(reinterpret_cast<const char*>(&cfg_len), 4);
    out.write(cfg.data(), cfg_len);

    const auto& params = model.params().items();
    uint32_t count = static_cast<uint32_t>(params.size());
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& p : params) {
        uint16_t nlen = static_cast<uint16_t>(p.name.size());
        out.write(reinterpret_cast<const char*>(&nlen), 2);
        out.write(p.name.data(), nlen);
        uint8_t rank = static_cast<uint8_t>(p.tensor.rank());
        out.write(reinterpret_cast<const char*>(&rank), 1);
        for (int64_t e : p.tensor.shape()) {
            uint32_t ext = static_cast<uint32_t>(e);
            out.write(reinterpret_cast<const char*>(&ext), 4);
        }
        out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                  static_cast<std::streamsize>(p.tensor.data().size() * sizeof(double)));
    }
    out.close();
    if (!out) throw DataError("write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    auto need = [&](void* dst, size_t nbytes, const char* what) {
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(nbytes));
        if (static_cast<size_t>(in.gcount()) != nbytes)
            throw FormatError(path + ": truncated checkpoint while reading " +
                              std::string(what));
    };

    char magic[4];
    need(magic, 4, "magic");
    if (std::memcmp(magic, kCkptMagic, 4) != 0)
        throw FormatError(path + ": bad checkpoint magic (expected \"MHC1\")");
    uint32_t version;
    need(&version, 4, "version");
    if (version != kCkptVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));

    uint32_t cfg_len;
    need(&cfg_len, 4, "config length");
    std::string cfg_str(cfg_len, '\0');
    need(cfg_str.data(), cfg_len, "config block");
    ModelConfig cfg;
    std::vector<StreamSpec> specs;
    try {
        config_from_json(json::parse(cfg_str), cfg, specs);
    } catch (const json::exception& e) {
        throw FormatError(path + ": invalid config block: " + e.what());
    }

    Model model(cfg, std::move(specs));
    uint32_t count;
    need(&count, 4, "parameter count");
    if (count != model.params().items().size())
        throw FormatError(path + ": checkpoint has " + std::to_string(count) +
                          " parameters, model expects " +
                          std::to_string(model.params().items().size()));
    for (auto& p : model.params().items()) {
        uint16_t nlen;
        need(&nlen, 2, "parameter name length");
        std::string name(nlen, '\0');
        need(name.data(), nlen, "parameter name");
        if (name != p.name)
            throw FormatError(path + ": parameter order mismatch: got \"" + name +
                              "\", expected \"" + p.name + "\"");
        uint8_t rank;
        need(&rank, 1, "parameter rank");
        if (rank != p.tensor.rank())
            throw FormatError(path + ": rank mismatch for " + name);
        for (int64_t e : p.tensor.shape()) {
            uint32_t ext;
            need(&ext, 4, "parameter extent");
            if (static_cast<int64_t>(ext) != e)
                throw FormatError(path + ": shape mismatch for " + name);
        }
        need(p.tensor.data().data(), p.tensor.data().size() * sizeof(double),
             "parameter values");
    }
    char extra;
    in.read(&extra, 1);
    if (!in.eof()) throw FormatError(path + ": trailing bytes after parameter table");
    return model;
}

} // namespace mhc
