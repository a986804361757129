#include "mhc/runner.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mhc {

using nlohmann::json;
namespace fs = std::filesystem;

int64_t worker_cap() {
    const char* env = std::getenv("MHC_THREADS");
    if (!env || !*env) return 0;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 0)
        throw ConfigError("MHC_THREADS must be a non-negative integer, got \"" +
                          std::string(env) + "\"");
    return v;
}

namespace {

json config_json(const ModelConfig& c) {
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
    return j;
}

std::string write_manifest(const std::string& out_dir, const std::string& subcommand,
                           json body) {
    body["subcommand"] = subcommand;
    body["version"] = kVersionString;
    body["worker_cap"] = worker_cap();
    fs::create_directories(out_dir);
    std::string path = out_dir + "/manifest.json";
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << body.dump(2) << "\n";
    if (!out) throw DataError("write failed: " + path);
    return path;
}

json metrics_json(const Metrics& m) {
    json j;
    j["oa"] = m.oa;
    j["aa"] = m.aa;
    j["kappa"] = m.kappa;
    j["per_class_recall"] = m.per_class;
    j["per_class_support"] = m.per_class_support;
    j["excluded_classes"] = m.excluded_classes;
    json cm = json::array();
    for (int64_t t = 0; t < m.classes; ++t) {
        json row = json::array();
        for (int64_t p = 0; p < m.classes; ++p)
            row.push_back(m.confusion[static_cast<size_t>(t * m.classes + p)]);
        cm.push_back(row);
    }
    j["confusion"] = cm;
    return j;
}

} // namespace

TrainArtifacts run_train(const std::string& data_path, const std::string& out_dir,
                         ModelConfig cfg, const TrainOptions& opts) {
    HsiCube cube = read_container(data_path);
    cfg.classes = cube.class_count;
    cfg.bands = cube.bands;
    cfg.height = cube.height;
    cfg.width = cube.width;
    cfg.validate();

    Model model(cfg, cube.wavelengths);
    SplitMasks masks =
        stratified_split(cube.labels, cube.class_count, {cfg.train_fraction, {}, cfg.seed});
    TrainResult result = train(model, cube, masks, opts);

    fs::create_directories(out_dir);
    TrainArtifacts art;
    art.config = cfg;
    art.result = std::move(result);

    art.checkpoint_file = out_dir + "/checkpoint.mhc";
    save_checkpoint(model, art.checkpoint_file);

    art.history_file = out_dir + "/history.csv";
    {
        std::ofstream hist(art.history_file);
        if (!hist) throw DataError("cannot open " + art.history_file + " for writing");
        hist << "step,loss,train_oa\n";
        char buf[96];
        for (const auto& rec : art.result.history) {
            std::snprintf(buf, sizeof(buf), "%lld,%.12g,%.6f\n",
                          static_cast<long long>(rec.step), rec.loss, rec.train_oa);
            hist << buf;
        }
    }

    json body;
    body["data"] = data_path;
    body["config"] = config_json(cfg);
    body["seed"] = cfg.seed;
    body["steps_run"] = art.result.steps_run;
    body["outputs"] = {"checkpoint.mhc", "history.csv"};
    art.manifest_file = write_manifest(out_dir, "train", std::move(body));
    return art;
}

EvalArtifacts run_eval(const std::string& data_path, const std::string& checkpoint_path,
                       const std::string& out_dir) {
    Model model = load_checkpoint(checkpoint_path);
    HsiCube cube = read_container(data_path);
    const ModelConfig& cfg = model.config();
    if (cube.bands != cfg.bands || cube.height != cfg.height || cube.width != cfg.width ||
        static_cast<int64_t>(cube.class_count) != cfg.classes) {
        throw ConfigError(
            "checkpoint/dataset mismatch: checkpoint expects C=" + std::to_string(cfg.bands) +
            " HxW=" + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
            " K=" + std::to_string(cfg.classes) + " (D=" + std::to_string(cfg.hidden_dim) +
            ", n=" + std::to_string(cfg.streams) + "); dataset has C=" +
            std::to_string(cube.bands) + " HxW=" + std::to_string(cube.height) + "x" +
            std::to_string(cube.width) + " K=" + std::to_string(cube.class_count));
    }

    SplitMasks masks =
        stratified_split(cube.labels, cube.class_count, {cfg.train_fraction, {}, cfg.seed});
    NoGradGuard ng;
    Tensor logits = model.forward(cube);
    std::vector<int32_t> labels = cube.zero_based_labels();

    EvalArtifacts art;
    art.train_metrics = evaluate(logits, labels, masks.train);
    art.test_metrics = evaluate(logits, labels, masks.test);

    fs::create_directories(out_dir);
    art.report_file = out_dir + "/report.json";
    {
        // results only; provenance (paths, config, seed) lives in the manifest
        json report;
        report["train"] = metrics_json(art.train_metrics);
        report["test"] = metrics_json(art.test_metrics);
        std::ofstream out(art.report_file);
        if (!out) throw DataError("cannot open " + art.report_file + " for writing");
        out << report.dump(2) << "\n";
    }

    art.per_class_file = out_dir + "/per_class.txt";
    {
        std::ofstream out(art.per_class_file);
        if (!out) throw DataError("cannot open " + art.per_class_file + " for writing");
        char buf[160];
        out << "class  name                 test_n  recall%\n";
        for (int64_t c = 0; c < art.test_metrics.classes; ++c) {
            double recall = art.test_metrics.per_class[static_cast<size_t>(c)];
            std::string name = c < static_cast<int64_t>(cube.class_names.size())
                                   ? cube.class_names[static_cast<size_t>(c)]
                                   : "";
            if (recall < 0.0) {
                std::snprintf(buf, sizeof(buf), "%-6lld %-20s %6lld  (no test samples)\n",
                              static_cast<long long>(c + 1), name.c_str(),
                              static_cast<long long>(
                                  art.test_metrics.per_class_support[static_cast<size_t>(c)]));
            } else {
                std::snprintf(buf, sizeof(buf), "%-6lld %-20s %6lld  %7.2f\n",
                              static_cast<long long>(c + 1), name.c_str(),
                              static_cast<long long>(
                                  art.test_metrics.per_class_support[static_cast<size_t>(c)]),
                              recall);
            }
            out << buf;
        }
        std::snprintf(buf, sizeof(buf), "OA %.2f%%  AA %.2f%%  kappa %.2f%%\n",
                      art.test_metrics.oa, art.test_metrics.aa, art.test_metrics.kappa);
        out << buf;
    }

    // classification map over the whole scene, class ids 1..K (0 = unlabeled)
    std::vector<int32_t> pred = argmax_rows(logits);
    std::vector<uint8_t> gray(pred.size());
    std::vector<uint8_t> rgb(pred.size() * 3);
    for (size_t i = 0; i < pred.size(); ++i) {
        int64_t cls = pred[i] + 1;
        gray[i] = static_cast<uint8_t>(cls > 255 ? 255 : cls);
        auto color = class_color(cls);
        rgb[3 * i] = color[0];
        rgb[3 * i + 1] = color[1];
        rgb[3 * i + 2] = color[2];
    }
    art.map_pgm_file = out_dir + "/classmap.pgm";
    write_pgm(art.map_pgm_file, cube.width, cube.height, gray);
    art.map_ppm_file = out_dir + "/classmap.ppm";
    write_ppm(art.map_ppm_file, cube.width, cube.height, rgb);

    json body;
    body["data"] = data_path;
    body["checkpoint"] = checkpoint_path;
    body["config"] = config_json(cfg);
    body["seed"] = cfg.seed;
    body["outputs"] = {"report.json", "per_class.txt", "classmap.pgm", "classmap.ppm"};
    art.manifest_file = write_manifest(out_dir, "eval", std::move(body));
    return art;
}

ExportArtifacts run_export_hres(const std::string& checkpoint_path, const std::string& data_path,
                                int64_t layer, SublayerKind kind, const std::string& out_dir) {
    Model model = load_checkpoint(checkpoint_path);
    HsiCube cube = read_container(data_path);
    ExportArtifacts art;
    art.files = export_hres_maps(model, cube, layer, kind, out_dir);

    json body;
    body["data"] = data_path;
    body["checkpoint"] = checkpoint_path;
    body["layer"] = layer;
    body["sublayer"] = kind == SublayerKind::Cgm ? "cgm" : "ffn";
    body["config"] = config_json(model.config());
    body["seed"] = model.config().seed;
    body["outputs"] = art.files;
    art.manifest_file = write_manifest(out_dir, "export-hres", std::move(body));
    return art;
}

std::string run_synth(int64_t h, int64_t w, int64_t k, int64_t c, uint64_t seed,
                      double noise_sigma, const std::string& out_file) {
    HsiCube cube = synth_cube(h, w, k, c, seed, noise_sigma);
    write_container(cube, out_file);

    json body;
    body["h"] = h;
    body["w"] = w;
    body["k"] = k;
    body["c"] = c;
    body["seed"] = seed;
    body["noise_sigma"] = noise_sigma;
    body["subcommand"] = "synth";
    body["version"] = kVersionString;
    body["worker_cap"] = worker_cap();
    body["outputs"] = {out_file};
    std::string manifest_path = out_file + ".manifest.json";
    std::ofstream out(manifest_path);
    if (!out) throw DataError("cannot open " + manifest_path + " for writing");
    out << body.dump(2) << "\n";
    return manifest_path;
}

} // namespace mhc
