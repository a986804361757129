#pragma once

// Subcommand implementations shared by the CLI binary and the test suites.
// Every run writes a manifest (resolved config + seed + code version) next to
// its outputs and keeps all writes inside the output directory.

#include <string>
#include <vector>

#include "mhc/model.hpp"

namespace mhc {

inline constexpr const char* kVersionString = "mhc-hsi 0.1.0";

// MHC_THREADS env var: 0 = auto. This build executes sequentially, which
// respects any cap; the value is validated and recorded in manifests.
int64_t worker_cap();

struct TrainArtifacts {
    ModelConfig config;   // resolved against the dataset
    TrainResult result;
    std::string checkpoint_file;
    std::string history_file;
    std::string manifest_file;
};

TrainArtifacts run_train(const std::string& data_path, const std::string& out_dir,
                         ModelConfig cfg, const TrainOptions& opts = {});

struct EvalArtifacts {
    Metrics train_metrics;
    Metrics test_metrics;
    std::string report_file;
    std::string per_class_file;
    std::string map_pgm_file;
    std::string map_ppm_file;
    std::string manifest_file;
};

EvalArtifacts run_eval(const std::string& data_path, const std::string& checkpoint_path,
                       const std::string& out_dir);

struct ExportArtifacts {
    std::vector<std::string> files;
    std::string manifest_file;
};

ExportArtifacts run_export_hres(const std::string& checkpoint_path, const std::string& data_path,
                                int64_t layer, SublayerKind kind, const std::string& out_dir);

std::string run_synth(int64_t h, int64_t w, int64_t k, int64_t c, uint64_t seed,
                      double noise_sigma, const std::string& out_file);

} // namespace mhc
