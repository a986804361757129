#pragma once

// Full network assembly: spectrum-aware streams, a stack of mHC blocks, the
// mean-over-streams head, training loop, metrics and map export.

#include <optional>
#include <string>
#include <vector>

#include "mhc/dataio.hpp"
#include "mhc/mhc_block.hpp"
#include "mhc/streams.hpp"

namespace mhc {

enum class StreamMode { SpectrumSplit, Duplicate };

std::string stream_mode_name(StreamMode m);
StreamMode stream_mode_from_name(const std::string& name);

struct ModelConfig {
    int64_t hidden_dim = 16;        // D; divisible by 4 (positional) and by groups
    int64_t streams = 5;            // n; fixed at 5 in spectrum-split mode
    int64_t blocks = 6;
    int64_t spectral_groups = 4;    // G
    double topk_fraction = 0.25;    // rho
    int64_t sinkhorn_iterations = 10;
    int64_t state_size = 8;         // S
    int64_t classes = 0;            // K, from data
    int64_t bands = 0;              // C, from data
    int64_t height = 0;
    int64_t width = 0;
    double learning_rate = 1e-3;
    int64_t steps = 500;
    uint64_t seed = 0;
    double train_fraction = 0.10;
    StreamMode mode = StreamMode::SpectrumSplit;

    void validate() const;
};

class Model {
public:
    // specs derived from the cube's wavelength table (or duplicated FULL)
    Model(const ModelConfig& cfg, const WavelengthTable& wavelengths);
    // reconstruction path used by checkpoint loading
    Model(const ModelConfig& cfg, std::vector<StreamSpec> specs);

    // whole-image pass: [L, K] logits; optionally captures every sublayer's mappings
    Tensor forward(const HsiCube& cube, std::vector<BlockTrace>* trace = nullptr) const;

    const ModelConfig& config() const { return cfg_; }
    ParameterRegistry& params() { return reg_; }
    const ParameterRegistry& params() const { return reg_; }
    const std::vector<StreamSpec>& stream_specs() const { return specs_; }
    std::vector<std::string> stream_names() const;
    StreamEmbedding& embedding() { return embedding_; }
    std::vector<BlockParams>& blocks() { return blocks_; }

private:
    void build();

    ModelConfig cfg_;
    std::vector<StreamSpec> specs_;
    StreamEmbedding embedding_;
    std::vector<BlockParams> blocks_;
    Tensor head_w_;
    Tensor head_b_;
    ParameterRegistry reg_;
};

// ---- training -----------------------------------------------------------

struct TrainRecord {
    int64_t step;
    double loss;
    double train_oa;   // percent, computed from the pre-update logits
};

struct TrainOptions {
    std::optional<double> stop_at_train_oa;   // stop early once reached (percent)
};

struct TrainResult {
    std::vector<TrainRecord> history;
    int64_t steps_run = 0;
    double final_loss = 0.0;
};

// Adam over full-image steps; deterministic under the model's seed.
// NaN loss raises DivergenceError with the step and last max |grad|.
TrainResult train(Model& model, const HsiCube& cube, const SplitMasks& masks,
                  const TrainOptions& opts = {});

// ---- metrics --------------------------------------------------------------

struct Metrics {
    int64_t classes = 0;
    double oa = 0.0;      // percent
    double aa = 0.0;      // percent, over classes with test support
    double kappa = 0.0;   // percent
    std::vector<double> per_class;            // recall percent; -1 for empty classes
    std::vector<int64_t> per_class_support;   // test pixels per class
    std::vector<int64_t> confusion;           // K*K row-major, rows = truth
    std::vector<int64_t> excluded_classes;    // 1-based ids with no test samples
};

Metrics metrics_from_confusion(const std::vector<int64_t>& confusion, int64_t classes);
Metrics evaluate(const Tensor& logits, const std::vector<int32_t>& labels,
                 const std::vector<uint8_t>& mask);

// ---- H_res map export --------------------------------------------------------

enum class SublayerKind { Cgm, Ffn };

struct HresMaps {
    int64_t height = 0, width = 0, streams = 0;
    std::vector<std::string> names;   // stream names
    Tensor values;                    // [L, n, n] raw doubly stochastic entries
};

HresMaps hres_maps(const Model& model, const HsiCube& cube, int64_t layer, SublayerKind kind);

// Writes n^2 PGM files H{layer}_{src}_to_{dst}.pgm (min-max scaled) plus
// class_membership.csv with per-map per-class mean membership. Returns the
// file names written.
std::vector<std::string> export_hres_maps(const Model& model, const HsiCube& cube,
                                          int64_t layer, SublayerKind kind,
                                          const std::string& out_dir);

// ---- checkpoints ---------------------------------------------------------------

// "MHC1" | version u32 | config JSON (u32 length prefix) | parameter table
// (u32 count, then u16 name length + name, u8 rank, u32 extents, f64 data LE)
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

} // namespace mhc
