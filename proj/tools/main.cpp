// mhc: train, evaluate, and inspect the clustering-guided hyper-connection
// Mamba classifier on HSIC hyperspectral containers.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "mhc/runner.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDiverged = 4;

int guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const mhc::DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitDiverged;
    } catch (const mhc::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const mhc::FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    } catch (const mhc::DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    } catch (const mhc::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    }
}

void print_metrics(const char* tag, const mhc::Metrics& m) {
    std::printf("%s: OA %.2f%%  AA %.2f%%  kappa %.2f%%\n", tag, m.oa, m.aa, m.kappa);
    for (int64_t c : m.excluded_classes)
        std::fprintf(stderr, "warning: class %lld has no test samples; excluded from AA\n",
                     static_cast<long long>(c));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"clustering-guided mHC Mamba for hyperspectral image classification"};
    app.require_subcommand(1);

    // train ------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train a model on an HSIC container");
    std::string data_path, out_dir, streams_mode = "spectrum";
    mhc::ModelConfig cfg;
    train_cmd->add_option("--data", data_path, "HSIC dataset path")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();
    train_cmd->add_option("--streams", streams_mode, "spectrum | duplicate");
    train_cmd->add_option("--n", cfg.streams, "stream count (duplicate mode)");
    train_cmd->add_option("--blocks", cfg.blocks, "number of mHC blocks");
    train_cmd->add_option("--d", cfg.hidden_dim, "hidden width D");
    train_cmd->add_option("--rho", cfg.topk_fraction, "Top-k fraction in (0,1]");
    train_cmd->add_option("--steps", cfg.steps, "training steps");
    train_cmd->add_option("--seed", cfg.seed, "RNG seed");
    train_cmd->add_option("--g", cfg.spectral_groups, "spectral group count G");
    train_cmd->add_option("--state", cfg.state_size, "SSM state size S");
    train_cmd->add_option("--sinkhorn-iters", cfg.sinkhorn_iterations, "Sinkhorn iterations");
    train_cmd->add_option("--lr", cfg.learning_rate, "learning rate");
    train_cmd->add_option("--train-fraction", cfg.train_fraction,
                          "per-class training fraction");

    // eval -------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ckpt_path;
    eval_cmd->add_option("--data", data_path, "HSIC dataset path")->required();
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--out", out_dir, "output directory")->required();

    // export-hres --------------------------------------------------------
    auto* export_cmd = app.add_subcommand("export-hres", "export H_res cluster maps");
    int64_t layer = 0;
    std::string sublayer = "cgm";
    export_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    export_cmd->add_option("--data", data_path, "HSIC dataset path")->required();
    export_cmd->add_option("--layer", layer, "block index")->required();
    export_cmd->add_option("--sublayer", sublayer, "cgm | ffn");
    export_cmd->add_option("--out", out_dir, "output directory")->required();

    // synth --------------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic HSIC cube");
    synth_cmd->set_help_flag("--help", "print help");   // frees -h for the height flag
    int64_t sh = 24, sw = 24, sk = 5, sc = 20;
    uint64_t sseed = 0;
    double noise = 0.01;
    std::string out_file;
    synth_cmd->add_option("--h", sh, "height");
    synth_cmd->add_option("--w", sw, "width");
    synth_cmd->add_option("--k", sk, "class count");
    synth_cmd->add_option("--c", sc, "band count");
    synth_cmd->add_option("--seed", sseed, "RNG seed");
    synth_cmd->add_option("--noise", noise, "noise sigma");
    synth_cmd->add_option("--out", out_file, "output HSIC file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    if (train_cmd->parsed()) {
        return guarded([&] {
            cfg.mode = mhc::stream_mode_from_name(streams_mode);
            mhc::TrainArtifacts art = mhc::run_train(data_path, out_dir, cfg);
            std::printf("trained %lld steps, final loss %.6f, train OA %.2f%%\n",
                        static_cast<long long>(art.result.steps_run), art.result.final_loss,
                        art.result.history.empty() ? 0.0
                                                   : art.result.history.back().train_oa);
            std::printf("checkpoint: %s\n", art.checkpoint_file.c_str());
        });
    }
    if (eval_cmd->parsed()) {
        return guarded([&] {
            mhc::EvalArtifacts art = mhc::run_eval(data_path, ckpt_path, out_dir);
            print_metrics("train", art.train_metrics);
            print_metrics("test", art.test_metrics);
            std::printf("report: %s\n", art.report_file.c_str());
        });
    }
    if (export_cmd->parsed()) {
        return guarded([&] {
            mhc::SublayerKind kind;
            if (sublayer == "cgm") {
                kind = mhc::SublayerKind::Cgm;
            } else if (sublayer == "ffn") {
                kind = mhc::SublayerKind::Ffn;
            } else {
                throw mhc::ConfigError("--sublayer must be cgm or ffn, got \"" + sublayer +
                                       "\"");
            }
            mhc::ExportArtifacts art =
                mhc::run_export_hres(ckpt_path, data_path, layer, kind, out_dir);
            std::printf("wrote %zu files to %s\n", art.files.size(), out_dir.c_str());
        });
    }
    return guarded([&] {
        mhc::run_synth(sh, sw, sk, sc, sseed, noise, out_file);
        std::printf("wrote %s\n", out_file.c_str());
    });
}
