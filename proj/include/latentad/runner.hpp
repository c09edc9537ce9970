#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentad/ar_model.hpp"
#include "latentad/config.hpp"
#include "latentad/healing.hpp"
#include "latentad/vqvae.hpp"

namespace latentad {

// One command = one run context. Every command leaves the run directory with
// the resolved config, the checkpoint hashes it consumed, its metrics, and a
// log, so any reported number can be re-derived.
struct RunContext {
    Config config;
    std::string run_dir;

    std::string corpus_dir() const;
    std::string checkpoints_dir() const { return run_dir + "/checkpoints"; }
    std::string logs_dir() const { return run_dir + "/logs"; }
    std::string vqvae_checkpoint() const;
    std::string transformer_dir(bool same_ordering_mode = false) const;

    void prepare() const; // create run dir skeleton, write resolved config
    void log(const std::string& line) const;
};

void cmd_generate(const RunContext& ctx, bool force);

std::string cmd_train_vqvae(const RunContext& ctx);

// One checkpoint per ordering spec. In same-ordering mode every member uses
// the first spec's ordering but a distinct training seed (the seed-ablation
// ensemble).
std::vector<std::string> cmd_train_transformers(const RunContext& ctx,
                                                bool same_ordering_mode = false);

enum class PipelineStage { VqVaeOnly, Transformer, MaskedResidual, Ensemble };
std::string to_string(PipelineStage stage);
PipelineStage pipeline_stage_from_string(const std::string& name);

struct SegmentOptions {
    PipelineStage stage = PipelineStage::Ensemble;
    bool positive_residuals = false;
    bool write_maps = false;
    std::string label;                        // output subdirectory under segment/
    std::optional<std::string> images_dir;    // default: corpus test_anom images
    std::optional<std::string> masks_dir;     // default: corpus test_anom masks
    std::optional<std::vector<std::string>> model_paths; // default: all in transformer dir
};

// Residual maps + pooled best-achievable DICE for one pipeline stage.
nlohmann::json cmd_segment(const RunContext& ctx, const SegmentOptions& opts);

struct DetectOptions {
    bool allow_vqvae_mismatch = false;
    std::optional<std::string> in_dir;   // default: corpus test_in
    std::optional<std::vector<std::pair<std::string, std::string>>> ood_dirs;
    std::optional<std::vector<std::string>> model_paths;
};

// Per-OOD-family AUROC/AUCPR/FPR report plus score CSVs.
nlohmann::json cmd_detect(const RunContext& ctx, const DetectOptions& opts = {});

// Mean ensemble log-likelihood of one image.
double score_single_image(const RunContext& ctx, const std::string& image_path,
                          bool allow_vqvae_mismatch = false);

// Intensity grid {0.0..1.0 step 0.1} x {noise off, sigma=0.2}; per-setting
// pooled dice ceiling, CSV plus a line plot.
nlohmann::json cmd_sweep_intensity(const RunContext& ctx);

// Gather every metrics JSON under a run directory into one report.
nlohmann::json cmd_report(const std::string& run_dir);

// Shared loading helpers.
VqVae load_vqvae_checkpoint(const RunContext& ctx);
std::vector<ARModel> load_transformers(const std::vector<std::string>& paths);
std::vector<std::string> list_checkpoints(const std::string& dir);

// Latent corpus construction: encode each image (plus `augment_copies`
// augmented variants when a policy is configured) through the frozen VQ-VAE.
std::vector<LatentGrid> build_latent_corpus(const VqVae& vqvae, const std::vector<Image>& images,
                                            const Config& config, int augment_copies,
                                            uint64_t seed_salt, int threads);

} // namespace latentad
