#pragma once

#include <cstdint>
#include <vector>

#include "latentad/ar_model.hpp"
#include "latentad/image.hpp"
#include "latentad/orderings.hpp"
#include "latentad/vqvae.hpp"

namespace latentad {

// Per-latent-cell anomaly flags derived from token likelihoods.
struct ResamplingMask {
    Mask flags; // h x w, true = anomalous latent cell
    double threshold = 0.0;
    Ordering ordering;

    bool empty_mask() const { return flags.empty_mask(); }
};

ResamplingMask build_resampling_mask(const LikelihoodVector& likelihoods, double threshold,
                                     const Ordering& ordering);

struct HealOptions {
    double temperature = 1.0;
    int iterations = 1;                  // full heal passes (mask recomputed between)
    bool resample_above_threshold = false;
    int resample_attempts = 16;
};

// Single left-to-right pass in the model's ordering: flagged positions are
// replaced by model samples conditioned on the sequence as healed so far,
// unflagged tokens pass through verbatim.
TokenSequence heal_sequence(const TokenSequence& seq, const ResamplingMask& mask,
                            const ARModel& model, Rng& rng, const HealOptions& opts = {});

// Pixelwise |x - x_healed| with the nearest-neighbor-upsampled mask applied;
// `signed_values` keeps (x - x_healed) for the positive-residual variant.
struct ResidualMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;
    std::vector<float> signed_values;

    float at(int r, int c) const { return values[static_cast<size_t>(r) * width + c]; }
};

ResidualMap masked_residual(const Image& x, const LatentGrid& healed, const ResamplingMask& mask,
                            const VqVae& vqvae);

// Everything one model contributes to segmentation for one image.
struct HealOutcome {
    TokenSequence observed;
    LikelihoodVector likelihoods;
    ResamplingMask mask;
    TokenSequence healed_seq;
    LatentGrid healed_grid;
    Image healed_image;
    ResidualMap residual_full;   // |x - healed|, unmasked
    ResidualMap residual_masked; // masked variant
};

HealOutcome heal_image(const Image& x, const ARModel& model, const VqVae& vqvae,
                       double likelihood_threshold, uint64_t rng_seed,
                       const HealOptions& opts = {});

// Identity of a model for RNG stream derivation: a content hash over weights
// and ordering, so ensemble results are invariant to model list order and
// duplicated models share a stream.
uint64_t model_identity(const ARModel& model);

// Mean of per-model masked residuals. Each model heals independently with a
// stream derived from (rng_seed, model identity).
ResidualMap ensemble_residual(const Image& x, const std::vector<const ARModel*>& models,
                              const VqVae& vqvae, double likelihood_threshold,
                              uint64_t rng_seed, const HealOptions& opts = {});

// Plain reconstruction residual (no transformer), the VQ-VAE-only baseline.
ResidualMap reconstruction_residual(const Image& x, const VqVae& vqvae);

// residual > threshold, optionally restricted to positive residuals first.
Mask segment(const ResidualMap& residual, double threshold, bool positive_only = false);

} // namespace latentad
