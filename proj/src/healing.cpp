#include "latentad/healing.hpp"

#include <cmath>

#include "latentad/hash.hpp"

namespace latentad {

ResamplingMask build_resampling_mask(const LikelihoodVector& likelihoods, double threshold,
                                     const Ordering& ordering) {
    if (likelihoods.probs.size() != ordering.length())
        throw InputError("build_resampling_mask: likelihood length does not match ordering");
    ResamplingMask mask;
    mask.threshold = threshold;
    mask.ordering = ordering;
    mask.flags = Mask(ordering.height, ordering.width, 0);
    for (size_t i = 0; i < likelihoods.probs.size(); ++i)
        if (likelihoods.probs[i] < threshold)
            mask.flags.flags[static_cast<size_t>(ordering.permutation[i])] = 1;
    return mask;
}

namespace {

double softmax_prob_of(const Eigen::VectorXf& logits, int token, int exclude) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < logits.size(); ++i)
        if (i != exclude) mx = std::max(mx, static_cast<double>(logits(i)));
    double z = 0.0;
    for (int i = 0; i < logits.size(); ++i)
        if (i != exclude) z += std::exp(static_cast<double>(logits(i)) - mx);
    return std::exp(static_cast<double>(logits(token)) - mx) / z;
}

} // namespace

TokenSequence heal_sequence(const TokenSequence& seq, const ResamplingMask& mask,
                            const ARModel& model, Rng& rng, const HealOptions& opts) {
    if (mask.ordering != seq.ordering)
        throw InputError("heal_sequence: mask and sequence orderings differ");
    if (seq.ordering != model.ordering)
        throw ConfigError("heal_sequence: sequence ordering does not match the model");
    const int seq_len = static_cast<int>(seq.tokens.size());

    std::vector<uint8_t> flagged(static_cast<size_t>(seq_len), 0);
    bool any = false;
    for (int i = 0; i < seq_len; ++i) {
        flagged[static_cast<size_t>(i)] =
            mask.flags.flags[static_cast<size_t>(mask.ordering.permutation[i])];
        any = any || flagged[static_cast<size_t>(i)];
    }
    if (!any) return seq;

    TokenSequence healed;
    healed.ordering = seq.ordering;
    healed.tokens.resize(static_cast<size_t>(seq_len));

    auto state = model.begin_decode();
    Eigen::VectorXf logits = model.decode_step(state, model.bos_token());
    for (int i = 0; i < seq_len; ++i) {
        int token;
        if (flagged[static_cast<size_t>(i)]) {
            token = sample_from_logits(logits, opts.temperature, rng, model.bos_token());
            if (opts.resample_above_threshold) {
                for (int attempt = 0; attempt < opts.resample_attempts &&
                                      softmax_prob_of(logits, token, model.bos_token()) <
                                          mask.threshold;
                     ++attempt)
                    token = sample_from_logits(logits, opts.temperature, rng, model.bos_token());
            }
        } else {
            token = seq.tokens[static_cast<size_t>(i)];
        }
        healed.tokens[static_cast<size_t>(i)] = token;
        if (i + 1 < seq_len) logits = model.decode_step(state, token);
    }
    return healed;
}

namespace {

ResidualMap residual_between(const Image& x, const Image& recon) {
    ResidualMap map;
    map.height = x.height;
    map.width = x.width;
    map.values.resize(x.pixels.size());
    map.signed_values.resize(x.pixels.size());
    for (size_t i = 0; i < x.pixels.size(); ++i) {
        const float d = x.pixels[i] - recon.pixels[i];
        map.signed_values[i] = d;
        map.values[i] = std::abs(d);
    }
    return map;
}

void apply_upsampled_mask(ResidualMap& map, const Mask& latent_mask) {
    const int fy = map.height / latent_mask.height;
    const int fx = map.width / latent_mask.width;
    if (fy * latent_mask.height != map.height || fx * latent_mask.width != map.width)
        throw ConfigError("masked_residual: image size is not an integer multiple of the grid");
    for (int r = 0; r < map.height; ++r) {
        for (int c = 0; c < map.width; ++c) {
            if (!latent_mask.at(r / fy, c / fx)) {
                map.values[static_cast<size_t>(r) * map.width + c] = 0.0f;
                map.signed_values[static_cast<size_t>(r) * map.width + c] = 0.0f;
            }
        }
    }
}

} // namespace

ResidualMap masked_residual(const Image& x, const LatentGrid& healed, const ResamplingMask& mask,
                            const VqVae& vqvae) {
    ResidualMap map = residual_between(x, vqvae.decode_grid(healed));
    apply_upsampled_mask(map, mask.flags);
    return map;
}

HealOutcome heal_image(const Image& x, const ARModel& model, const VqVae& vqvae,
                       double likelihood_threshold, uint64_t rng_seed, const HealOptions& opts) {
    const int latent = vqvae.config.latent_size();
    if (model.ordering.height != latent || model.ordering.width != latent)
        throw ConfigError("heal_image: model ordering does not match the VQ-VAE latent grid");

    HealOutcome out;
    const LatentGrid grid = vqvae.encode_to_grid(x);
    out.observed = to_sequence(grid, model.ordering);
    out.likelihoods = model.sequence_likelihood(out.observed);
    out.mask = build_resampling_mask(out.likelihoods, likelihood_threshold, model.ordering);

    Rng rng(rng_seed);
    out.healed_seq = heal_sequence(out.observed, out.mask, model, rng, opts);
    for (int iter = 1; iter < opts.iterations; ++iter) {
        const auto lik = model.sequence_likelihood(out.healed_seq);
        const auto next_mask = build_resampling_mask(lik, likelihood_threshold, model.ordering);
        if (next_mask.empty_mask()) break;
        out.healed_seq = heal_sequence(out.healed_seq, next_mask, model, rng, opts);
    }

    out.healed_grid = from_sequence(out.healed_seq);
    out.healed_image = vqvae.decode_grid(out.healed_grid);
    out.residual_full = residual_between(x, out.healed_image);
    out.residual_masked = out.residual_full;
    apply_upsampled_mask(out.residual_masked, out.mask.flags);
    return out;
}

uint64_t model_identity(const ARModel& model) {
    const auto& values = model.core.params.values();
    uint64_t h = fnv1a64(values.data(), values.size() * sizeof(float));
    const std::string desc = model.ordering.descriptor().dump();
    return fnv1a64(desc.data(), desc.size(), h);
}

ResidualMap ensemble_residual(const Image& x, const std::vector<const ARModel*>& models,
                              const VqVae& vqvae, double likelihood_threshold,
                              uint64_t rng_seed, const HealOptions& opts) {
    if (models.empty()) throw InputError("ensemble_residual: empty model list");
    ResidualMap mean;
    mean.height = x.height;
    mean.width = x.width;
    mean.values.assign(x.pixels.size(), 0.0f);
    mean.signed_values.assign(x.pixels.size(), 0.0f);

    for (const ARModel* model : models) {
        const uint64_t stream = derive_seed(rng_seed, model_identity(*model));
        const HealOutcome outcome = heal_image(x, *model, vqvae, likelihood_threshold, stream,
                                               opts);
        for (size_t i = 0; i < mean.values.size(); ++i) {
            mean.values[i] += outcome.residual_masked.values[i];
            mean.signed_values[i] += outcome.residual_masked.signed_values[i];
        }
    }
    const float inv = 1.0f / static_cast<float>(models.size());
    for (size_t i = 0; i < mean.values.size(); ++i) {
        mean.values[i] *= inv;
        mean.signed_values[i] *= inv;
    }
    return mean;
}

ResidualMap reconstruction_residual(const Image& x, const VqVae& vqvae) {
    return residual_between(x, vqvae.reconstruct(x));
}

Mask segment(const ResidualMap& residual, double threshold, bool positive_only) {
    if (threshold < 0.0) throw InputError("segment: threshold must be >= 0");
    Mask mask(residual.height, residual.width, 0);
    for (size_t i = 0; i < residual.values.size(); ++i) {
        const float v = positive_only ? residual.signed_values[i] : residual.values[i];
        mask.flags[i] = v > threshold ? 1 : 0;
    }
    return mask;
}

} // namespace latentad
