#include "latentad/config.hpp"

#include <cstdlib>
#include <fstream>
#include <thread>

extern char** environ;

namespace latentad {

namespace {

nlohmann::json parse_scalar(const std::string& raw) {
    // Numbers and booleans parse as JSON; everything else stays a string.
    try {
        auto j = nlohmann::json::parse(raw);
        if (j.is_number() || j.is_boolean() || j.is_null()) return j;
    } catch (const nlohmann::json::exception&) {
    }
    return raw;
}

int default_threads() {
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min(8u, std::max(1u, hw)));
}

} // namespace

Config Config::profile_defaults(const std::string& profile) {
    Config cfg;
    auto& v = cfg.values_;
    v["profile"] = profile;
    v["run.threads"] = default_threads();
    v["run.seed"] = 1234;

    // Corpus
    v["corpus.image_size"] = 64;
    v["corpus.seed"] = 7;
    v["corpus.noise_sigma"] = 0.0;

    // VQ-VAE
    v["vqvae.codebook_size"] = 16;
    v["vqvae.embed_dim"] = 64;
    v["vqvae.residual_blocks"] = 2;
    v["vqvae.commitment_beta"] = 0.25;
    v["vqvae.decay_start"] = 0.5;
    v["vqvae.decay_end"] = 0.99;
    v["vqvae.seed"] = 11;

    // Transformer
    v["transformer.heads"] = 8;
    v["transformer.mlp_hidden"] = 0;
    v["transformer.seed"] = 21;
    v["transformer.feature_redraw_epochs"] = 0;

    // Orderings: the 8-member raster-symmetry ensemble.
    v["orderings.specs"] = "raster:0,raster:1,raster:2,raster:3,raster:4,raster:5,raster:6,raster:7";

    // Healing / segmentation
    v["healing.likelihood_threshold"] = 0.005;
    v["healing.temperature"] = 1.0;
    v["healing.iterations"] = 1;
    v["healing.resample_above_threshold"] = false;
    v["healing.positive_residuals"] = false;
    v["metrics.dice_grid"] = 200;

    // Augmentation applies to both training stages.
    v["augment.policy"] = "exp1_affine_flip";
    v["augment.vqvae"] = true;
    v["augment.transformer_copies"] = 2;

    if (profile == "desk") {
        v["corpus.train_count"] = 640;
        v["corpus.val_count"] = 64;
        v["corpus.test_in_count"] = 192;
        v["corpus.test_anom_count"] = 100;
        v["corpus.far_ood_count"] = 96;
        v["vqvae.channels"] = 48;
        v["vqvae.epochs"] = 16;
        v["vqvae.batch_size"] = 32;
        v["vqvae.lr"] = 1e-3;
        v["vqvae.lr_gamma"] = 0.97;
        v["vqvae.decay_warmup_epochs"] = 10;
        v["transformer.layers"] = 4;
        v["transformer.embed_dim"] = 128;
        v["transformer.feature_count"] = 64;
        v["transformer.dropout"] = 0.1;
        v["transformer.epochs"] = 12;
        v["transformer.batch_size"] = 64;
        v["transformer.lr"] = 1e-3;
        v["transformer.lr_gamma"] = 0.95;
        v["augment.scale_pct"] = 4.0;
        v["augment.translate_px"] = 2.0;
        v["augment.rotate_deg"] = 4.0;
    } else if (profile == "paper") {
        v["corpus.train_count"] = 8000;
        v["corpus.val_count"] = 1000;
        v["corpus.test_in_count"] = 1000;
        v["corpus.test_anom_count"] = 100;
        v["corpus.far_ood_count"] = 1000;
        v["vqvae.channels"] = 256;
        v["vqvae.epochs"] = 1500;
        v["vqvae.batch_size"] = 256;
        v["vqvae.lr"] = 5e-4;
        v["vqvae.lr_gamma"] = 0.999;
        v["vqvae.decay_warmup_epochs"] = 100;
        v["transformer.layers"] = 24;
        v["transformer.embed_dim"] = 256;
        v["transformer.feature_count"] = 256;
        v["transformer.dropout"] = 0.1;
        v["transformer.epochs"] = 1500;
        v["transformer.batch_size"] = 128;
        v["transformer.lr"] = 5e-4;
        v["transformer.lr_gamma"] = 0.9999;
    } else if (profile == "paper_large") {
        // The 224x224 variant: 28x28 latents, 32 codes, 3 residual blocks.
        v["corpus.image_size"] = 224;
        v["corpus.train_count"] = 15000;
        v["corpus.val_count"] = 1000;
        v["corpus.test_in_count"] = 1000;
        v["corpus.test_anom_count"] = 100;
        v["corpus.far_ood_count"] = 1000;
        v["vqvae.codebook_size"] = 32;
        v["vqvae.residual_blocks"] = 3;
        v["vqvae.channels"] = 256;
        v["vqvae.epochs"] = 500;
        v["vqvae.batch_size"] = 256;
        v["vqvae.lr"] = 1e-3;
        v["vqvae.lr_gamma"] = 0.99995;
        v["vqvae.decay_warmup_epochs"] = 100;
        v["transformer.layers"] = 16;
        v["transformer.embed_dim"] = 256;
        v["transformer.feature_count"] = 256;
        v["transformer.dropout"] = 0.3;
        v["transformer.epochs"] = 150;
        v["transformer.batch_size"] = 128;
        v["transformer.lr"] = 1e-3;
        v["transformer.lr_gamma"] = 0.99992;
        v["augment.policy"] = "exp3_translate_intensity_contrast";
    } else {
        throw ConfigError("unknown profile: " + profile);
    }
    return cfg;
}

void Config::merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file is not valid JSON: " + path + " (" + e.what() + ")");
    }
    if (!j.is_object()) throw ConfigError("config file must hold a flat JSON object: " + path);
    for (const auto& [key, value] : j.items()) values_[key] = value;
}

void Config::merge_env(const std::string& prefix) {
    for (char** env = environ; *env != nullptr; ++env) {
        const std::string entry(*env);
        if (entry.rfind(prefix, 0) != 0) continue;
        const auto eq = entry.find('=');
        if (eq == std::string::npos) continue;
        std::string key = entry.substr(prefix.size(), eq - prefix.size());
        // Dots are spelled "__" in environment variable names.
        size_t pos;
        while ((pos = key.find("__")) != std::string::npos) key.replace(pos, 2, ".");
        values_[key] = parse_scalar(entry.substr(eq + 1));
    }
}

void Config::merge_kv(const std::string& key, const std::string& raw_value) {
    if (key.empty()) throw ConfigError("empty config key");
    values_[key] = parse_scalar(raw_value);
}

std::vector<std::string> Config::ordering_specs() const {
    const std::string raw = get<std::string>("orderings.specs");
    std::vector<std::string> specs;
    size_t start = 0;
    while (start <= raw.size()) {
        const size_t comma = raw.find(',', start);
        const std::string item = raw.substr(
            start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!item.empty()) specs.push_back(item);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (specs.empty()) throw ConfigError("orderings.specs is empty");
    return specs;
}

} // namespace latentad
