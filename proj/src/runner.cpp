#include "latentad/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "latentad/checkpoint.hpp"
#include "latentad/detection.hpp"
#include "latentad/hash.hpp"
#include "latentad/metrics.hpp"
#include "latentad/plot.hpp"
#include "latentad/png_io.hpp"
#include "latentad/synthdata.hpp"

namespace fs = std::filesystem;

namespace latentad {

std::string RunContext::corpus_dir() const {
    return config.get_or<std::string>("corpus.dir", run_dir + "/corpus");
}

std::string RunContext::vqvae_checkpoint() const {
    return config.get_or<std::string>("vqvae.checkpoint", checkpoints_dir() + "/vqvae.ckpt");
}

std::string RunContext::transformer_dir(bool same_ordering_mode) const {
    const std::string def = checkpoints_dir() +
                            (same_ordering_mode ? "/transformers_same_ordering" : "/transformers");
    return same_ordering_mode ? def
                              : config.get_or<std::string>("transformer.checkpoint_dir", def);
}

void RunContext::prepare() const {
    fs::create_directories(run_dir);
    fs::create_directories(logs_dir());
    fs::create_directories(checkpoints_dir());
    atomic_write_file(run_dir + "/resolved_config.json", config.dump());
}

void RunContext::log(const std::string& line) const {
    const auto now = std::chrono::system_clock::now();
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch());
    std::ofstream out(logs_dir() + "/run.log", std::ios::app);
    out << "[" << secs.count() << "] " << line << "\n";
    std::fprintf(stderr, "%s\n", line.c_str());
}

std::string to_string(PipelineStage stage) {
    switch (stage) {
        case PipelineStage::VqVaeOnly: return "vqvae_only";
        case PipelineStage::Transformer: return "transformer";
        case PipelineStage::MaskedResidual: return "masked_residual";
        case PipelineStage::Ensemble: return "ensemble";
    }
    return "ensemble";
}

PipelineStage pipeline_stage_from_string(const std::string& name) {
    if (name == "vqvae_only" || name == "vqvae-only") return PipelineStage::VqVaeOnly;
    if (name == "transformer" || name == "+transformer") return PipelineStage::Transformer;
    if (name == "masked_residual" || name == "+mask") return PipelineStage::MaskedResidual;
    if (name == "ensemble" || name == "+ensemble") return PipelineStage::Ensemble;
    throw ConfigError("unknown pipeline stage: " + name);
}

namespace {

AugmentPolicy augment_policy_from_string(const std::string& name) {
    if (name == "exp1_affine_flip") return AugmentPolicy::Exp1AffineFlip;
    if (name == "exp3_translate_intensity_contrast")
        return AugmentPolicy::Exp3TranslateIntensityContrast;
    throw ConfigError("unknown augment policy: " + name);
}

std::optional<AugmentPolicy> configured_policy(const Config& config) {
    const std::string name = config.get_or<std::string>("augment.policy", "none");
    if (name == "none" || name.empty()) return std::nullopt;
    return augment_policy_from_string(name);
}

AugmentRanges configured_ranges(const Config& config) {
    AugmentRanges r;
    r.scale_pct = config.get_or<double>("augment.scale_pct", r.scale_pct);
    r.translate_px = config.get_or<double>("augment.translate_px", r.translate_px);
    r.rotate_deg = config.get_or<double>("augment.rotate_deg", r.rotate_deg);
    r.intensity_shift = config.get_or<double>("augment.intensity_shift", r.intensity_shift);
    r.contrast_pct = config.get_or<double>("augment.contrast_pct", r.contrast_pct);
    return r;
}

VqVaeConfig vqvae_config_from(const Config& c) {
    VqVaeConfig cfg;
    cfg.input_size = c.get<int>("corpus.image_size");
    cfg.codebook_size = c.get<int>("vqvae.codebook_size");
    cfg.embed_dim = c.get<int>("vqvae.embed_dim");
    cfg.channels = c.get<int>("vqvae.channels");
    cfg.residual_blocks = c.get<int>("vqvae.residual_blocks");
    cfg.epochs = c.get<int>("vqvae.epochs");
    cfg.batch_size = c.get<int>("vqvae.batch_size");
    cfg.lr = c.get<double>("vqvae.lr");
    cfg.lr_gamma = c.get<double>("vqvae.lr_gamma");
    cfg.commitment_beta = c.get<double>("vqvae.commitment_beta");
    cfg.decay_start = c.get<double>("vqvae.decay_start");
    cfg.decay_end = c.get<double>("vqvae.decay_end");
    cfg.decay_warmup_epochs = c.get<int>("vqvae.decay_warmup_epochs");
    cfg.seed = c.get<uint64_t>("vqvae.seed");
    cfg.threads = c.get<int>("run.threads");
    return cfg;
}

ARModelConfig transformer_config_from(const Config& c, int latent_cells, int codebook_size) {
    ARModelConfig cfg;
    cfg.layers = c.get<int>("transformer.layers");
    cfg.embed_dim = c.get<int>("transformer.embed_dim");
    cfg.heads = c.get<int>("transformer.heads");
    cfg.vocab = codebook_size + 1;
    cfg.max_len = latent_cells + 1;
    cfg.dropout = c.get<double>("transformer.dropout");
    cfg.feature_count = c.get<int>("transformer.feature_count");
    cfg.mlp_hidden = c.get<int>("transformer.mlp_hidden");
    cfg.epochs = c.get<int>("transformer.epochs");
    cfg.batch_size = c.get<int>("transformer.batch_size");
    cfg.lr = c.get<double>("transformer.lr");
    cfg.lr_gamma = c.get<double>("transformer.lr_gamma");
    cfg.seed = c.get<uint64_t>("transformer.seed");
    cfg.feature_redraw_epochs = c.get<int>("transformer.feature_redraw_epochs");
    return cfg;
}

HealOptions heal_options_from(const Config& c) {
    HealOptions opts;
    opts.temperature = c.get<double>("healing.temperature");
    opts.iterations = c.get<int>("healing.iterations");
    opts.resample_above_threshold = c.get<bool>("healing.resample_above_threshold");
    return opts;
}

std::string loss_csv(const std::vector<double>& train, const std::vector<double>& val) {
    std::string out = "epoch,train_loss,val_loss\n";
    char buf[96];
    for (size_t e = 0; e < train.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", e, train[e],
                      e < val.size() ? val[e] : std::numeric_limits<double>::quiet_NaN());
        out += buf;
    }
    return out;
}

void write_consumed(const RunContext& ctx, const std::string& command,
                    const nlohmann::json& inputs) {
    fs::create_directories(ctx.run_dir);
    atomic_write_file(ctx.run_dir + "/" + command + "_inputs.json", inputs.dump(2) + "\n");
}

} // namespace

void cmd_generate(const RunContext& ctx, bool force) {
    ctx.prepare();
    CorpusSpec spec;
    spec.image_size = ctx.config.get<int>("corpus.image_size");
    spec.train_count = ctx.config.get<int>("corpus.train_count");
    spec.val_count = ctx.config.get<int>("corpus.val_count");
    spec.test_in_count = ctx.config.get<int>("corpus.test_in_count");
    spec.test_anom_count = ctx.config.get<int>("corpus.test_anom_count");
    spec.far_ood_count = ctx.config.get<int>("corpus.far_ood_count");
    spec.anom_noise_sigma = ctx.config.get<double>("corpus.noise_sigma");
    spec.seed = ctx.config.get<uint64_t>("corpus.seed");
    ctx.log("generate: writing corpus to " + ctx.corpus_dir());
    generate_corpus(ctx.corpus_dir(), spec, force);
}

std::string cmd_train_vqvae(const RunContext& ctx) {
    ctx.prepare();
    const CorpusPaths paths{ctx.corpus_dir()};
    const auto train_images = load_image_dir(paths.train());
    const auto val_images = load_image_dir(paths.val());
    if (train_images.empty()) throw InputError("train-vqvae: empty training corpus");

    const VqVaeConfig cfg = vqvae_config_from(ctx.config);
    AugmentFn augment_fn;
    if (const auto policy = configured_policy(ctx.config);
        policy && ctx.config.get<bool>("augment.vqvae")) {
        const AugmentPolicy p = *policy;
        const AugmentRanges ranges = configured_ranges(ctx.config);
        augment_fn = [p, ranges](const Image& img, Rng& rng) {
            return augment(img, p, rng, ranges);
        };
    }

    ctx.log("train-vqvae: " + std::to_string(train_images.size()) + " images, " +
            std::to_string(cfg.epochs) + " epochs");
    VqVaeTrainHistory history;
    const VqVae model = train_vqvae(train_images, val_images, cfg, augment_fn, &history);

    const std::string path = ctx.vqvae_checkpoint();
    fs::create_directories(fs::path(path).parent_path());
    model.save(path);
    atomic_write_file(ctx.logs_dir() + "/vqvae_loss.csv",
                      loss_csv(history.train_loss, history.val_loss));
    write_consumed(ctx, "train_vqvae",
                   {{"vqvae_checkpoint", path}, {"vqvae_hash", hex64(model.content_hash)}});
    ctx.log("train-vqvae: saved " + path + " (hash " + hex64(model.content_hash) + ")");
    return path;
}

VqVae load_vqvae_checkpoint(const RunContext& ctx) {
    return VqVae::load(ctx.vqvae_checkpoint());
}

std::vector<std::string> list_checkpoints(const std::string& dir) {
    if (!fs::exists(dir)) throw InputError("checkpoint directory does not exist: " + dir);
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".ckpt")
            paths.push_back(entry.path().string());
    std::sort(paths.begin(), paths.end());
    return paths;
}

std::vector<ARModel> load_transformers(const std::vector<std::string>& paths) {
    if (paths.empty()) throw InputError("no transformer checkpoints given");
    std::vector<ARModel> models;
    models.reserve(paths.size());
    for (const auto& p : paths) models.push_back(ARModel::load(p));
    return models;
}

std::vector<LatentGrid> build_latent_corpus(const VqVae& vqvae, const std::vector<Image>& images,
                                            const Config& config, int augment_copies,
                                            uint64_t seed_salt, int threads) {
    const auto policy = configured_policy(config);
    const AugmentRanges ranges = configured_ranges(config);
    const int copies = policy ? augment_copies : 0;
    const size_t per_image = static_cast<size_t>(copies) + 1;
    std::vector<LatentGrid> grids(images.size() * per_image);

    const int n_threads = std::max(1, threads);
    auto worker = [&](int t) {
        for (size_t i = static_cast<size_t>(t); i < images.size();
             i += static_cast<size_t>(n_threads)) {
            grids[i * per_image] = vqvae.encode_to_grid(images[i]);
            for (int c = 0; c < copies; ++c) {
                Rng rng(derive_seed(seed_salt, i * 977 + static_cast<uint64_t>(c)));
                const Image aug = augment(images[i], *policy, rng, ranges);
                grids[i * per_image + static_cast<size_t>(c) + 1] = vqvae.encode_to_grid(aug);
            }
        }
    };
    if (n_threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
    }
    return grids;
}

std::vector<std::string> cmd_train_transformers(const RunContext& ctx, bool same_ordering_mode) {
    ctx.prepare();
    const VqVae vqvae = load_vqvae_checkpoint(ctx);
    const CorpusPaths paths{ctx.corpus_dir()};
    const auto train_images = load_image_dir(paths.train());
    const auto val_images = load_image_dir(paths.val());
    if (train_images.empty()) throw InputError("train-transformers: empty training corpus");

    const int latent = vqvae.config.latent_size();
    const int copies = ctx.config.get<int>("augment.transformer_copies");
    const int threads = ctx.config.get<int>("run.threads");

    ctx.log("train-transformers: encoding latent corpus");
    const auto train_grids =
        build_latent_corpus(vqvae, train_images, ctx.config, copies,
                            derive_seed(ctx.config.get<uint64_t>("run.seed"), 0xA06), threads);
    const auto val_grids = build_latent_corpus(vqvae, val_images, ctx.config, 0, 0, threads);

    // Member specs: one per ordering, or N seed-variants of the first
    // ordering in same-ordering mode.
    const auto spec_strings = ctx.config.ordering_specs();
    struct Member {
        OrderingSpec spec;
        uint64_t seed;
    };
    std::vector<Member> members;
    const uint64_t base_seed = ctx.config.get<uint64_t>("transformer.seed");
    if (same_ordering_mode) {
        const auto spec = parse_ordering_spec(spec_strings.front());
        for (size_t i = 0; i < spec_strings.size(); ++i)
            members.push_back({spec, base_seed + 1 + i});
    } else {
        for (const auto& s : spec_strings) members.push_back({parse_ordering_spec(s), base_seed});
    }

    const std::string out_dir = ctx.transformer_dir(same_ordering_mode);
    fs::create_directories(out_dir);

    std::vector<std::string> out_paths(members.size());
    std::vector<ARTrainHistory> histories(members.size());

    auto train_member = [&](size_t mi) {
        const Member& member = members[mi];
        const Ordering ordering = make_ordering(member.spec.cls, member.spec.symmetry, latent,
                                                latent, member.spec.seed);
        std::vector<std::vector<int>> train_seqs, val_seqs;
        train_seqs.reserve(train_grids.size());
        for (const auto& g : train_grids) train_seqs.push_back(to_sequence(g, ordering).tokens);
        for (const auto& g : val_grids) val_seqs.push_back(to_sequence(g, ordering).tokens);

        ARModelConfig cfg =
            transformer_config_from(ctx.config, latent * latent, vqvae.config.codebook_size);
        cfg.seed = member.seed;

        const ARModel model = train_transformer(train_seqs, val_seqs, cfg, ordering,
                                                vqvae.content_hash, &histories[mi]);
        char name[64];
        std::snprintf(name, sizeof(name), "transformer_%02zu.ckpt", mi);
        const std::string path = out_dir + "/" + name;
        model.save(path);
        out_paths[mi] = path;
    };

    const int workers = std::min<int>(threads, static_cast<int>(members.size()));
    ctx.log("train-transformers: " + std::to_string(members.size()) + " members, " +
            std::to_string(workers) + " workers");
    if (workers <= 1) {
        for (size_t mi = 0; mi < members.size(); ++mi) train_member(mi);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (size_t mi = static_cast<size_t>(w); mi < members.size();
                     mi += static_cast<size_t>(workers))
                    train_member(mi);
            });
        for (auto& th : pool) th.join();
    }

    nlohmann::json consumed{{"vqvae_hash", hex64(vqvae.content_hash)}};
    for (size_t mi = 0; mi < members.size(); ++mi) {
        char name[64];
        std::snprintf(name, sizeof(name), "transformer_%02zu_loss.csv", mi);
        atomic_write_file(ctx.logs_dir() + "/" + std::string(name),
                          loss_csv(histories[mi].train_nll, histories[mi].val_nll));
        consumed["transformers"].push_back(
            {{"path", out_paths[mi]}, {"hash", hex64(file_content_hash(out_paths[mi]))}});
    }
    write_consumed(ctx, same_ordering_mode ? "train_transformers_same_ordering"
                                           : "train_transformers",
                   consumed);
    return out_paths;
}

namespace {

struct LoadedPipeline {
    VqVae vqvae;
    std::vector<ARModel> models;

    std::vector<const ARModel*> model_ptrs() const {
        std::vector<const ARModel*> ptrs;
        ptrs.reserve(models.size());
        for (const auto& m : models) ptrs.push_back(&m);
        return ptrs;
    }
};

LoadedPipeline load_pipeline(const RunContext& ctx,
                             const std::optional<std::vector<std::string>>& model_paths,
                             bool allow_vqvae_mismatch, bool need_models) {
    LoadedPipeline p{load_vqvae_checkpoint(ctx), {}};
    if (!need_models) return p;
    const auto paths =
        model_paths ? *model_paths : list_checkpoints(ctx.transformer_dir(false));
    p.models = load_transformers(paths);
    for (const auto& m : p.models)
        check_vqvae_binding(m, p.vqvae.content_hash, allow_vqvae_mismatch);
    return p;
}

void write_residual_outputs(const std::string& dir, const std::string& stem,
                            const ResidualMap& map, const nlohmann::json& provenance) {
    save_png_gray16(dir + "/" + stem + "_residual.png", map.values, map.height, map.width,
                    65535.0);
    std::string raw(reinterpret_cast<const char*>(map.values.data()),
                    map.values.size() * sizeof(float));
    atomic_write_file(dir + "/" + stem + "_residual.bin", raw);
    nlohmann::json sidecar{{"dims", {map.height, map.width}},
                           {"dtype", "float32le"},
                           {"png_scale", 65535.0},
                           {"provenance", provenance}};
    atomic_write_file(dir + "/" + stem + "_residual.json", sidecar.dump(2) + "\n");
}

} // namespace

nlohmann::json cmd_segment(const RunContext& ctx, const SegmentOptions& opts) {
    ctx.prepare();
    const CorpusPaths corpus{ctx.corpus_dir()};
    const std::string images_dir = opts.images_dir.value_or(corpus.test_anom_images());
    const std::string masks_dir = opts.masks_dir.value_or(corpus.test_anom_masks());

    const auto image_paths = list_pngs(images_dir);
    if (image_paths.empty()) throw InputError("segment: no images in " + images_dir);

    const bool need_models = opts.stage != PipelineStage::VqVaeOnly;
    const LoadedPipeline pipeline =
        load_pipeline(ctx, opts.model_paths, false, need_models);
    const auto model_ptrs = pipeline.model_ptrs();
    if (need_models && model_ptrs.empty())
        throw InputError("segment: stage needs transformer checkpoints");

    const double threshold = ctx.config.get<double>("healing.likelihood_threshold");
    const HealOptions heal_opts = heal_options_from(ctx.config);
    const bool positive = opts.positive_residuals ||
                          ctx.config.get<bool>("healing.positive_residuals");
    const uint64_t run_seed = ctx.config.get<uint64_t>("run.seed");
    const int threads = ctx.config.get<int>("run.threads");

    const std::string label = opts.label.empty() ? to_string(opts.stage) : opts.label;
    const std::string out_dir = ctx.run_dir + "/segment/" + label;
    fs::create_directories(out_dir);

    // Pooled pixels over the whole test set, one global threshold.
    const size_t n = image_paths.size();
    std::vector<ResidualMap> residuals(n);
    std::vector<Mask> truths(n);

    auto eval_image = [&](size_t i) {
        const Image x = load_png_gray(image_paths[i]);
        const std::string stem = fs::path(image_paths[i]).stem().string();
        const std::string mask_path = masks_dir + "/" + fs::path(image_paths[i]).filename().string();
        if (!fs::exists(mask_path))
            throw InputError("segment: missing truth mask " + mask_path);
        truths[i] = load_png_mask(mask_path);

        const uint64_t img_seed = derive_seed(run_seed, 0x5345 + i);
        switch (opts.stage) {
            case PipelineStage::VqVaeOnly:
                residuals[i] = reconstruction_residual(x, pipeline.vqvae);
                break;
            case PipelineStage::Transformer: {
                const uint64_t stream =
                    derive_seed(img_seed, model_identity(*model_ptrs.front()));
                residuals[i] = heal_image(x, *model_ptrs.front(), pipeline.vqvae, threshold,
                                          stream, heal_opts)
                                   .residual_full;
                break;
            }
            case PipelineStage::MaskedResidual: {
                const uint64_t stream =
                    derive_seed(img_seed, model_identity(*model_ptrs.front()));
                residuals[i] = heal_image(x, *model_ptrs.front(), pipeline.vqvae, threshold,
                                          stream, heal_opts)
                                   .residual_masked;
                break;
            }
            case PipelineStage::Ensemble:
                residuals[i] = ensemble_residual(x, model_ptrs, pipeline.vqvae, threshold,
                                                 img_seed, heal_opts);
                break;
        }
    };

    const int n_threads = std::max(1, threads);
    if (n_threads == 1) {
        for (size_t i = 0; i < n; ++i) eval_image(i);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back([&, t] {
                for (size_t i = static_cast<size_t>(t); i < n;
                     i += static_cast<size_t>(n_threads))
                    eval_image(i);
            });
        for (auto& th : pool) th.join();
    }

    nlohmann::json provenance{{"vqvae", hex64(pipeline.vqvae.content_hash)}};
    for (const auto& m : pipeline.models) provenance["models"].push_back(hex64(m.content_hash));

    ScoredPixelSet pooled;
    pooled.residuals.reserve(n * residuals.front().values.size());
    pooled.truth.reserve(n * residuals.front().values.size());
    for (size_t i = 0; i < n; ++i) {
        for (size_t p = 0; p < residuals[i].values.size(); ++p) {
            pooled.residuals.push_back(positive ? std::max(residuals[i].signed_values[p], 0.0f)
                                                : residuals[i].values[p]);
            pooled.truth.push_back(truths[i].flags[p]);
        }
        if (opts.write_maps)
            write_residual_outputs(out_dir, fs::path(image_paths[i]).stem().string(),
                                   residuals[i], provenance);
    }

    const auto ceiling = dice_ceiling(pooled, ctx.config.get<int>("metrics.dice_grid"));

    nlohmann::json metrics{{"stage", to_string(opts.stage)},
                           {"positive_residuals", positive},
                           {"images", n},
                           {"dice_ceiling", ceiling.best_dice},
                           {"best_threshold", ceiling.best_threshold},
                           {"provenance", provenance}};

    // Per-image hard segmentations at the pooled best threshold.
    if (opts.write_maps) {
        for (size_t i = 0; i < n; ++i) {
            Mask seg = segment(residuals[i], ceiling.best_threshold, positive);
            save_png_mask(out_dir + "/" + fs::path(image_paths[i]).stem().string() + "_seg.png",
                          seg);
        }
    }

    atomic_write_file(out_dir + "/metrics.json", metrics.dump(2) + "\n");
    write_consumed(ctx, "segment_" + label, provenance);
    ctx.log("segment[" + label + "]: dice_ceiling=" + std::to_string(ceiling.best_dice));
    return metrics;
}

nlohmann::json cmd_detect(const RunContext& ctx, const DetectOptions& opts) {
    ctx.prepare();
    const CorpusPaths corpus{ctx.corpus_dir()};
    const std::string in_dir = opts.in_dir.value_or(corpus.test_in());

    std::vector<std::pair<std::string, std::string>> ood_dirs;
    if (opts.ood_dirs) {
        ood_dirs = *opts.ood_dirs;
    } else {
        ood_dirs = {{"near", corpus.test_anom_images()},
                    {"far_grid", corpus.far_ood(PhantomFamily::FarOodGrid)},
                    {"far_radial", corpus.far_ood(PhantomFamily::FarOodRadial)}};
    }

    const LoadedPipeline pipeline =
        load_pipeline(ctx, opts.model_paths, opts.allow_vqvae_mismatch, true);
    const auto model_ptrs = pipeline.model_ptrs();
    const int threads = ctx.config.get<int>("run.threads");

    const std::string out_dir = ctx.run_dir + "/detect";
    fs::create_directories(out_dir);

    const auto in_paths = list_pngs(in_dir);
    if (in_paths.empty()) throw InputError("detect: no in-distribution images in " + in_dir);
    std::vector<Image> in_images;
    in_images.reserve(in_paths.size());
    for (const auto& p : in_paths) in_images.push_back(load_png_gray(p));
    const auto in_scores = score_images(in_images, model_ptrs, pipeline.vqvae, threads);

    nlohmann::json provenance{{"vqvae", hex64(pipeline.vqvae.content_hash)}};
    for (const auto& m : pipeline.models) provenance["models"].push_back(hex64(m.content_hash));

    nlohmann::json report{{"provenance", provenance}};
    for (const auto& [family, dir] : ood_dirs) {
        const auto ood_paths = list_pngs(dir);
        if (ood_paths.empty()) throw InputError("detect: no OOD images in " + dir);
        std::vector<Image> ood_images;
        ood_images.reserve(ood_paths.size());
        for (const auto& p : ood_paths) ood_images.push_back(load_png_gray(p));
        const auto ood_scores = score_images(ood_images, model_ptrs, pipeline.vqvae, threads);

        std::vector<AnomalyScore> all_scores = in_scores;
        all_scores.insert(all_scores.end(), ood_scores.begin(), ood_scores.end());
        std::vector<int> labels(in_scores.size(), 1);
        labels.insert(labels.end(), ood_scores.size(), 0);
        const auto classified = classify(all_scores, labels);

        std::vector<std::string> ids;
        std::vector<double> values;
        for (const auto& p : in_paths) ids.push_back("in/" + fs::path(p).filename().string());
        for (const auto& p : ood_paths)
            ids.push_back(family + "/" + fs::path(p).filename().string());
        for (const auto& s : all_scores) values.push_back(s.mean_log_likelihood);

        atomic_write_file(out_dir + "/scores_" + family + ".csv", scores_csv(ids, all_scores));
        atomic_write_file(out_dir + "/roc_" + family + ".csv",
                          curve_csv(roc_points(values, labels), "fpr", "tpr"));
        atomic_write_file(out_dir + "/pr_" + family + ".csv",
                          curve_csv(pr_points(values, labels), "recall", "precision"));
        report[family] = to_json(classified.metrics);
    }

    atomic_write_file(out_dir + "/metrics.json", report.dump(2) + "\n");
    write_consumed(ctx, "detect", provenance);
    ctx.log("detect: report written to " + out_dir);
    return report;
}

double score_single_image(const RunContext& ctx, const std::string& image_path,
                          bool allow_vqvae_mismatch) {
    const LoadedPipeline pipeline = load_pipeline(ctx, std::nullopt, allow_vqvae_mismatch, true);
    const Image x = load_png_gray(image_path);
    return score_image(x, pipeline.model_ptrs(), pipeline.vqvae).mean_log_likelihood;
}

nlohmann::json cmd_sweep_intensity(const RunContext& ctx) {
    ctx.prepare();
    const LoadedPipeline pipeline = load_pipeline(ctx, std::nullopt, false, true);
    const auto model_ptrs = pipeline.model_ptrs();

    const int per_setting = ctx.config.get_or<int>("sweep.images_per_setting", 24);
    const int image_size = ctx.config.get<int>("corpus.image_size");
    const double threshold = ctx.config.get<double>("healing.likelihood_threshold");
    const HealOptions heal_opts = heal_options_from(ctx.config);
    const uint64_t run_seed = ctx.config.get<uint64_t>("run.seed");
    const uint64_t sweep_seed = derive_seed(ctx.config.get<uint64_t>("corpus.seed"), 0x53574545);
    const int threads = ctx.config.get<int>("run.threads");
    const int n_threads = std::max(1, threads);

    const std::string out_dir = ctx.run_dir + "/sweep";
    fs::create_directories(out_dir);

    const SpriteShape shapes[3] = {SpriteShape::Square, SpriteShape::Ellipse, SpriteShape::Heart};
    std::vector<double> noise_levels{0.0, 0.2};

    nlohmann::json rows = nlohmann::json::array();
    std::string csv = "intensity,noise_sigma,dice_ceiling,best_threshold\n";
    std::vector<PlotSeries> series;

    for (double sigma : noise_levels) {
        PlotSeries s;
        s.label = sigma == 0.0 ? "noise_off" : "noise_0.2";
        s.gray = sigma == 0.0 ? 0.0f : 0.55f;
        for (int step = 0; step <= 10; ++step) {
            const double intensity = step / 10.0;
            std::vector<ResidualMap> residuals(static_cast<size_t>(per_setting));
            std::vector<Mask> truths(static_cast<size_t>(per_setting));

            auto eval_one = [&](int i) {
                const uint64_t sample_seed =
                    derive_seed(sweep_seed, static_cast<uint64_t>(i) * 37 + step * 7919 +
                                                (sigma > 0.0 ? 1000003 : 0));
                const Phantom phantom =
                    generate_phantom(PhantomFamily::Head, sample_seed, image_size);
                const CorruptedSample sample = corrupt_with_sprite(
                    phantom, shapes[i % 3], intensity, sigma, sample_seed);
                truths[static_cast<size_t>(i)] = sample.truth_mask;
                residuals[static_cast<size_t>(i)] = ensemble_residual(
                    sample.image, model_ptrs, pipeline.vqvae, threshold,
                    derive_seed(run_seed, sample_seed), heal_opts);
            };
            if (n_threads == 1) {
                for (int i = 0; i < per_setting; ++i) eval_one(i);
            } else {
                std::vector<std::thread> pool;
                for (int t = 0; t < n_threads; ++t)
                    pool.emplace_back([&, t] {
                        for (int i = t; i < per_setting; i += n_threads) eval_one(i);
                    });
                for (auto& th : pool) th.join();
            }

            ScoredPixelSet pooled;
            for (int i = 0; i < per_setting; ++i) {
                const auto& map = residuals[static_cast<size_t>(i)];
                pooled.residuals.insert(pooled.residuals.end(), map.values.begin(),
                                        map.values.end());
                pooled.truth.insert(pooled.truth.end(),
                                    truths[static_cast<size_t>(i)].flags.begin(),
                                    truths[static_cast<size_t>(i)].flags.end());
            }
            const auto ceiling = dice_ceiling(pooled, ctx.config.get<int>("metrics.dice_grid"));
            rows.push_back({{"intensity", intensity},
                            {"noise_sigma", sigma},
                            {"dice_ceiling", ceiling.best_dice},
                            {"best_threshold", ceiling.best_threshold}});
            char buf[96];
            std::snprintf(buf, sizeof(buf), "%.1f,%.2f,%.9g,%.9g\n", intensity, sigma,
                          ceiling.best_dice, ceiling.best_threshold);
            csv += buf;
            s.x.push_back(intensity);
            s.y.push_back(ceiling.best_dice);
            ctx.log("sweep: intensity=" + std::to_string(intensity) +
                    " sigma=" + std::to_string(sigma) +
                    " dice=" + std::to_string(ceiling.best_dice));
        }
        series.push_back(std::move(s));
    }

    atomic_write_file(out_dir + "/sweep.csv", csv);
    write_line_plot(out_dir + "/sweep.png", series, "intensity", "dice");
    nlohmann::json metrics{{"rows", rows}};
    atomic_write_file(out_dir + "/metrics.json", metrics.dump(2) + "\n");
    return metrics;
}

nlohmann::json cmd_report(const std::string& run_dir) {
    if (!fs::exists(run_dir)) throw InputError("run directory does not exist: " + run_dir);
    nlohmann::json report;
    for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
        if (!entry.is_regular_file() || entry.path().filename() != "metrics.json") continue;
        std::ifstream in(entry.path());
        nlohmann::json j;
        in >> j;
        report[fs::relative(entry.path(), run_dir).string()] = j;
    }
    return report;
}

} // namespace latentad
