// latentad: unsupervised anomaly detection and segmentation on grayscale
// images via a VQ-VAE latent space and an ensemble of autoregressive
// Performer models.

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "latentad/config.hpp"
#include "latentad/errors.hpp"
#include "latentad/runner.hpp"

namespace {

struct CommonArgs {
    std::string run_dir;
    std::string profile = "desk";
    std::string config_file;
    std::vector<std::string> overrides;
};

latentad::RunContext make_context(const CommonArgs& args) {
    latentad::Config config = latentad::Config::profile_defaults(args.profile);
    if (!args.config_file.empty()) config.merge_file(args.config_file);
    config.merge_env();
    for (const auto& kv : args.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw latentad::ConfigError("--set expects key=value, got: " + kv);
        config.merge_kv(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return latentad::RunContext{std::move(config), args.run_dir};
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--run-dir", args.run_dir, "Run directory for all outputs")->required();
    cmd->add_option("--profile", args.profile, "Config profile: desk, paper, paper_large");
    cmd->add_option("--config", args.config_file, "JSON config file (flat keys)");
    cmd->add_option("--set", args.overrides, "Override a config key, e.g. --set vqvae.epochs=4");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"latentad: latent-transformer anomaly detection toolkit"};
    app.require_subcommand(1);

    CommonArgs args;
    bool force = false;
    bool same_ordering = false;
    bool positive_residuals = false;
    bool write_maps = false;
    bool allow_mismatch = false;
    std::string stage = "ensemble";
    std::string images_dir, masks_dir, single_image, report_dir;

    auto* generate = app.add_subcommand("generate", "Generate a synthetic phantom corpus");
    add_common(generate, args);
    generate->add_flag("--force", force, "Overwrite an existing non-empty corpus directory");

    auto* train_vqvae = app.add_subcommand("train-vqvae", "Train the VQ-VAE on the corpus");
    add_common(train_vqvae, args);

    auto* train_tr = app.add_subcommand("train-transformers",
                                        "Train one transformer per ordering spec");
    add_common(train_tr, args);
    train_tr->add_flag("--same-ordering-seeds", same_ordering,
                       "Train all members on the first ordering with distinct seeds");

    auto* segment = app.add_subcommand("segment", "Residual maps, segmentations and pooled DICE");
    add_common(segment, args);
    segment->add_option("--stage", stage,
                        "Pipeline stage: vqvae_only, transformer, masked_residual, ensemble");
    segment->add_option("--input", images_dir, "Image directory (default: corpus test_anom)");
    segment->add_option("--masks", masks_dir, "Truth mask directory");
    segment->add_flag("--positive-residuals", positive_residuals,
                      "Threshold only positive residuals");
    segment->add_flag("--write-maps", write_maps, "Write per-image residual maps");

    auto* detect = app.add_subcommand("detect", "Image-wise OOD detection report");
    add_common(detect, args);
    detect->add_flag("--allow-vqvae-mismatch", allow_mismatch,
                     "Permit transformers paired with a different VQ-VAE (general-purpose mode)");
    detect->add_option("--image", single_image, "Score a single image and print the result");

    auto* sweep = app.add_subcommand("sweep-intensity", "Sprite intensity sweep with DICE curve");
    add_common(sweep, args);

    auto* report = app.add_subcommand("report", "Collect all metrics in a run directory");
    report->add_option("--run-dir", report_dir, "Run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) {
            cmd_generate(make_context(args), force);
        } else if (train_vqvae->parsed()) {
            cmd_train_vqvae(make_context(args));
        } else if (train_tr->parsed()) {
            cmd_train_transformers(make_context(args), same_ordering);
        } else if (segment->parsed()) {
            latentad::SegmentOptions opts;
            opts.stage = latentad::pipeline_stage_from_string(stage);
            opts.positive_residuals = positive_residuals;
            opts.write_maps = write_maps;
            if (!images_dir.empty()) opts.images_dir = images_dir;
            if (!masks_dir.empty()) opts.masks_dir = masks_dir;
            const auto metrics = cmd_segment(make_context(args), opts);
            std::printf("%s\n", metrics.dump(2).c_str());
        } else if (detect->parsed()) {
            const auto ctx = make_context(args);
            if (!single_image.empty()) {
                std::printf("%.9g\n",
                            latentad::score_single_image(ctx, single_image, allow_mismatch));
            } else {
                latentad::DetectOptions opts;
                opts.allow_vqvae_mismatch = allow_mismatch;
                const auto metrics = cmd_detect(ctx, opts);
                std::printf("%s\n", metrics.dump(2).c_str());
            }
        } else if (sweep->parsed()) {
            const auto metrics = cmd_sweep_intensity(make_context(args));
            std::printf("%s\n", metrics.dump(2).c_str());
        } else if (report->parsed()) {
            std::printf("%s\n", latentad::cmd_report(report_dir).dump(2).c_str());
        }
    } catch (const latentad::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const latentad::InputError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return 3;
    } catch (const latentad::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
