#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentad/image.hpp"
#include "latentad/rng.hpp"

namespace latentad {

enum class PhantomFamily { Head, FarOodGrid, FarOodRadial };

std::string to_string(PhantomFamily family);
PhantomFamily phantom_family_from_string(const std::string& name);

// Procedurally generated normal image: layered ellipses for the head family,
// structurally distinct patterns for the far-OOD families. Bit-reproducible
// from (family, seed).
struct Phantom {
    Image image;
    Mask region; // valid sprite placement area (inside the skull for heads)
    PhantomFamily family = PhantomFamily::Head;
    uint64_t seed = 0;
};

Phantom generate_phantom(PhantomFamily family, uint64_t seed, int size = 64);

enum class SpriteShape { Square, Ellipse, Heart };

struct CorruptedSample {
    Image image;
    Mask truth_mask;
    SpriteShape shape = SpriteShape::Square;
    double sprite_intensity = 1.0;
    double noise_sigma = 0.0;
    uint64_t seed = 0;
};

struct SpriteOptions {
    double min_area_fraction = 0.02;
    double max_area_fraction = 0.15;
    double min_region_overlap = 0.5; // fraction of sprite pixels inside the region
    int max_attempts = 100;
};

// Paste one sprite at `intensity` (optionally plus clipped Gaussian noise on
// the sprite support only) at a random pose overlapping the phantom's region.
CorruptedSample corrupt_with_sprite(const Phantom& phantom, SpriteShape shape, double intensity,
                                    double noise_sigma, uint64_t seed,
                                    const SpriteOptions& opts = {});

// Sprite shape cycling + 0/1 intensity choice matching the synthetic test
// set: shape and intensity are drawn from the sample seed.
CorruptedSample corrupt_randomly(const Phantom& phantom, double noise_sigma, uint64_t seed,
                                 const SpriteOptions& opts = {});

enum class AugmentPolicy { Exp1AffineFlip, Exp3TranslateIntensityContrast };

// Parameter ranges for the augmentation draws; defaults match the documented
// policy defaults, profiles may narrow them.
struct AugmentRanges {
    double scale_pct = 10.0;
    double translate_px = 8.0;
    double rotate_deg = 15.0;
    double intensity_shift = 0.1;
    double contrast_pct = 10.0;
};

struct AugmentParams {
    double scale = 1.0;
    double rotate_rad = 0.0;
    double translate_x = 0.0;
    double translate_y = 0.0;
    bool hflip = false;
    double intensity_shift = 0.0;
    double contrast_gain = 1.0;
};

AugmentParams draw_augment_params(AugmentPolicy policy, Rng& rng,
                                  const AugmentRanges& ranges = {});
Image augment_with_params(const Image& image, const AugmentParams& params);
Image augment(const Image& image, AugmentPolicy policy, Rng& rng,
              const AugmentRanges& ranges = {});

// Corpus generation: {train, val, test_in}/ hold normal heads, test_anom/
// holds sprite-corrupted heads with parallel masks/, far-OOD families get one
// directory each. A manifest JSON records every parameter and seed.
struct CorpusSpec {
    int image_size = 64;
    int train_count = 8000;
    int val_count = 1000;
    int test_in_count = 1000;
    int test_anom_count = 100;
    int far_ood_count = 1000; // per far-OOD family
    double anom_noise_sigma = 0.0;
    uint64_t seed = 7;

    nlohmann::json to_json() const;
    static CorpusSpec from_json(const nlohmann::json& j);
};

struct CorpusPaths {
    std::string root;
    std::string train() const { return root + "/train"; }
    std::string val() const { return root + "/val"; }
    std::string test_in() const { return root + "/test_in"; }
    std::string test_anom_images() const { return root + "/test_anom/images"; }
    std::string test_anom_masks() const { return root + "/test_anom/masks"; }
    std::string far_ood(PhantomFamily family) const {
        return root + "/far_" + to_string(family);
    }
    std::string manifest() const { return root + "/manifest.json"; }
};

void generate_corpus(const std::string& root, const CorpusSpec& spec, bool force = false);

// All PNGs in a directory, sorted by filename.
std::vector<Image> load_image_dir(const std::string& dir);
std::vector<std::string> list_pngs(const std::string& dir);

} // namespace latentad
