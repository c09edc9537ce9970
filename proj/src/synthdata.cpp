#include "latentad/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "latentad/errors.hpp"
#include "latentad/png_io.hpp"

namespace fs = std::filesystem;

namespace latentad {

std::string to_string(PhantomFamily family) {
    switch (family) {
        case PhantomFamily::Head: return "head";
        case PhantomFamily::FarOodGrid: return "ood_grid";
        case PhantomFamily::FarOodRadial: return "ood_radial";
    }
    return "head";
}

PhantomFamily phantom_family_from_string(const std::string& name) {
    if (name == "head") return PhantomFamily::Head;
    if (name == "ood_grid") return PhantomFamily::FarOodGrid;
    if (name == "ood_radial") return PhantomFamily::FarOodRadial;
    throw InputError("unknown phantom family: " + name);
}

namespace {

struct EllipseSpec {
    double cx, cy;      // center, pixels
    double a, b;        // semi-axes, pixels
    double angle;       // radians
    double value;       // additive intensity inside
    bool is_delta;      // additive structure rather than base fill
};

// Signed "inside" test with 2x2 supersampling for soft edges.
double ellipse_coverage(const EllipseSpec& e, double r, double c) {
    static const double offs[2] = {-0.25, 0.25};
    const double ca = std::cos(e.angle), sa = std::sin(e.angle);
    int hits = 0;
    for (double dr : offs) {
        for (double dc : offs) {
            const double y = r + dr - e.cy;
            const double x = c + dc - e.cx;
            const double u = ca * x + sa * y;
            const double v = -sa * x + ca * y;
            const double q = (u / e.a) * (u / e.a) + (v / e.b) * (v / e.b);
            hits += q <= 1.0;
        }
    }
    return hits / 4.0;
}

void separable_blur(Image& img) {
    // [1 2 1]/4 in both directions, clamped borders.
    Image tmp(img.height, img.width);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            const int cm = std::max(0, c - 1), cp = std::min(img.width - 1, c + 1);
            tmp.at(r, c) = 0.25f * img.at(r, cm) + 0.5f * img.at(r, c) + 0.25f * img.at(r, cp);
        }
    }
    for (int c = 0; c < img.width; ++c) {
        for (int r = 0; r < img.height; ++r) {
            const int rm = std::max(0, r - 1), rp = std::min(img.height - 1, r + 1);
            img.at(r, c) = 0.25f * tmp.at(rm, c) + 0.5f * tmp.at(r, c) + 0.25f * tmp.at(rp, c);
        }
    }
}

Phantom generate_head(uint64_t seed, int size) {
    Rng rng(derive_seed(seed, 0x48454144ULL)); // family-tagged stream
    const double s = size;

    const double cx = s / 2.0 + rng.uniform(-0.75, 0.75);
    const double cy = s / 2.0 + rng.uniform(-0.75, 0.75);
    const double skull_a = s * rng.uniform(0.36, 0.40);
    const double skull_b = s * rng.uniform(0.40, 0.44);
    const double skull_angle = rng.uniform(-0.06, 0.06);
    const double ring = s * rng.uniform(0.035, 0.055);
    const double skull_value = rng.uniform(0.82, 0.95);
    const double tissue_value = rng.uniform(0.44, 0.52);
    const double grad_angle = rng.uniform(0.0, 2.0 * M_PI);
    const double grad_amp = rng.uniform(0.02, 0.08);

    EllipseSpec outer{cx, cy, skull_a, skull_b, skull_angle, skull_value, false};
    EllipseSpec inner{cx, cy, skull_a - ring, skull_b - ring, skull_angle, tissue_value, false};

    // 2-4 low-contrast internal structures; the first is always a darker
    // ventricle-like pair of lobes.
    const int n_structs = static_cast<int>(rng.uniform_int(2, 4));
    std::vector<EllipseSpec> structures;
    for (int i = 0; i < n_structs; ++i) {
        const double pa = rng.uniform(0.0, 2.0 * M_PI);
        const double pr = rng.uniform(0.0, 0.55);
        const double ecx = cx + pr * (skull_a - 2.0 * ring) * std::cos(pa);
        const double ecy = cy + pr * (skull_b - 2.0 * ring) * std::sin(pa);
        const double ea = s * rng.uniform(0.04, 0.11);
        const double eb = s * rng.uniform(0.04, 0.11);
        const double eang = rng.uniform(0.0, M_PI);
        double delta = rng.uniform(0.05, 0.12);
        if (i == 0 || rng.bernoulli(0.5)) delta = -delta;
        structures.push_back({ecx, ecy, ea, eb, eang, delta, true});
    }

    Phantom phantom;
    phantom.family = PhantomFamily::Head;
    phantom.seed = seed;
    phantom.image = Image(size, size, 0.0f);
    phantom.region = Mask(size, size, 0);

    const double gx = std::cos(grad_angle), gy = std::sin(grad_angle);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            const double cov_outer = ellipse_coverage(outer, r, c);
            if (cov_outer <= 0.0) continue;
            phantom.region.at(r, c) = 1;
            const double cov_inner = ellipse_coverage(inner, r, c);
            double value = skull_value * cov_outer;
            if (cov_inner > 0.0) {
                const double proj =
                    (gx * (c - cx) / skull_a + gy * (r - cy) / skull_b); // roughly [-1,1]
                double tissue = tissue_value + grad_amp * proj;
                for (const auto& st : structures)
                    tissue += st.value * ellipse_coverage(st, r, c);
                value = skull_value * (1.0 - cov_inner) + tissue * cov_inner;
            }
            phantom.image.at(r, c) = static_cast<float>(value);
        }
    }

    // Mild tissue texture, then smoothing.
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
            if (ellipse_coverage(inner, r, c) > 0.99)
                phantom.image.at(r, c) += static_cast<float>(rng.normal(0.0, 0.012));
    separable_blur(phantom.image);

    // Sharp microstructure (specks and short filaments) drawn after the blur:
    // fine high-contrast detail that an 8x-downsampling bottleneck cannot
    // carry, present in every normal image.
    const int n_specks = static_cast<int>(rng.uniform_int(10, 16));
    for (int i = 0; i < n_specks; ++i) {
        const double pa = rng.uniform(0.0, 2.0 * M_PI);
        const double pr = rng.uniform(0.0, 0.8);
        const double sy = cy + pr * (skull_b - 3.0 * ring) * std::sin(pa);
        const double sx = cx + pr * (skull_a - 3.0 * ring) * std::cos(pa);
        double delta = rng.uniform(0.22, 0.50);
        if (rng.bernoulli(0.5)) delta = -delta;
        if (rng.bernoulli(0.4)) {
            // Filament: a short 1px-wide segment.
            const double ang = rng.uniform(0.0, M_PI);
            const double len = rng.uniform(3.0, 9.0);
            for (double t = 0.0; t <= len; t += 0.5) {
                const int r = static_cast<int>(std::lround(sy + t * std::sin(ang)));
                const int c = static_cast<int>(std::lround(sx + t * std::cos(ang)));
                if (r < 0 || r >= size || c < 0 || c >= size) continue;
                if (ellipse_coverage(inner, r, c) > 0.5)
                    phantom.image.at(r, c) += static_cast<float>(delta);
            }
        } else {
            // Speck: a 1-2 px dot.
            const double rad = rng.uniform(0.5, 2.2);
            for (int r = static_cast<int>(sy - 2); r <= static_cast<int>(sy + 2); ++r) {
                for (int c = static_cast<int>(sx - 2); c <= static_cast<int>(sx + 2); ++c) {
                    if (r < 0 || r >= size || c < 0 || c >= size) continue;
                    if (std::hypot(r - sy, c - sx) > rad) continue;
                    if (ellipse_coverage(inner, r, c) > 0.5)
                        phantom.image.at(r, c) += static_cast<float>(delta);
                }
            }
        }
    }
    phantom.image.clip01();
    return phantom;
}

Phantom generate_grid(uint64_t seed, int size) {
    Rng rng(derive_seed(seed, 0x47524944ULL));
    const double cell = rng.uniform(6.0, 12.0);
    const int line_w = static_cast<int>(rng.uniform_int(1, 2));
    const double phase_r = rng.uniform(0.0, cell);
    const double phase_c = rng.uniform(0.0, cell);
    const double bg = rng.uniform(0.10, 0.30);
    const double fg = rng.uniform(0.60, 0.90);

    Phantom phantom;
    phantom.family = PhantomFamily::FarOodGrid;
    phantom.seed = seed;
    phantom.image = Image(size, size, static_cast<float>(bg));
    phantom.region = Mask(size, size, 1);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const bool on_r = std::fmod(r + phase_r, cell) < line_w;
            const bool on_c = std::fmod(c + phase_c, cell) < line_w;
            if (on_r || on_c) phantom.image.at(r, c) = static_cast<float>(fg);
        }
    separable_blur(phantom.image);
    phantom.image.clip01();
    return phantom;
}

Phantom generate_radial(uint64_t seed, int size) {
    Rng rng(derive_seed(seed, 0x52414449ULL));
    const double cx = size / 2.0 + rng.uniform(-5.0, 5.0);
    const double cy = size / 2.0 + rng.uniform(-5.0, 5.0);
    const double period = rng.uniform(5.0, 10.0);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double amp = rng.uniform(0.25, 0.40);

    Phantom phantom;
    phantom.family = PhantomFamily::FarOodRadial;
    phantom.seed = seed;
    phantom.image = Image(size, size);
    phantom.region = Mask(size, size, 1);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const double rad = std::hypot(r - cy, c - cx);
            const double v = 0.5 + amp * std::sin(2.0 * M_PI * rad / period + phase);
            phantom.image.at(r, c) = static_cast<float>(v);
        }
    phantom.image.clip01();
    return phantom;
}

} // namespace

Phantom generate_phantom(PhantomFamily family, uint64_t seed, int size) {
    switch (family) {
        case PhantomFamily::Head: return generate_head(seed, size);
        case PhantomFamily::FarOodGrid: return generate_grid(seed, size);
        case PhantomFamily::FarOodRadial: return generate_radial(seed, size);
    }
    throw InputError("unknown phantom family");
}

namespace {

// Rasterize a sprite support mask centered at (cy, cx) with rotation.
Mask rasterize_sprite(SpriteShape shape, int size, double cy, double cx, double scale_a,
                      double scale_b, double angle) {
    Mask support(size, size, 0);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            const double y = r - cy;
            const double x = c - cx;
            const double u = (ca * x + sa * y) / scale_a;
            const double v = (-sa * x + ca * y) / scale_b;
            bool inside = false;
            switch (shape) {
                case SpriteShape::Square:
                    inside = std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
                    break;
                case SpriteShape::Ellipse:
                    inside = u * u + v * v <= 1.0;
                    break;
                case SpriteShape::Heart: {
                    // Classic sextic heart curve, y axis flipped so the lobes
                    // point up in image coordinates.
                    const double hx = u * 1.3;
                    const double hy = -v * 1.3;
                    const double t = hx * hx + hy * hy - 1.0;
                    inside = t * t * t - hx * hx * hy * hy * hy <= 0.0;
                    break;
                }
            }
            if (inside) support.at(r, c) = 1;
        }
    }
    return support;
}

} // namespace

CorruptedSample corrupt_with_sprite(const Phantom& phantom, SpriteShape shape, double intensity,
                                    double noise_sigma, uint64_t seed,
                                    const SpriteOptions& opts) {
    if (intensity < 0.0 || intensity > 1.0)
        throw InputError("sprite intensity must be in [0,1]");
    const int size = phantom.image.height;
    Rng rng(derive_seed(seed, 0x53505249ULL));

    for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
        const double area_fraction =
            rng.uniform(opts.min_area_fraction, opts.max_area_fraction);
        const double area = area_fraction * size * size;
        double scale_a = 1.0, scale_b = 1.0;
        switch (shape) {
            case SpriteShape::Square: {
                const double aspect = rng.uniform(0.6, 1.0);
                scale_b = std::sqrt(area / (4.0 * aspect));
                scale_a = aspect * scale_b;
                break;
            }
            case SpriteShape::Ellipse: {
                const double aspect = rng.uniform(0.5, 1.0);
                scale_b = std::sqrt(area / (M_PI * aspect));
                scale_a = aspect * scale_b;
                break;
            }
            case SpriteShape::Heart: {
                // Unit heart curve encloses ~1.35 area units at this scaling.
                const double unit_area = 1.35 * (1.0 / 1.3) * (1.0 / 1.3) * 4.0;
                scale_a = scale_b = std::sqrt(area / unit_area);
                break;
            }
        }
        const double angle = rng.uniform(0.0, 2.0 * M_PI);
        const double cy = rng.uniform(0.0, size - 1.0);
        const double cx = rng.uniform(0.0, size - 1.0);

        const Mask support = rasterize_sprite(shape, size, cy, cx, scale_a, scale_b, angle);
        const size_t total = support.count();
        if (total == 0) continue;
        size_t overlap = 0;
        for (size_t i = 0; i < support.flags.size(); ++i)
            overlap += (support.flags[i] && phantom.region.flags[i]);
        if (static_cast<double>(overlap) < opts.min_region_overlap * static_cast<double>(total))
            continue;

        CorruptedSample sample;
        sample.image = phantom.image;
        sample.truth_mask = support;
        sample.shape = shape;
        sample.sprite_intensity = intensity;
        sample.noise_sigma = noise_sigma;
        sample.seed = seed;
        for (int r = 0; r < size; ++r) {
            for (int c = 0; c < size; ++c) {
                if (!support.at(r, c)) continue;
                double v = intensity;
                if (noise_sigma > 0.0) v += rng.normal(0.0, noise_sigma);
                sample.image.at(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
        return sample;
    }
    throw PlacementError("sprite placement failed after " + std::to_string(opts.max_attempts) +
                         " attempts");
}

CorruptedSample corrupt_randomly(const Phantom& phantom, double noise_sigma, uint64_t seed,
                                 const SpriteOptions& opts) {
    Rng pick(derive_seed(seed, 0x5049434bULL));
    const SpriteShape shapes[3] = {SpriteShape::Square, SpriteShape::Ellipse, SpriteShape::Heart};
    const SpriteShape shape = shapes[pick.bounded(3)];
    const double intensity = pick.bernoulli(0.5) ? 1.0 : 0.0;
    return corrupt_with_sprite(phantom, shape, intensity, noise_sigma, seed, opts);
}

AugmentParams draw_augment_params(AugmentPolicy policy, Rng& rng,
                                  const AugmentRanges& ranges) {
    AugmentParams p;
    const double scale = ranges.scale_pct / 100.0;
    const double contrast = ranges.contrast_pct / 100.0;
    switch (policy) {
        case AugmentPolicy::Exp1AffineFlip:
            p.scale = rng.uniform(1.0 - scale, 1.0 + scale);
            p.translate_x = rng.uniform(-ranges.translate_px, ranges.translate_px);
            p.translate_y = rng.uniform(-ranges.translate_px, ranges.translate_px);
            p.rotate_rad = rng.uniform(-ranges.rotate_deg, ranges.rotate_deg) * M_PI / 180.0;
            p.hflip = rng.bernoulli(0.5);
            break;
        case AugmentPolicy::Exp3TranslateIntensityContrast:
            p.translate_x = rng.uniform(-ranges.translate_px, ranges.translate_px);
            p.translate_y = rng.uniform(-ranges.translate_px, ranges.translate_px);
            p.intensity_shift = rng.uniform(-ranges.intensity_shift, ranges.intensity_shift);
            p.contrast_gain = rng.uniform(1.0 - contrast, 1.0 + contrast);
            break;
    }
    return p;
}

Image augment_with_params(const Image& image, const AugmentParams& p) {
    Image out(image.height, image.width);
    const double cy = (image.height - 1) / 2.0;
    const double cx = (image.width - 1) / 2.0;
    const double ca = std::cos(-p.rotate_rad), sa = std::sin(-p.rotate_rad);
    const bool identity_warp = p.scale == 1.0 && p.rotate_rad == 0.0 && p.translate_x == 0.0 &&
                               p.translate_y == 0.0 && !p.hflip;
    for (int r = 0; r < image.height; ++r) {
        for (int c = 0; c < image.width; ++c) {
            float v;
            if (identity_warp) {
                v = image.at(r, c);
            } else {
                // Inverse map: undo translation, rotation, scale about center.
                const double y0 = (r - cy - p.translate_y);
                const double x0 = (c - cx - p.translate_x);
                double sy = (sa * x0 * -1.0 + ca * y0) / p.scale;
                double sx = (ca * x0 + sa * y0 * -1.0) / p.scale;
                sx = p.hflip ? -sx : sx;
                v = bilinear_sample(image, sy + cy, sx + cx);
            }
            double res = (static_cast<double>(v) - 0.5) * p.contrast_gain + 0.5 +
                         p.intensity_shift;
            out.at(r, c) = static_cast<float>(std::clamp(res, 0.0, 1.0));
        }
    }
    return out;
}

Image augment(const Image& image, AugmentPolicy policy, Rng& rng,
              const AugmentRanges& ranges) {
    return augment_with_params(image, draw_augment_params(policy, rng, ranges));
}

nlohmann::json CorpusSpec::to_json() const {
    return {{"image_size", image_size},
            {"train_count", train_count},
            {"val_count", val_count},
            {"test_in_count", test_in_count},
            {"test_anom_count", test_anom_count},
            {"far_ood_count", far_ood_count},
            {"anom_noise_sigma", anom_noise_sigma},
            {"seed", seed}};
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
    CorpusSpec s;
    s.image_size = j.at("image_size");
    s.train_count = j.at("train_count");
    s.val_count = j.at("val_count");
    s.test_in_count = j.at("test_in_count");
    s.test_anom_count = j.at("test_anom_count");
    s.far_ood_count = j.at("far_ood_count");
    s.anom_noise_sigma = j.value("anom_noise_sigma", 0.0);
    s.seed = j.at("seed");
    return s;
}

namespace {

std::string image_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%05d.png", index);
    return buf;
}

} // namespace

void generate_corpus(const std::string& root, const CorpusSpec& spec, bool force) {
    CorpusPaths paths{root};
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!force) throw InputError("corpus output directory exists and is not empty: " + root);
        fs::remove_all(root);
    }
    if (!root.empty()) {
        const fs::path parent = fs::path(root).parent_path();
        if (!parent.empty() && !fs::exists(parent))
            throw InputError("parent directory does not exist: " + parent.string());
    }

    for (const auto& dir :
         {paths.train(), paths.val(), paths.test_in(), paths.test_anom_images(),
          paths.test_anom_masks(), paths.far_ood(PhantomFamily::FarOodGrid),
          paths.far_ood(PhantomFamily::FarOodRadial)})
        fs::create_directories(dir);

    // Disjoint seed ranges per split so splits never share a phantom.
    uint64_t next = spec.seed * 1000000ULL;
    auto emit_heads = [&](const std::string& dir, int count) {
        for (int i = 0; i < count; ++i) {
            const Phantom p = generate_phantom(PhantomFamily::Head, next++, spec.image_size);
            save_png_gray8(dir + "/" + image_name(i), p.image);
        }
    };
    emit_heads(paths.train(), spec.train_count);
    emit_heads(paths.val(), spec.val_count);
    emit_heads(paths.test_in(), spec.test_in_count);

    for (int i = 0; i < spec.test_anom_count; ++i) {
        const Phantom p = generate_phantom(PhantomFamily::Head, next, spec.image_size);
        const CorruptedSample sample = corrupt_randomly(p, spec.anom_noise_sigma, next);
        ++next;
        save_png_gray8(paths.test_anom_images() + "/" + image_name(i), sample.image);
        save_png_mask(paths.test_anom_masks() + "/" + image_name(i), sample.truth_mask);
    }

    for (const auto family : {PhantomFamily::FarOodGrid, PhantomFamily::FarOodRadial}) {
        for (int i = 0; i < spec.far_ood_count; ++i) {
            const Phantom p = generate_phantom(family, next++, spec.image_size);
            save_png_gray8(paths.far_ood(family) + "/" + image_name(i), p.image);
        }
    }

    nlohmann::json manifest{{"spec", spec.to_json()},
                            {"layout",
                             {{"train", "train"},
                              {"val", "val"},
                              {"test_in", "test_in"},
                              {"test_anom_images", "test_anom/images"},
                              {"test_anom_masks", "test_anom/masks"},
                              {"far_ood_grid", "far_ood_grid"},
                              {"far_ood_radial", "far_ood_radial"}}}};
    atomic_write_file(paths.manifest(), manifest.dump(2) + "\n");
}

std::vector<std::string> list_pngs(const std::string& dir) {
    if (!fs::exists(dir)) throw InputError("directory does not exist: " + dir);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            names.push_back(entry.path().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

std::vector<Image> load_image_dir(const std::string& dir) {
    std::vector<Image> images;
    for (const auto& path : list_pngs(dir)) images.push_back(load_png_gray(path));
    return images;
}

} // namespace latentad
