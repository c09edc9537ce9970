#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "latentad/detection.hpp"
#include "latentad/synthdata.hpp"

using namespace latentad;

namespace {

struct Fixture {
    VqVae vqvae;
    ARModel model_a;
    ARModel model_b;

    Fixture()
        : vqvae(VqVae::create(make_vq_config())),
          model_a(make_model(0, vqvae)),
          model_b(make_model(1, vqvae)) {}

    static VqVaeConfig make_vq_config() {
        VqVaeConfig cfg;
        cfg.input_size = 16;
        cfg.codebook_size = 4;
        cfg.embed_dim = 8;
        cfg.channels = 8;
        cfg.residual_blocks = 1;
        cfg.seed = 6;
        return cfg;
    }

    static ARModel make_model(int symmetry, const VqVae& vq) {
        ARModelConfig cfg;
        cfg.layers = 1;
        cfg.embed_dim = 16;
        cfg.heads = 2;
        cfg.vocab = 5;
        cfg.max_len = 5;
        cfg.dropout = 0.0;
        cfg.feature_count = 16;
        cfg.mlp_hidden = 32;
        cfg.seed = 300 + static_cast<uint64_t>(symmetry);
        ARModel m = ARModel::create(
            cfg, make_ordering(OrderingClass::Raster, symmetry, 2, 2), vq.content_hash);
        Rng rng(400 + static_cast<uint64_t>(symmetry));
        nn::fill_normal<float>(m.core.params.param(m.core.head_w), rng, 0.5);
        return m;
    }

    Image test_image(uint64_t seed) const {
        Rng rng(seed);
        Image x(16, 16);
        for (auto& p : x.pixels) p = static_cast<float>(rng.uniform());
        return x;
    }
};

} // namespace

TEST_CASE("score is the mean of per-model summed log-likelihoods") {
    Fixture f;
    const Image x = f.test_image(1);
    const auto score = score_image(x, {&f.model_a, &f.model_b}, f.vqvae);
    REQUIRE(score.per_model.size() == 2);

    const LatentGrid grid = f.vqvae.encode_to_grid(x);
    const double ll_a = f.model_a.log_likelihood(to_sequence(grid, f.model_a.ordering));
    const double ll_b = f.model_b.log_likelihood(to_sequence(grid, f.model_b.ordering));
    CHECK(score.per_model[0] == doctest::Approx(ll_a));
    CHECK(score.per_model[1] == doctest::Approx(ll_b));
    CHECK(score.mean_log_likelihood == doctest::Approx(0.5 * (ll_a + ll_b)));
    CHECK(score.per_model[0] <= 0.0);
    CHECK(score.per_model[1] <= 0.0);
}

TEST_CASE("duplicated model leaves the mean unchanged") {
    Fixture f;
    const Image x = f.test_image(2);
    const auto single = score_image(x, {&f.model_a}, f.vqvae);
    const auto doubled = score_image(x, {&f.model_a, &f.model_a}, f.vqvae);
    CHECK(doubled.mean_log_likelihood == doctest::Approx(single.mean_log_likelihood));
}

TEST_CASE("score is invariant to ensemble evaluation order and bit-stable") {
    Fixture f;
    const Image x = f.test_image(3);
    const auto ab = score_image(x, {&f.model_a, &f.model_b}, f.vqvae);
    const auto ba = score_image(x, {&f.model_b, &f.model_a}, f.vqvae);
    CHECK(ab.mean_log_likelihood == ba.mean_log_likelihood);

    const auto again = score_image(x, {&f.model_a, &f.model_b}, f.vqvae);
    CHECK(ab.mean_log_likelihood == again.mean_log_likelihood); // bit-identical
}

TEST_CASE("batched scoring matches per-image scoring") {
    Fixture f;
    std::vector<Image> images;
    for (uint64_t s = 0; s < 7; ++s) images.push_back(f.test_image(10 + s));
    const auto batched = score_images(images, {&f.model_a, &f.model_b}, f.vqvae, 2, 3);
    REQUIRE(batched.size() == images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        const auto single = score_image(images[i], {&f.model_a, &f.model_b}, f.vqvae);
        CHECK(batched[i].mean_log_likelihood ==
              doctest::Approx(single.mean_log_likelihood).epsilon(1e-9));
    }
}

TEST_CASE("geometry and empty-ensemble errors") {
    Fixture f;
    const Image x = f.test_image(4);
    CHECK_THROWS_AS(score_image(x, {}, f.vqvae), InputError);

    ARModelConfig cfg;
    cfg.layers = 1;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.vocab = 5;
    cfg.max_len = 10; // 3x3 ordering: wrong geometry for 2x2 latents
    cfg.dropout = 0.0;
    cfg.feature_count = 8;
    const ARModel wrong =
        ARModel::create(cfg, make_ordering(OrderingClass::Raster, 0, 3, 3), 0);
    CHECK_THROWS_AS(score_image(x, {&wrong}, f.vqvae), ConfigError);
}

TEST_CASE("classify reports threshold-independent metrics and hard decisions") {
    std::vector<AnomalyScore> scores;
    for (double v : {-1.0, -2.0, -3.0, -10.0, -11.0, -12.0})
        scores.push_back({v, {v}});
    const std::vector<int> labels{1, 1, 1, 0, 0, 0};

    const auto report = classify(scores, labels, -5.0);
    CHECK(report.metrics.auroc == doctest::Approx(1.0));
    CHECK(report.metrics.fpr95 == doctest::Approx(0.0));
    CHECK(report.decisions == std::vector<int>{1, 1, 1, 0, 0, 0});

    // Identical scores: chance level.
    std::vector<AnomalyScore> flat(6, AnomalyScore{-2.0, {-2.0}});
    const auto chance = classify(flat, labels);
    CHECK(chance.metrics.auroc == doctest::Approx(0.5));

    // Single-class labels are undefined.
    CHECK_THROWS_AS(classify(scores, std::vector<int>{1, 1, 1, 1, 1, 1}),
                    MetricUndefinedError);
}

TEST_CASE("adding a constant per-step log-probability shifts scores, not ranks") {
    std::vector<AnomalyScore> scores;
    for (double v : {-1.0, -4.0, -2.5, -9.0, -7.0, -12.0})
        scores.push_back({v, {v}});
    const std::vector<int> labels{1, 1, 1, 0, 0, 0};
    const double before = classify(scores, labels).metrics.auroc;

    const double shift = 16 * 0.37; // L * constant
    for (auto& s : scores) s.mean_log_likelihood += shift;
    const double after = classify(scores, labels).metrics.auroc;
    CHECK(before == doctest::Approx(after));
}

TEST_CASE("scores export as CSV with per-model columns") {
    std::vector<AnomalyScore> scores{{-2.0, {-1.0, -3.0}}, {-5.0, {-4.0, -6.0}}};
    const auto csv = scores_csv({"a.png", "b.png"}, scores);
    CHECK(csv.find("image_id,log_likelihood_model_0,log_likelihood_model_1,mean_log_likelihood") !=
          std::string::npos);
    CHECK(csv.find("a.png,-1,-3,-2") != std::string::npos);
    CHECK(csv.find("b.png,-4,-6,-5") != std::string::npos);
}
