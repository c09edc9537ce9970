#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "latentad/errors.hpp"
#include "latentad/metrics.hpp"
#include "latentad/rng.hpp"

using namespace latentad;

namespace {

// ---- Brute-force oracles, kept independent of the implementation path ----

double oracle_dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth) {
    size_t inter = 0, np = 0, nt = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i]) ++np;
        if (truth[i]) ++nt;
        if (pred[i] && truth[i]) ++inter;
    }
    if (np + nt == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

// Exhaustive threshold search over every unique residual value plus zero.
DiceCeiling oracle_dice_ceiling(const ScoredPixelSet& s) {
    std::set<double> thresholds{0.0};
    for (float v : s.residuals) thresholds.insert(v);
    DiceCeiling best{-1.0, 0.0};
    for (double t : thresholds) {
        std::vector<uint8_t> pred(s.residuals.size());
        for (size_t i = 0; i < s.residuals.size(); ++i) pred[i] = s.residuals[i] > t ? 1 : 0;
        const double d = oracle_dice(pred, s.truth);
        if (d > best.best_dice) best = {d, t};
    }
    return best;
}

// O(n^2) pairwise comparisons with half credit for ties.
double oracle_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

// Naive threshold sweep; precision envelope integrated stepwise.
double oracle_aucpr(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::set<double, std::greater<>> thresholds(scores.begin(), scores.end());
    size_t total_pos = 0;
    for (int l : labels) total_pos += (l != 0);
    std::vector<double> recall, precision;
    for (double t : thresholds) {
        size_t tp = 0, taken = 0;
        for (size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] >= t) {
                ++taken;
                tp += (labels[i] != 0);
            }
        }
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_pos));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(taken));
    }
    for (size_t k = precision.size(); k-- > 1;)
        precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double area = 0.0, prev = 0.0;
    for (size_t k = 0; k < recall.size(); ++k) {
        area += (recall[k] - prev) * precision[k];
        prev = recall[k];
    }
    return area;
}

double oracle_fpr_at_tpr(const std::vector<double>& scores, const std::vector<int>& labels,
                         double target) {
    std::set<double, std::greater<>> thresholds(scores.begin(), scores.end());
    size_t total_pos = 0, total_neg = 0;
    for (int l : labels) (l != 0 ? total_pos : total_neg)++;
    for (double t : thresholds) {
        size_t tp = 0, fp = 0;
        for (size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] >= t) {
                if (labels[i])
                    ++tp;
                else
                    ++fp;
            }
        }
        if (static_cast<double>(tp) / static_cast<double>(total_pos) >= target)
            return static_cast<double>(fp) / static_cast<double>(total_neg);
    }
    return 1.0;
}

struct Instance {
    std::vector<double> scores;
    std::vector<int> labels;
};

Instance random_instance(Rng& rng, bool with_ties) {
    const int n = static_cast<int>(rng.uniform_int(4, 50));
    Instance inst;
    for (int i = 0; i < n; ++i) {
        inst.scores.push_back(with_ties ? static_cast<double>(rng.uniform_int(0, 6)) / 3.0
                                        : rng.normal());
        inst.labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
    // Force both classes.
    inst.labels[0] = 1;
    inst.labels[1] = 0;
    return inst;
}

} // namespace

TEST_CASE("dice identities") {
    std::vector<uint8_t> a{1, 1, 0, 0}, b{1, 1, 0, 0}, c{0, 0, 1, 1};
    CHECK(dice(a, b) == doctest::Approx(1.0));
    CHECK(dice(a, c) == doctest::Approx(0.0));
    std::vector<uint8_t> empty1(4, 0), empty2(4, 0);
    CHECK(dice(empty1, empty2) == doctest::Approx(1.0));
    CHECK_THROWS_AS(dice(a, std::vector<uint8_t>{1, 0}), InputError);
}

TEST_CASE("dice arithmetic: half of a 4-pixel truth plus 2 extra pixels") {
    std::vector<uint8_t> truth(10, 0), pred(10, 0);
    for (int i = 0; i < 4; ++i) truth[static_cast<size_t>(i)] = 1;
    pred[0] = pred[1] = 1; // half the truth
    pred[6] = pred[7] = 1; // two extra
    CHECK(dice(pred, truth) == doctest::Approx(0.5));
}

TEST_CASE("dice_ceiling: residuals equal to truth give 1.0") {
    ScoredPixelSet s;
    for (int i = 0; i < 40; ++i) {
        s.truth.push_back(i % 5 == 0);
        s.residuals.push_back(s.truth.back() ? 1.0f : 0.0f);
    }
    const auto c = dice_ceiling(s);
    CHECK(c.best_dice == doctest::Approx(1.0));
}

TEST_CASE("dice_ceiling: independent residuals approach 2p/(1+p)") {
    Rng rng(77);
    const double p = 0.1;
    ScoredPixelSet s;
    for (int i = 0; i < 50000; ++i) {
        s.truth.push_back(rng.bernoulli(p) ? 1 : 0);
        s.residuals.push_back(static_cast<float>(rng.uniform()));
    }
    const double expected = 2.0 * p / (1.0 + p);
    const auto c = dice_ceiling(s);
    CHECK(c.best_dice == doctest::Approx(expected).epsilon(0.05 / expected));
}

TEST_CASE("dice_ceiling matches the exhaustive oracle on a 10-pixel hand case") {
    ScoredPixelSet s;
    s.residuals = {0.1f, 0.9f, 0.4f, 0.4f, 0.2f, 0.8f, 0.05f, 0.6f, 0.3f, 0.7f};
    s.truth = {0, 1, 0, 1, 0, 1, 0, 1, 0, 0};
    const auto fast = dice_ceiling(s);
    const auto slow = oracle_dice_ceiling(s);
    CHECK(fast.best_dice == doctest::Approx(slow.best_dice));
}

TEST_CASE("dice_ceiling refinement is monotone in the threshold grid") {
    Rng rng(3);
    ScoredPixelSet s;
    for (int i = 0; i < 2000; ++i) {
        s.truth.push_back(rng.bernoulli(0.2) ? 1 : 0);
        s.residuals.push_back(static_cast<float>(rng.uniform() + 0.3 * s.truth.back()));
    }
    const auto coarse = dice_ceiling(s, 200);
    const auto fine = dice_ceiling(s, static_cast<int>(s.residuals.size()));
    const auto exhaustive = oracle_dice_ceiling(s);
    CHECK(fine.best_dice >= coarse.best_dice - 1e-12);
    CHECK(exhaustive.best_dice >= fine.best_dice - 1e-12);
    // The 200-point grid is adequate: within 0.005 of exhaustive.
    CHECK(exhaustive.best_dice - coarse.best_dice < 0.005);

    std::vector<uint8_t> pred(s.residuals.size());
    for (size_t i = 0; i < pred.size(); ++i) pred[i] = s.residuals[i] > 0.5f;
    CHECK(coarse.best_dice >= dice(pred, s.truth) - 1e-9);
}

TEST_CASE("dice_ceiling requires positive truth pixels") {
    ScoredPixelSet s;
    s.residuals = {0.1f, 0.2f};
    s.truth = {0, 0};
    CHECK_THROWS_AS(dice_ceiling(s), MetricUndefinedError);
}

TEST_CASE("auroc identities") {
    CHECK(auroc({3, 2, 1, 0}, {1, 1, 0, 0}) == doctest::Approx(1.0));
    CHECK(auroc({1, 1, 1, 1}, {1, 0, 1, 0}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(auroc({1, 2}, {1, 1}), MetricUndefinedError);
}

TEST_CASE("auroc matches the pairwise oracle on an 8-item case with a tie") {
    const std::vector<double> scores{0.9, 0.8, 0.8, 0.6, 0.5, 0.4, 0.3, 0.1};
    const std::vector<int> labels{1, 1, 0, 1, 0, 1, 0, 0};
    CHECK(auroc(scores, labels) == doctest::Approx(oracle_auroc(scores, labels)));
}

TEST_CASE("aucpr identities") {
    CHECK(aucpr({4, 3, 2, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
    // Constant scores: one PR point at recall 1 with precision = prevalence.
    CHECK(aucpr({1, 1, 1, 1}, {1, 0, 0, 0}) == doctest::Approx(0.25));
    CHECK_THROWS_AS(aucpr({1, 2}, {0, 0}), MetricUndefinedError);
}

TEST_CASE("fpr_at_tpr identities") {
    for (double target : {0.95, 0.99, 0.999}) {
        CHECK(fpr_at_tpr({4, 3, 2, 1}, {1, 1, 0, 0}, target) == doctest::Approx(0.0));
        CHECK(fpr_at_tpr({1, 1, 1, 1}, {1, 1, 0, 0}, target) == doctest::Approx(1.0));
    }
    const std::vector<double> scores{9, 8, 7, 6.5, 6, 5, 4, 3, 2, 1};
    const std::vector<int> labels{1, 1, 0, 1, 1, 0, 1, 0, 0, 0};
    for (double target : {0.6, 0.95, 0.99}) {
        CHECK(fpr_at_tpr(scores, labels, target) ==
              doctest::Approx(oracle_fpr_at_tpr(scores, labels, target)));
    }
}

TEST_CASE("all metrics match brute-force oracles on 200 random instances") {
    Rng rng(2024);
    for (int rep = 0; rep < 200; ++rep) {
        const auto inst = random_instance(rng, rep % 2 == 0);
        CHECK(auroc(inst.scores, inst.labels) ==
              doctest::Approx(oracle_auroc(inst.scores, inst.labels)).epsilon(1e-12));
        CHECK(aucpr(inst.scores, inst.labels) ==
              doctest::Approx(oracle_aucpr(inst.scores, inst.labels)).epsilon(1e-12));
        for (double target : {0.95, 0.99, 0.999})
            CHECK(fpr_at_tpr(inst.scores, inst.labels, target) ==
                  doctest::Approx(oracle_fpr_at_tpr(inst.scores, inst.labels, target)));

        ScoredPixelSet s;
        for (size_t i = 0; i < inst.scores.size(); ++i) {
            s.residuals.push_back(static_cast<float>(std::abs(inst.scores[i])));
            s.truth.push_back(static_cast<uint8_t>(inst.labels[i]));
        }
        CHECK(dice_ceiling(s, 200).best_dice ==
              doctest::Approx(oracle_dice_ceiling(s).best_dice));
    }
}

TEST_CASE("rank metrics are invariant under strictly increasing transforms") {
    Rng rng(55);
    const auto inst = random_instance(rng, false);
    std::vector<double> transformed(inst.scores.size());
    for (size_t i = 0; i < inst.scores.size(); ++i) transformed[i] = std::exp(inst.scores[i]);
    CHECK(auroc(inst.scores, inst.labels) == doctest::Approx(auroc(transformed, inst.labels)));
    CHECK(aucpr(inst.scores, inst.labels) == doctest::Approx(aucpr(transformed, inst.labels)));
    for (double target : {0.95, 0.99, 0.999})
        CHECK(fpr_at_tpr(inst.scores, inst.labels, target) ==
              doctest::Approx(fpr_at_tpr(transformed, inst.labels, target)));
}

TEST_CASE("auroc complement identity for tie-free scores") {
    Rng rng(88);
    auto inst = random_instance(rng, false);
    std::vector<double> negated(inst.scores.size());
    for (size_t i = 0; i < inst.scores.size(); ++i) negated[i] = -inst.scores[i];
    CHECK(auroc(inst.scores, inst.labels) + auroc(negated, inst.labels) == doctest::Approx(1.0));
}

TEST_CASE("detection_metrics bundles both aucpr orientations") {
    const std::vector<double> scores{5, 4, 3, 2, 1, 0};
    const std::vector<int> labels{1, 1, 1, 0, 0, 0};
    const auto m = detection_metrics(scores, labels);
    CHECK(m.auroc == doctest::Approx(1.0));
    CHECK(m.aucpr_in == doctest::Approx(1.0));
    CHECK(m.aucpr_out == doctest::Approx(1.0));
    CHECK(m.fpr95 == doctest::Approx(0.0));
    CHECK(m.fpr999 == doctest::Approx(0.0));
}
