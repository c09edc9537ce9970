#include "latentad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "latentad/errors.hpp"

namespace latentad {

double dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth) {
    if (pred.size() != truth.size()) throw InputError("dice: shape mismatch");
    size_t inter = 0, np = 0, nt = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0;
        const bool t = truth[i] != 0;
        np += p;
        nt += t;
        inter += (p && t);
    }
    if (np + nt == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

DiceCeiling dice_ceiling(const ScoredPixelSet& scored, int grid_size) {
    const size_t n = scored.residuals.size();
    if (n == 0 || n != scored.truth.size())
        throw InputError("dice_ceiling: empty or mismatched pixel set");
    size_t total_truth = 0;
    for (uint8_t t : scored.truth) total_truth += (t != 0);
    if (total_truth == 0)
        throw MetricUndefinedError("dice_ceiling: no positive pixels in ground truth");
    if (grid_size < 1) throw ConfigError("dice_ceiling: grid_size must be >= 1");

    // Sort residuals ascending, carry truth along, build a suffix count of
    // true positives so DICE at any cut index is O(1).
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return scored.residuals[a] < scored.residuals[b];
    });
    std::vector<float> sorted_vals(n);
    std::vector<size_t> truth_suffix(n + 1, 0);
    for (size_t i = 0; i < n; ++i) sorted_vals[i] = scored.residuals[order[i]];
    for (size_t i = n; i-- > 0;)
        truth_suffix[i] = truth_suffix[i + 1] + (scored.truth[order[i]] != 0);

    auto dice_at = [&](double threshold) {
        // First index with value strictly greater than the threshold.
        const size_t idx = static_cast<size_t>(
            std::upper_bound(sorted_vals.begin(), sorted_vals.end(), threshold) -
            sorted_vals.begin());
        const size_t pred = n - idx;
        const size_t tp = truth_suffix[idx];
        return 2.0 * static_cast<double>(tp) / static_cast<double>(pred + total_truth);
    };

    std::vector<double> thresholds;
    thresholds.reserve(static_cast<size_t>(grid_size) + 1);
    thresholds.push_back(0.0);
    for (int j = 0; j < grid_size; ++j) {
        const size_t idx = grid_size == 1
                               ? 0
                               : static_cast<size_t>(static_cast<double>(j) *
                                                     static_cast<double>(n - 1) /
                                                     static_cast<double>(grid_size - 1));
        thresholds.push_back(sorted_vals[idx]);
    }

    DiceCeiling best;
    best.best_dice = -1.0;
    for (double t : thresholds) {
        const double d = dice_at(t);
        if (d > best.best_dice) {
            best.best_dice = d;
            best.best_threshold = t;
        }
    }
    return best;
}

namespace {

struct ClassCounts {
    size_t positives = 0;
    size_t negatives = 0;
};

ClassCounts check_two_classes(const std::vector<double>& scores, const std::vector<int>& labels,
                              const char* what) {
    if (scores.size() != labels.size() || scores.empty())
        throw InputError(std::string(what) + ": empty or mismatched inputs");
    ClassCounts c;
    for (int l : labels) (l != 0 ? c.positives : c.negatives)++;
    if (c.positives == 0 || c.negatives == 0)
        throw MetricUndefinedError(std::string(what) + ": needs both classes present");
    return c;
}

// Indices sorted by descending score.
std::vector<size_t> descending_order(const std::vector<double>& scores) {
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    return order;
}

} // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    const auto counts = check_two_classes(scores, labels, "auroc");
    // Rank-sum with average ranks for ties.
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    size_t i = 0;
    const size_t n = scores.size();
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]] != 0) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - static_cast<double>(counts.positives) *
                                        (static_cast<double>(counts.positives) + 1.0) / 2.0;
    return u / (static_cast<double>(counts.positives) * static_cast<double>(counts.negatives));
}

double aucpr(const std::vector<double>& scores, const std::vector<int>& labels) {
    const auto counts = check_two_classes(scores, labels, "aucpr");
    const auto order = descending_order(scores);
    const size_t n = scores.size();

    // One PR point per distinct threshold (ties grouped).
    std::vector<double> recall, precision;
    size_t tp = 0, taken = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (size_t k = i; k <= j; ++k) {
            ++taken;
            tp += (labels[order[k]] != 0);
        }
        recall.push_back(static_cast<double>(tp) / static_cast<double>(counts.positives));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(taken));
        i = j + 1;
    }

    // Precision envelope: running max from high recall back to low.
    std::vector<double> envelope(precision);
    for (size_t k = envelope.size(); k-- > 1;)
        envelope[k - 1] = std::max(envelope[k - 1], envelope[k]);

    double area = 0.0;
    double prev_recall = 0.0;
    for (size_t k = 0; k < recall.size(); ++k) {
        area += (recall[k] - prev_recall) * envelope[k];
        prev_recall = recall[k];
    }
    return area;
}

double fpr_at_tpr(const std::vector<double>& scores, const std::vector<int>& labels,
                  double tpr_target) {
    const auto counts = check_two_classes(scores, labels, "fpr_at_tpr");
    if (tpr_target <= 0.0 || tpr_target > 1.0)
        throw ConfigError("fpr_at_tpr: target must be in (0,1]");
    const auto order = descending_order(scores);
    const size_t n = scores.size();

    // Classification rule: score >= threshold is predicted positive. Sweep
    // thresholds at distinct score values from high to low and stop at the
    // first (largest) threshold reaching the target TPR.
    size_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (size_t k = i; k <= j; ++k) {
            if (labels[order[k]] != 0)
                ++tp;
            else
                ++fp;
        }
        const double tpr = static_cast<double>(tp) / static_cast<double>(counts.positives);
        if (tpr >= tpr_target)
            return static_cast<double>(fp) / static_cast<double>(counts.negatives);
        i = j + 1;
    }
    return 1.0;
}

std::vector<CurvePoint> roc_points(const std::vector<double>& scores,
                                   const std::vector<int>& labels) {
    const auto counts = check_two_classes(scores, labels, "roc_points");
    const auto order = descending_order(scores);
    const size_t n = scores.size();
    std::vector<CurvePoint> points;
    points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    size_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (size_t k = i; k <= j; ++k) {
            if (labels[order[k]] != 0)
                ++tp;
            else
                ++fp;
        }
        points.push_back({static_cast<double>(fp) / static_cast<double>(counts.negatives),
                          static_cast<double>(tp) / static_cast<double>(counts.positives),
                          scores[order[i]]});
        i = j + 1;
    }
    return points;
}

std::vector<CurvePoint> pr_points(const std::vector<double>& scores,
                                  const std::vector<int>& labels) {
    const auto counts = check_two_classes(scores, labels, "pr_points");
    const auto order = descending_order(scores);
    const size_t n = scores.size();
    std::vector<CurvePoint> points;
    size_t tp = 0, taken = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (size_t k = i; k <= j; ++k) {
            ++taken;
            tp += (labels[order[k]] != 0);
        }
        points.push_back({static_cast<double>(tp) / static_cast<double>(counts.positives),
                          static_cast<double>(tp) / static_cast<double>(taken),
                          scores[order[i]]});
        i = j + 1;
    }
    return points;
}

std::string curve_csv(const std::vector<CurvePoint>& points, const std::string& x_name,
                      const std::string& y_name) {
    std::string out = x_name + "," + y_name + ",threshold\n";
    char buf[128];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", p.x, p.y, p.threshold);
        out += buf;
    }
    return out;
}

DetectionMetrics detection_metrics(const std::vector<double>& scores,
                                   const std::vector<int>& labels) {
    DetectionMetrics m;
    m.auroc = auroc(scores, labels);
    m.aucpr_in = aucpr(scores, labels);
    // "Out" orientation: anomalies are the positive class and low scores rank
    // as more anomalous, so flip both labels and score signs.
    std::vector<double> neg_scores(scores.size());
    std::vector<int> out_labels(labels.size());
    for (size_t i = 0; i < scores.size(); ++i) {
        neg_scores[i] = -scores[i];
        out_labels[i] = labels[i] != 0 ? 0 : 1;
    }
    m.aucpr_out = aucpr(neg_scores, out_labels);
    m.fpr95 = fpr_at_tpr(scores, labels, 0.95);
    m.fpr99 = fpr_at_tpr(scores, labels, 0.99);
    m.fpr999 = fpr_at_tpr(scores, labels, 0.999);
    return m;
}

nlohmann::json to_json(const DetectionMetrics& m) {
    return nlohmann::json{{"auroc", m.auroc},   {"aucpr_in", m.aucpr_in},
                          {"aucpr_out", m.aucpr_out}, {"fpr95", m.fpr95},
                          {"fpr99", m.fpr99},   {"fpr999", m.fpr999}};
}

} // namespace latentad
