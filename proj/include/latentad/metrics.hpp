#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace latentad {

// Binary-mask DICE; 1.0 when both masks are empty.
double dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth);

// Residual scores pooled over a test set with parallel ground truth.
struct ScoredPixelSet {
    std::vector<float> residuals;
    std::vector<uint8_t> truth;
};

struct DiceCeiling {
    double best_dice = 0.0;
    double best_threshold = 0.0;
};

// Best achievable DICE over a single global threshold, searched on a grid of
// `grid_size` evenly spaced quantiles of the pooled residual distribution
// plus the exact value 0. Thresholding is strict (residual > t).
DiceCeiling dice_ceiling(const ScoredPixelSet& scored, int grid_size = 200);

// Labels are 1 for the positive class, 0 otherwise; higher score ranks as
// more positive. Ties get half credit (Mann-Whitney U normalization).
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Area under the precision-recall curve via the step-wise precision envelope.
double aucpr(const std::vector<double>& scores, const std::vector<int>& labels);

// FPR on negatives at the largest threshold whose TPR on positives is >= target.
double fpr_at_tpr(const std::vector<double>& scores, const std::vector<int>& labels,
                  double tpr_target);

struct CurvePoint {
    double x = 0.0;
    double y = 0.0;
    double threshold = 0.0;
};

// ROC (x=FPR, y=TPR) and PR (x=recall, y=precision) points for plotting/CSV.
std::vector<CurvePoint> roc_points(const std::vector<double>& scores,
                                   const std::vector<int>& labels);
std::vector<CurvePoint> pr_points(const std::vector<double>& scores,
                                  const std::vector<int>& labels);

std::string curve_csv(const std::vector<CurvePoint>& points, const std::string& x_name,
                      const std::string& y_name);

// The detection report bundle: AUROC, both AUCPR orientations, FPR at fixed
// TPR levels. `positive` scores are in-distribution; anomalies are negatives.
struct DetectionMetrics {
    double auroc = 0.0;
    double aucpr_in = 0.0;
    double aucpr_out = 0.0;
    double fpr95 = 0.0;
    double fpr99 = 0.0;
    double fpr999 = 0.0;
};

DetectionMetrics detection_metrics(const std::vector<double>& scores,
                                   const std::vector<int>& labels);

nlohmann::json to_json(const DetectionMetrics& m);

} // namespace latentad
