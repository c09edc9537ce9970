#pragma once

#include <optional>
#include <string>
#include <vector>

#include "latentad/ar_model.hpp"
#include "latentad/image.hpp"
#include "latentad/metrics.hpp"
#include "latentad/vqvae.hpp"

namespace latentad {

// Image-wise out-of-distribution score: mean over the ensemble of the summed
// token log-likelihoods. Higher = more normal. No healing involved.
struct AnomalyScore {
    double mean_log_likelihood = 0.0;
    std::vector<double> per_model;
};

AnomalyScore score_image(const Image& x, const std::vector<const ARModel*>& models,
                         const VqVae& vqvae);

// Batched scoring; `threads` parallelizes over images (models are read-only).
std::vector<AnomalyScore> score_images(const std::vector<Image>& images,
                                       const std::vector<const ARModel*>& models,
                                       const VqVae& vqvae, int threads = 1,
                                       int batch_size = 64);

struct ClassifyReport {
    DetectionMetrics metrics;
    std::optional<double> operating_point;
    std::vector<int> decisions; // only filled when an operating point is given
};

// Labels: 1 = in-distribution, 0 = OOD. The optional operating point turns
// scores into hard decisions (score >= threshold -> in-distribution).
ClassifyReport classify(const std::vector<AnomalyScore>& scores, const std::vector<int>& labels,
                        std::optional<double> operating_point = std::nullopt);

std::string scores_csv(const std::vector<std::string>& ids,
                       const std::vector<AnomalyScore>& scores);

} // namespace latentad
