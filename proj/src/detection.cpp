#include "latentad/detection.hpp"

#include <cstdio>
#include <thread>

namespace latentad {

namespace {

void check_geometry(const std::vector<const ARModel*>& models, const VqVae& vqvae) {
    if (models.empty()) throw InputError("detection: needs at least one model");
    const int latent = vqvae.config.latent_size();
    for (const ARModel* m : models)
        if (m->ordering.height != latent || m->ordering.width != latent)
            throw ConfigError("detection: model ordering does not match the VQ-VAE latent grid");
}

} // namespace

AnomalyScore score_image(const Image& x, const std::vector<const ARModel*>& models,
                         const VqVae& vqvae) {
    check_geometry(models, vqvae);
    const LatentGrid grid = vqvae.encode_to_grid(x);
    AnomalyScore score;
    score.per_model.reserve(models.size());
    double total = 0.0;
    for (const ARModel* model : models) {
        const double ll = model->log_likelihood(to_sequence(grid, model->ordering));
        score.per_model.push_back(ll);
        total += ll;
    }
    score.mean_log_likelihood = total / static_cast<double>(models.size());
    return score;
}

std::vector<AnomalyScore> score_images(const std::vector<Image>& images,
                                       const std::vector<const ARModel*>& models,
                                       const VqVae& vqvae, int threads, int batch_size) {
    check_geometry(models, vqvae);
    const size_t n = images.size();
    std::vector<LatentGrid> grids(n);

    const int n_threads = std::max(1, threads);
    auto encode_worker = [&](int t) {
        for (size_t i = static_cast<size_t>(t); i < n; i += static_cast<size_t>(n_threads))
            grids[i] = vqvae.encode_to_grid(images[i]);
    };
    if (n_threads == 1) {
        encode_worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(encode_worker, t);
        for (auto& th : pool) th.join();
    }

    std::vector<AnomalyScore> scores(n);
    for (auto& s : scores) s.per_model.resize(models.size());

    for (size_t mi = 0; mi < models.size(); ++mi) {
        const ARModel* model = models[mi];
        auto model_worker = [&](size_t chunk_start, size_t chunk_end) {
            for (size_t start = chunk_start; start < chunk_end;
                 start += static_cast<size_t>(batch_size)) {
                const size_t end = std::min(chunk_end, start + static_cast<size_t>(batch_size));
                std::vector<TokenSequence> seqs;
                seqs.reserve(end - start);
                for (size_t i = start; i < end; ++i)
                    seqs.push_back(to_sequence(grids[i], model->ordering));
                const auto liks = model->sequence_likelihood_batch(seqs);
                for (size_t i = start; i < end; ++i)
                    scores[i].per_model[mi] = liks[i - start].log_sum();
            }
        };
        if (n_threads == 1 || n < 2 * static_cast<size_t>(batch_size)) {
            model_worker(0, n);
        } else {
            // Contiguous per-thread shards; each image's score slot is owned
            // by exactly one thread.
            std::vector<std::thread> pool;
            const size_t shard = (n + static_cast<size_t>(n_threads) - 1) /
                                 static_cast<size_t>(n_threads);
            for (int t = 0; t < n_threads; ++t) {
                const size_t s = std::min(n, static_cast<size_t>(t) * shard);
                const size_t e = std::min(n, s + shard);
                if (s < e) pool.emplace_back(model_worker, s, e);
            }
            for (auto& th : pool) th.join();
        }
    }

    for (auto& s : scores) {
        double total = 0.0;
        for (double v : s.per_model) total += v;
        s.mean_log_likelihood = total / static_cast<double>(s.per_model.size());
    }
    return scores;
}

ClassifyReport classify(const std::vector<AnomalyScore>& scores, const std::vector<int>& labels,
                        std::optional<double> operating_point) {
    if (scores.size() != labels.size() || scores.empty())
        throw InputError("classify: empty or mismatched scores/labels");
    std::vector<double> values(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) values[i] = scores[i].mean_log_likelihood;

    ClassifyReport report;
    report.metrics = detection_metrics(values, labels);
    report.operating_point = operating_point;
    if (operating_point) {
        report.decisions.resize(scores.size());
        for (size_t i = 0; i < scores.size(); ++i)
            report.decisions[i] = values[i] >= *operating_point ? 1 : 0;
    }
    return report;
}

std::string scores_csv(const std::vector<std::string>& ids,
                       const std::vector<AnomalyScore>& scores) {
    if (ids.size() != scores.size()) throw InputError("scores_csv: id/score count mismatch");
    std::string out = "image_id";
    if (!scores.empty())
        for (size_t m = 0; m < scores.front().per_model.size(); ++m)
            out += ",log_likelihood_model_" + std::to_string(m);
    out += ",mean_log_likelihood\n";
    char buf[64];
    for (size_t i = 0; i < scores.size(); ++i) {
        out += ids[i];
        for (double v : scores[i].per_model) {
            std::snprintf(buf, sizeof(buf), ",%.9g", v);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), ",%.9g\n", scores[i].mean_log_likelihood);
        out += buf;
    }
    return out;
}

} // namespace latentad
