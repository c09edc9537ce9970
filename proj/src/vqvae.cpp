#include "latentad/vqvae.hpp"

#include <algorithm>
#include <numeric>
#include <thread>

#include "latentad/checkpoint.hpp"

namespace latentad {

nlohmann::json VqVaeConfig::to_json() const {
    return {{"input_size", input_size},
            {"codebook_size", codebook_size},
            {"embed_dim", embed_dim},
            {"channels", channels},
            {"residual_blocks", residual_blocks},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"lr_gamma", lr_gamma},
            {"commitment_beta", commitment_beta},
            {"ema_eps", ema_eps},
            {"decay_start", decay_start},
            {"decay_end", decay_end},
            {"decay_warmup_epochs", decay_warmup_epochs},
            {"seed", seed},
            {"threads", threads}};
}

VqVaeConfig VqVaeConfig::from_json(const nlohmann::json& j) {
    VqVaeConfig cfg;
    cfg.input_size = j.at("input_size");
    cfg.codebook_size = j.at("codebook_size");
    cfg.embed_dim = j.at("embed_dim");
    cfg.channels = j.at("channels");
    cfg.residual_blocks = j.at("residual_blocks");
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lr_gamma = j.value("lr_gamma", cfg.lr_gamma);
    cfg.commitment_beta = j.value("commitment_beta", cfg.commitment_beta);
    cfg.ema_eps = j.value("ema_eps", cfg.ema_eps);
    cfg.decay_start = j.value("decay_start", cfg.decay_start);
    cfg.decay_end = j.value("decay_end", cfg.decay_end);
    cfg.decay_warmup_epochs = j.value("decay_warmup_epochs", cfg.decay_warmup_epochs);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.threads = j.value("threads", cfg.threads);
    return cfg;
}

double ema_decay_at_epoch(int epoch, const VqVaeConfig& cfg) {
    if (cfg.decay_warmup_epochs <= 0) return cfg.decay_end;
    const double t = std::min(1.0, std::max(0.0, static_cast<double>(epoch) /
                                                     static_cast<double>(cfg.decay_warmup_epochs)));
    return cfg.decay_start + (cfg.decay_end - cfg.decay_start) * t;
}

Codebook Codebook::init(int codebook_size, int embed_dim, Rng& rng) {
    if (codebook_size < 1) throw ConfigError("codebook size must be >= 1");
    Codebook cb;
    cb.vectors.resize(embed_dim, codebook_size);
    const double scale = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    for (int k = 0; k < codebook_size; ++k)
        for (int i = 0; i < embed_dim; ++i)
            cb.vectors(i, k) = static_cast<float>(rng.normal(0.0, scale));
    // Consistent EMA state: vectors == sums / counts from the start.
    cb.ema_sums = cb.vectors;
    cb.ema_counts = Eigen::VectorXf::Ones(codebook_size);
    return cb;
}

QuantizeResult quantize(const EncoderOutput& embeddings, const Codebook& codebook) {
    const int k_codes = codebook.size();
    if (k_codes < 1) throw ConfigError("quantize: empty codebook");
    const int n_z = codebook.dim();
    if (embeddings.embeddings.rows() != n_z)
        throw ConfigError("quantize: embedding dim does not match codebook");

    const auto cells = embeddings.embeddings.cols();
    QuantizeResult result;
    result.grid = LatentGrid(embeddings.height, embeddings.width);
    result.quantized.resize(n_z, cells);

    for (Eigen::Index j = 0; j < cells; ++j) {
        int best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (int k = 0; k < k_codes; ++k) {
            double dist = 0.0;
            for (int i = 0; i < n_z; ++i) {
                const double d = static_cast<double>(embeddings.embeddings(i, j)) -
                                 static_cast<double>(codebook.vectors(i, k));
                dist += d * d;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = k;
            }
        }
        result.grid.indices[static_cast<size_t>(j)] = best;
        result.quantized.col(j) = codebook.vectors.col(best);
    }
    return result;
}

namespace {

void ema_apply(Codebook& cb, const Eigen::VectorXf& batch_counts,
               const nn::MatX<float>& batch_sums, double decay) {
    const auto d = static_cast<float>(decay);
    cb.decay = decay;
    cb.ema_counts = d * cb.ema_counts + (1.0f - d) * batch_counts;
    cb.ema_sums = d * cb.ema_sums + (1.0f - d) * batch_sums;

    const double n_total = cb.ema_counts.sum();
    const double eps = cb.laplace_eps;
    const int k_codes = cb.size();
    for (int k = 0; k < k_codes; ++k) {
        const double count = cb.ema_counts(k);
        if (count <= 0.0) continue; // no mass ever assigned; keep the vector
        const double smoothed =
            (count + eps) / (n_total + k_codes * eps) * n_total;
        cb.vectors.col(k) = cb.ema_sums.col(k) / static_cast<float>(smoothed);
    }
}

} // namespace

void ema_codebook_update(Codebook& codebook, const nn::MatX<float>& batch_embeddings,
                         const std::vector<int>& assignments, double decay) {
    if (batch_embeddings.cols() != static_cast<Eigen::Index>(assignments.size()))
        throw InputError("ema_codebook_update: assignment count mismatch");
    Eigen::VectorXf counts = Eigen::VectorXf::Zero(codebook.size());
    nn::MatX<float> sums = nn::MatX<float>::Zero(codebook.dim(), codebook.size());
    for (Eigen::Index j = 0; j < batch_embeddings.cols(); ++j) {
        const int k = assignments[static_cast<size_t>(j)];
        if (k < 0 || k >= codebook.size())
            throw InputError("ema_codebook_update: assignment out of range");
        counts(k) += 1.0f;
        sums.col(k) += batch_embeddings.col(j);
    }
    ema_apply(codebook, counts, sums, decay);
}

VqVae VqVae::create(const VqVaeConfig& cfg) {
    if (cfg.input_size % 8 != 0 || cfg.input_size <= 0)
        throw ConfigError("vqvae input size must be a positive multiple of 8");
    if (cfg.codebook_size < 2) throw ConfigError("codebook size must be >= 2");
    VqVae model;
    model.config = cfg;
    model.net.build(cfg.input_size, cfg.channels, cfg.embed_dim, cfg.residual_blocks);
    Rng init_rng(derive_seed(cfg.seed, 1));
    model.net.init_weights(init_rng);
    Rng cb_rng(derive_seed(cfg.seed, 2));
    model.codebook = Codebook::init(cfg.codebook_size, cfg.embed_dim, cb_rng);
    return model;
}

EncoderOutput VqVae::encode(const Image& image) const {
    if (image.height != config.input_size || image.width != config.input_size)
        throw ConfigError("encode: image dimensions do not match the configured model");
    nn::MatX<float> x(1, image.size());
    for (size_t i = 0; i < image.pixels.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = image.pixels[i];
    detail::VqVaeNet<float>::Workspace ws;
    EncoderOutput out;
    out.height = config.latent_size();
    out.width = config.latent_size();
    out.embeddings = net.encode_forward(x, ws);
    return out;
}

Image VqVae::decode(const nn::MatX<float>& quantized) const {
    const int h = config.latent_size();
    if (quantized.rows() != config.embed_dim ||
        quantized.cols() != static_cast<Eigen::Index>(h) * h)
        throw ConfigError("decode: quantized latent dimensions do not match the model");
    detail::VqVaeNet<float>::Workspace ws;
    const auto recon = net.decode_forward(quantized, ws);
    Image img(config.input_size, config.input_size);
    for (size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = recon(0, static_cast<Eigen::Index>(i));
    return img;
}

LatentGrid VqVae::encode_to_grid(const Image& image) const {
    return quantize(encode(image), codebook).grid;
}

nn::MatX<float> VqVae::lookup(const LatentGrid& grid) const {
    nn::MatX<float> q(config.embed_dim, grid.indices.size());
    for (size_t i = 0; i < grid.indices.size(); ++i) {
        const int k = grid.indices[i];
        if (k < 0 || k >= codebook.size())
            throw InputError("lookup: latent index outside codebook");
        q.col(static_cast<Eigen::Index>(i)) = codebook.vectors.col(k);
    }
    return q;
}

Image VqVae::decode_grid(const LatentGrid& grid) const { return decode(lookup(grid)); }

Image VqVae::reconstruct(const Image& image) const {
    return decode(quantize(encode(image), codebook).quantized);
}

void VqVae::save(const std::string& path) const {
    CheckpointFile ckpt;
    ckpt.header["kind"] = "vqvae";
    ckpt.header["config"] = config.to_json();
    ckpt.header["codebook"] = {{"size", codebook.size()},
                               {"dim", codebook.dim()},
                               {"decay", codebook.decay},
                               {"laplace_eps", codebook.laplace_eps}};
    for (size_t i = 0; i < net.params.entry_count(); ++i) {
        const auto& e = net.params.entry(i);
        const float* base = net.params.values().data() + e.offset;
        ckpt.add_blob(e.name, std::vector<float>(base, base + e.rows * e.cols));
    }
    auto mat_blob = [](const nn::MatX<float>& m) {
        return std::vector<float>(m.data(), m.data() + m.size());
    };
    ckpt.add_blob("codebook.vectors", mat_blob(codebook.vectors));
    ckpt.add_blob("codebook.ema_sums", mat_blob(codebook.ema_sums));
    ckpt.add_blob("codebook.ema_counts",
                  std::vector<float>(codebook.ema_counts.data(),
                                     codebook.ema_counts.data() + codebook.ema_counts.size()));
    ckpt.save(path);
    const_cast<VqVae*>(this)->content_hash = file_content_hash(path);
}

VqVae VqVae::load(const std::string& path) {
    const CheckpointFile ckpt = CheckpointFile::load(path);
    if (ckpt.header.value("kind", "") != "vqvae")
        throw ConfigError("checkpoint is not a vqvae checkpoint: " + path);
    VqVae model = create(VqVaeConfig::from_json(ckpt.header.at("config")));
    for (size_t i = 0; i < model.net.params.entry_count(); ++i) {
        const auto& e = model.net.params.entry(i);
        const auto& blob = ckpt.blob(e.name);
        if (blob.size() != e.rows * e.cols)
            throw ConfigError("checkpoint blob size mismatch: " + e.name);
        std::copy(blob.begin(), blob.end(), model.net.params.values().begin() + e.offset);
    }
    const auto& cb_meta = ckpt.header.at("codebook");
    const int k_codes = cb_meta.at("size");
    const int n_z = cb_meta.at("dim");
    auto load_mat = [&](const std::string& name, nn::MatX<float>& m, int rows, int cols) {
        const auto& blob = ckpt.blob(name);
        if (blob.size() != static_cast<size_t>(rows) * cols)
            throw ConfigError("checkpoint blob size mismatch: " + name);
        m.resize(rows, cols);
        std::copy(blob.begin(), blob.end(), m.data());
    };
    load_mat("codebook.vectors", model.codebook.vectors, n_z, k_codes);
    load_mat("codebook.ema_sums", model.codebook.ema_sums, n_z, k_codes);
    const auto& counts = ckpt.blob("codebook.ema_counts");
    model.codebook.ema_counts =
        Eigen::Map<const Eigen::VectorXf>(counts.data(), static_cast<Eigen::Index>(counts.size()));
    model.codebook.decay = cb_meta.at("decay");
    model.codebook.laplace_eps = cb_meta.at("laplace_eps");
    model.content_hash = file_content_hash(path);
    return model;
}

namespace {

struct BatchStats {
    nn::AlignedVector<float> gradbuf;
    Eigen::VectorXf counts;
    nn::MatX<float> sums;
    double loss = 0.0;
};

} // namespace

VqVae train_vqvae(const std::vector<Image>& train_corpus, const std::vector<Image>& val_corpus,
                  const VqVaeConfig& cfg, const AugmentFn& augment, VqVaeTrainHistory* history) {
    if (train_corpus.empty()) throw InputError("train_vqvae: empty corpus");
    for (const auto& img : train_corpus)
        if (img.height != cfg.input_size || img.width != cfg.input_size)
            throw ConfigError("train_vqvae: corpus image size does not match config");

    VqVae model = VqVae::create(cfg);
    nn::Adam<float> opt;
    Rng shuffle_rng(derive_seed(cfg.seed, 3));
    const uint64_t aug_base = derive_seed(cfg.seed, 4);

    const int n_threads = std::max(1, cfg.threads);
    const size_t n = train_corpus.size();
    const int pixels = cfg.input_size * cfg.input_size;
    const int latent_cells = cfg.latent_size() * cfg.latent_size();

    // Forward + backward for one image; returns its loss and accumulates
    // gradients and codebook statistics into `stats`.
    auto process_image = [&](const Image& img, BatchStats& stats, bool train_mode) {
        nn::MatX<float> x(1, pixels);
        for (int i = 0; i < pixels; ++i) x(0, i) = img.pixels[static_cast<size_t>(i)];

        detail::VqVaeNet<float>::Workspace enc_ws, dec_ws;
        const auto emb = model.net.encode_forward(x, enc_ws);
        EncoderOutput enc_out{cfg.latent_size(), cfg.latent_size(), emb};
        auto qr = quantize(enc_out, model.codebook);
        const auto recon = model.net.decode_forward(qr.quantized, dec_ws);

        const double mse = (recon - x).squaredNorm() / static_cast<double>(pixels);
        const double commit =
            (emb - qr.quantized).squaredNorm() / static_cast<double>(emb.size());
        const double loss = mse + cfg.commitment_beta * commit;
        if (!train_mode) return loss;

        nn::MatX<float> drecon = 2.0f / static_cast<float>(pixels) * (recon - x);
        nn::MatX<float> dq = model.net.decode_backward(drecon, dec_ws, stats.gradbuf);
        // Straight-through estimator plus the commitment term.
        nn::MatX<float> demb =
            dq + static_cast<float>(2.0 * cfg.commitment_beta / static_cast<double>(emb.size())) *
                     (emb - qr.quantized);
        model.net.encode_backward(demb, enc_ws, stats.gradbuf);

        for (int j = 0; j < latent_cells; ++j) {
            const int k = qr.grid.indices[static_cast<size_t>(j)];
            stats.counts(k) += 1.0f;
            stats.sums.col(k) += emb.col(j);
        }
        return loss;
    };

    double best_val = std::numeric_limits<double>::infinity();
    nn::AlignedVector<float> best_params;
    Codebook best_codebook;
    int best_epoch = -1;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double decay = ema_decay_at_epoch(epoch, cfg);
        const double lr = cfg.lr * std::pow(cfg.lr_gamma, epoch);
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        size_t epoch_count = 0;

        for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(n, start + static_cast<size_t>(cfg.batch_size));
            const size_t batch_n = end - start;

            std::vector<BatchStats> stats(static_cast<size_t>(n_threads));
            for (auto& s : stats) {
                s.gradbuf.assign(model.net.params.size(), 0.0f);
                s.counts = Eigen::VectorXf::Zero(cfg.codebook_size);
                s.sums = nn::MatX<float>::Zero(cfg.embed_dim, cfg.codebook_size);
            }

            auto worker = [&](int t) {
                for (size_t i = start + static_cast<size_t>(t); i < end;
                     i += static_cast<size_t>(n_threads)) {
                    const size_t idx = order[i];
                    Image img = train_corpus[idx];
                    if (augment) {
                        Rng aug_rng(derive_seed(
                            aug_base, static_cast<uint64_t>(epoch) * n + idx));
                        img = augment(img, aug_rng);
                    }
                    stats[static_cast<size_t>(t)].loss +=
                        process_image(img, stats[static_cast<size_t>(t)], true);
                }
            };
            if (n_threads == 1) {
                worker(0);
            } else {
                std::vector<std::thread> pool;
                for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker, t);
                for (auto& th : pool) th.join();
            }

            // Fixed-order reduction keeps training bit-reproducible.
            model.net.params.zero_grad();
            Eigen::VectorXf counts = Eigen::VectorXf::Zero(cfg.codebook_size);
            nn::MatX<float> sums = nn::MatX<float>::Zero(cfg.embed_dim, cfg.codebook_size);
            for (const auto& s : stats) {
                auto& g = model.net.params.grads();
                for (size_t i = 0; i < g.size(); ++i) g[i] += s.gradbuf[i];
                counts += s.counts;
                sums += s.sums;
                epoch_loss += s.loss;
            }
            epoch_count += batch_n;
            const float scale = 1.0f / static_cast<float>(batch_n);
            for (auto& g : model.net.params.grads()) g *= scale;

            opt.step(model.net.params, static_cast<float>(lr));
            ema_apply(model.codebook, counts, sums, decay);
        }

        double val_loss = std::numeric_limits<double>::quiet_NaN();
        if (!val_corpus.empty()) {
            std::vector<double> losses(val_corpus.size(), 0.0);
            auto val_worker = [&](int t) {
                BatchStats dummy;
                for (size_t i = static_cast<size_t>(t); i < val_corpus.size();
                     i += static_cast<size_t>(n_threads))
                    losses[i] = process_image(val_corpus[i], dummy, false);
            };
            if (n_threads == 1) {
                val_worker(0);
            } else {
                std::vector<std::thread> pool;
                for (int t = 0; t < n_threads; ++t) pool.emplace_back(val_worker, t);
                for (auto& th : pool) th.join();
            }
            val_loss = std::accumulate(losses.begin(), losses.end(), 0.0) /
                       static_cast<double>(losses.size());
            if (val_loss < best_val) {
                best_val = val_loss;
                best_params = model.net.params.values();
                best_codebook = model.codebook;
                best_epoch = epoch;
            }
        }

        if (history) {
            history->train_loss.push_back(epoch_loss / static_cast<double>(epoch_count));
            history->val_loss.push_back(val_loss);
        }
    }

    if (best_epoch >= 0) {
        model.net.params.values() = best_params;
        model.codebook = best_codebook;
    }
    if (history) history->best_epoch = best_epoch;
    return model;
}

} // namespace latentad
