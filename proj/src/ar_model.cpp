#include "latentad/ar_model.hpp"

#include <algorithm>
#include <numeric>

#include "latentad/checkpoint.hpp"
#include "latentad/hash.hpp"

namespace latentad {

void ARModelConfig::validate() const {
    if (layers < 1) throw ConfigError("transformer needs at least one layer");
    if (embed_dim < 1 || embed_dim % heads != 0)
        throw ConfigError("embed_dim must be a positive multiple of heads");
    if (vocab < 3) throw ConfigError("vocabulary must be >= 3 (codes plus start token)");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    if (feature_count < 1) throw ConfigError("feature_count must be >= 1");
    if (max_len < 2) throw ConfigError("max_len must be >= 2");
}

nlohmann::json ARModelConfig::to_json() const {
    return {{"layers", layers},
            {"embed_dim", embed_dim},
            {"heads", heads},
            {"vocab", vocab},
            {"max_len", max_len},
            {"dropout", dropout},
            {"feature_count", feature_count},
            {"mlp_hidden", mlp_hidden},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"lr_gamma", lr_gamma},
            {"seed", seed},
            {"feature_redraw_epochs", feature_redraw_epochs}};
}

ARModelConfig ARModelConfig::from_json(const nlohmann::json& j) {
    ARModelConfig cfg;
    cfg.layers = j.at("layers");
    cfg.embed_dim = j.at("embed_dim");
    cfg.heads = j.at("heads");
    cfg.vocab = j.at("vocab");
    cfg.max_len = j.at("max_len");
    cfg.dropout = j.at("dropout");
    cfg.feature_count = j.at("feature_count");
    cfg.mlp_hidden = j.value("mlp_hidden", 0);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lr_gamma = j.value("lr_gamma", cfg.lr_gamma);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.feature_redraw_epochs = j.value("feature_redraw_epochs", 0);
    return cfg;
}

ARModel ARModel::create(const ARModelConfig& cfg, const Ordering& ordering,
                        uint64_t vqvae_hash) {
    cfg.validate();
    if (static_cast<int>(ordering.length()) != cfg.max_len - 1)
        throw ConfigError("ordering length does not match model max_len");
    ARModel model;
    model.config = cfg;
    model.ordering = ordering;
    model.vqvae_hash = vqvae_hash;
    model.core.build(cfg.layers, cfg.embed_dim, cfg.heads, cfg.feature_count, cfg.vocab,
                     cfg.max_len, cfg.hidden(), static_cast<float>(cfg.dropout));
    Rng init_rng(derive_seed(cfg.seed, 10));
    model.core.init_weights(init_rng);
    model.core.init_features(derive_seed(cfg.seed, 20));
    return model;
}

void ARModel::check_prefix(const std::vector<int>& prefix) const {
    if (static_cast<int>(prefix.size()) >= config.max_len)
        throw InputError("prefix length must be < max_len");
    for (int t : prefix)
        if (t < 0 || t >= config.vocab) throw InputError("prefix token outside vocabulary");
}

Eigen::VectorXd ARModel::next_token_distribution(const std::vector<int>& prefix) const {
    check_prefix(prefix);
    std::vector<int> tokens;
    tokens.reserve(prefix.size() + 1);
    tokens.push_back(bos_token());
    tokens.insert(tokens.end(), prefix.begin(), prefix.end());
    const auto logits =
        core.forward(tokens, static_cast<int>(tokens.size()), false, nullptr, nullptr);
    const auto last = logits.col(logits.cols() - 1);
    const double mx = last.maxCoeff();
    Eigen::VectorXd probs(config.vocab);
    double z = 0.0;
    for (int i = 0; i < config.vocab; ++i) {
        probs(i) = std::exp(static_cast<double>(last(i)) - mx);
        z += probs(i);
    }
    probs /= z;
    return probs;
}

std::vector<LikelihoodVector> ARModel::sequence_likelihood_batch(
    const std::vector<TokenSequence>& seqs) const {
    const int seq_len = sequence_length();
    std::vector<int> tokens;
    tokens.reserve(seqs.size() * static_cast<size_t>(seq_len));
    for (const auto& seq : seqs) {
        if (seq.ordering != ordering)
            throw ConfigError("sequence ordering does not match the model's ordering");
        if (static_cast<int>(seq.tokens.size()) != seq_len)
            throw InputError("sequence length does not match model max_len");
        tokens.push_back(bos_token());
        for (int i = 0; i + 1 < seq_len; ++i) {
            const int t = seq.tokens[static_cast<size_t>(i)];
            if (t < 0 || t >= config.vocab) throw InputError("sequence token outside vocabulary");
            tokens.push_back(t);
        }
        const int last = seq.tokens.back();
        if (last < 0 || last >= config.vocab) throw InputError("sequence token outside vocabulary");
    }
    const auto logits = core.forward(tokens, seq_len, false, nullptr, nullptr);

    std::vector<LikelihoodVector> out(seqs.size());
    for (size_t b = 0; b < seqs.size(); ++b) {
        out[b].probs.resize(static_cast<size_t>(seq_len));
        for (int t = 0; t < seq_len; ++t) {
            const auto col = logits.col(static_cast<Eigen::Index>(b) * seq_len + t);
            const double mx = col.maxCoeff();
            double z = 0.0;
            for (int i = 0; i < config.vocab; ++i)
                z += std::exp(static_cast<double>(col(i)) - mx);
            const int target = seqs[b].tokens[static_cast<size_t>(t)];
            out[b].probs[static_cast<size_t>(t)] =
                std::exp(static_cast<double>(col(target)) - mx) / z;
        }
    }
    return out;
}

LikelihoodVector ARModel::sequence_likelihood(const TokenSequence& seq) const {
    return sequence_likelihood_batch({seq}).front();
}

double ARModel::log_likelihood(const TokenSequence& seq) const {
    return sequence_likelihood(seq).log_sum();
}

int sample_from_logits(const Eigen::VectorXf& logits, double temperature, Rng& rng,
                       int exclude) {
    const int n = static_cast<int>(logits.size());
    if (temperature < 1e-9) {
        int best = -1;
        float best_v = 0;
        for (int i = 0; i < n; ++i) {
            if (i == exclude) continue;
            if (best < 0 || logits(i) > best_v) {
                best = i;
                best_v = logits(i);
            }
        }
        return best;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i)
        if (i != exclude) mx = std::max(mx, static_cast<double>(logits(i)) / temperature);
    std::vector<double> probs(static_cast<size_t>(n), 0.0);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
        if (i == exclude) continue;
        probs[static_cast<size_t>(i)] = std::exp(static_cast<double>(logits(i)) / temperature - mx);
        z += probs[static_cast<size_t>(i)];
    }
    const double u = rng.uniform() * z;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += probs[static_cast<size_t>(i)];
        if (u < acc) return i;
    }
    for (int i = n - 1; i >= 0; --i)
        if (i != exclude) return i;
    return 0;
}

int ARModel::sample_token(const std::vector<int>& prefix, double temperature, Rng& rng,
                          int exclude) const {
    check_prefix(prefix);
    std::vector<int> tokens;
    tokens.reserve(prefix.size() + 1);
    tokens.push_back(bos_token());
    tokens.insert(tokens.end(), prefix.begin(), prefix.end());
    const auto logits =
        core.forward(tokens, static_cast<int>(tokens.size()), false, nullptr, nullptr);
    const Eigen::VectorXf last = logits.col(logits.cols() - 1);
    return sample_from_logits(last, temperature, rng, exclude);
}

void ARModel::save(const std::string& path) const {
    CheckpointFile ckpt;
    ckpt.header["kind"] = "transformer";
    ckpt.header["config"] = config.to_json();
    ckpt.header["ordering"] = ordering.descriptor();
    ckpt.header["vqvae_hash"] = hex64(vqvae_hash);
    for (size_t i = 0; i < core.params.entry_count(); ++i) {
        const auto& e = core.params.entry(i);
        const float* base = core.params.values().data() + e.offset;
        ckpt.add_blob(e.name, std::vector<float>(base, base + e.rows * e.cols));
    }
    for (size_t l = 0; l < core.feature_mats.size(); ++l) {
        const auto& m = core.feature_mats[l];
        ckpt.add_blob("feat." + std::to_string(l),
                      std::vector<float>(m.data(), m.data() + m.size()));
    }
    ckpt.save(path);
    const_cast<ARModel*>(this)->content_hash = file_content_hash(path);
}

ARModel ARModel::load(const std::string& path) {
    const CheckpointFile ckpt = CheckpointFile::load(path);
    if (ckpt.header.value("kind", "") != "transformer")
        throw ConfigError("checkpoint is not a transformer checkpoint: " + path);
    const auto cfg = ARModelConfig::from_json(ckpt.header.at("config"));
    const auto ordering = Ordering::from_descriptor(ckpt.header.at("ordering"));
    const uint64_t vqvae_hash =
        std::stoull(ckpt.header.at("vqvae_hash").get<std::string>(), nullptr, 16);
    ARModel model = create(cfg, ordering, vqvae_hash);
    for (size_t i = 0; i < model.core.params.entry_count(); ++i) {
        const auto& e = model.core.params.entry(i);
        const auto& blob = ckpt.blob(e.name);
        if (blob.size() != e.rows * e.cols)
            throw ConfigError("checkpoint blob size mismatch: " + e.name);
        std::copy(blob.begin(), blob.end(), model.core.params.values().begin() + e.offset);
    }
    for (size_t l = 0; l < model.core.feature_mats.size(); ++l) {
        const auto& blob = ckpt.blob("feat." + std::to_string(l));
        auto& m = model.core.feature_mats[l];
        if (blob.size() != static_cast<size_t>(m.size()))
            throw ConfigError("checkpoint feature blob size mismatch");
        std::copy(blob.begin(), blob.end(), m.data());
    }
    model.content_hash = file_content_hash(path);
    return model;
}

void check_vqvae_binding(const ARModel& model, uint64_t vqvae_hash, bool allow_mismatch) {
    if (model.vqvae_hash != vqvae_hash && !allow_mismatch)
        throw ConfigError(
            "transformer was trained against a different VQ-VAE (hash " +
            hex64(model.vqvae_hash) + " vs " + hex64(vqvae_hash) +
            "); pass the override flag to allow the pairing");
}

ARModel train_transformer(const std::vector<std::vector<int>>& train_seqs,
                          const std::vector<std::vector<int>>& val_seqs,
                          const ARModelConfig& cfg, const Ordering& ordering,
                          uint64_t vqvae_hash, ARTrainHistory* history) {
    if (train_seqs.empty()) throw InputError("train_transformer: empty latent corpus");
    const int seq_len = cfg.max_len - 1;
    auto check_corpus = [&](const std::vector<std::vector<int>>& seqs) {
        for (const auto& s : seqs) {
            if (static_cast<int>(s.size()) != seq_len)
                throw ConfigError("train_transformer: sequence length does not match ordering");
            for (int t : s)
                if (t < 0 || t >= cfg.vocab - 1)
                    throw InputError("train_transformer: token outside codebook range");
        }
    };
    check_corpus(train_seqs);
    check_corpus(val_seqs);

    ARModel model = ARModel::create(cfg, ordering, vqvae_hash);
    nn::Adam<float> opt;
    Rng shuffle_rng(derive_seed(cfg.seed, 30));
    Rng dropout_rng(derive_seed(cfg.seed, 31));
    const int bos = model.bos_token();

    auto pack_batch = [&](const std::vector<std::vector<int>>& seqs,
                          const std::vector<size_t>& order, size_t start, size_t end,
                          std::vector<int>& tokens, std::vector<int>& targets) {
        tokens.clear();
        targets.clear();
        for (size_t i = start; i < end; ++i) {
            const auto& s = seqs[order[i]];
            tokens.push_back(bos);
            for (int t = 0; t + 1 < seq_len; ++t) tokens.push_back(s[static_cast<size_t>(t)]);
            for (int t = 0; t < seq_len; ++t) targets.push_back(s[static_cast<size_t>(t)]);
        }
    };

    auto eval_nll = [&](const std::vector<std::vector<int>>& seqs) {
        if (seqs.empty()) return std::numeric_limits<double>::quiet_NaN();
        std::vector<size_t> order(seqs.size());
        std::iota(order.begin(), order.end(), size_t{0});
        double total = 0.0;
        size_t count = 0;
        std::vector<int> tokens, targets;
        for (size_t start = 0; start < seqs.size();
             start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(seqs.size(), start + static_cast<size_t>(cfg.batch_size));
            pack_batch(seqs, order, start, end, tokens, targets);
            const auto logits = model.core.forward(tokens, seq_len, false, nullptr, nullptr);
            const auto xent = nn::softmax_xent_forward<float>(logits, targets);
            total += xent.loss * static_cast<double>(end - start);
            count += end - start;
        }
        return total / static_cast<double>(count);
    };

    double best_val = std::numeric_limits<double>::infinity();
    nn::AlignedVector<float> best_params;
    std::vector<nn::MatX<float>> best_features;
    int best_epoch = -1;

    std::vector<size_t> order(train_seqs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::vector<int> tokens, targets;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.feature_redraw_epochs > 0 && epoch > 0 &&
            epoch % cfg.feature_redraw_epochs == 0)
            model.core.init_features(derive_seed(cfg.seed, 20 + static_cast<uint64_t>(epoch)));

        const double lr = cfg.lr * std::pow(cfg.lr_gamma, epoch);
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        size_t epoch_count = 0;
        for (size_t start = 0; start < train_seqs.size();
             start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end =
                std::min(train_seqs.size(), start + static_cast<size_t>(cfg.batch_size));
            pack_batch(train_seqs, order, start, end, tokens, targets);

            detail::TransformerCore<float>::Cache cache;
            const auto logits = model.core.forward(tokens, seq_len, true, &dropout_rng, &cache);
            const auto xent = nn::softmax_xent_forward<float>(logits, targets);
            epoch_loss += xent.loss * static_cast<double>(end - start);
            epoch_count += end - start;

            model.core.params.zero_grad();
            const auto dlogits = nn::softmax_xent_backward<float>(xent, targets);
            model.core.backward(dlogits, cache, model.core.params.grads());
            opt.step(model.core.params, static_cast<float>(lr));
        }

        const double val_nll = eval_nll(val_seqs);
        if (!val_seqs.empty() && val_nll < best_val) {
            best_val = val_nll;
            best_params = model.core.params.values();
            best_features = model.core.feature_mats;
            best_epoch = epoch;
        }
        if (history) {
            history->train_nll.push_back(epoch_loss / static_cast<double>(epoch_count));
            history->val_nll.push_back(val_nll);
        }
    }

    if (best_epoch >= 0) {
        model.core.params.values() = best_params;
        model.core.feature_mats = best_features;
    }
    if (history) history->best_epoch = best_epoch;
    return model;
}

} // namespace latentad
