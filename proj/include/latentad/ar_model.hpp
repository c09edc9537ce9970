#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentad/errors.hpp"
#include "latentad/nn.hpp"
#include "latentad/orderings.hpp"
#include "latentad/rng.hpp"

namespace latentad {

struct ARModelConfig {
    int layers = 4;
    int embed_dim = 128;
    int heads = 8;
    int vocab = 17;   // K + 1, last id reserved for the start token
    int max_len = 65; // sequence length including the start token
    double dropout = 0.1;
    int feature_count = 64; // random features m per attention head
    int mlp_hidden = 0;     // 0 -> 4 * embed_dim

    // Training
    int epochs = 1500;
    int batch_size = 128;
    double lr = 5e-4;
    double lr_gamma = 0.9999; // per-epoch exponential decay
    uint64_t seed = 1;
    int feature_redraw_epochs = 0; // 0 = features drawn once and frozen

    int hidden() const { return mlp_hidden > 0 ? mlp_hidden : 4 * embed_dim; }

    void validate() const;
    nlohmann::json to_json() const;
    static ARModelConfig from_json(const nlohmann::json& j);
};

// Per-position probabilities p(s_i | s_<i) of the observed tokens.
struct LikelihoodVector {
    std::vector<double> probs;

    double log_sum() const {
        double s = 0.0;
        for (double p : probs) s += std::log(p);
        return s;
    }
};

namespace detail {

// FAVOR+ positive random features for one head:
//   phi(x) = exp(W x - ||x||^2 / 2 - shift) / sqrt(m)
// with W drawn as orthogonal blocks scaled to chi-distributed row norms.
// `shift` is an optional per-column stabilizer; the attention ratio is
// mathematically invariant to it, so gradients may treat it as constant.
template <class Real>
nn::MatX<Real> favor_features(const nn::MatX<Real>& x, const nn::MatX<Real>& projection,
                              const nn::VecX<Real>* shift = nullptr);

// Random projection matrix of m rows: orthogonal d x d blocks (modified
// Gram-Schmidt on Gaussian draws), each row rescaled to the norm of an
// independent Gaussian vector.
template <class Real>
nn::MatX<Real> draw_orthogonal_features(int feature_count, int dim, Rng& rng);

// Causal linear attention from feature-mapped queries/keys. Position i uses
// prefix sums over j <= i only; the denominator is stabilized with eps.
template <class Real>
nn::MatX<Real> causal_linear_attention(const nn::MatX<Real>& phi_q, const nn::MatX<Real>& phi_k,
                                       const nn::MatX<Real>& values, Real eps = Real(1e-6));

// Decoder-only Performer over latent tokens, templated so the gradient check
// can run in double.
template <class Real>
struct TransformerCore {
    using Mat = nn::MatX<Real>;
    using Vec = nn::VecX<Real>;

    int layers = 0, d_model = 0, heads = 0, head_dim = 0;
    int features = 0, vocab = 0, max_len = 0, mlp_hidden = 0;
    Real dropout = Real(0);
    static constexpr Real kAttnEps = Real(1e-6);

    nn::ParamStore<Real> params;
    std::vector<Mat> feature_mats; // per layer, (features, head_dim)

    struct LayerIdx {
        size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        size_t ln2_g, ln2_b, w1, b1, w2, b2;
    };
    size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;
    std::vector<LayerIdx> layer_idx;

    void build(int layers_, int d_model_, int heads_, int features_, int vocab_, int max_len_,
               int mlp_hidden_, Real dropout_);
    void init_weights(Rng& rng);
    void init_features(uint64_t seed);

    struct LayerCache {
        nn::LayerNormCache<Real> ln1, ln2;
        Mat y1, q, k, v;        // q,k already scaled by head_dim^{-1/4}
        Mat phi_q, phi_k;       // (features*heads, B*T)
        Mat den;                // (heads, B*T)
        Mat attn;               // per-head outputs, concatenated (d, B*T)
        Mat drop_attn, drop_mlp;
        Mat y2, h1pre, h1;
    };
    struct Cache {
        int batch = 0, seq_len = 0;
        std::vector<int> tokens;
        std::vector<LayerCache> layer;
        nn::LayerNormCache<Real> lnf;
        Mat xf;
    };

    // tokens laid out as batch-major: column b*seq_len + t.
    Mat forward(const std::vector<int>& tokens, int seq_len, bool train_mode, Rng* dropout_rng,
                Cache* cache) const;
    void backward(const Mat& dlogits, const Cache& cache,
                  nn::AlignedVector<Real>& gradbuf) const;

    // Incremental single-token evaluation via per-layer prefix-sum state.
    struct DecodeState {
        int pos = 0;
        std::vector<Mat> attn_sums; // per layer (features, head_dim*heads)
        std::vector<Mat> key_sums;  // per layer (features, heads)
    };
    DecodeState begin_decode() const;
    Vec decode_step(DecodeState& state, int token) const;

    Eigen::Map<Mat> grad_of(nn::AlignedVector<Real>& buf, size_t idx) const {
        const auto& e = params.entry(idx);
        return Eigen::Map<Mat>(buf.data() + e.offset, e.rows, e.cols);
    }
};

} // namespace detail

// A trained autoregressive model permanently bound to one ordering and to the
// VQ-VAE that produced its training latents. Loaded models are immutable;
// all evaluation methods are const and safe to call concurrently.
class ARModel {
public:
    ARModelConfig config;
    Ordering ordering;
    detail::TransformerCore<float> core;
    uint64_t vqvae_hash = 0;
    uint64_t content_hash = 0;

    static ARModel create(const ARModelConfig& cfg, const Ordering& ordering,
                          uint64_t vqvae_hash);

    int bos_token() const { return config.vocab - 1; }
    int sequence_length() const { return config.max_len - 1; }

    // Probability vector over the vocabulary for the next token after
    // `prefix` (the start token is prepended internally).
    Eigen::VectorXd next_token_distribution(const std::vector<int>& prefix) const;

    LikelihoodVector sequence_likelihood(const TokenSequence& seq) const;
    std::vector<LikelihoodVector> sequence_likelihood_batch(
        const std::vector<TokenSequence>& seqs) const;

    double log_likelihood(const TokenSequence& seq) const;

    // Categorical draw from the next-token distribution; temperature 0 is
    // argmax. `exclude` masks one token id (used to keep healing inside the
    // codebook vocabulary).
    int sample_token(const std::vector<int>& prefix, double temperature, Rng& rng,
                     int exclude = -1) const;

    detail::TransformerCore<float>::DecodeState begin_decode() const {
        return core.begin_decode();
    }
    Eigen::VectorXf decode_step(detail::TransformerCore<float>::DecodeState& state,
                                int token) const {
        return core.decode_step(state, token);
    }

    void save(const std::string& path) const;
    static ARModel load(const std::string& path);

private:
    void check_prefix(const std::vector<int>& prefix) const;
};

// Draw from raw logits at a temperature; exclude masks one id; ties in the
// argmax limit resolve to the lowest index.
int sample_from_logits(const Eigen::VectorXf& logits, double temperature, Rng& rng,
                       int exclude = -1);

// Refuse transformer/VQ-VAE pairings with mismatched identity hashes unless
// explicitly overridden (supports the general-purpose VQ-VAE configuration).
void check_vqvae_binding(const ARModel& model, uint64_t vqvae_hash, bool allow_mismatch);

struct ARTrainHistory {
    std::vector<double> train_nll;
    std::vector<double> val_nll;
    int best_epoch = -1;
};

// Train on pre-ordered token sequences (one ordering per model). Sequences
// must all have length config.max_len - 1 with tokens in [0, vocab-1).
ARModel train_transformer(const std::vector<std::vector<int>>& train_seqs,
                          const std::vector<std::vector<int>>& val_seqs,
                          const ARModelConfig& cfg, const Ordering& ordering,
                          uint64_t vqvae_hash, ARTrainHistory* history = nullptr);

// ---------------------------------------------------------------------------
// Template implementation

namespace detail {

template <class Real>
nn::MatX<Real> favor_features(const nn::MatX<Real>& x, const nn::MatX<Real>& projection,
                              const nn::VecX<Real>* shift) {
    if (!x.allFinite()) throw NumericError("favor_features: non-finite input");
    const Eigen::Index m = projection.rows();
    nn::MatX<Real> e = projection * x;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const Real half_sq = Real(0.5) * x.col(j).squaredNorm();
        const Real offset = half_sq + (shift ? (*shift)(j) : Real(0));
        e.col(j).array() -= offset;
    }
    const Real ratio = Real(1) / std::sqrt(static_cast<Real>(m));
    return (e.array().exp() * ratio).matrix();
}

template <class Real>
nn::MatX<Real> draw_orthogonal_features(int feature_count, int dim, Rng& rng) {
    if (feature_count < 1 || dim < 1)
        throw ConfigError("feature projection needs positive dimensions");
    nn::MatX<Real> proj(feature_count, dim);
    int written = 0;
    while (written < feature_count) {
        // Gaussian block, rows orthonormalized by modified Gram-Schmidt.
        nn::MatX<Real> block(dim, dim);
        for (int r = 0; r < dim; ++r)
            for (int c = 0; c < dim; ++c) block(r, c) = static_cast<Real>(rng.normal());
        for (int r = 0; r < dim; ++r) {
            for (int p = 0; p < r; ++p)
                block.row(r) -= block.row(r).dot(block.row(p)) * block.row(p);
            const Real norm = block.row(r).norm();
            block.row(r) /= std::max(norm, Real(1e-12));
        }
        const int take = std::min(dim, feature_count - written);
        proj.middleRows(written, take) = block.topRows(take);
        written += take;
    }
    // Row norms follow the chi distribution so marginals match an
    // unstructured Gaussian projection.
    for (int r = 0; r < feature_count; ++r) {
        Real sq = Real(0);
        for (int c = 0; c < dim; ++c) {
            const Real g = static_cast<Real>(rng.normal());
            sq += g * g;
        }
        proj.row(r) *= std::sqrt(sq);
    }
    return proj;
}

template <class Real>
nn::MatX<Real> causal_linear_attention(const nn::MatX<Real>& phi_q, const nn::MatX<Real>& phi_k,
                                       const nn::MatX<Real>& values, Real eps) {
    const Eigen::Index m = phi_q.rows();
    const Eigen::Index seq = phi_q.cols();
    const Eigen::Index dv = values.rows();
    if (phi_k.rows() != m || phi_k.cols() != seq || values.cols() != seq)
        throw InputError("causal_linear_attention: shape mismatch");

    nn::MatX<Real> out(dv, seq);
    nn::MatX<Real> running(m, dv);
    running.setZero();
    nn::VecX<Real> key_sum = nn::VecX<Real>::Zero(m);
    for (Eigen::Index t = 0; t < seq; ++t) {
        running.noalias() += phi_k.col(t) * values.col(t).transpose();
        key_sum += phi_k.col(t);
        const Real den = key_sum.dot(phi_q.col(t)) + eps;
        out.col(t).noalias() = running.transpose() * phi_q.col(t) / den;
    }
    return out;
}

template <class Real>
void TransformerCore<Real>::build(int layers_, int d_model_, int heads_, int features_,
                                  int vocab_, int max_len_, int mlp_hidden_, Real dropout_) {
    layers = layers_;
    d_model = d_model_;
    heads = heads_;
    head_dim = d_model_ / heads_;
    features = features_;
    vocab = vocab_;
    max_len = max_len_;
    mlp_hidden = mlp_hidden_;
    dropout = dropout_;

    tok_emb = params.add("tok_emb", d_model, vocab);
    pos_emb = params.add("pos_emb", d_model, max_len);
    layer_idx.clear();
    for (int l = 0; l < layers; ++l) {
        const std::string p = "L" + std::to_string(l) + ".";
        LayerIdx li;
        li.ln1_g = params.add(p + "ln1.g", d_model, 1);
        li.ln1_b = params.add(p + "ln1.b", d_model, 1);
        li.wq = params.add(p + "wq", d_model, d_model);
        li.bq = params.add(p + "bq", d_model, 1);
        li.wk = params.add(p + "wk", d_model, d_model);
        li.bk = params.add(p + "bk", d_model, 1);
        li.wv = params.add(p + "wv", d_model, d_model);
        li.bv = params.add(p + "bv", d_model, 1);
        li.wo = params.add(p + "wo", d_model, d_model);
        li.bo = params.add(p + "bo", d_model, 1);
        li.ln2_g = params.add(p + "ln2.g", d_model, 1);
        li.ln2_b = params.add(p + "ln2.b", d_model, 1);
        li.w1 = params.add(p + "w1", mlp_hidden, d_model);
        li.b1 = params.add(p + "b1", mlp_hidden, 1);
        li.w2 = params.add(p + "w2", d_model, mlp_hidden);
        li.b2 = params.add(p + "b2", d_model, 1);
        layer_idx.push_back(li);
    }
    lnf_g = params.add("lnf.g", d_model, 1);
    lnf_b = params.add("lnf.b", d_model, 1);
    head_w = params.add("head.w", vocab, d_model);
    head_b = params.add("head.b", vocab, 1);
}

template <class Real>
void TransformerCore<Real>::init_weights(Rng& rng) {
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * layers);
    nn::fill_normal<Real>(params.param(tok_emb), rng, base_std);
    nn::fill_normal<Real>(params.param(pos_emb), rng, base_std);
    for (const auto& li : layer_idx) {
        params.param(li.ln1_g).setOnes();
        params.param(li.ln2_g).setOnes();
        nn::fill_normal<Real>(params.param(li.wq), rng, base_std);
        nn::fill_normal<Real>(params.param(li.wk), rng, base_std);
        nn::fill_normal<Real>(params.param(li.wv), rng, base_std);
        nn::fill_normal<Real>(params.param(li.wo), rng, resid_std);
        nn::fill_normal<Real>(params.param(li.w1), rng, base_std);
        nn::fill_normal<Real>(params.param(li.w2), rng, resid_std);
    }
    params.param(lnf_g).setOnes();
    // Zero output head: an untrained model emits the uniform distribution.
}

template <class Real>
void TransformerCore<Real>::init_features(uint64_t seed) {
    feature_mats.clear();
    for (int l = 0; l < layers; ++l) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(l)));
        feature_mats.push_back(draw_orthogonal_features<Real>(features, head_dim, rng));
    }
}

template <class Real>
auto TransformerCore<Real>::forward(const std::vector<int>& tokens, int seq_len, bool train_mode,
                                    Rng* dropout_rng, Cache* cache) const -> Mat {
    const auto bt = static_cast<Eigen::Index>(tokens.size());
    if (seq_len <= 0 || bt % seq_len != 0) throw InputError("forward: ragged batch");
    if (seq_len > max_len) throw InputError("forward: sequence longer than max_len");
    const int batch = static_cast<int>(bt) / seq_len;
    const Real scale = std::pow(static_cast<Real>(head_dim), Real(-0.25));

    auto tok = params.param(tok_emb);
    auto pos = params.param(pos_emb);
    Mat x(d_model, bt);
    for (Eigen::Index j = 0; j < bt; ++j) {
        const int id = tokens[static_cast<size_t>(j)];
        if (id < 0 || id >= vocab) throw InputError("forward: token id outside vocabulary");
        x.col(j) = tok.col(id) + pos.col(j % seq_len);
    }

    if (cache) {
        cache->batch = batch;
        cache->seq_len = seq_len;
        cache->tokens = tokens;
        cache->layer.assign(static_cast<size_t>(layers), LayerCache{});
    }
    LayerCache scratch;

    auto make_dropout = [&](Eigen::Index rows, Eigen::Index cols) {
        Mat mask(rows, cols);
        const Real keep = Real(1) - dropout;
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i)
                mask(i, j) = dropout_rng->uniform() < static_cast<double>(dropout)
                                 ? Real(0)
                                 : Real(1) / keep;
        return mask;
    };
    const bool use_dropout = train_mode && dropout > Real(0) && dropout_rng != nullptr;

    for (int l = 0; l < layers; ++l) {
        LayerCache& lc = cache ? cache->layer[static_cast<size_t>(l)] : scratch;
        const auto& li = layer_idx[static_cast<size_t>(l)];
        const Mat& feat = feature_mats[static_cast<size_t>(l)];

        nn::layernorm_forward<Real>(x, params.param(li.ln1_g).col(0), params.param(li.ln1_b).col(0),
                                    lc.y1, lc.ln1);
        lc.q.noalias() = params.param(li.wq) * lc.y1;
        lc.q.colwise() += params.param(li.bq).col(0);
        lc.k.noalias() = params.param(li.wk) * lc.y1;
        lc.k.colwise() += params.param(li.bk).col(0);
        lc.v.noalias() = params.param(li.wv) * lc.y1;
        lc.v.colwise() += params.param(li.bv).col(0);
        lc.q *= scale;
        lc.k *= scale;

        lc.phi_q.resize(static_cast<Eigen::Index>(features) * heads, bt);
        lc.phi_k.resize(static_cast<Eigen::Index>(features) * heads, bt);
        lc.den.resize(heads, bt);
        lc.attn.resize(d_model, bt);

        for (int h = 0; h < heads; ++h) {
            const auto qh = lc.q.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            const auto kh = lc.k.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            const auto vh = lc.v.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);

            // Query features get a per-position max-shift (cancels exactly in
            // the ratio); key features are left raw so causal prefix sums
            // stay exact.
            Mat eq = feat * qh;
            Mat ek = feat * kh;
            const Real ratio = Real(1) / std::sqrt(static_cast<Real>(features));
            for (Eigen::Index j = 0; j < bt; ++j) {
                eq.col(j).array() -= Real(0.5) * qh.col(j).squaredNorm();
                eq.col(j).array() -= eq.col(j).maxCoeff();
                ek.col(j).array() -= Real(0.5) * kh.col(j).squaredNorm();
            }
            auto phi_qh = lc.phi_q.middleRows(static_cast<Eigen::Index>(h) * features, features);
            auto phi_kh = lc.phi_k.middleRows(static_cast<Eigen::Index>(h) * features, features);
            phi_qh = (eq.array().exp() * ratio).matrix();
            phi_kh = (ek.array().exp() * ratio).matrix();

            // Chunked prefix sums: the running state advances per chunk and
            // the within-chunk causal part is a masked c x c product, so the
            // scan is a handful of small GEMMs. Masked entries contribute
            // exact zeros, so causality stays bit-exact.
            constexpr int kChunk = 16;
            Mat state(features, head_dim);
            nn::VecX<Real> key_sum(features);
            auto attn_h = lc.attn.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            for (int b = 0; b < batch; ++b) {
                state.setZero();
                key_sum.setZero();
                for (int a = 0; a < seq_len; a += kChunk) {
                    const int c = std::min(kChunk, seq_len - a);
                    const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len + a;
                    const auto pq = phi_qh.middleCols(base, c);
                    const auto pk = phi_kh.middleCols(base, c);
                    const auto vv = vh.middleCols(base, c);

                    Mat num = state.transpose() * pq;                   // (dh, c)
                    Eigen::Matrix<Real, 1, Eigen::Dynamic> den =
                        key_sum.transpose() * pq;                       // (1, c)
                    Mat w = pq.transpose() * pk;                        // (c, c)
                    w.template triangularView<Eigen::StrictlyUpper>().setZero();
                    num.noalias() += vv * w.transpose();
                    den += w.rowwise().sum().transpose();
                    den.array() += kAttnEps;

                    for (int t = 0; t < c; ++t) {
                        lc.den(h, base + t) = den(t);
                        attn_h.col(base + t) = num.col(t) / den(t);
                    }
                    state.noalias() += pk * vv.transpose();
                    key_sum += pk.rowwise().sum();
                }
            }
        }

        Mat attn_out = params.param(li.wo) * lc.attn;
        attn_out.colwise() += params.param(li.bo).col(0);
        if (use_dropout) {
            lc.drop_attn = make_dropout(d_model, bt);
            attn_out = attn_out.cwiseProduct(lc.drop_attn);
        }
        x += attn_out;

        nn::layernorm_forward<Real>(x, params.param(li.ln2_g).col(0), params.param(li.ln2_b).col(0),
                                    lc.y2, lc.ln2);
        lc.h1pre.noalias() = params.param(li.w1) * lc.y2;
        lc.h1pre.colwise() += params.param(li.b1).col(0);
        lc.h1 = lc.h1pre.unaryExpr([](Real v) { return nn::gelu(v); });
        Mat mlp_out = params.param(li.w2) * lc.h1;
        mlp_out.colwise() += params.param(li.b2).col(0);
        if (use_dropout) {
            lc.drop_mlp = make_dropout(d_model, bt);
            mlp_out = mlp_out.cwiseProduct(lc.drop_mlp);
        }
        x += mlp_out;
    }

    Mat logits;
    if (cache) {
        nn::layernorm_forward<Real>(x, params.param(lnf_g).col(0), params.param(lnf_b).col(0),
                                    cache->xf, cache->lnf);
        logits.noalias() = params.param(head_w) * cache->xf;
    } else {
        Mat xf;
        nn::LayerNormCache<Real> lnf;
        nn::layernorm_forward<Real>(x, params.param(lnf_g).col(0), params.param(lnf_b).col(0), xf,
                                    lnf);
        logits.noalias() = params.param(head_w) * xf;
    }
    logits.colwise() += params.param(head_b).col(0);
    return logits;
}

template <class Real>
void TransformerCore<Real>::backward(const Mat& dlogits, const Cache& cache,
                                     nn::AlignedVector<Real>& gradbuf) const {
    const int seq_len = cache.seq_len;
    const int batch = cache.batch;
    const Eigen::Index bt = dlogits.cols();
    const Real scale = std::pow(static_cast<Real>(head_dim), Real(-0.25));

    grad_of(gradbuf, head_w).noalias() += dlogits * cache.xf.transpose();
    grad_of(gradbuf, head_b).col(0) += dlogits.rowwise().sum();
    Mat dxf = params.param(head_w).transpose() * dlogits;

    Mat dx;
    {
        nn::VecX<Real> dg, db;
        nn::layernorm_backward<Real>(dxf, params.param(lnf_g).col(0), cache.lnf, dx, dg, db);
        grad_of(gradbuf, lnf_g).col(0) += dg;
        grad_of(gradbuf, lnf_b).col(0) += db;
    }

    for (int l = layers - 1; l >= 0; --l) {
        const LayerCache& lc = cache.layer[static_cast<size_t>(l)];
        const auto& li = layer_idx[static_cast<size_t>(l)];
        const Mat& feat = feature_mats[static_cast<size_t>(l)];

        // MLP branch.
        Mat dm = lc.drop_mlp.size() > 0 ? dx.cwiseProduct(lc.drop_mlp) : dx;
        grad_of(gradbuf, li.w2).noalias() += dm * lc.h1.transpose();
        grad_of(gradbuf, li.b2).col(0) += dm.rowwise().sum();
        Mat dh1 = params.param(li.w2).transpose() * dm;
        Mat dh1pre =
            dh1.cwiseProduct(lc.h1pre.unaryExpr([](Real v) { return nn::gelu_grad(v); }));
        grad_of(gradbuf, li.w1).noalias() += dh1pre * lc.y2.transpose();
        grad_of(gradbuf, li.b1).col(0) += dh1pre.rowwise().sum();
        Mat dy2 = params.param(li.w1).transpose() * dh1pre;
        {
            Mat dmid;
            nn::VecX<Real> dg, db;
            nn::layernorm_backward<Real>(dy2, params.param(li.ln2_g).col(0), lc.ln2, dmid, dg, db);
            grad_of(gradbuf, li.ln2_g).col(0) += dg;
            grad_of(gradbuf, li.ln2_b).col(0) += db;
            dx += dmid;
        }

        // Attention branch.
        Mat dattn_out = lc.drop_attn.size() > 0 ? dx.cwiseProduct(lc.drop_attn) : dx;
        grad_of(gradbuf, li.wo).noalias() += dattn_out * lc.attn.transpose();
        grad_of(gradbuf, li.bo).col(0) += dattn_out.rowwise().sum();
        Mat dA = params.param(li.wo).transpose() * dattn_out;

        Mat dphi_q(static_cast<Eigen::Index>(features) * heads, bt);
        Mat dphi_k(static_cast<Eigen::Index>(features) * heads, bt);
        Mat dv(d_model, bt);

        for (int h = 0; h < heads; ++h) {
            const auto phi_qh = lc.phi_q.middleRows(static_cast<Eigen::Index>(h) * features,
                                                    features);
            const auto phi_kh = lc.phi_k.middleRows(static_cast<Eigen::Index>(h) * features,
                                                    features);
            const auto vh = lc.v.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            auto dphi_qh = dphi_q.middleRows(static_cast<Eigen::Index>(h) * features, features);
            auto dphi_kh = dphi_k.middleRows(static_cast<Eigen::Index>(h) * features, features);
            auto dvh = dv.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);

            const auto attn_h =
                lc.attn.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            const auto dA_h = dA.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);

            constexpr int kChunk = 16;
            Mat state(features, head_dim), suffix(features, head_dim);
            nn::VecX<Real> key_sum(features), suffix_den(features);
            Mat dnum_all(head_dim, seq_len);
            Eigen::Matrix<Real, 1, Eigen::Dynamic> dden_all(seq_len);

            for (int b = 0; b < batch; ++b) {
                const Eigen::Index base = static_cast<Eigen::Index>(b) * seq_len;
                for (int t = 0; t < seq_len; ++t) {
                    const Real den = lc.den(h, base + t);
                    dnum_all.col(t) = dA_h.col(base + t) / den;
                    dden_all(t) = -dA_h.col(base + t).dot(attn_h.col(base + t)) / den;
                }

                // Forward chunk pass for d(phi_q): cross term from the prefix
                // state, local term from the masked within-chunk product.
                state.setZero();
                key_sum.setZero();
                for (int a = 0; a < seq_len; a += kChunk) {
                    const int c = std::min(kChunk, seq_len - a);
                    const auto pk = phi_kh.middleCols(base + a, c);
                    const auto vv = vh.middleCols(base + a, c);
                    const auto dnum = dnum_all.middleCols(a, c);
                    const auto dden = dden_all.segment(a, c);

                    auto dpq = dphi_qh.middleCols(base + a, c);
                    dpq.noalias() = state * dnum;
                    dpq.noalias() += key_sum * dden;
                    // local(j,i) = [j<=i] (v_j . dnum_i + dden_i)
                    Mat local = vv.transpose() * dnum;                  // (c, c)
                    local.array().rowwise() += dden.array();
                    local.template triangularView<Eigen::StrictlyLower>().setZero();
                    dpq.noalias() += pk * local;

                    state.noalias() += pk * vv.transpose();
                    key_sum += pk.rowwise().sum();
                }

                // Reverse chunk pass for d(phi_k) and d(v).
                suffix.setZero();
                suffix_den.setZero();
                for (int a = ((seq_len - 1) / kChunk) * kChunk; a >= 0; a -= kChunk) {
                    const int c = std::min(kChunk, seq_len - a);
                    const auto pq = phi_qh.middleCols(base + a, c);
                    const auto pk = phi_kh.middleCols(base + a, c);
                    const auto vv = vh.middleCols(base + a, c);
                    const auto dnum = dnum_all.middleCols(a, c);
                    const auto dden = dden_all.segment(a, c);

                    auto dpk = dphi_kh.middleCols(base + a, c);
                    dpk.noalias() = suffix * vv;
                    dpk.colwise() += suffix_den;
                    // local(i,j) = [i>=j] (dnum_i . v_j + dden_i)
                    Mat local = dnum.transpose() * vv;                  // (c, c)
                    local.array().colwise() += dden.transpose().array();
                    local.template triangularView<Eigen::StrictlyUpper>().setZero();
                    dpk.noalias() += pq * local;

                    auto dvv = dvh.middleCols(base + a, c);
                    dvv.noalias() = suffix.transpose() * pk;
                    Mat w = pq.transpose() * pk;                        // (c, c)
                    w.template triangularView<Eigen::StrictlyUpper>().setZero();
                    dvv.noalias() += dnum * w;

                    suffix.noalias() += pq * dnum.transpose();
                    suffix_den.noalias() += pq * dden.transpose();
                }
            }
        }

        // Backward through the feature maps into scaled q/k.
        Mat dq(d_model, bt), dk(d_model, bt);
        for (int h = 0; h < heads; ++h) {
            const auto qh = lc.q.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            const auto kh = lc.k.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            const Mat de_q =
                dphi_q.middleRows(static_cast<Eigen::Index>(h) * features, features)
                    .cwiseProduct(lc.phi_q.middleRows(static_cast<Eigen::Index>(h) * features,
                                                      features));
            const Mat de_k =
                dphi_k.middleRows(static_cast<Eigen::Index>(h) * features, features)
                    .cwiseProduct(lc.phi_k.middleRows(static_cast<Eigen::Index>(h) * features,
                                                      features));
            auto dqh = dq.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            auto dkh = dk.middleRows(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            dqh.noalias() = feat.transpose() * de_q;
            dkh.noalias() = feat.transpose() * de_k;
            for (Eigen::Index j = 0; j < bt; ++j) {
                dqh.col(j) -= qh.col(j) * de_q.col(j).sum();
                dkh.col(j) -= kh.col(j) * de_k.col(j).sum();
            }
        }
        dq *= scale;
        dk *= scale;

        grad_of(gradbuf, li.wq).noalias() += dq * lc.y1.transpose();
        grad_of(gradbuf, li.bq).col(0) += dq.rowwise().sum();
        grad_of(gradbuf, li.wk).noalias() += dk * lc.y1.transpose();
        grad_of(gradbuf, li.bk).col(0) += dk.rowwise().sum();
        grad_of(gradbuf, li.wv).noalias() += dv * lc.y1.transpose();
        grad_of(gradbuf, li.bv).col(0) += dv.rowwise().sum();

        Mat dy1 = params.param(li.wq).transpose() * dq;
        dy1.noalias() += params.param(li.wk).transpose() * dk;
        dy1.noalias() += params.param(li.wv).transpose() * dv;
        {
            Mat dmid;
            nn::VecX<Real> dg, db;
            nn::layernorm_backward<Real>(dy1, params.param(li.ln1_g).col(0), lc.ln1, dmid, dg, db);
            grad_of(gradbuf, li.ln1_g).col(0) += dg;
            grad_of(gradbuf, li.ln1_b).col(0) += db;
            dx += dmid;
        }
    }

    auto dtok = grad_of(gradbuf, tok_emb);
    auto dpos = grad_of(gradbuf, pos_emb);
    for (Eigen::Index j = 0; j < bt; ++j) {
        dtok.col(cache.tokens[static_cast<size_t>(j)]) += dx.col(j);
        dpos.col(j % seq_len) += dx.col(j);
    }
}

template <class Real>
auto TransformerCore<Real>::begin_decode() const -> DecodeState {
    DecodeState state;
    state.attn_sums.assign(static_cast<size_t>(layers),
                           Mat::Zero(features, static_cast<Eigen::Index>(head_dim) * heads));
    state.key_sums.assign(static_cast<size_t>(layers), Mat::Zero(features, heads));
    return state;
}

template <class Real>
auto TransformerCore<Real>::decode_step(DecodeState& state, int token) const -> Vec {
    if (token < 0 || token >= vocab) throw InputError("decode_step: token id outside vocabulary");
    if (state.pos >= max_len) throw InputError("decode_step: sequence exceeds max_len");
    const Real scale = std::pow(static_cast<Real>(head_dim), Real(-0.25));
    const Real ratio = Real(1) / std::sqrt(static_cast<Real>(features));

    auto layer_norm_vec = [&](const Vec& v, size_t g_idx, size_t b_idx) {
        const Real mean = v.mean();
        const Real var = (v.array() - mean).square().sum() / static_cast<Real>(v.size());
        const Real inv_std = Real(1) / std::sqrt(var + Real(1e-5));
        Vec out = ((v.array() - mean) * inv_std).matrix();
        return ((out.cwiseProduct(params.param(g_idx).col(0))) + params.param(b_idx).col(0))
            .eval();
    };

    Vec x = params.param(tok_emb).col(token) + params.param(pos_emb).col(state.pos);

    for (int l = 0; l < layers; ++l) {
        const auto& li = layer_idx[static_cast<size_t>(l)];
        const Mat& feat = feature_mats[static_cast<size_t>(l)];
        Mat& attn_sum = state.attn_sums[static_cast<size_t>(l)];
        Mat& key_sum = state.key_sums[static_cast<size_t>(l)];

        const Vec y1 = layer_norm_vec(x, li.ln1_g, li.ln1_b);
        Vec q = (params.param(li.wq) * y1 + params.param(li.bq).col(0)) * scale;
        Vec k = (params.param(li.wk) * y1 + params.param(li.bk).col(0)) * scale;
        Vec v = params.param(li.wv) * y1 + params.param(li.bv).col(0);

        Vec attn(d_model);
        for (int h = 0; h < heads; ++h) {
            const auto qh = q.segment(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            const auto kh = k.segment(static_cast<Eigen::Index>(h) * head_dim, head_dim);
            const auto vh = v.segment(static_cast<Eigen::Index>(h) * head_dim, head_dim);

            Vec eq = feat * qh;
            eq.array() -= Real(0.5) * qh.squaredNorm();
            eq.array() -= eq.maxCoeff();
            const Vec phi_q = (eq.array().exp() * ratio).matrix();
            Vec ek = feat * kh;
            ek.array() -= Real(0.5) * kh.squaredNorm();
            const Vec phi_k = (ek.array().exp() * ratio).matrix();

            auto sum_block = attn_sum.middleCols(static_cast<Eigen::Index>(h) * head_dim,
                                                 head_dim);
            sum_block.noalias() += phi_k * vh.transpose();
            key_sum.col(h) += phi_k;
            const Real den = key_sum.col(h).dot(phi_q) + kAttnEps;
            attn.segment(static_cast<Eigen::Index>(h) * head_dim, head_dim).noalias() =
                sum_block.transpose() * phi_q / den;
        }
        x += params.param(li.wo) * attn + params.param(li.bo).col(0);

        const Vec y2 = layer_norm_vec(x, li.ln2_g, li.ln2_b);
        Vec h1 = params.param(li.w1) * y2 + params.param(li.b1).col(0);
        h1 = h1.unaryExpr([](Real value) { return nn::gelu(value); });
        x += params.param(li.w2) * h1 + params.param(li.b2).col(0);
    }

    const Vec xf = layer_norm_vec(x, lnf_g, lnf_b);
    Vec logits = params.param(head_w) * xf + params.param(head_b).col(0);
    ++state.pos;
    return logits;
}

} // namespace detail

} // namespace latentad
