#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "latentad/ar_model.hpp"

using namespace latentad;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static std::atomic<int> counter{0};
        path = fs::temp_directory_path() /
               ("latentad_test_ar_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& name) const { return (path / name).string(); }
};

// Exact causal softmax attention, the oracle FAVOR+ approximates.
template <class Real>
nn::MatX<Real> exact_causal_attention(const nn::MatX<Real>& q, const nn::MatX<Real>& k,
                                      const nn::MatX<Real>& v) {
    const Eigen::Index L = q.cols();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(q.rows()));
    nn::MatX<Real> out(v.rows(), L);
    for (Eigen::Index i = 0; i < L; ++i) {
        nn::VecX<Real> logits(i + 1);
        for (Eigen::Index j = 0; j <= i; ++j) logits(j) = q.col(i).dot(k.col(j)) * scale;
        const Real mx = logits.maxCoeff();
        nn::VecX<Real> w = (logits.array() - mx).exp();
        w /= w.sum();
        out.col(i).setZero();
        for (Eigen::Index j = 0; j <= i; ++j) out.col(i) += w(j) * v.col(j);
    }
    return out;
}

// One-head FAVOR+ path as the model uses it: scale, feature maps with a
// per-position query shift, prefix-sum attention.
double favor_vs_exact_error(int seq_len, int head_dim, int m, uint64_t input_seed,
                            uint64_t feature_seed) {
    // Activation-scale queries/keys: entries N(0, 0.35^2). The positive
    // feature estimator's variance grows with exp(|q+k|^2), so the regime in
    // which the approximation is used matters.
    Rng rng(input_seed);
    nn::MatX<float> q(head_dim, seq_len), k(head_dim, seq_len), v(head_dim, seq_len);
    for (Eigen::Index j = 0; j < seq_len; ++j)
        for (int i = 0; i < head_dim; ++i) {
            q(i, j) = 0.35f * static_cast<float>(rng.normal());
            k(i, j) = 0.35f * static_cast<float>(rng.normal());
            v(i, j) = static_cast<float>(rng.normal());
        }
    Rng frng(feature_seed);
    const auto proj = detail::draw_orthogonal_features<float>(m, head_dim, frng);

    const float scale = std::pow(static_cast<float>(head_dim), -0.25f);
    nn::MatX<float> qs = q * scale, ks = k * scale;
    nn::VecX<float> shift(seq_len);
    {
        const nn::MatX<float> e = proj * qs;
        for (Eigen::Index j = 0; j < seq_len; ++j)
            shift(j) = e.col(j).maxCoeff() - 0.5f * qs.col(j).squaredNorm();
    }
    const auto phi_q = detail::favor_features<float>(qs, proj, &shift);
    const auto phi_k = detail::favor_features<float>(ks, proj);
    const auto approx = detail::causal_linear_attention<float>(phi_q, phi_k, v);
    const auto exact = exact_causal_attention<float>(q, k, v);
    return (approx - exact).norm() / exact.norm();
}

ARModelConfig tiny_model_config() {
    ARModelConfig cfg;
    cfg.layers = 2;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.vocab = 5;
    cfg.max_len = 17;
    cfg.dropout = 0.0;
    cfg.feature_count = 32;
    cfg.mlp_hidden = 64;
    cfg.seed = 5;
    return cfg;
}

// Randomize the output head so logits are informative (create() zeros it).
void randomize_head(ARModel& model, uint64_t seed) {
    Rng rng(seed);
    nn::fill_normal<float>(model.core.params.param(model.core.head_w), rng, 0.5);
}

} // namespace

TEST_CASE("favor features at x=0 equal 1/sqrt(m)") {
    Rng rng(1);
    const auto proj = detail::draw_orthogonal_features<float>(16, 4, rng);
    nn::MatX<float> x = nn::MatX<float>::Zero(4, 3);
    const auto phi = detail::favor_features<float>(x, proj);
    for (Eigen::Index j = 0; j < phi.cols(); ++j)
        for (Eigen::Index i = 0; i < phi.rows(); ++i)
            CHECK(phi(i, j) == doctest::Approx(0.25)); // 1/sqrt(16)
}

TEST_CASE("favor features reject non-finite input") {
    Rng rng(2);
    const auto proj = detail::draw_orthogonal_features<float>(8, 4, rng);
    nn::MatX<float> x = nn::MatX<float>::Zero(4, 1);
    x(0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(detail::favor_features<float>(x, proj), NumericError);
}

TEST_CASE("feature products approximate the softmax kernel exp(q.k) within 10%") {
    // The Gaussian normalizers exp(-|x|^2/2) are part of phi itself, so the
    // feature product phi(q).phi(k) is an unbiased estimate of exp(q.k).
    const int m = 256, dim = 32;
    Rng frng(7);
    const auto proj = detail::draw_orthogonal_features<double>(m, dim, frng);
    Rng rng(8);
    double total_rel = 0.0;
    const int pairs = 50;
    for (int t = 0; t < pairs; ++t) {
        nn::MatX<double> q(dim, 1), k(dim, 1);
        for (int i = 0; i < dim; ++i) {
            q(i, 0) = rng.normal();
            k(i, 0) = rng.normal();
        }
        q /= q.norm();
        k /= k.norm();
        const auto phi_q = detail::favor_features<double>(q, proj);
        const auto phi_k = detail::favor_features<double>(k, proj);
        const double estimate = phi_q.col(0).dot(phi_k.col(0));
        const double truth = std::exp(q.col(0).dot(k.col(0)));
        total_rel += std::abs(estimate - truth) / truth;
    }
    CHECK(total_rel / pairs <= 0.10);
}

TEST_CASE("doubling the feature count reduces mean kernel approximation error") {
    const int dim = 16;
    Rng rng(9);
    std::vector<nn::MatX<double>> qs, ks;
    for (int t = 0; t < 30; ++t) {
        nn::MatX<double> q(dim, 1), k(dim, 1);
        for (int i = 0; i < dim; ++i) {
            q(i, 0) = rng.normal();
            k(i, 0) = rng.normal();
        }
        q /= q.norm();
        k /= k.norm();
        qs.push_back(q);
        ks.push_back(k);
    }
    auto mean_error = [&](int m) {
        double total = 0.0;
        int count = 0;
        for (uint64_t seed = 0; seed < 20; ++seed) {
            Rng frng(100 + seed);
            const auto proj = detail::draw_orthogonal_features<double>(m, dim, frng);
            for (size_t t = 0; t < qs.size(); ++t) {
                const auto phi_q = detail::favor_features<double>(qs[t], proj);
                const auto phi_k = detail::favor_features<double>(ks[t], proj);
                const double estimate = phi_q.col(0).dot(phi_k.col(0));
                const double truth = std::exp(qs[t].col(0).dot(ks[t].col(0)));
                total += std::abs(estimate - truth) / truth;
                ++count;
            }
        }
        return total / count;
    };
    const double e16 = mean_error(16), e32 = mean_error(32), e64 = mean_error(64);
    MESSAGE("kernel error m=16:", e16, " m=32:", e32, " m=64:", e64);
    CHECK(e32 < e16);
    CHECK(e64 < e32);
}

TEST_CASE("causal linear attention with a single position returns v1") {
    Rng rng(10);
    const auto proj = detail::draw_orthogonal_features<float>(32, 8, rng);
    nn::MatX<float> q(8, 1), k(8, 1), v(8, 1);
    for (int i = 0; i < 8; ++i) {
        q(i, 0) = static_cast<float>(rng.normal());
        k(i, 0) = static_cast<float>(rng.normal());
        v(i, 0) = static_cast<float>(rng.normal());
    }
    const auto phi_q = detail::favor_features<float>(q, proj);
    const auto phi_k = detail::favor_features<float>(k, proj);
    const auto out = detail::causal_linear_attention<float>(phi_q, phi_k, v);
    CHECK((out.col(0) - v.col(0)).norm() / v.col(0).norm() < 1e-3);
}

TEST_CASE("FAVOR+ attention tracks exact softmax attention and improves with m") {
    // Pinned acceptance-scale case: m=256, L=64, head dim 32.
    double total = 0.0;
    for (uint64_t s = 0; s < 5; ++s) total += favor_vs_exact_error(64, 32, 256, 500 + s, 900 + s);
    const double err256 = total / 5.0;
    MESSAGE("favor-vs-exact rel Frobenius (m=256): ", err256);
    CHECK(err256 <= 0.1);

    // Monotone trend over m on fixed inputs, mean over 20 feature seeds.
    auto mean_err = [&](int m) {
        double t = 0.0;
        for (uint64_t s = 0; s < 20; ++s) t += favor_vs_exact_error(64, 32, m, 1234, 2000 + s);
        return t / 20.0;
    };
    const double e16 = mean_err(16), e64 = mean_err(64), e256 = mean_err(256);
    MESSAGE("attention error m=16:", e16, " m=64:", e64, " m=256:", e256);
    CHECK(e64 < e16);
    CHECK(e256 < e64);
}

TEST_CASE("strict causality: suffix edits never change earlier logits") {
    ARModelConfig cfg = tiny_model_config();
    ARModel model = ARModel::create(cfg, make_ordering(OrderingClass::Raster, 0, 4, 4), 0);
    randomize_head(model, 77);

    Rng rng(11);
    const int seq_len = 16;
    std::vector<int> tokens(seq_len);
    for (auto& t : tokens) t = static_cast<int>(rng.bounded(4));
    const auto logits_a = model.core.forward(tokens, seq_len, false, nullptr, nullptr);

    for (int j = 1; j < seq_len; j += 3) {
        auto perturbed = tokens;
        perturbed[static_cast<size_t>(j)] = (perturbed[static_cast<size_t>(j)] + 1) % 4;
        const auto logits_b = model.core.forward(perturbed, seq_len, false, nullptr, nullptr);
        for (int i = 0; i < j; ++i) {
            // Exact equality: prefix computation is bit-identical.
            REQUIRE(std::memcmp(logits_a.col(i).eval().data(), logits_b.col(i).eval().data(),
                                sizeof(float) * static_cast<size_t>(cfg.vocab)) == 0);
        }
    }
}

TEST_CASE("untrained model with zero head emits the uniform distribution") {
    ARModelConfig cfg = tiny_model_config();
    const ARModel model = ARModel::create(cfg, make_ordering(OrderingClass::Raster, 0, 4, 4), 0);
    const auto probs = model.next_token_distribution({1, 2, 3});
    for (int i = 0; i < cfg.vocab; ++i)
        CHECK(probs(i) == doctest::Approx(1.0 / cfg.vocab).epsilon(1e-6));
}

TEST_CASE("next-token distributions sum to one within 1e-5") {
    ARModelConfig cfg = tiny_model_config();
    ARModel model = ARModel::create(cfg, make_ordering(OrderingClass::Raster, 0, 4, 4), 0);
    randomize_head(model, 33);
    Rng rng(12);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<int> prefix(rng.bounded(15));
        for (auto& t : prefix) t = static_cast<int>(rng.bounded(5));
        const auto probs = model.next_token_distribution(prefix);
        CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-5));
        for (int i = 0; i < probs.size(); ++i) CHECK(probs(i) > 0.0);
    }
}

TEST_CASE("token and prefix validation raise input errors") {
    ARModelConfig cfg = tiny_model_config();
    const ARModel model = ARModel::create(cfg, make_ordering(OrderingClass::Raster, 0, 4, 4), 0);
    CHECK_THROWS_AS(model.next_token_distribution({99}), InputError);
    std::vector<int> too_long(static_cast<size_t>(cfg.max_len), 0);
    CHECK_THROWS_AS(model.next_token_distribution(too_long), InputError);
    ARModelConfig bad = cfg;
    bad.embed_dim = 30; // not divisible by heads
    CHECK_THROWS_AS(ARModel::create(bad, make_ordering(OrderingClass::Raster, 0, 4, 4), 0),
                    ConfigError);
}

TEST_CASE("sequence likelihood is consistent with the chain rule") {
    ARModelConfig cfg = tiny_model_config();
    ARModel model = ARModel::create(cfg, make_ordering(OrderingClass::Raster, 0, 4, 4), 0);
    randomize_head(model, 44);
    Rng rng(13);
    TokenSequence seq;
    seq.ordering = model.ordering;
    for (int i = 0; i < 16; ++i) seq.tokens.push_back(static_cast<int>(rng.bounded(4)));

    const auto lik = model.sequence_likelihood(seq);
    REQUIRE(lik.probs.size() == 16);
    double product = 1.0;
    for (size_t i = 0; i < lik.probs.size(); ++i) {
        CHECK(lik.probs[i] > 0.0);
        CHECK(lik.probs[i] <= 1.0);
        // Each entry matches the conditional of the observed token.
        std::vector<int> prefix(seq.tokens.begin(), seq.tokens.begin() + static_cast<long>(i));
        const auto cond = model.next_token_distribution(prefix);
        CHECK(lik.probs[i] ==
              doctest::Approx(cond(seq.tokens[i])).epsilon(1e-4));
        product *= lik.probs[i];
    }
    CHECK(std::exp(lik.log_sum()) == doctest::Approx(product).epsilon(1e-5));

    TokenSequence wrong = seq;
    wrong.tokens.pop_back();
    CHECK_THROWS_AS(model.sequence_likelihood(wrong), InputError);
}

TEST_CASE("log_sum of per-step probs (0.5, 0.25) is ln(0.125)") {
    LikelihoodVector lik;
    lik.probs = {0.5, 0.25};
    CHECK(lik.log_sum() == doctest::Approx(std::log(0.125)));
}

TEST_CASE("sampling follows the distribution and the temperature->0 limit") {
    Eigen::VectorXf logits(6);
    logits << 0.0f, 1.0f, -1.0f, 12.0f, 0.5f, 0.2f; // ~0.9999 mass on token 3
    Rng rng(14);
    int hits = 0;
    for (int i = 0; i < 1000; ++i) hits += sample_from_logits(logits, 1.0, rng) == 3;
    CHECK(hits >= 990);

    CHECK(sample_from_logits(logits, 0.0, rng) == 3);

    // Empirical frequencies over 10k draws match softmax probabilities
    // within 0.02.
    Eigen::VectorXf flat(4);
    flat << 0.0f, 0.5f, 1.0f, -0.5f;
    Eigen::VectorXd expected(4);
    double z = 0.0;
    for (int i = 0; i < 4; ++i) {
        expected(i) = std::exp(static_cast<double>(flat(i)));
        z += expected(i);
    }
    expected /= z;
    Eigen::VectorXd freq = Eigen::VectorXd::Zero(4);
    for (int i = 0; i < 10000; ++i) freq(sample_from_logits(flat, 1.0, rng)) += 1.0;
    freq /= 10000.0;
    for (int i = 0; i < 4; ++i) CHECK(std::abs(freq(i) - expected(i)) < 0.02);

    // Excluded ids never appear.
    for (int i = 0; i < 200; ++i) CHECK(sample_from_logits(logits, 1.0, rng, 3) != 3);
}

TEST_CASE("tiny-model gradients match central finite differences (double)") {
    detail::TransformerCore<double> core;
    core.build(1, 8, 2, 8, 5, 5, 16, 0.0);
    Rng rng(15);
    core.init_weights(rng);
    // Nontrivial head so the loss has signal.
    nn::fill_normal<double>(core.params.param(core.head_w), rng, 0.3);
    core.init_features(99);

    const int seq_len = 4;
    const std::vector<int> tokens{4, 1, 0, 2}; // BOS + 3 observed
    const std::vector<int> targets{1, 0, 2, 3};

    auto loss_of = [&]() {
        const auto logits = core.forward(tokens, seq_len, false, nullptr, nullptr);
        return nn::softmax_xent_forward<double>(logits, targets).loss;
    };

    detail::TransformerCore<double>::Cache cache;
    const auto logits = core.forward(tokens, seq_len, false, nullptr, &cache);
    const auto xent = nn::softmax_xent_forward<double>(logits, targets);
    nn::AlignedVector<double> grads(core.params.size(), 0.0);
    core.backward(nn::softmax_xent_backward<double>(xent, targets), cache, grads);

    const double h = 1e-6;
    size_t checked = 0;
    Rng pick(16);
    for (int trial = 0; trial < 250; ++trial) {
        const size_t pi = pick.bounded(core.params.size());
        const double orig = core.params.values()[pi];
        core.params.values()[pi] = orig + h;
        const double lp = loss_of();
        core.params.values()[pi] = orig - h;
        const double lm = loss_of();
        core.params.values()[pi] = orig;
        const double fd = (lp - lm) / (2 * h);
        const double an = grads[pi];
        if (std::abs(fd) + std::abs(an) < 1e-9) continue;
        ++checked;
        CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-3);
    }
    CHECK(checked > 100);
}

TEST_CASE("decode_step agrees with the batch forward pass") {
    ARModelConfig cfg = tiny_model_config();
    ARModel model = ARModel::create(cfg, make_ordering(OrderingClass::Raster, 0, 4, 4), 0);
    randomize_head(model, 55);
    Rng rng(17);
    std::vector<int> tokens{model.bos_token()};
    for (int i = 0; i < 15; ++i) tokens.push_back(static_cast<int>(rng.bounded(4)));

    const auto batch_logits =
        model.core.forward(tokens, static_cast<int>(tokens.size()), false, nullptr, nullptr);

    auto state = model.begin_decode();
    for (size_t i = 0; i < tokens.size(); ++i) {
        const auto step_logits = model.decode_step(state, tokens[i]);
        for (int v = 0; v < cfg.vocab; ++v)
            CHECK(step_logits(v) ==
                  doctest::Approx(batch_logits(v, static_cast<Eigen::Index>(i))).epsilon(2e-3));
    }
}

TEST_CASE("training learns a 2-state markov chain within 0.05") {
    // Transition matrix; stationary distribution (0.75, 0.25).
    const double T[2][2] = {{0.9, 0.1}, {0.3, 0.7}};
    const int seq_len = 16;

    auto draw_chain = [&](Rng& rng) {
        std::vector<int> s(seq_len);
        s[0] = rng.uniform() < 0.75 ? 0 : 1;
        for (int i = 1; i < seq_len; ++i)
            s[i] = rng.uniform() < T[s[i - 1]][0] ? 0 : 1;
        return s;
    };
    Rng data_rng(18);
    std::vector<std::vector<int>> train_seqs, val_seqs;
    for (int i = 0; i < 1500; ++i) train_seqs.push_back(draw_chain(data_rng));
    for (int i = 0; i < 200; ++i) val_seqs.push_back(draw_chain(data_rng));

    ARModelConfig cfg;
    cfg.layers = 2;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.vocab = 3; // two symbols + BOS
    cfg.max_len = seq_len + 1;
    cfg.dropout = 0.0;
    cfg.feature_count = 32;
    cfg.mlp_hidden = 64;
    cfg.epochs = 10;
    cfg.batch_size = 64;
    cfg.lr = 3e-3;
    cfg.lr_gamma = 0.9;
    cfg.seed = 77;

    const auto ordering = make_ordering(OrderingClass::Raster, 0, 4, 4);
    ARTrainHistory history;
    const ARModel model = train_transformer(train_seqs, val_seqs, cfg, ordering, 0, &history);

    // Beats the uniform baseline on held-out data.
    const double uniform_nll = std::log(3.0);
    MESSAGE("markov val nll: ", history.val_nll.back(), " uniform: ", uniform_nll);
    CHECK(history.val_nll.back() < uniform_nll);

    // Predicted conditionals match the chain within 0.05 for both contexts.
    Rng probe_rng(19);
    double err[2] = {0.0, 0.0};
    int counts[2] = {0, 0};
    for (int rep = 0; rep < 40; ++rep) {
        auto prefix = draw_chain(probe_rng);
        prefix.resize(static_cast<size_t>(4 + probe_rng.bounded(10)));
        const int last = prefix.back();
        const auto probs = model.next_token_distribution(prefix);
        err[last] += std::abs(probs(0) - T[last][0]);
        counts[last]++;
    }
    for (int s = 0; s < 2; ++s) {
        REQUIRE(counts[s] > 0);
        MESSAGE("context ", s, " mean abs error: ", err[s] / counts[s]);
        CHECK(err[s] / counts[s] < 0.05);
    }

    // Per-position likelihoods match analytic conditionals within 0.05.
    Rng lik_rng(20);
    double lik_err = 0.0;
    int lik_count = 0;
    for (int rep = 0; rep < 20; ++rep) {
        TokenSequence seq;
        seq.ordering = ordering;
        seq.tokens = draw_chain(lik_rng);
        const auto lik = model.sequence_likelihood(seq);
        for (int i = 1; i < seq_len; ++i) {
            lik_err += std::abs(lik.probs[static_cast<size_t>(i)] -
                                T[seq.tokens[static_cast<size_t>(i - 1)]]
                                 [seq.tokens[static_cast<size_t>(i)]]);
            ++lik_count;
        }
    }
    MESSAGE("likelihood mean abs error: ", lik_err / lik_count);
    CHECK(lik_err / lik_count < 0.05);

    // Determinism: identical seeds give identical held-out losses.
    ARTrainHistory history2;
    const ARModel model2 = train_transformer(train_seqs, val_seqs, cfg, ordering, 0, &history2);
    REQUIRE(history.val_nll.size() == history2.val_nll.size());
    for (size_t e = 0; e < history.val_nll.size(); ++e)
        CHECK(history.val_nll[e] == history2.val_nll[e]);

    // Checkpoint round trip reproduces logits bit-exactly.
    TempDir tmp;
    model.save(tmp.str("ar.ckpt"));
    const ARModel reloaded = ARModel::load(tmp.str("ar.ckpt"));
    CHECK(reloaded.vqvae_hash == model.vqvae_hash);
    TokenSequence probe;
    probe.ordering = ordering;
    probe.tokens = draw_chain(lik_rng);
    const auto lik_a = model.sequence_likelihood(probe);
    const auto lik_b = reloaded.sequence_likelihood(probe);
    for (size_t i = 0; i < lik_a.probs.size(); ++i) CHECK(lik_a.probs[i] == lik_b.probs[i]);
}

TEST_CASE("vqvae binding check honors the override flag") {
    ARModelConfig cfg = tiny_model_config();
    const ARModel model =
        ARModel::create(cfg, make_ordering(OrderingClass::Raster, 0, 4, 4), 0xabcdef);
    CHECK_NOTHROW(check_vqvae_binding(model, 0xabcdef, false));
    CHECK_THROWS_AS(check_vqvae_binding(model, 0x123456, false), ConfigError);
    CHECK_NOTHROW(check_vqvae_binding(model, 0x123456, true));
}

TEST_CASE("train_transformer validates corpus and geometry") {
    ARModelConfig cfg = tiny_model_config();
    const auto ordering = make_ordering(OrderingClass::Raster, 0, 4, 4);
    CHECK_THROWS_AS(train_transformer({}, {}, cfg, ordering, 0), InputError);
    std::vector<std::vector<int>> bad_len{{1, 2, 3}};
    CHECK_THROWS_AS(train_transformer(bad_len, {}, cfg, ordering, 0), ConfigError);
    std::vector<std::vector<int>> bad_tok{std::vector<int>(16, 4)}; // 4 == BOS
    CHECK_THROWS_AS(train_transformer(bad_tok, {}, cfg, ordering, 0), InputError);
    const auto wrong_geom = make_ordering(OrderingClass::Raster, 0, 3, 3);
    std::vector<std::vector<int>> ok{std::vector<int>(16, 0)};
    CHECK_THROWS_AS(train_transformer(ok, {}, cfg, wrong_geom, 0), ConfigError);
}
