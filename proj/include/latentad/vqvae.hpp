#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentad/errors.hpp"
#include "latentad/image.hpp"
#include "latentad/nn.hpp"
#include "latentad/orderings.hpp"
#include "latentad/rng.hpp"

namespace latentad {

struct VqVaeConfig {
    int input_size = 64;    // H = W, divisible by 8
    int codebook_size = 16; // K
    int embed_dim = 64;     // n_z
    int channels = 256;     // hidden units per conv layer
    int residual_blocks = 2;

    // Training
    int epochs = 1500;
    int batch_size = 256;
    double lr = 5e-4;
    double lr_gamma = 0.999; // per-epoch exponential decay
    double commitment_beta = 0.25;
    double ema_eps = 1e-5;
    double decay_start = 0.5;
    double decay_end = 0.99;
    int decay_warmup_epochs = 100;
    uint64_t seed = 1;
    int threads = 1;

    int latent_size() const { return input_size / 8; }

    nlohmann::json to_json() const;
    static VqVaeConfig from_json(const nlohmann::json& j);
};

// EMA moving-average decay for a given epoch: linear ramp from decay_start at
// epoch 0 to decay_end at decay_warmup_epochs, constant afterwards.
double ema_decay_at_epoch(int epoch, const VqVaeConfig& cfg);

// K embedding vectors of dimension n_z plus EMA accumulators. ema_sums /
// ema_counts reproduce `vectors` exactly at initialization so a decay of 1.0
// is a no-op.
struct Codebook {
    nn::MatX<float> vectors;    // (n_z, K)
    nn::MatX<float> ema_sums;   // (n_z, K)
    Eigen::VectorXf ema_counts; // (K)
    double decay = 0.5;
    double laplace_eps = 1e-5;

    int size() const { return static_cast<int>(vectors.cols()); }
    int dim() const { return static_cast<int>(vectors.rows()); }

    static Codebook init(int codebook_size, int embed_dim, Rng& rng);
};

// Pre-quantization encoder output: (n_z, h*w), spatial index = r*w + c.
struct EncoderOutput {
    int height = 0;
    int width = 0;
    nn::MatX<float> embeddings;
};

struct QuantizeResult {
    LatentGrid grid;
    nn::MatX<float> quantized; // (n_z, h*w), selected codebook vectors
};

// Nearest codebook vector per spatial cell (squared L2, ties to the lowest
// index, distances accumulated in double).
QuantizeResult quantize(const EncoderOutput& embeddings, const Codebook& codebook);

// One EMA step: counts and sums decay toward the batch statistics, vectors
// are recomputed as Laplace-smoothed sums/counts. Codes with no mass keep
// their previous vector.
void ema_codebook_update(Codebook& codebook, const nn::MatX<float>& batch_embeddings,
                         const std::vector<int>& assignments, double decay);

namespace detail {

// Convolutional encoder/decoder pair, templated so tests can run the whole
// forward/backward in double.
template <class Real>
struct VqVaeNet {
    using Mat = nn::MatX<Real>;

    int input_size = 0;
    int channels = 0;
    int embed_dim = 0;
    int res_blocks = 0;

    nn::ParamStore<Real> params;

    struct ConvIdx {
        size_t w = 0, b = 0;
        nn::ConvGeom geom;
    };
    std::vector<ConvIdx> enc_strided;              // 3 stride-2 convs
    std::vector<std::array<ConvIdx, 2>> enc_res;   // [conv3x3, conv1x1] per block
    ConvIdx enc_proj;                              // 1x1 to embed_dim
    ConvIdx dec_in;                                // 3x3 embed_dim -> channels
    std::vector<std::array<ConvIdx, 2>> dec_res;
    std::vector<ConvIdx> dec_strided;              // 3 stride-2 transposed convs

    void build(int input_size_, int channels_, int embed_dim_, int res_blocks_);
    void init_weights(Rng& rng);

    // Per-image activations kept for the backward pass.
    struct Workspace {
        std::vector<Mat> acts;  // activation after every stage, acts[0] = input
        std::vector<Mat> cols;  // im2col buffers per conv stage
        std::vector<Mat> pre;   // pre-activation for stages that need it
        Mat embeddings;         // encoder output
        Mat recon_pre;          // decoder output before sigmoid
        Mat recon;
        void clear() {
            acts.clear();
            cols.clear();
            pre.clear();
        }
    };

    // x is (1, H*W). Returns embeddings (embed_dim, h*w).
    Mat encode_forward(const Mat& x, Workspace& ws) const;
    // quantized is (embed_dim, h*w). Returns sigmoid reconstruction (1, H*W).
    Mat decode_forward(const Mat& quantized, Workspace& ws) const;

    // Backward through decoder given dL/d(recon); returns dL/d(quantized).
    Mat decode_backward(const Mat& drecon, const Workspace& ws,
                        nn::AlignedVector<Real>& gradbuf) const;
    // Backward through encoder given dL/d(embeddings); accumulates weight grads.
    void encode_backward(const Mat& dembeddings, const Workspace& ws,
                         nn::AlignedVector<Real>& gradbuf) const;

    Eigen::Map<const Mat> weight(const ConvIdx& c) const { return params.param(c.w); }
    Eigen::Map<const Mat> bias(const ConvIdx& c) const { return params.param(c.b); }
    Eigen::Map<Mat> grad_of(nn::AlignedVector<Real>& buf, size_t idx) const {
        const auto& e = params.entry(idx);
        return Eigen::Map<Mat>(buf.data() + e.offset, e.rows, e.cols);
    }
};

} // namespace detail

// Frozen VQ-VAE model: encoder, decoder, codebook. Inference methods are
// const and safe to call concurrently.
class VqVae {
public:
    VqVaeConfig config;
    detail::VqVaeNet<float> net;
    Codebook codebook;

    static VqVae create(const VqVaeConfig& cfg);

    EncoderOutput encode(const Image& image) const;
    Image decode(const nn::MatX<float>& quantized) const;

    LatentGrid encode_to_grid(const Image& image) const;
    nn::MatX<float> lookup(const LatentGrid& grid) const;
    Image reconstruct(const Image& image) const;
    Image decode_grid(const LatentGrid& grid) const;

    void save(const std::string& path) const;
    static VqVae load(const std::string& path);

    // FNV-1a of the checkpoint file; identity used by transformer checkpoints.
    uint64_t content_hash = 0;
};

struct VqVaeTrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    int best_epoch = -1;
};

using AugmentFn = std::function<Image(const Image&, Rng&)>;

// Train on a corpus of normalized images. `augment` (optional) is applied
// per sample with a deterministic per-sample RNG stream.
VqVae train_vqvae(const std::vector<Image>& train_corpus, const std::vector<Image>& val_corpus,
                  const VqVaeConfig& cfg, const AugmentFn& augment = nullptr,
                  VqVaeTrainHistory* history = nullptr);

// ---------------------------------------------------------------------------
// VqVaeNet template implementation

namespace detail {

template <class Real>
void VqVaeNet<Real>::build(int input_size_, int channels_, int embed_dim_, int res_blocks_) {
    input_size = input_size_;
    channels = channels_;
    embed_dim = embed_dim_;
    res_blocks = res_blocks_;

    auto add_conv = [&](const std::string& name, int cin, int cout, int kernel, int stride,
                        int pad, int in_h) {
        ConvIdx idx;
        idx.geom = nn::ConvGeom{cin, cout, kernel, stride, pad, in_h, in_h};
        idx.w = params.add(name + ".w", static_cast<size_t>(cout),
                           static_cast<size_t>(cin) * kernel * kernel);
        idx.b = params.add(name + ".b", static_cast<size_t>(cout), 1);
        return idx;
    };

    int h = input_size;
    enc_strided.clear();
    enc_strided.push_back(add_conv("enc.conv0", 1, channels, 4, 2, 1, h));
    h /= 2;
    enc_strided.push_back(add_conv("enc.conv1", channels, channels, 4, 2, 1, h));
    h /= 2;
    enc_strided.push_back(add_conv("enc.conv2", channels, channels, 4, 2, 1, h));
    h /= 2;

    enc_res.clear();
    for (int b = 0; b < res_blocks; ++b) {
        const std::string base = "enc.res" + std::to_string(b);
        enc_res.push_back({add_conv(base + ".c3", channels, channels, 3, 1, 1, h),
                           add_conv(base + ".c1", channels, channels, 1, 1, 0, h)});
    }
    enc_proj = add_conv("enc.proj", channels, embed_dim, 1, 1, 0, h);

    dec_in = add_conv("dec.in", embed_dim, channels, 3, 1, 1, h);
    dec_res.clear();
    for (int b = 0; b < res_blocks; ++b) {
        const std::string base = "dec.res" + std::to_string(b);
        dec_res.push_back({add_conv(base + ".c3", channels, channels, 3, 1, 1, h),
                           add_conv(base + ".c1", channels, channels, 1, 1, 0, h)});
    }

    // Transposed convs are parameterized by the conv geometry that maps the
    // larger map back down; forward applies its adjoint.
    dec_strided.clear();
    dec_strided.push_back(add_conv("dec.convt0", channels, channels, 4, 2, 1, 2 * h));
    h *= 2;
    dec_strided.push_back(add_conv("dec.convt1", channels, channels, 4, 2, 1, 2 * h));
    h *= 2;
    dec_strided.push_back(add_conv("dec.convt2", 1, channels, 4, 2, 1, 2 * h));
}

template <class Real>
void VqVaeNet<Real>::init_weights(Rng& rng) {
    for (size_t i = 0; i < params.entry_count(); ++i) {
        const auto& e = params.entry(i);
        auto m = params.param(i);
        if (e.name.size() >= 2 && e.name.substr(e.name.size() - 2) == ".b") {
            m.setZero();
        } else {
            const double fan_in = static_cast<double>(e.cols);
            nn::fill_normal<Real>(m, rng, std::sqrt(2.0 / fan_in));
        }
    }
}

template <class Real>
auto VqVaeNet<Real>::encode_forward(const Mat& x, Workspace& ws) const -> Mat {
    ws.clear();
    ws.acts.push_back(x);
    Mat a = x;
    for (const auto& conv : enc_strided) {
        Mat cols, out;
        nn::conv_forward<Real>(a, weight(conv), bias(conv), conv.geom, cols, out);
        out = out.cwiseMax(Real(0));
        ws.cols.push_back(std::move(cols));
        ws.acts.push_back(out);
        a = std::move(out);
    }
    for (const auto& block : enc_res) {
        Mat cols3, t1;
        nn::conv_forward<Real>(a, weight(block[0]), bias(block[0]), block[0].geom, cols3, t1);
        t1 = t1.cwiseMax(Real(0));
        Mat t2 = (weight(block[1]) * t1).colwise() + bias(block[1]).col(0);
        t2 = t2.cwiseMax(Real(0));
        Mat out = a + t2;
        ws.cols.push_back(std::move(cols3));
        ws.acts.push_back(t1);
        ws.acts.push_back(t2);
        ws.acts.push_back(out);
        a = std::move(out);
    }
    ws.embeddings = (weight(enc_proj) * a).colwise() + bias(enc_proj).col(0);
    return ws.embeddings;
}

template <class Real>
void VqVaeNet<Real>::encode_backward(const Mat& dembeddings, const Workspace& ws,
                                     nn::AlignedVector<Real>& gradbuf) const {
    // Activation bookkeeping mirrors encode_forward: acts = [x, s0, s1, s2,
    // then per res block (t1, t2, out)], cols = [c0, c1, c2, res cols3...].
    const size_t res_act_base = 1 + enc_strided.size();

    Mat da;
    {
        const Mat& proj_in = ws.acts.back();
        grad_of(gradbuf, enc_proj.w).noalias() += dembeddings * proj_in.transpose();
        grad_of(gradbuf, enc_proj.b).col(0) += dembeddings.rowwise().sum();
        da = weight(enc_proj).transpose() * dembeddings;
    }

    for (size_t b = enc_res.size(); b-- > 0;) {
        const auto& block = enc_res[b];
        const Mat& t1 = ws.acts[res_act_base + 3 * b];
        const Mat& t2 = ws.acts[res_act_base + 3 * b + 1];
        const Mat& cols3 = ws.cols[enc_strided.size() + b];

        Mat dt2 = da.cwiseProduct((t2.array() > Real(0)).template cast<Real>().matrix());
        grad_of(gradbuf, block[1].w).noalias() += dt2 * t1.transpose();
        grad_of(gradbuf, block[1].b).col(0) += dt2.rowwise().sum();
        Mat dt1 = weight(block[1]).transpose() * dt2;
        dt1 = dt1.cwiseProduct((t1.array() > Real(0)).template cast<Real>().matrix());
        grad_of(gradbuf, block[0].w).noalias() += dt1 * cols3.transpose();
        grad_of(gradbuf, block[0].b).col(0) += dt1.rowwise().sum();
        Mat dskip;
        nn::conv_backward_input<Real>(dt1, weight(block[0]), block[0].geom, dskip);
        da += dskip;
    }

    for (size_t i = enc_strided.size(); i-- > 0;) {
        const auto& conv = enc_strided[i];
        const Mat& act = ws.acts[i + 1];
        Mat dpre = da.cwiseProduct((act.array() > Real(0)).template cast<Real>().matrix());
        grad_of(gradbuf, conv.w).noalias() += dpre * ws.cols[i].transpose();
        grad_of(gradbuf, conv.b).col(0) += dpre.rowwise().sum();
        if (i > 0) {
            Mat dprev;
            nn::conv_backward_input<Real>(dpre, weight(conv), conv.geom, dprev);
            da = std::move(dprev);
        }
    }
}

template <class Real>
auto VqVaeNet<Real>::decode_forward(const Mat& quantized, Workspace& ws) const -> Mat {
    ws.clear();
    ws.acts.push_back(quantized);
    Mat cols_in, a;
    nn::conv_forward<Real>(quantized, weight(dec_in), bias(dec_in), dec_in.geom, cols_in, a);
    ws.cols.push_back(std::move(cols_in));
    ws.acts.push_back(a);
    for (const auto& block : dec_res) {
        Mat cols3, t1;
        nn::conv_forward<Real>(a, weight(block[0]), bias(block[0]), block[0].geom, cols3, t1);
        t1 = t1.cwiseMax(Real(0));
        Mat t2 = (weight(block[1]) * t1).colwise() + bias(block[1]).col(0);
        t2 = t2.cwiseMax(Real(0));
        Mat out = a + t2;
        ws.cols.push_back(std::move(cols3));
        ws.acts.push_back(t1);
        ws.acts.push_back(t2);
        ws.acts.push_back(out);
        a = std::move(out);
    }
    for (size_t i = 0; i < dec_strided.size(); ++i) {
        const auto& conv = dec_strided[i];
        Mat out;
        nn::convtranspose_forward<Real>(a, weight(conv), bias(conv), conv.geom, out);
        if (i + 1 < dec_strided.size()) out = out.cwiseMax(Real(0));
        ws.acts.push_back(out);
        a = std::move(out);
    }
    ws.recon_pre = a;
    ws.recon = (Real(1) / (Real(1) + (-a.array()).exp())).matrix();
    return ws.recon;
}

template <class Real>
auto VqVaeNet<Real>::decode_backward(const Mat& drecon, const Workspace& ws,
                                     nn::AlignedVector<Real>& gradbuf) const -> Mat {
    // acts = [q, a_in, per res block (t1,t2,out), convt outputs x3].
    const size_t res_act_base = 2;
    const size_t convt_act_base = 2 + 3 * dec_res.size();

    Mat da = drecon.cwiseProduct(
        ws.recon.cwiseProduct((Mat::Ones(ws.recon.rows(), ws.recon.cols()) - ws.recon)));

    for (size_t i = dec_strided.size(); i-- > 0;) {
        const auto& conv = dec_strided[i];
        if (i + 1 < dec_strided.size()) {
            const Mat& act = ws.acts[convt_act_base + i];
            da = da.cwiseProduct((act.array() > Real(0)).template cast<Real>().matrix());
        }
        const Mat& small_in = i == 0 ? ws.acts[convt_act_base - 1] : ws.acts[convt_act_base + i - 1];
        grad_of(gradbuf, conv.b).col(0) += da.rowwise().sum();
        Mat dcols;
        nn::im2col<Real>(da, conv.geom, dcols);
        grad_of(gradbuf, conv.w).noalias() += small_in * dcols.transpose();
        Mat dsmall = weight(conv) * dcols;
        da = std::move(dsmall);
    }

    for (size_t b = dec_res.size(); b-- > 0;) {
        const auto& block = dec_res[b];
        const Mat& t1 = ws.acts[res_act_base + 3 * b];
        const Mat& t2 = ws.acts[res_act_base + 3 * b + 1];
        const Mat& cols3 = ws.cols[1 + b];

        Mat dt2 = da.cwiseProduct((t2.array() > Real(0)).template cast<Real>().matrix());
        grad_of(gradbuf, block[1].w).noalias() += dt2 * t1.transpose();
        grad_of(gradbuf, block[1].b).col(0) += dt2.rowwise().sum();
        Mat dt1 = weight(block[1]).transpose() * dt2;
        dt1 = dt1.cwiseProduct((t1.array() > Real(0)).template cast<Real>().matrix());
        grad_of(gradbuf, block[0].w).noalias() += dt1 * cols3.transpose();
        grad_of(gradbuf, block[0].b).col(0) += dt1.rowwise().sum();
        Mat dskip;
        nn::conv_backward_input<Real>(dt1, weight(block[0]), block[0].geom, dskip);
        da += dskip;
    }

    grad_of(gradbuf, dec_in.w).noalias() += da * ws.cols[0].transpose();
    grad_of(gradbuf, dec_in.b).col(0) += da.rowwise().sum();
    Mat dq;
    nn::conv_backward_input<Real>(da, weight(dec_in), dec_in.geom, dq);
    return dq;
}

} // namespace detail

} // namespace latentad
