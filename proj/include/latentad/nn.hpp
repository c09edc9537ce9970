#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "latentad/errors.hpp"
#include "latentad/rng.hpp"

namespace latentad::nn {

template <class Real>
using MatX = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <class Real>
using VecX = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

// Parameter and gradient buffers are mapped by Eigen; a fixed 64-byte
// alignment keeps every kernel's traversal identical across process runs,
// which bit-reproducibility depends on.
template <class T, size_t Alignment = 64>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U, Alignment>&) {}

    T* allocate(size_t n) {
        const size_t bytes = ((n * sizeof(T) + Alignment - 1) / Alignment) * Alignment;
        void* p = std::aligned_alloc(Alignment, bytes);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, size_t) noexcept { std::free(p); }

    template <class U>
    struct rebind {
        using other = AlignedAllocator<U, Alignment>;
    };
    bool operator==(const AlignedAllocator&) const { return true; }
    bool operator!=(const AlignedAllocator&) const { return false; }
};

template <class Real>
using AlignedVector = std::vector<Real, AlignedAllocator<Real>>;

// Flat parameter buffer with named matrix views. One contiguous array keeps
// the optimizer, serialization, and finite-difference checks trivial.
template <class Real>
class ParamStore {
public:
    struct Entry {
        std::string name;
        size_t offset = 0;
        size_t rows = 0;
        size_t cols = 0;
    };

    size_t add(const std::string& name, size_t rows, size_t cols) {
        Entry e{name, values_.size(), rows, cols};
        entries_.push_back(e);
        values_.resize(values_.size() + rows * cols, Real(0));
        grads_.resize(values_.size(), Real(0));
        return entries_.size() - 1;
    }

    Eigen::Map<MatX<Real>> param(size_t idx) {
        const Entry& e = entries_[idx];
        return Eigen::Map<MatX<Real>>(values_.data() + e.offset, e.rows, e.cols);
    }
    Eigen::Map<const MatX<Real>> param(size_t idx) const {
        const Entry& e = entries_[idx];
        return Eigen::Map<const MatX<Real>>(values_.data() + e.offset, e.rows, e.cols);
    }
    Eigen::Map<MatX<Real>> grad(size_t idx) {
        const Entry& e = entries_[idx];
        return Eigen::Map<MatX<Real>>(grads_.data() + e.offset, e.rows, e.cols);
    }

    void zero_grad() { std::fill(grads_.begin(), grads_.end(), Real(0)); }

    size_t size() const { return values_.size(); }
    size_t entry_count() const { return entries_.size(); }
    const Entry& entry(size_t idx) const { return entries_[idx]; }

    AlignedVector<Real>& values() { return values_; }
    const AlignedVector<Real>& values() const { return values_; }
    AlignedVector<Real>& grads() { return grads_; }

    // Accumulate another store's gradients (same registration order).
    void add_grads(const ParamStore& other) {
        for (size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
    }

private:
    AlignedVector<Real> values_;
    AlignedVector<Real> grads_;
    std::vector<Entry> entries_;
};

template <class Real>
struct Adam {
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.999);
    Real eps = Real(1e-8);
    std::vector<Real> m, v;
    long step_count = 0;

    void step(ParamStore<Real>& params, Real lr) {
        if (m.empty()) {
            m.assign(params.size(), Real(0));
            v.assign(params.size(), Real(0));
        }
        ++step_count;
        const Real bc1 = Real(1) - std::pow(beta1, Real(step_count));
        const Real bc2 = Real(1) - std::pow(beta2, Real(step_count));
        Real* w = params.values().data();
        const Real* g = params.grads().data();
        for (size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (Real(1) - beta1) * g[i];
            v[i] = beta2 * v[i] + (Real(1) - beta2) * g[i] * g[i];
            const Real mhat = m[i] / bc1;
            const Real vhat = v[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
};

template <class Real>
void fill_normal(Eigen::Map<MatX<Real>> m, Rng& rng, double stddev) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            m(i, j) = static_cast<Real>(rng.normal(0.0, stddev));
}

// ---------------------------------------------------------------------------
// Activations

template <class Real>
Real gelu(Real x) {
    return x * Real(0.5) * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
}

template <class Real>
Real gelu_grad(Real x) {
    const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
    const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.3989422804014327);
    return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// LayerNorm over rows (feature dimension) of each column.

template <class Real>
struct LayerNormCache {
    MatX<Real> normalized; // (x - mean) / std per column
    VecX<Real> inv_std;
};

template <class Real>
void layernorm_forward(const MatX<Real>& x, const VecX<Real>& gain, const VecX<Real>& bias,
                       MatX<Real>& out, LayerNormCache<Real>& cache, Real eps = Real(1e-5)) {
    const Eigen::Index d = x.rows();
    const Eigen::Index n = x.cols();
    out.resize(d, n);
    cache.normalized.resize(d, n);
    cache.inv_std.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const Real mean = x.col(j).mean();
        const Real var = (x.col(j).array() - mean).square().sum() / Real(d);
        const Real inv_std = Real(1) / std::sqrt(var + eps);
        cache.inv_std(j) = inv_std;
        cache.normalized.col(j) = (x.col(j).array() - mean) * inv_std;
        out.col(j) = cache.normalized.col(j).cwiseProduct(gain) + bias;
    }
}

template <class Real>
void layernorm_backward(const MatX<Real>& dout, const VecX<Real>& gain,
                        const LayerNormCache<Real>& cache, MatX<Real>& dx, VecX<Real>& dgain,
                        VecX<Real>& dbias) {
    const Eigen::Index d = cache.normalized.rows();
    const Eigen::Index n = cache.normalized.cols();
    dx.resize(d, n);
    dgain.setZero(d);
    dbias.setZero(d);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto xhat = cache.normalized.col(j);
        const VecX<Real> dy = dout.col(j).cwiseProduct(gain);
        dgain += dout.col(j).cwiseProduct(xhat);
        dbias += dout.col(j);
        const Real mean_dy = dy.mean();
        const Real mean_dy_xhat = dy.cwiseProduct(xhat).mean();
        dx.col(j) =
            (dy.array() - mean_dy - xhat.array() * mean_dy_xhat) * cache.inv_std(j);
    }
}

// ---------------------------------------------------------------------------
// Convolution geometry and im2col/col2im. Feature maps are stored as
// (channels, height*width) matrices, spatial index = r*width + c.

struct ConvGeom {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int pad = 1;
    int in_h = 0, in_w = 0;

    int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    int patch_rows() const { return in_channels * kernel * kernel; }
};

template <class Real>
void im2col(const MatX<Real>& input, const ConvGeom& g, MatX<Real>& cols) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    cols.setZero(g.patch_rows(), static_cast<Eigen::Index>(oh) * ow);
    for (int r_out = 0; r_out < oh; ++r_out) {
        for (int c_out = 0; c_out < ow; ++c_out) {
            const Eigen::Index col = static_cast<Eigen::Index>(r_out) * ow + c_out;
            for (int kr = 0; kr < k; ++kr) {
                const int r_in = r_out * g.stride - g.pad + kr;
                if (r_in < 0 || r_in >= g.in_h) continue;
                for (int kc = 0; kc < k; ++kc) {
                    const int c_in = c_out * g.stride - g.pad + kc;
                    if (c_in < 0 || c_in >= g.in_w) continue;
                    const Eigen::Index spatial = static_cast<Eigen::Index>(r_in) * g.in_w + c_in;
                    for (int ch = 0; ch < g.in_channels; ++ch)
                        cols(static_cast<Eigen::Index>(ch) * k * k + kr * k + kc, col) =
                            input(ch, spatial);
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add patch columns back into an image.
template <class Real>
void col2im(const MatX<Real>& cols, const ConvGeom& g, MatX<Real>& output) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    output.setZero(g.in_channels, static_cast<Eigen::Index>(g.in_h) * g.in_w);
    for (int r_out = 0; r_out < oh; ++r_out) {
        for (int c_out = 0; c_out < ow; ++c_out) {
            const Eigen::Index col = static_cast<Eigen::Index>(r_out) * ow + c_out;
            for (int kr = 0; kr < k; ++kr) {
                const int r_in = r_out * g.stride - g.pad + kr;
                if (r_in < 0 || r_in >= g.in_h) continue;
                for (int kc = 0; kc < k; ++kc) {
                    const int c_in = c_out * g.stride - g.pad + kc;
                    if (c_in < 0 || c_in >= g.in_w) continue;
                    const Eigen::Index spatial = static_cast<Eigen::Index>(r_in) * g.in_w + c_in;
                    for (int ch = 0; ch < g.in_channels; ++ch)
                        output(ch, spatial) +=
                            cols(static_cast<Eigen::Index>(ch) * k * k + kr * k + kc, col);
                }
            }
        }
    }
}

// Strided convolution: out = W * im2col(x) + b. W is (out_channels, patch_rows).
template <class Real>
void conv_forward(const MatX<Real>& input, const Eigen::Map<const MatX<Real>>& weight,
                  const Eigen::Map<const MatX<Real>>& bias, const ConvGeom& g, MatX<Real>& cols,
                  MatX<Real>& output) {
    im2col(input, g, cols);
    output.noalias() = weight * cols;
    output.colwise() += bias.col(0);
}

// Gradient w.r.t. conv input: dx = col2im(W^T * dout).
template <class Real>
void conv_backward_input(const MatX<Real>& dout, const Eigen::Map<const MatX<Real>>& weight,
                         const ConvGeom& g, MatX<Real>& dinput) {
    MatX<Real> dcols = weight.transpose() * dout;
    col2im(dcols, g, dinput);
}

// Transposed convolution maps the conv geometry backwards: small -> big.
// Forward of the transposed layer is the adjoint of conv_forward.
template <class Real>
void convtranspose_forward(const MatX<Real>& input, const Eigen::Map<const MatX<Real>>& weight,
                           const Eigen::Map<const MatX<Real>>& bias, const ConvGeom& g,
                           MatX<Real>& output) {
    MatX<Real> cols = weight.transpose() * input;
    col2im(cols, g, output);
    output.colwise() += bias.col(0);
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy over logit columns.

template <class Real>
struct SoftmaxXentResult {
    double loss = 0.0;       // mean over columns
    MatX<Real> probs;        // softmax per column
};

template <class Real>
SoftmaxXentResult<Real> softmax_xent_forward(const MatX<Real>& logits,
                                             const std::vector<int>& targets) {
    const Eigen::Index v = logits.rows();
    const Eigen::Index n = logits.cols();
    SoftmaxXentResult<Real> res;
    res.probs.resize(v, n);
    double loss = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const Real mx = logits.col(j).maxCoeff();
        VecX<Real> e = (logits.col(j).array() - mx).exp();
        const Real z = e.sum();
        res.probs.col(j) = e / z;
        loss -= static_cast<double>(logits(targets[j], j) - mx) - std::log(static_cast<double>(z));
    }
    res.loss = loss / static_cast<double>(n);
    return res;
}

template <class Real>
MatX<Real> softmax_xent_backward(const SoftmaxXentResult<Real>& fwd,
                                 const std::vector<int>& targets) {
    MatX<Real> dlogits = fwd.probs;
    const Real scale = Real(1) / static_cast<Real>(dlogits.cols());
    for (Eigen::Index j = 0; j < dlogits.cols(); ++j) {
        dlogits(targets[j], j) -= Real(1);
        dlogits.col(j) *= scale;
    }
    return dlogits;
}

} // namespace latentad::nn
