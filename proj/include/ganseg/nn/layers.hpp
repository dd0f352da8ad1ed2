#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ganseg/core/autodiff.hpp"
#include "ganseg/core/conv_ops.hpp"
#include "ganseg/core/random.hpp"

namespace ganseg::nn {

template <typename T>
struct ParamRef {
    std::string name;
    Var<T> var;
};

template <typename T>
struct BufferRef {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
Tensor<T> gaussian_init(Shape shape, T stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(rng.normal()) * stddev;
    return t;
}

/// 3-d convolution, optionally weight-normalized (w = g * v / ||v|| with the
/// norm taken per output channel).
template <typename T>
class Conv3dLayer {
public:
    Conv3dLayer() = default;

    Conv3dLayer(std::size_t in_c, std::size_t out_c, ConvGeom geom, bool weight_norm,
                Rng& rng)
        : geom_(geom), wn_(weight_norm) {
        const std::size_t fan_in = geom.kernel * geom.kernel * geom.kernel * in_c;
        const T stddev = std::sqrt(T(2) / static_cast<T>(fan_in));
        v_ = Var<T>::leaf(gaussian_init<T>(Shape{fan_in, out_c}, stddev, rng), true);
        b_ = Var<T>::leaf(Tensor<T>(Shape{out_c}), true);
        if (wn_) {
            // g starts at ||v|| so the initial effective weight equals v.
            Tensor<T> g0(Shape{out_c});
            const std::size_t rows = fan_in, cols = out_c;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    g0[c] += v_.value()[r * cols + c] * v_.value()[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) g0[c] = std::sqrt(g0[c]);
            g_ = Var<T>::leaf(std::move(g0), true);
            renormalize_direction();
        }
    }

    Var<T> forward(const Var<T>& x) const {
        if (!wn_) return ad::conv3d(x, v_, b_, geom_);
        Var<T> norms = ad::colwise_l2norm(v_);
        Var<T> w = ad::scale_cols(v_, ad::div(g_, norms));
        return ad::conv3d(x, w, b_, geom_);
    }

    void params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + "/v", v_});
        if (wn_) out.push_back({prefix + "/g", g_});
        out.push_back({prefix + "/b", b_});
    }

    /// Project the direction tensor back to unit per-channel norm. The
    /// effective weight is invariant under this, so it only conditions the
    /// parameterization.
    void renormalize_direction() {
        if (!wn_) return;
        Tensor<T>& v = v_.value();
        const std::size_t cols = v.dim(1), rows = v.dim(0);
        for (std::size_t c = 0; c < cols; ++c) {
            T n = T(0);
            for (std::size_t r = 0; r < rows; ++r) n += v[r * cols + c] * v[r * cols + c];
            n = std::sqrt(n);
            for (std::size_t r = 0; r < rows; ++r) v[r * cols + c] /= n;
        }
    }

    bool weight_normalized() const { return wn_; }
    const Var<T>& direction() const { return v_; }

private:
    ConvGeom geom_;
    bool wn_ = false;
    Var<T> v_, g_, b_;
};

/// Transposed 3-d convolution, optionally weight-normalized per output channel.
template <typename T>
class ConvTranspose3dLayer {
public:
    ConvTranspose3dLayer() = default;

    ConvTranspose3dLayer(std::size_t in_c, std::size_t out_c, ConvGeom geom,
                         bool weight_norm, Rng& rng)
        : geom_(geom), wn_(weight_norm), out_c_(out_c) {
        const std::size_t k3 = geom.kernel * geom.kernel * geom.kernel;
        const T stddev = std::sqrt(T(2) / static_cast<T>(k3 * in_c));
        v_ = Var<T>::leaf(gaussian_init<T>(Shape{k3 * out_c, in_c}, stddev, rng), true);
        b_ = Var<T>::leaf(Tensor<T>(Shape{out_c}), true);
        if (wn_) {
            Tensor<T> g0(Shape{out_c});
            const std::size_t rows = k3 * out_c, cols = in_c;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    g0[r % out_c] += v_.value()[r * cols + c] * v_.value()[r * cols + c];
            for (std::size_t i = 0; i < out_c; ++i) g0[i] = std::sqrt(g0[i]);
            g_ = Var<T>::leaf(std::move(g0), true);
            renormalize_direction();
        }
    }

    Var<T> forward(const Var<T>& x) const {
        if (!wn_) return ad::conv3d_transpose(x, v_, b_, geom_);
        Var<T> norms = ad::l2norm_rowgroups(v_, out_c_);
        Var<T> w = ad::scale_rowgroups(v_, ad::div(g_, norms), out_c_);
        return ad::conv3d_transpose(x, w, b_, geom_);
    }

    void params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + "/v", v_});
        if (wn_) out.push_back({prefix + "/g", g_});
        out.push_back({prefix + "/b", b_});
    }

    void renormalize_direction() {
        if (!wn_) return;
        Tensor<T>& v = v_.value();
        const std::size_t rows = v.dim(0), cols = v.dim(1);
        std::vector<T> n(out_c_, T(0));
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                n[r % out_c_] += v[r * cols + c] * v[r * cols + c];
        for (std::size_t i = 0; i < out_c_; ++i) n[i] = std::sqrt(n[i]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] /= n[r % out_c_];
    }

    bool weight_normalized() const { return wn_; }
    const Var<T>& direction() const { return v_; }
    std::size_t out_channels() const { return out_c_; }

private:
    ConvGeom geom_;
    bool wn_ = false;
    std::size_t out_c_ = 0;
    Var<T> v_, b_, g_;
};

template <typename T>
class LinearLayer {
public:
    LinearLayer() = default;

    LinearLayer(std::size_t in_f, std::size_t out_f, Rng& rng) {
        const T stddev = std::sqrt(T(2) / static_cast<T>(in_f));
        w_ = Var<T>::leaf(gaussian_init<T>(Shape{in_f, out_f}, stddev, rng), true);
        b_ = Var<T>::leaf(Tensor<T>(Shape{out_f}), true);
    }

    Var<T> forward(const Var<T>& x) const {
        return ad::add_rowvec(ad::matmul(x, w_), b_);
    }

    void params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + "/w", w_});
        out.push_back({prefix + "/b", b_});
    }

private:
    Var<T> w_, b_;
};

template <typename T>
class BatchNormLayer {
public:
    BatchNormLayer() = default;

    explicit BatchNormLayer(std::size_t channels)
        : gamma_(Var<T>::leaf(Tensor<T>(Shape{channels}, T(1)), true)),
          beta_(Var<T>::leaf(Tensor<T>(Shape{channels}), true)),
          running_mean_(Shape{channels}), running_var_(Shape{channels}, T(1)) {}

    Var<T> forward(const Var<T>& x, bool training) {
        Tensor<T> bm, bv;
        Var<T> y = ad::batch_norm(x, gamma_, beta_, training, running_mean_, running_var_,
                                  &bm, &bv);
        if (training) {
            for (std::size_t c = 0; c < running_mean_.size(); ++c) {
                running_mean_[c] = (T(1) - momentum_) * running_mean_[c] + momentum_ * bm[c];
                running_var_[c] = (T(1) - momentum_) * running_var_[c] + momentum_ * bv[c];
            }
        }
        return y;
    }

    void params(const std::string& prefix, std::vector<ParamRef<T>>& out) {
        out.push_back({prefix + "/gamma", gamma_});
        out.push_back({prefix + "/beta", beta_});
    }

    void buffers(const std::string& prefix, std::vector<BufferRef<T>>& out) {
        out.push_back({prefix + "/running_mean", &running_mean_});
        out.push_back({prefix + "/running_var", &running_var_});
    }

private:
    Var<T> gamma_, beta_;
    Tensor<T> running_mean_, running_var_;
    T momentum_ = T(0.1);
};

} // namespace ganseg::nn
