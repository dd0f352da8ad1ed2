#pragma once

#include <cstddef>
#include <cstring>
#include <vector>

#include <Eigen/Core>

#include "ganseg/core/autodiff.hpp"
#include "ganseg/core/tensor.hpp"

namespace ganseg {

/// Cubic-kernel convolution geometry, identical along the three spatial axes.
struct ConvGeom {
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 1;

    std::size_t out_dim(std::size_t in) const {
        return (in + 2 * pad - kernel) / stride + 1;
    }
    /// Spatial size produced by the transposed direction.
    std::size_t transpose_out_dim(std::size_t in) const {
        return (in - 1) * stride + kernel - 2 * pad;
    }
};

namespace convdetail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

/// Gather one item's patch matrix: rows are output voxels (x-major), columns
/// are (kx,ky,kz,ci). `src` points at the item's (X,Y,Z,C) block.
template <typename T>
void im2col(const T* src, std::size_t X, std::size_t Y, std::size_t Z, std::size_t C,
            const ConvGeom& g, T* col) {
    const std::size_t k = g.kernel;
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(g.pad);
    const std::size_t s = g.stride;
    const std::size_t Xo = g.out_dim(X), Yo = g.out_dim(Y), Zo = g.out_dim(Z);
    const std::size_t row_w = k * k * k * C;
    for (std::size_t kx = 0; kx < k; ++kx)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kz = 0; kz < k; ++kz) {
                const std::size_t cb = ((kx * k + ky) * k + kz) * C;
                for (std::size_t xo = 0; xo < Xo; ++xo) {
                    const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(xo * s + kx) - p;
                    const bool xok = xi >= 0 && xi < static_cast<std::ptrdiff_t>(X);
                    for (std::size_t yo = 0; yo < Yo; ++yo) {
                        const std::ptrdiff_t yi =
                            static_cast<std::ptrdiff_t>(yo * s + ky) - p;
                        const bool yok = yi >= 0 && yi < static_cast<std::ptrdiff_t>(Y);
                        T* dst = col + ((xo * Yo + yo) * Zo) * row_w + cb;
                        if (!xok || !yok) {
                            for (std::size_t zo = 0; zo < Zo; ++zo, dst += row_w)
                                std::memset(dst, 0, C * sizeof(T));
                            continue;
                        }
                        const T* line = src + ((static_cast<std::size_t>(xi) * Y +
                                                static_cast<std::size_t>(yi)) *
                                               Z) *
                                                  C;
                        for (std::size_t zo = 0; zo < Zo; ++zo, dst += row_w) {
                            const std::ptrdiff_t zi =
                                static_cast<std::ptrdiff_t>(zo * s + kz) - p;
                            if (zi >= 0 && zi < static_cast<std::ptrdiff_t>(Z))
                                std::memcpy(dst, line + static_cast<std::size_t>(zi) * C,
                                            C * sizeof(T));
                            else
                                std::memset(dst, 0, C * sizeof(T));
                        }
                    }
                }
            }
}

/// Adjoint of im2col: scatter-add the patch matrix back into the item block.
template <typename T>
void col2im_add(const T* col, std::size_t X, std::size_t Y, std::size_t Z, std::size_t C,
                const ConvGeom& g, T* dst) {
    const std::size_t k = g.kernel;
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(g.pad);
    const std::size_t s = g.stride;
    const std::size_t Xo = g.out_dim(X), Yo = g.out_dim(Y), Zo = g.out_dim(Z);
    const std::size_t row_w = k * k * k * C;
    for (std::size_t kx = 0; kx < k; ++kx)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kz = 0; kz < k; ++kz) {
                const std::size_t cb = ((kx * k + ky) * k + kz) * C;
                for (std::size_t xo = 0; xo < Xo; ++xo) {
                    const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(xo * s + kx) - p;
                    if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(X)) continue;
                    for (std::size_t yo = 0; yo < Yo; ++yo) {
                        const std::ptrdiff_t yi =
                            static_cast<std::ptrdiff_t>(yo * s + ky) - p;
                        if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(Y)) continue;
                        const T* srow = col + ((xo * Yo + yo) * Zo) * row_w + cb;
                        T* line = dst + ((static_cast<std::size_t>(xi) * Y +
                                          static_cast<std::size_t>(yi)) *
                                         Z) *
                                            C;
                        for (std::size_t zo = 0; zo < Zo; ++zo, srow += row_w) {
                            const std::ptrdiff_t zi =
                                static_cast<std::ptrdiff_t>(zo * s + kz) - p;
                            if (zi < 0 || zi >= static_cast<std::ptrdiff_t>(Z)) continue;
                            T* cell = line + static_cast<std::size_t>(zi) * C;
                            for (std::size_t ci = 0; ci < C; ++ci) cell[ci] += srow[ci];
                        }
                    }
                }
            }
}

} // namespace convdetail

// ---------------------------------------------------------------------------
// Plain-tensor kernels
// ---------------------------------------------------------------------------

/// x: (B,X,Y,Z,Cin), w: (k^3*Cin, Cout), bias: (Cout) or null -> (B,Xo,Yo,Zo,Cout)
template <typename T>
Tensor<T> conv3d_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                     const ConvGeom& g) {
    const auto& s = x.shape();
    if (s.size() != 5) throw shape_error("conv3d: input must be 5-d, got " + to_string(s));
    const std::size_t B = s[0], X = s[1], Y = s[2], Z = s[3], C = s[4];
    const std::size_t kc = g.kernel * g.kernel * g.kernel * C;
    if (w.rank() != 2 || w.dim(0) != kc)
        throw shape_error("conv3d: weight " + to_string(w.shape()) + " does not match k^3*Cin=" +
                          std::to_string(kc));
    const std::size_t Cout = w.dim(1);
    const std::size_t Xo = g.out_dim(X), Yo = g.out_dim(Y), Zo = g.out_dim(Z);
    const std::size_t nvox = Xo * Yo * Zo;
    Tensor<T> out(Shape{B, Xo, Yo, Zo, Cout});

#pragma omp parallel
    {
        std::vector<T> col(nvox * kc);
#pragma omp for schedule(static)
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(B); ++b) {
            convdetail::im2col(x.data() + b * X * Y * Z * C, X, Y, Z, C, g, col.data());
            convdetail::EMap<T> om(out.data() + b * nvox * Cout, nvox, Cout);
            om.noalias() = convdetail::ECMap<T>(col.data(), nvox, kc) *
                           convdetail::ECMap<T>(w.data(), kc, Cout);
            if (bias) {
                const T* bp = bias->data();
                T* op = out.data() + b * nvox * Cout;
                for (std::size_t v = 0; v < nvox; ++v)
                    for (std::size_t c = 0; c < Cout; ++c) op[v * Cout + c] += bp[c];
            }
        }
    }
    return out;
}

/// Accumulates input/weight/bias gradients. Any output pointer may be null.
template <typename T>
void conv3d_bwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout,
                Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb, const ConvGeom& g) {
    const auto& s = x.shape();
    const std::size_t B = s[0], X = s[1], Y = s[2], Z = s[3], C = s[4];
    const std::size_t kc = g.kernel * g.kernel * g.kernel * C;
    const std::size_t Cout = w.dim(1);
    const std::size_t Xo = g.out_dim(X), Yo = g.out_dim(Y), Zo = g.out_dim(Z);
    const std::size_t nvox = Xo * Yo * Zo;

    // Per-item weight-gradient slabs, merged in batch order afterwards so the
    // result does not depend on the thread count.
    std::vector<Tensor<T>> gw_items;
    if (gw) gw_items.assign(B, Tensor<T>(Shape{kc, Cout}));

#pragma omp parallel
    {
        std::vector<T> col(nvox * kc);
        std::vector<T> gcol(gx ? nvox * kc : 0);
#pragma omp for schedule(static)
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(B); ++b) {
            convdetail::ECMap<T> gm(gout.data() + b * nvox * Cout, nvox, Cout);
            if (gw) {
                convdetail::im2col(x.data() + b * X * Y * Z * C, X, Y, Z, C, g, col.data());
                convdetail::EMap<T>(gw_items[b].data(), kc, Cout).noalias() =
                    convdetail::ECMap<T>(col.data(), nvox, kc).transpose() * gm;
            }
            if (gx) {
                convdetail::EMap<T>(gcol.data(), nvox, kc).noalias() =
                    gm * convdetail::ECMap<T>(w.data(), kc, Cout).transpose();
                convdetail::col2im_add(gcol.data(), X, Y, Z, C, g,
                                       gx->data() + b * X * Y * Z * C);
            }
        }
    }
    if (gw)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < gw->size(); ++i) (*gw)[i] += gw_items[b][i];
    if (gb) {
        for (std::size_t b = 0; b < B; ++b) {
            const T* gp = gout.data() + b * nvox * Cout;
            for (std::size_t v = 0; v < nvox; ++v)
                for (std::size_t c = 0; c < Cout; ++c) (*gb)[c] += gp[v * Cout + c];
        }
    }
}

/// Transposed convolution. x: (B,X,Y,Z,Cin), w: (k^3*Cout, Cin) -> (B,Xo,Yo,Zo,Cout)
/// with Xo = (X-1)*stride + k - 2*pad. Forward is the adjoint of conv3d_fwd.
template <typename T>
Tensor<T> conv3d_transpose_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                               const ConvGeom& g) {
    const auto& s = x.shape();
    if (s.size() != 5)
        throw shape_error("conv3d_transpose: input must be 5-d, got " + to_string(s));
    const std::size_t B = s[0], X = s[1], Y = s[2], Z = s[3], C = s[4];
    const std::size_t Xo = g.transpose_out_dim(X), Yo = g.transpose_out_dim(Y),
                      Zo = g.transpose_out_dim(Z);
    if (w.rank() != 2 || w.dim(1) != C)
        throw shape_error("conv3d_transpose: weight " + to_string(w.shape()) +
                          " does not match Cin=" + std::to_string(C));
    const std::size_t kco = w.dim(0); // k^3 * Cout
    const std::size_t Cout = kco / (g.kernel * g.kernel * g.kernel);
    const std::size_t nin = X * Y * Z;
    Tensor<T> out(Shape{B, Xo, Yo, Zo, Cout});

#pragma omp parallel
    {
        std::vector<T> col(nin * kco);
#pragma omp for schedule(static)
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(B); ++b) {
            convdetail::EMap<T>(col.data(), nin, kco).noalias() =
                convdetail::ECMap<T>(x.data() + b * nin * C, nin, C) *
                convdetail::ECMap<T>(w.data(), kco, C).transpose();
            T* op = out.data() + b * Xo * Yo * Zo * Cout;
            std::memset(op, 0, Xo * Yo * Zo * Cout * sizeof(T));
            convdetail::col2im_add(col.data(), Xo, Yo, Zo, Cout, g, op);
            if (bias) {
                const T* bp = bias->data();
                for (std::size_t v = 0; v < Xo * Yo * Zo; ++v)
                    for (std::size_t c = 0; c < Cout; ++c) op[v * Cout + c] += bp[c];
            }
        }
    }
    return out;
}

template <typename T>
void conv3d_transpose_bwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout,
                          Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb, const ConvGeom& g) {
    const auto& s = x.shape();
    const std::size_t B = s[0], X = s[1], Y = s[2], Z = s[3], C = s[4];
    const std::size_t Xo = g.transpose_out_dim(X), Yo = g.transpose_out_dim(Y),
                      Zo = g.transpose_out_dim(Z);
    const std::size_t kco = w.dim(0);
    const std::size_t Cout = kco / (g.kernel * g.kernel * g.kernel);
    const std::size_t nin = X * Y * Z;

    std::vector<Tensor<T>> gw_items;
    if (gw) gw_items.assign(B, Tensor<T>(Shape{kco, C}));

#pragma omp parallel
    {
        std::vector<T> gcol(nin * kco);
#pragma omp for schedule(static)
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(B); ++b) {
            convdetail::im2col(gout.data() + b * Xo * Yo * Zo * Cout, Xo, Yo, Zo, Cout, g,
                               gcol.data());
            if (gx) {
                convdetail::EMat<T> gxm = convdetail::ECMap<T>(gcol.data(), nin, kco) *
                                          convdetail::ECMap<T>(w.data(), kco, C);
                T* gp = gx->data() + b * nin * C;
                const T* sp = gxm.data();
                for (std::size_t i = 0; i < nin * C; ++i) gp[i] += sp[i];
            }
            if (gw) {
                convdetail::EMap<T>(gw_items[b].data(), kco, C).noalias() =
                    convdetail::ECMap<T>(gcol.data(), nin, kco).transpose() *
                    convdetail::ECMap<T>(x.data() + b * nin * C, nin, C);
            }
        }
    }
    if (gw)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < gw->size(); ++i) (*gw)[i] += gw_items[b][i];
    if (gb) {
        const std::size_t nvox = Xo * Yo * Zo;
        for (std::size_t b = 0; b < B; ++b) {
            const T* gp = gout.data() + b * nvox * Cout;
            for (std::size_t v = 0; v < nvox; ++v)
                for (std::size_t c = 0; c < Cout; ++c) (*gb)[c] += gp[v * Cout + c];
        }
    }
}

/// Non-overlapping window mean over each spatial axis (window = stride = k).
template <typename T>
Tensor<T> avg_pool3d_fwd(const Tensor<T>& x, std::size_t k) {
    const auto& s = x.shape();
    if (s.size() != 5) throw shape_error("avg_pool3d: input must be 5-d");
    const std::size_t B = s[0], X = s[1], Y = s[2], Z = s[3], C = s[4];
    if (X % k || Y % k || Z % k)
        throw shape_error("avg_pool3d: spatial dims " + to_string(s) +
                          " not divisible by window " + std::to_string(k));
    const std::size_t Xo = X / k, Yo = Y / k, Zo = Z / k;
    const T inv = T(1) / static_cast<T>(k * k * k);
    Tensor<T> out(Shape{B, Xo, Yo, Zo, C});
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(B); ++b) {
        const T* xp = x.data() + b * X * Y * Z * C;
        T* op = out.data() + b * Xo * Yo * Zo * C;
        for (std::size_t xo = 0; xo < Xo; ++xo)
            for (std::size_t yo = 0; yo < Yo; ++yo)
                for (std::size_t zo = 0; zo < Zo; ++zo) {
                    T* cell = op + ((xo * Yo + yo) * Zo + zo) * C;
                    for (std::size_t dx = 0; dx < k; ++dx)
                        for (std::size_t dy = 0; dy < k; ++dy)
                            for (std::size_t dz = 0; dz < k; ++dz) {
                                const T* src =
                                    xp + (((xo * k + dx) * Y + yo * k + dy) * Z + zo * k +
                                          dz) *
                                             C;
                                for (std::size_t c = 0; c < C; ++c) cell[c] += src[c];
                            }
                    for (std::size_t c = 0; c < C; ++c) cell[c] *= inv;
                }
    }
    return out;
}

template <typename T>
void avg_pool3d_bwd(const Shape& xshape, const Tensor<T>& gout, Tensor<T>* gx,
                    std::size_t k) {
    const std::size_t B = xshape[0], X = xshape[1], Y = xshape[2], Z = xshape[3],
                      C = xshape[4];
    const std::size_t Xo = X / k, Yo = Y / k, Zo = Z / k;
    const T inv = T(1) / static_cast<T>(k * k * k);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(B); ++b) {
        const T* gp = gout.data() + b * Xo * Yo * Zo * C;
        T* xp = gx->data() + b * X * Y * Z * C;
        for (std::size_t xo = 0; xo < Xo; ++xo)
            for (std::size_t yo = 0; yo < Yo; ++yo)
                for (std::size_t zo = 0; zo < Zo; ++zo) {
                    const T* cell = gp + ((xo * Yo + yo) * Zo + zo) * C;
                    for (std::size_t dx = 0; dx < k; ++dx)
                        for (std::size_t dy = 0; dy < k; ++dy)
                            for (std::size_t dz = 0; dz < k; ++dz) {
                                T* dst =
                                    xp + (((xo * k + dx) * Y + yo * k + dy) * Z + zo * k +
                                          dz) *
                                             C;
                                for (std::size_t c = 0; c < C; ++c)
                                    dst[c] += cell[c] * inv;
                            }
                }
    }
}

// ---------------------------------------------------------------------------
// Autodiff wrappers
// ---------------------------------------------------------------------------

namespace ad {

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const ConvGeom& g) {
    Tensor<T> out = conv3d_fwd(x.value(), w.value(), &bias.value(), g);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.node();
    return Var<T>::op(std::move(out), {x, w, bias}, [xn, wn, bn, g](Node<T>& self) {
        conv3d_bwd(xn->value, wn->value, self.grad,
                   xn->requires_grad ? &xn->grad_buffer() : nullptr,
                   wn->requires_grad ? &wn->grad_buffer() : nullptr,
                   bn->requires_grad ? &bn->grad_buffer() : nullptr, g);
    });
}

template <typename T>
Var<T> conv3d_transpose(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
                        const ConvGeom& g) {
    Tensor<T> out = conv3d_transpose_fwd(x.value(), w.value(), &bias.value(), g);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.node();
    return Var<T>::op(std::move(out), {x, w, bias}, [xn, wn, bn, g](Node<T>& self) {
        conv3d_transpose_bwd(xn->value, wn->value, self.grad,
                             xn->requires_grad ? &xn->grad_buffer() : nullptr,
                             wn->requires_grad ? &wn->grad_buffer() : nullptr,
                             bn->requires_grad ? &bn->grad_buffer() : nullptr, g);
    });
}

template <typename T>
Var<T> avg_pool3d(const Var<T>& x, std::size_t k) {
    Tensor<T> out = avg_pool3d_fwd(x.value(), k);
    auto xn = x.node();
    Shape xs = x.value().shape();
    return Var<T>::op(std::move(out), {x}, [xn, xs, k](Node<T>& self) {
        if (!xn->requires_grad) return;
        avg_pool3d_bwd(xs, self.grad, &xn->grad_buffer(), k);
    });
}

/// Batch normalization over all axes except the last. In training mode the
/// batch statistics are returned through `batch_mean`/`batch_var` (biased) so
/// the caller can maintain running averages; in eval mode the provided
/// running statistics are used as constants.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, bool training,
                  const Tensor<T>& running_mean, const Tensor<T>& running_var,
                  Tensor<T>* batch_mean, Tensor<T>* batch_var, T eps = T(1e-5)) {
    const auto& xs = x.value().shape();
    const std::size_t C = xs.back();
    const std::size_t rows = x.value().size() / C;
    if (gamma.value().size() != C || beta.value().size() != C)
        throw shape_error("batch_norm: parameter length mismatch");

    Tensor<T> mean(Shape{C}), var(Shape{C});
    if (training) {
        const T* xp = x.value().data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < C; ++c) mean[c] += xp[r * C + c];
        for (std::size_t c = 0; c < C; ++c) mean[c] /= static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                T d = xp[r * C + c] - mean[c];
                var[c] += d * d;
            }
        for (std::size_t c = 0; c < C; ++c) var[c] /= static_cast<T>(rows);
        if (batch_mean) *batch_mean = mean;
        if (batch_var) *batch_var = var;
    } else {
        mean = running_mean;
        var = running_var;
    }

    Tensor<T> inv_std(Shape{C});
    for (std::size_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);

    Tensor<T> out(xs);
    {
        const T* xp = x.value().data();
        T* op = out.data();
        const T* gp = gamma.value().data();
        const T* bp = beta.value().data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < C; ++c)
                op[r * C + c] = gp[c] * (xp[r * C + c] - mean[c]) * inv_std[c] + bp[c];
    }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return Var<T>::op(
        std::move(out), {x, gamma, beta},
        [xn, gn, bn, mean, inv_std, training, rows, C](Node<T>& self) {
            const T* xp = xn->value.data();
            const T* gp = gn->value.data();
            const T* go = self.grad.data();
            if (bn->requires_grad) {
                Tensor<T>& gb = bn->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c) gb[c] += go[r * C + c];
            }
            if (gn->requires_grad) {
                Tensor<T>& gg = gn->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        gg[c] += go[r * C + c] * (xp[r * C + c] - mean[c]) * inv_std[c];
            }
            if (!xn->requires_grad) return;
            Tensor<T>& gx = xn->grad_buffer();
            if (!training) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        gx[r * C + c] += go[r * C + c] * gp[c] * inv_std[c];
                return;
            }
            // d/dx of the batch-statistics path.
            Tensor<T> sum_g(Shape{C}), sum_gx(Shape{C});
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    T xh = (xp[r * C + c] - mean[c]) * inv_std[c];
                    sum_g[c] += go[r * C + c];
                    sum_gx[c] += go[r * C + c] * xh;
                }
            const T invn = T(1) / static_cast<T>(rows);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    T xh = (xp[r * C + c] - mean[c]) * inv_std[c];
                    gx[r * C + c] += gp[c] * inv_std[c] *
                                     (go[r * C + c] - invn * sum_g[c] - xh * invn * sum_gx[c]);
                }
        });
}

} // namespace ad
} // namespace ganseg
