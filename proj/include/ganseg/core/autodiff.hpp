#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ganseg/core/errors.hpp"
#include "ganseg/core/tensor.hpp"

namespace ganseg {

namespace detail {

template <typename T>
struct VarNode {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_ready = false; // grad allocated and zeroed for the current pass
    std::vector<std::shared_ptr<VarNode>> parents;
    // Reads this->grad, accumulates into the captured parents. Empty for leaves.
    std::function<void(VarNode&)> backward;

    void accumulate(const Tensor<T>& g) {
        if (!requires_grad) return;
        if (!grad_ready) {
            grad = Tensor<T>(value.shape());
            grad_ready = true;
        }
        T* dst = grad.data();
        const T* src = g.data();
        for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
    }

    void accumulate_at(std::size_t i, T g) {
        if (!requires_grad) return;
        if (!grad_ready) {
            grad = Tensor<T>(value.shape());
            grad_ready = true;
        }
        grad[i] += g;
    }

    Tensor<T>& grad_buffer() {
        if (!grad_ready) {
            grad = Tensor<T>(value.shape());
            grad_ready = true;
        }
        return grad;
    }
};

} // namespace detail

/// Handle to a node of the reverse-mode differentiation tape. Copying a Var
/// copies the handle, not the tensor.
template <typename T>
class Var {
public:
    using Node = detail::VarNode<T>;

    Var() = default;

    static Var leaf(Tensor<T> value, bool requires_grad = false) {
        Var v;
        v.n_ = std::make_shared<Node>();
        v.n_->value = std::move(value);
        v.n_->requires_grad = requires_grad;
        return v;
    }

    static Var scalar(T value) { return leaf(Tensor<T>(Shape{1}, value)); }

    static Var op(Tensor<T> value, std::vector<Var> parents,
                  std::function<void(Node&)> backward) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.requires_grad();
        Var v;
        v.n_ = std::make_shared<Node>();
        v.n_->value = std::move(value);
        v.n_->requires_grad = needs;
        if (needs) {
            v.n_->parents.reserve(parents.size());
            for (auto& p : parents) v.n_->parents.push_back(p.n_);
            v.n_->backward = std::move(backward);
        }
        return v;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor<T>& value() const { return n_->value; }
    Tensor<T>& value() { return n_->value; }
    bool requires_grad() const { return n_ && n_->requires_grad; }

    const Tensor<T>& grad() const {
        if (!n_->grad_ready) throw contract_error("Var::grad: no gradient accumulated");
        return n_->grad;
    }
    bool has_grad() const { return n_ && n_->grad_ready; }
    void zero_grad() {
        if (n_) n_->grad_ready = false;
    }

    T item() const {
        if (value().size() != 1) throw contract_error("Var::item: tensor is not scalar");
        return value()[0];
    }

    Var detach() const { return leaf(n_->value, false); }

    std::shared_ptr<Node> node() const { return n_; }

    /// Reverse pass from this scalar. Gradients accumulate into every node
    /// reachable through parents that has requires_grad set.
    void backward() {
        if (value().size() != 1) throw contract_error("backward: root must be scalar");
        // Iterative post-order over the parent DAG.
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->grad_buffer()[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backward && node->grad_ready) node->backward(*node);
        }
    }

private:
    std::shared_ptr<Node> n_;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

namespace ad {

template <typename T>
using Node = detail::VarNode<T>;

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor<T> out(a.value().shape());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::op(std::move(out), {a, b}, [an, bn](Node<T>& self) {
        an->accumulate(self.grad);
        bn->accumulate(self.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.value(), b.value(), "sub");
    Tensor<T> out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::op(std::move(out), {a, b}, [an, bn](Node<T>& self) {
        an->accumulate(self.grad);
        if (!bn->requires_grad) return;
        Tensor<T>& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor<T> out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::op(std::move(out), {a, b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T>& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
        }
    });
}

/// Elementwise division a / b.
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.value(), b.value(), "div");
    Tensor<T> out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::op(std::move(out), {a, b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T>& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                T bv = bn->value[i];
                g[i] -= self.grad[i] * an->value[i] / (bv * bv);
            }
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, c](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
    auto an = a.node();
    return Var<T>::op(std::move(out), {a},
                      [an](Node<T>& self) { an->accumulate(self.grad); });
}

namespace detail_ops {

/// Shared scaffolding for unary elementwise ops whose derivative is a
/// function of (input, output).
template <typename T, typename Fwd, typename Bwd>
Var<T> unary(const Var<T>& a, Fwd fwd, Bwd dfn) {
    Tensor<T> out(a.value().shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.value()[i]);
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, dfn](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * dfn(an->value[i], self.value[i]);
    });
}

} // namespace detail_ops

template <typename T>
Var<T> exp(const Var<T>& a) {
    return detail_ops::unary(
        a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
    return detail_ops::unary(
        a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
    return detail_ops::unary(
        a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
    return detail_ops::unary(
        a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    return detail_ops::unary(
        a,
        [](T x) {
            return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                             : std::exp(x) / (T(1) + std::exp(x));
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
    return detail_ops::unary(
        a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
    return detail_ops::unary(
        a, [slope](T x) { return x > T(0) ? x : slope * x; },
        [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    return leaky_relu(a, T(0));
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    Tensor<T> out(Shape{1}, a.value().sum());
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        T s = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    const T inv = T(1) / static_cast<T>(a.value().size());
    Tensor<T> out(Shape{1}, a.value().sum() * inv);
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, inv](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        T s = self.grad[0] * inv;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
    });
}

/// Weighted mean: sum(a * w) / sum(w), with w a constant tensor.
template <typename T>
Var<T> weighted_mean(const Var<T>& a, const Tensor<T>& w) {
    check_same_shape(a.value(), w, "weighted_mean");
    T wsum = w.sum();
    if (!(wsum > T(0)))
        throw invalid_input_error("weighted_mean: weights must have positive total mass");
    T acc = T(0);
    for (std::size_t i = 0; i < w.size(); ++i) acc += a.value()[i] * w[i];
    Tensor<T> out(Shape{1}, acc / wsum);
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, w, wsum](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        T s = self.grad[0] / wsum;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * w[i];
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape new_shape) {
    Tensor<T> out = a.value().reshaped(std::move(new_shape));
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

/// (m,k) x (k,n) -> (m,n)
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto& as = a.value().shape();
    const auto& bs = b.value().shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        throw shape_error("matmul: incompatible " + to_string(as) + " x " + to_string(bs));
    const std::size_t m = as[0], k = as[1], n = bs[1];
    Tensor<T> out(Shape{m, n});
    EMap<T>(out.data(), m, n).noalias() =
        ECMap<T>(a.value().data(), m, k) * ECMap<T>(b.value().data(), k, n);
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::op(std::move(out), {a, b}, [an, bn, m, k, n](Node<T>& self) {
        ECMap<T> g(self.grad.data(), m, n);
        if (an->requires_grad) {
            EMap<T>(an->grad_buffer().data(), m, k).noalias() +=
                g * ECMap<T>(bn->value.data(), k, n).transpose();
        }
        if (bn->requires_grad) {
            EMap<T>(bn->grad_buffer().data(), k, n).noalias() +=
                ECMap<T>(an->value.data(), m, k).transpose() * g;
        }
    });
}

/// a (N,C) + row vector b (C), broadcast over rows.
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
    const auto& as = a.value().shape();
    const std::size_t c = b.value().size();
    if (as.empty() || as.back() != c)
        throw shape_error("add_rowvec: last axis " + to_string(as) + " vs length " +
                          std::to_string(c));
    const std::size_t rows = a.value().size() / c;
    Tensor<T> out(as);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j)
            out[r * c + j] = a.value()[r * c + j] + b.value()[j];
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::op(std::move(out), {a, b}, [an, bn, rows, c](Node<T>& self) {
        an->accumulate(self.grad);
        if (!bn->requires_grad) return;
        Tensor<T>& g = bn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j];
    });
}

/// Column-wise L2 norms of a 2-d tensor (R,C) -> (C). Used by weight
/// normalization, where each output channel is a column.
template <typename T>
Var<T> colwise_l2norm(const Var<T>& w) {
    const auto& s = w.value().shape();
    if (s.size() != 2) throw shape_error("colwise_l2norm: expected 2-d, got " + to_string(s));
    const std::size_t rows = s[0], cols = s[1];
    Tensor<T> out(Shape{cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            T v = w.value()[r * cols + c];
            out[c] += v * v;
        }
    for (std::size_t c = 0; c < cols; ++c) out[c] = std::sqrt(out[c]);
    auto wn = w.node();
    return Var<T>::op(std::move(out), {w}, [wn, rows, cols](Node<T>& self) {
        if (!wn->requires_grad) return;
        Tensor<T>& g = wn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                g[r * cols + c] +=
                    self.grad[c] * wn->value[r * cols + c] / self.value[c];
    });
}

/// Scale column c of a 2-d tensor by s[c].
template <typename T>
Var<T> scale_cols(const Var<T>& w, const Var<T>& s) {
    const auto& ws = w.value().shape();
    if (ws.size() != 2 || s.value().size() != ws[1])
        throw shape_error("scale_cols: " + to_string(ws) + " vs scale length " +
                          std::to_string(s.value().size()));
    const std::size_t rows = ws[0], cols = ws[1];
    Tensor<T> out(ws);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = w.value()[r * cols + c] * s.value()[c];
    auto wn = w.node();
    auto sn = s.node();
    return Var<T>::op(std::move(out), {w, s}, [wn, sn, rows, cols](Node<T>& self) {
        if (wn->requires_grad) {
            Tensor<T>& g = wn->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    g[r * cols + c] += self.grad[r * cols + c] * sn->value[c];
        }
        if (sn->requires_grad) {
            Tensor<T>& g = sn->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    g[c] += self.grad[r * cols + c] * wn->value[r * cols + c];
        }
    });
}

/// Concatenate along the last axis; all other axes must agree.
template <typename T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
    const auto& as = a.value().shape();
    const auto& bs = b.value().shape();
    if (as.size() != bs.size() || as.empty())
        throw shape_error("concat_last: rank mismatch");
    for (std::size_t i = 0; i + 1 < as.size(); ++i)
        if (as[i] != bs[i]) throw shape_error("concat_last: leading dims differ");
    const std::size_t ca = as.back(), cb = bs.back();
    Shape os = as;
    os.back() = ca + cb;
    const std::size_t rows = a.value().size() / ca;
    Tensor<T> out(os);
    for (std::size_t r = 0; r < rows; ++r) {
        T* dst = out.data() + r * (ca + cb);
        std::copy_n(a.value().data() + r * ca, ca, dst);
        std::copy_n(b.value().data() + r * cb, cb, dst + ca);
    }
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::op(std::move(out), {a, b}, [an, bn, rows, ca, cb](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T>& g = an->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < ca; ++j)
                    g[r * ca + j] += self.grad[r * (ca + cb) + j];
        }
        if (bn->requires_grad) {
            Tensor<T>& g = bn->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < cb; ++j)
                    g[r * cb + j] += self.grad[r * (ca + cb) + ca + j];
        }
    });
}

/// Slice [from,to) of the last axis.
template <typename T>
Var<T> slice_last(const Var<T>& a, std::size_t from, std::size_t to) {
    const auto& as = a.value().shape();
    if (as.empty() || to > as.back() || from >= to)
        throw shape_error("slice_last: bad range");
    const std::size_t c = as.back(), w = to - from;
    const std::size_t rows = a.value().size() / c;
    Shape os = as;
    os.back() = w;
    Tensor<T> out(os);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(a.value().data() + r * c + from, w, out.data() + r * w);
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, rows, c, w, from](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j)
                g[r * c + from + j] += self.grad[r * w + j];
    });
}

/// Mean over every axis except the last: (..., C) -> (C).
template <typename T>
Var<T> channel_mean(const Var<T>& a) {
    const auto& as = a.value().shape();
    if (as.empty()) throw shape_error("channel_mean: scalar input");
    const std::size_t c = as.back();
    const std::size_t rows = a.value().size() / c;
    const T inv = T(1) / static_cast<T>(rows);
    Tensor<T> out(Shape{c});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out[j] += a.value()[r * c + j];
    for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, rows, c, inv](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[j] * inv;
    });
}

/// Mean over the interior axes: (B, ..., C) -> (B, C).
template <typename T>
Var<T> spatial_mean(const Var<T>& a) {
    const auto& as = a.value().shape();
    if (as.size() < 3) throw shape_error("spatial_mean: need rank >= 3, got " + to_string(as));
    const std::size_t b = as.front(), c = as.back();
    const std::size_t inner = a.value().size() / (b * c);
    const T inv = T(1) / static_cast<T>(inner);
    Tensor<T> out(Shape{b, c});
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t v = 0; v < inner; ++v)
            for (std::size_t j = 0; j < c; ++j)
                out[i * c + j] += a.value()[(i * inner + v) * c + j];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, b, c, inner, inv](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t v = 0; v < inner; ++v)
                for (std::size_t j = 0; j < c; ++j)
                    g[(i * inner + v) * c + j] += self.grad[i * c + j] * inv;
    });
}

/// L2 norms of a 2-d tensor grouped by row index modulo `groups`: (R,C) -> (groups).
/// Transposed-convolution weights store the output channel inside the row
/// index, so this is the per-output-channel norm for those layers.
template <typename T>
Var<T> l2norm_rowgroups(const Var<T>& w, std::size_t groups) {
    const auto& s = w.value().shape();
    if (s.size() != 2 || s[0] % groups)
        throw shape_error("l2norm_rowgroups: rows of " + to_string(s) +
                          " not divisible into " + std::to_string(groups) + " groups");
    const std::size_t rows = s[0], cols = s[1];
    Tensor<T> out(Shape{groups});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            T v = w.value()[r * cols + c];
            out[r % groups] += v * v;
        }
    for (std::size_t gidx = 0; gidx < groups; ++gidx) out[gidx] = std::sqrt(out[gidx]);
    auto wn = w.node();
    return Var<T>::op(std::move(out), {w}, [wn, rows, cols, groups](Node<T>& self) {
        if (!wn->requires_grad) return;
        Tensor<T>& g = wn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                g[r * cols + c] += self.grad[r % groups] * wn->value[r * cols + c] /
                                   self.value[r % groups];
    });
}

/// Scale element (r,c) by s[r % groups].
template <typename T>
Var<T> scale_rowgroups(const Var<T>& w, const Var<T>& s, std::size_t groups) {
    const auto& ws = w.value().shape();
    if (ws.size() != 2 || s.value().size() != groups || ws[0] % groups)
        throw shape_error("scale_rowgroups: bad shapes");
    const std::size_t rows = ws[0], cols = ws[1];
    Tensor<T> out(ws);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = w.value()[r * cols + c] * s.value()[r % groups];
    auto wn = w.node();
    auto sn = s.node();
    return Var<T>::op(std::move(out), {w, s}, [wn, sn, rows, cols, groups](Node<T>& self) {
        if (wn->requires_grad) {
            Tensor<T>& g = wn->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    g[r * cols + c] += self.grad[r * cols + c] * sn->value[r % groups];
        }
        if (sn->requires_grad) {
            Tensor<T>& g = sn->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    g[r % groups] += self.grad[r * cols + c] * wn->value[r * cols + c];
        }
    });
}

// ---------------------------------------------------------------------------
// Log-partition ops for the (K+1)-class formulation
// ---------------------------------------------------------------------------

/// Row-wise log(sum_k exp(l_k)) over the last axis, max-shifted: log Z.
template <typename T>
Var<T> logsumexp_last(const Var<T>& a) {
    const auto& as = a.value().shape();
    if (as.empty()) throw shape_error("logsumexp_last: scalar input");
    const std::size_t k = as.back();
    const std::size_t rows = a.value().size() / k;
    Shape os(as.begin(), as.end() - 1);
    if (os.empty()) os = Shape{1};
    Tensor<T> out(os);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* l = a.value().data() + r * k;
        T m = l[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, l[j]);
        T s = T(0);
        for (std::size_t j = 0; j < k; ++j) s += std::exp(l[j] - m);
        out[r] = m + std::log(s);
    }
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, rows, k](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* l = an->value.data() + r * k;
            T go = self.grad[r];
            for (std::size_t j = 0; j < k; ++j)
                g[r * k + j] += go * std::exp(l[j] - self.value[r]);
        }
    });
}

/// Row-wise log(1 + sum_k exp(l_k)): the log-partition of the augmented
/// logit vector [l_1..l_K, 0]. Gradient is the first K channels of the
/// (K+1)-way softmax.
template <typename T>
Var<T> logsumexp1p_last(const Var<T>& a) {
    const auto& as = a.value().shape();
    if (as.empty()) throw shape_error("logsumexp1p_last: scalar input");
    const std::size_t k = as.back();
    const std::size_t rows = a.value().size() / k;
    Shape os(as.begin(), as.end() - 1);
    if (os.empty()) os = Shape{1};
    Tensor<T> out(os);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* l = a.value().data() + r * k;
        T m = T(0); // the implicit fake logit
        for (std::size_t j = 0; j < k; ++j) m = std::max(m, l[j]);
        T s = std::exp(-m);
        for (std::size_t j = 0; j < k; ++j) s += std::exp(l[j] - m);
        out[r] = m + std::log(s);
    }
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, rows, k](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* l = an->value.data() + r * k;
            T go = self.grad[r];
            for (std::size_t j = 0; j < k; ++j)
                g[r * k + j] += go * std::exp(l[j] - self.value[r]);
        }
    });
}

/// Pick a[r, idx[r]] along the last axis: (N,K) x (N) -> (N).
template <typename T>
Var<T> gather_last(const Var<T>& a, const std::vector<std::int64_t>& idx) {
    const auto& as = a.value().shape();
    if (as.empty()) throw shape_error("gather_last: scalar input");
    const std::size_t k = as.back();
    const std::size_t rows = a.value().size() / k;
    if (idx.size() != rows)
        throw shape_error("gather_last: index count " + std::to_string(idx.size()) +
                          " vs rows " + std::to_string(rows));
    Shape os(as.begin(), as.end() - 1);
    if (os.empty()) os = Shape{1};
    Tensor<T> out(os);
    for (std::size_t r = 0; r < rows; ++r) {
        std::int64_t j = idx[r];
        if (j < 0 || static_cast<std::size_t>(j) >= k)
            throw invalid_label_error("gather_last: label " + std::to_string(j) +
                                      " out of range [0," + std::to_string(k) + ")");
        out[r] = a.value()[r * k + static_cast<std::size_t>(j)];
    }
    auto an = a.node();
    return Var<T>::op(std::move(out), {a}, [an, idx, k, rows](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T>& g = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            g[r * k + static_cast<std::size_t>(idx[r])] += self.grad[r];
    });
}

} // namespace ad
} // namespace ganseg
