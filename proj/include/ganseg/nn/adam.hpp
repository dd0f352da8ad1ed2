#pragma once

#include <cmath>
#include <vector>

#include "ganseg/nn/layers.hpp"

namespace ganseg::nn {

/// Adam with bias correction. One instance owns one parameter group; state is
/// kept per parameter in registration order.
template <typename T>
class Adam {
public:
    Adam() = default;

    Adam(std::vector<ParamRef<T>> params, T lr, T beta1 = T(0.5), T beta2 = T(0.999),
         T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p.var.value().shape());
            v_.emplace_back(p.var.value().shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(b1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(b2_, static_cast<T>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Var<T>& p = params_[i].var;
            if (!p.has_grad()) continue; // no contribution this step
            const Tensor<T>& g = p.grad();
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            Tensor<T>& x = p.value();
            for (std::size_t j = 0; j < x.size(); ++j) {
                m[j] = b1_ * m[j] + (T(1) - b1_) * g[j];
                v[j] = b2_ * v[j] + (T(1) - b2_) * g[j] * g[j];
                x[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

    const std::vector<ParamRef<T>>& params() const { return params_; }
    std::size_t steps_taken() const { return t_; }

private:
    std::vector<ParamRef<T>> params_;
    T lr_ = T(1e-4), b1_ = T(0.5), b2_ = T(0.999), eps_ = T(1e-8);
    std::vector<Tensor<T>> m_, v_;
    std::size_t t_ = 0;
};

} // namespace ganseg::nn
