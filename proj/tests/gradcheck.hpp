#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ganseg/core/autodiff.hpp"

namespace gstest {

using ganseg::Tensor;
using ganseg::Var;

/// Compare reverse-mode gradients against central finite differences for a
/// scalar function of several leaf tensors. Returns the worst relative error
/// max(|ad - fd|) / max(1, |fd|) over all inputs and entries.
inline double gradcheck(
    const std::function<Var<double>(std::vector<Var<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double step = 1e-5) {
    std::vector<Var<double>> leaves;
    leaves.reserve(inputs.size());
    for (auto& t : inputs) leaves.push_back(Var<double>::leaf(t, true));

    Var<double> out = fn(leaves);
    out.backward();

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const double x0 = inputs[i][j];

            auto eval = [&](double x) {
                std::vector<Var<double>> probe;
                probe.reserve(inputs.size());
                for (std::size_t k = 0; k < inputs.size(); ++k) {
                    Tensor<double> t = inputs[k];
                    if (k == i) t[j] = x;
                    probe.push_back(Var<double>::leaf(std::move(t), false));
                }
                return fn(probe).item();
            };

            const double fd = (eval(x0 + step) - eval(x0 - step)) / (2.0 * step);
            const double ad = leaves[i].has_grad() ? leaves[i].grad()[j] : 0.0;
            const double err = std::abs(ad - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

} // namespace gstest
