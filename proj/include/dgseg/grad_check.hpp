#pragma once

#include <functional>

#include "dgseg/tensor.hpp"

namespace dgseg {

// Compares the reverse-mode gradient of a scalar-valued f at x against central
// finite differences, componentwise. Returns the max relative error with
// denominator max(|analytic|, |numeric|, 1e-8). x is treated as a leaf; its
// storage is perturbed in place and restored.
template <typename Scalar>
double grad_check(const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& f, Tensor<Scalar> x,
                  Scalar h) {
    if (!(h > Scalar(0))) throw ContractError("grad_check: step must be positive");
    x.set_requires_grad(true);
    x.zero_grad();

    Tensor<Scalar> y = f(x);
    if (y.numel() != 1) throw ContractError("grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
    y.backward();
    std::vector<Scalar> analytic(x.numel(), Scalar(0));
    if (x.has_grad()) analytic = x.grad();

    double max_rel = 0.0;
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        const Scalar orig = x.data()[i];
        x.data()[i] = orig + h;
        const double fp = static_cast<double>(f(x).item());
        x.data()[i] = orig - h;
        const double fm = static_cast<double>(f(x).item());
        x.data()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
        const double a = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
    return max_rel;
}

}  // namespace dgseg
