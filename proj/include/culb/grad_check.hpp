#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "culb/errors.hpp"
#include "culb/tensor.hpp"

namespace culb {

using LossFn = std::function<double(const std::vector<Tensor>&)>;

/// Central-difference gradient of a scalar loss over a parameter list:
///   g_d = (L(theta + h e_d) - L(theta - h e_d)) / 2h   per coordinate d.
///
/// The independent oracle for every analytic gradient in the library.
/// Second-order accurate, which is what makes a 1e-4 relative tolerance
/// reachable at h = 1e-5.
inline std::vector<Tensor> finite_diff_gradient(const LossFn& loss_fn,
                                                const std::vector<Tensor>& params,
                                                double h) {
    if (h <= 0.0) throw ValidationError("finite_diff_gradient: h must be > 0");
    std::vector<Tensor> work = params;
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const Tensor& p : params) grads.emplace_back(Tensor::zeros(p.shape));

    for (std::size_t b = 0; b < work.size(); ++b) {
        for (std::size_t i = 0; i < work[b].numel(); ++i) {
            const double orig = work[b].data[i];
            work[b].data[i] = orig + h;
            const double lp = loss_fn(work);
            work[b].data[i] = orig - h;
            const double lm = loss_fn(work);
            work[b].data[i] = orig;
            if (!std::isfinite(lp) || !std::isfinite(lm)) {
                throw RuntimeFailure("finite_diff_gradient: loss returned non-finite value");
            }
            grads[b].data[i] = (lp - lm) / (2.0 * h);
        }
    }
    return grads;
}

/// Max relative error between an analytic gradient and the oracle,
///   max_d |a_d - g_d| / max(floor, |a_d|, |g_d|).
/// The floor keeps coordinates with true gradient 0 from failing on
/// finite-difference roundoff (~1e-10 absolute at h = 1e-5).
inline double max_relative_error(const std::vector<Tensor>& analytic,
                                 const std::vector<Tensor>& oracle,
                                 double floor = 1e-4) {
    if (analytic.size() != oracle.size()) {
        throw ValidationError("max_relative_error: block count mismatch");
    }
    double worst = 0.0;
    for (std::size_t b = 0; b < analytic.size(); ++b) {
        if (!analytic[b].same_shape(oracle[b])) {
            throw ValidationError("max_relative_error: shape mismatch");
        }
        for (std::size_t i = 0; i < analytic[b].numel(); ++i) {
            const double a = analytic[b].data[i];
            const double g = oracle[b].data[i];
            const double denom = std::max({floor, std::abs(a), std::abs(g)});
            worst = std::max(worst, std::abs(a - g) / denom);
        }
    }
    return worst;
}

}  // namespace culb
