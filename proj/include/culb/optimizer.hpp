#pragma once

#include <cmath>
#include <vector>

#include "culb/errors.hpp"
#include "culb/tensor.hpp"

namespace culb {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed list of tensor blocks. step() returns the update delta
/// instead of applying it, so callers can intercept the delta (masking,
/// subspace projection) before adding it to the parameters.
class Adam {
public:
    Adam(const std::vector<const Tensor*>& shapes, AdamConfig cfg) : cfg_(cfg) {
        for (const Tensor* t : shapes) {
            m_.push_back(Tensor::zeros(t->shape));
            v_.push_back(Tensor::zeros(t->shape));
        }
    }

    std::size_t steps_taken() const { return t_; }

    /// delta_b = -lr * mhat / (sqrt(vhat) + eps), one tensor per block.
    std::vector<Tensor> step(const std::vector<const Tensor*>& grads) {
        if (grads.size() != m_.size()) throw ValidationError("Adam: block count mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        std::vector<Tensor> delta;
        delta.reserve(grads.size());
        for (std::size_t b = 0; b < grads.size(); ++b) {
            const Tensor& g = *grads[b];
            if (!g.same_shape(m_[b])) throw ValidationError("Adam: shape mismatch");
            Tensor d = Tensor::zeros(g.shape);
            for (std::size_t i = 0; i < g.numel(); ++i) {
                m_[b].data[i] = cfg_.beta1 * m_[b].data[i] + (1.0 - cfg_.beta1) * g.data[i];
                v_[b].data[i] =
                    cfg_.beta2 * v_[b].data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
                const double mhat = m_[b].data[i] / bc1;
                const double vhat = v_[b].data[i] / bc2;
                d.data[i] = -cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
            delta.push_back(std::move(d));
        }
        return delta;
    }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace culb
