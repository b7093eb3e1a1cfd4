#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "loraview/numerics/matrix.hpp"

namespace loraview {

/// Plain SGD: p <- p - lr * g for every pair. All gradients are checked
/// before any parameter is touched, so a divergent step leaves params intact.
inline void sgd_step(std::span<Matrix* const> params, std::span<const Matrix> grads, float lr) {
    if (params.size() != grads.size()) throw ShapeError("sgd_step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->same_shape(grads[i]))
            throw ShapeError("sgd_step: " + params[i]->shape_str() + " vs gradient " + grads[i].shape_str());
        if (!grads[i].all_finite())
            throw DivergenceError("non-finite gradient for parameter #" + std::to_string(i));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        const Matrix& g = grads[i];
        for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
    }
}

inline void sgd_step(Matrix& param, const Matrix& grad, float lr) {
    Matrix* p[] = {&param};
    sgd_step(p, std::span<const Matrix>(&grad, 1), lr);
}

/// Adam with bias correction. Only the base-model pretraining uses it; all
/// adapter and gate training goes through sgd_step.
class Adam {
public:
    struct Options {
        float lr = 1e-3f;
        float beta1 = 0.9f;
        float beta2 = 0.999f;
        float eps = 1e-8f;
    };

    explicit Adam(Options opts) : opts_(opts) {}

    void set_lr(float lr) noexcept { opts_.lr = lr; }
    float lr() const noexcept { return opts_.lr; }

    void step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
        if (params.size() != grads.size()) throw ShapeError("Adam::step: parameter/gradient count mismatch");
        for (std::size_t i = 0; i < grads.size(); ++i)
            if (!grads[i].all_finite()) throw DivergenceError("non-finite gradient for parameter #" + std::to_string(i));
        if (m_.empty()) {
            for (auto* p : params) {
                m_.emplace_back(p->rows(), p->cols());
                v_.emplace_back(p->rows(), p->cols());
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(static_cast<double>(opts_.beta1), t_);
        const double c2 = 1.0 - std::pow(static_cast<double>(opts_.beta2), t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            Matrix& p = *params[i];
            const Matrix& g = grads[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                m_[i][k] = opts_.beta1 * m_[i][k] + (1 - opts_.beta1) * g[k];
                v_[i][k] = opts_.beta2 * v_[i][k] + (1 - opts_.beta2) * g[k] * g[k];
                double mh = m_[i][k] / c1;
                double vh = v_[i][k] / c2;
                p[k] -= static_cast<float>(opts_.lr * mh / (std::sqrt(vh) + opts_.eps));
            }
        }
    }

private:
    Options opts_;
    std::vector<Matrix> m_, v_;
    int t_ = 0;
};

}  // namespace loraview
