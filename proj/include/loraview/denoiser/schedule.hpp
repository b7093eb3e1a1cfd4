#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "loraview/denoiser/config.hpp"
#include "loraview/numerics/matrix.hpp"

namespace loraview::denoiser {

/// Linear-beta DDPM noise schedule, cumulative products kept in double.
class NoiseSchedule {
public:
    explicit NoiseSchedule(const DenoiserConfig& cfg) {
        const std::size_t T = cfg.n_timesteps;
        const double rescale = static_cast<double>(cfg.beta_reference_steps) / static_cast<double>(T);
        double prod = 1.0;
        for (std::size_t t = 0; t < T; ++t) {
            double frac = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
            double beta = std::min(0.999, (cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac) * rescale);
            betas_.push_back(beta);
            prod *= 1.0 - beta;
            alpha_bar_.push_back(prod);
        }
    }

    std::size_t size() const noexcept { return betas_.size(); }
    double beta(std::size_t t) const { return betas_.at(t); }
    double alpha(std::size_t t) const { return 1.0 - betas_.at(t); }
    double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }
    /// alpha_bar at t-1, with alpha_bar(-1) = 1.
    double alpha_bar_prev(std::size_t t) const { return t == 0 ? 1.0 : alpha_bar_.at(t - 1); }

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bar_;
};

/// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps
inline Matrix add_noise(const NoiseSchedule& s, const Matrix& x0, const Matrix& eps, std::size_t t) {
    const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1.0 - s.alpha_bar(t));
    Matrix x(x0.rows(), x0.cols());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(a * x0[i] + b * eps[i]);
    return x;
}

}  // namespace loraview::denoiser
