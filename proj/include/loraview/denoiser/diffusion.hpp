#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "loraview/denoiser/model.hpp"
#include "loraview/denoiser/schedule.hpp"
#include "loraview/scenegen/scene.hpp"

namespace loraview::denoiser {

/// [0,1] pixels to the model's [-1,1] range and back.
inline Matrix to_model_range(const Matrix& img) {
    Matrix m = img;
    for (auto& v : m.values()) v = 2.0f * v - 1.0f;
    return m;
}
inline Matrix to_pixel_range(const Matrix& x) {
    Matrix m = x;
    for (auto& v : m.values()) v = std::clamp(0.5f * (v + 1.0f), 0.0f, 1.0f);
    return m;
}

/// Epsilon-prediction objective on one scene at a uniformly drawn timestep.
/// The noise MSE is weighted by 1/abar_t, which equals the MSE of the implied
/// v target; unweighted, the noisy end of the chain gets almost no gradient
/// and the prompt is barely learned.
inline Var diffusion_loss(const BoundWeights& w, const DeltaMap& deltas, const NoiseSchedule& sched,
                          const Matrix& image, const scenegen::PromptTokens& prompt, Rng& rng) {
    const DenoiserConfig& cfg = *w.config;
    const std::size_t t = rng.below(cfg.n_timesteps);
    Matrix eps = rng.normal_matrix(cfg.grid, cfg.grid);
    Matrix xt = add_noise(sched, to_model_range(image), eps, t);
    Var pred = predict_noise(w, deltas, xt, t, prompt);
    Tape& tape = *pred.tape();
    const Var l = mse_loss(pred, tape.constant(patchify(eps, cfg.patch_size)));
    return scale(l, static_cast<float>(1.0 / sched.alpha_bar(t)));
}

struct SamplerOptions {
    std::size_t n_steps = 20;
    bool clip_x0 = true;  // clamp the x0 estimate to [-1, 1] at every step
};

/// Evenly spaced descending timesteps ending at 0.
inline std::vector<std::size_t> sampling_timesteps(std::size_t T, std::size_t n_steps) {
    if (n_steps == 0 || n_steps > T) throw ParameterError("n_steps must be in [1, T]");
    std::vector<std::size_t> ts;
    for (std::size_t i = n_steps; i-- > 0;) ts.push_back(i * T / n_steps);
    return ts;
}

namespace detail {

inline Matrix predict_x0(const NoiseSchedule& s, const Matrix& xt, const Matrix& eps, std::size_t t, bool clip) {
    const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1.0 - s.alpha_bar(t));
    Matrix x0(xt.rows(), xt.cols());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        double v = (xt[i] - b * eps[i]) / a;
        x0[i] = static_cast<float>(clip ? std::clamp(v, -1.0, 1.0) : v);
    }
    return x0;
}

}  // namespace detail

/// Deterministic DDIM (eta = 0) sampling. Output in [0,1].
inline Matrix sample_ddim(const ModelWeights& weights, const std::map<std::string, Matrix>* deltas,
                          const scenegen::PromptTokens& prompt, std::uint64_t seed, SamplerOptions opts = {}) {
    const DenoiserConfig& cfg = weights.config;
    const NoiseSchedule sched(cfg);
    const auto ts = sampling_timesteps(cfg.n_timesteps, opts.n_steps);
    Rng rng(seed);
    Matrix x = rng.normal_matrix(cfg.grid, cfg.grid);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const std::size_t t = ts[i];
        Matrix eps = forward(weights, deltas, x, t, prompt);
        Matrix x0 = detail::predict_x0(sched, x, eps, t, opts.clip_x0);
        if (opts.clip_x0) {
            // re-derive the noise direction consistent with the clipped x0
            const double a = std::sqrt(sched.alpha_bar(t)), b = std::sqrt(1.0 - sched.alpha_bar(t));
            for (std::size_t k = 0; k < eps.size(); ++k) eps[k] = static_cast<float>((x[k] - a * x0[k]) / b);
        }
        const double abar_prev = i + 1 < ts.size() ? sched.alpha_bar(ts[i + 1]) : 1.0;
        const double ca = std::sqrt(abar_prev), cb = std::sqrt(1.0 - abar_prev);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] = static_cast<float>(ca * x0[k] + cb * eps[k]);
    }
    return to_pixel_range(x);
}

/// DDPM ancestral sampling over all T steps with the injected noise set to
/// zero, i.e. following the posterior mean. Reference path for tests.
inline Matrix sample_ancestral_mean(const ModelWeights& weights, const std::map<std::string, Matrix>* deltas,
                                    const scenegen::PromptTokens& prompt, std::uint64_t seed, bool clip_x0 = true) {
    const DenoiserConfig& cfg = weights.config;
    const NoiseSchedule sched(cfg);
    Rng rng(seed);
    Matrix x = rng.normal_matrix(cfg.grid, cfg.grid);
    for (std::size_t t = cfg.n_timesteps; t-- > 0;) {
        Matrix eps = forward(weights, deltas, x, t, prompt);
        Matrix x0 = detail::predict_x0(sched, x, eps, t, clip_x0);
        const double abar = sched.alpha_bar(t), abar_prev = sched.alpha_bar_prev(t);
        const double c0 = std::sqrt(abar_prev) * sched.beta(t) / (1.0 - abar);
        const double ct = std::sqrt(sched.alpha(t)) * (1.0 - abar_prev) / (1.0 - abar);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] = static_cast<float>(c0 * x0[k] + ct * x[k]);
    }
    return to_pixel_range(x);
}

}  // namespace loraview::denoiser
