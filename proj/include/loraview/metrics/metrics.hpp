#pragma once

#include <cmath>
#include <vector>

#include "loraview/numerics/errors.hpp"
#include "loraview/numerics/matrix.hpp"

namespace loraview::metrics {

inline constexpr double kPsnrCap = 100.0;  // reported when the two images agree exactly
inline constexpr std::size_t kSsimWindow = 7;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline void require_same(const Matrix& a, const Matrix& b, const Matrix* mask, const char* what) {
    if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": image shapes differ (" + a.shape_str() + " vs " +
                                           b.shape_str() + ")");
    if (mask && !mask->same_shape(a))
        throw ShapeError(std::string(what) + ": mask " + mask->shape_str() + " does not match image " + a.shape_str());
}

inline bool in_mask(const Matrix* mask, std::size_t i) { return !mask || (*mask)[i] > 0.5f; }

}  // namespace detail

/// Peak signal-to-noise ratio for [0,1] images, optionally restricted to the
/// pixels where mask > 0.5. Identical inputs give kPsnrCap.
inline double psnr(const Matrix& a, const Matrix& b, const Matrix* mask = nullptr) {
    detail::require_same(a, b, mask, "psnr");
    double se = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!detail::in_mask(mask, i)) continue;
        double d = static_cast<double>(a[i]) - b[i];
        se += d * d;
        ++n;
    }
    if (n == 0) throw MetricError("psnr: empty mask");
    double mse = se / static_cast<double>(n);
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// Local statistics of one 7x7 window anchored at (r, c).
inline double ssim_window(const Matrix& a, const Matrix& b, std::size_t r, std::size_t c) {
    const double n = static_cast<double>(kSsimWindow * kSsimWindow);
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (std::size_t i = r; i < r + kSsimWindow; ++i)
        for (std::size_t j = c; j < c + kSsimWindow; ++j) {
            double x = a(i, j), y = b(i, j);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
    const double ma = sa / n, mb = sb / n;
    const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
    return ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) / ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
}

/// Mean SSIM over all fully-contained 7x7 uniform windows; with a mask, only
/// windows whose centre pixel lies inside it count.
inline double ssim(const Matrix& a, const Matrix& b, const Matrix* mask = nullptr) {
    detail::require_same(a, b, mask, "ssim");
    if (a.rows() < kSsimWindow || a.cols() < kSsimWindow)
        throw MetricError("ssim: image " + a.shape_str() + " smaller than the 7x7 window");
    const std::size_t half = kSsimWindow / 2;
    double total = 0;
    std::size_t n = 0;
    for (std::size_t r = 0; r + kSsimWindow <= a.rows(); ++r)
        for (std::size_t c = 0; c + kSsimWindow <= a.cols(); ++c) {
            if (!detail::in_mask(mask, (r + half) * a.cols() + c + half)) continue;
            total += ssim_window(a, b, r, c);
            ++n;
        }
    if (n == 0) throw MetricError("ssim: mask covers no complete 7x7 window");
    return total / static_cast<double>(n);
}

struct MetricReport {
    double psnr = 0;
    double ssim = 0;
    double masked_psnr = 0;
    double masked_ssim = 0;
};

inline MetricReport evaluate(const Matrix& sample, const Matrix& reference, const Matrix& mask) {
    return {psnr(sample, reference), ssim(sample, reference), psnr(sample, reference, &mask),
            ssim(sample, reference, &mask)};
}

/// Mean masked SSIM of several samples of one prompt against the same
/// reference; measures how consistently a view is reproduced.
inline double view_consistency(const std::vector<Matrix>& samples, const Matrix& reference, const Matrix& mask) {
    if (samples.empty()) throw MetricError("view_consistency: no samples");
    double s = 0;
    for (const auto& x : samples) s += ssim(x, reference, &mask);
    return s / static_cast<double>(samples.size());
}

}  // namespace loraview::metrics
