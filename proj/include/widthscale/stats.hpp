#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "widthscale/errors.hpp"

namespace widthscale {

// Variance floor applied when a gaussian fit degenerates (e.g. the MF limit at
// step 0 has zero variance across seeds under antithetic centering).
inline constexpr double kVarianceFloor = 1e-12;

struct GaussianFit {
    double mean = 0.0;
    double var = 0.0;  // unbiased
    int n = 0;
};

inline GaussianFit fit_gaussian(std::span<const double> samples) {
    if (samples.size() < 2) throw DegenerateGaussian("gaussian fit needs >= 2 samples");
    double m = 0.0;
    for (double v : samples) m += v;
    m /= static_cast<double>(samples.size());
    double ss = 0.0;
    for (double v : samples) ss += (v - m) * (v - m);
    return {m, ss / static_cast<double>(samples.size() - 1), static_cast<int>(samples.size())};
}

// KL(N(m0,v0) || N(m1,v1)) = 1/2 (ln(v1/v0) + (v0 + (m0-m1)^2)/v1 - 1).
inline double kl_gaussian(double m0, double v0, double m1, double v1) {
    if (!(v0 > 0.0) || !(v1 > 0.0)) throw DegenerateGaussian("variances must be positive");
    const double dm = m0 - m1;
    return 0.5 * (std::log(v1 / v0) + (v0 + dm * dm) / v1 - 1.0);
}

// Expected KL of gaussian fits of limit-model logits against reference-model
// logits: samples[i][s] is the logit at test input i for seed s.
// A zero sample variance on either side is replaced by kVarianceFloor; the
// optional flag reports whether the floor was hit.
inline double logits_kl(std::span<const std::vector<double>> limit_samples,
                        std::span<const std::vector<double>> ref_samples,
                        bool* variance_floored = nullptr) {
    if (limit_samples.size() != ref_samples.size() || limit_samples.empty()) {
        throw ShapeError("logits_kl needs the same non-empty input set on both sides");
    }
    if (variance_floored) *variance_floored = false;
    double total = 0.0;
    for (std::size_t i = 0; i < limit_samples.size(); ++i) {
        GaussianFit l = fit_gaussian(limit_samples[i]);
        GaussianFit r = fit_gaussian(ref_samples[i]);
        if (l.var < kVarianceFloor) {
            l.var = kVarianceFloor;
            if (variance_floored) *variance_floored = true;
        }
        if (r.var < kVarianceFloor) {
            r.var = kVarianceFloor;
            if (variance_floored) *variance_floored = true;
        }
        total += kl_gaussian(l.mean, l.var, r.mean, r.var);
    }
    return total / static_cast<double>(limit_samples.size());
}

struct ExponentFit {
    double slope = 0.0;
    double intercept = 0.0;
    double stderr_slope = 0.0;
    int n_points = 0;
};

// Ordinary least squares of ln(value) on ln(width).
inline ExponentFit estimate_exponent(std::span<const double> widths,
                                     std::span<const double> values) {
    if (widths.size() != values.size()) throw ShapeError("widths/values size mismatch");
    if (widths.size() < 3) throw Error("exponent fit needs >= 3 widths");
    const std::size_t n = widths.size();
    std::vector<double> lx(n);
    std::vector<double> ly(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(widths[i] > 0.0)) throw LogDomainError("widths must be positive");
        if (!(values[i] > 0.0)) throw LogDomainError("values must be positive for a log fit");
        lx[i] = std::log(widths[i]);
        ly[i] = std::log(values[i]);
    }
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0;
    double sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if (!(sxx > 0.0)) throw Error("widths must not be all equal");
    ExponentFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = ly[i] - (fit.intercept + fit.slope * lx[i]);
        sse += e * e;
    }
    fit.stderr_slope = n > 2 ? std::sqrt(sse / static_cast<double>(n - 2) / sxx) : 0.0;
    fit.n_points = static_cast<int>(n);
    return fit;
}

}  // namespace widthscale
