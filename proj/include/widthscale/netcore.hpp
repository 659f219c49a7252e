#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

#include "widthscale/errors.hpp"
#include "widthscale/rng.hpp"
#include "widthscale/scaling.hpp"

namespace widthscale {

// Leaky softplus phi(z) = ln(1+e^z) - alpha ln(1+e^{-z}).
// alpha in (0,1) gives asymptotic slopes 1 (z -> +inf) and alpha (z -> -inf).
struct ActivationConfig {
    double alpha = 0.2;

    void validate() const {
        if (!(alpha > 0.0) || !(alpha < 1.0)) throw Error("alpha must lie in (0, 1)");
    }
};

inline double softplus(double t) noexcept {
    return std::fmax(t, 0.0) + std::log1p(std::exp(-std::fabs(t)));
}

inline double logistic(double z) noexcept {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// phi and phi' share one exp and one log1p; with e = exp(-|z|):
//   z >= 0: phi = z + (1-alpha) log1p(e),        phi' = (1 + alpha e)/(1 + e)
//   z <  0: phi = alpha z + (1-alpha) log1p(e),  phi' = (e + alpha)/(1 + e)
struct ActPair {
    double phi;
    double phi_prime;
};

inline ActPair phi_pair(double z, const ActivationConfig& cfg = {}) noexcept {
    const double a = cfg.alpha;
    if (z >= 0.0) {
        const double e = std::exp(-z);
        return {z + (1.0 - a) * std::log1p(e), (1.0 + a * e) / (1.0 + e)};
    }
    const double e = std::exp(z);
    return {a * z + (1.0 - a) * std::log1p(e), (e + a) / (1.0 + e)};
}

inline double activation(double z, const ActivationConfig& cfg = {}) noexcept {
    return phi_pair(z, cfg).phi;
}

// phi'(z) = sigma(z) + alpha sigma(-z), phi''(z) = (1-alpha) sigma(z) sigma(-z).
inline double activation_prime(double z, const ActivationConfig& cfg = {}) noexcept {
    return phi_pair(z, cfg).phi_prime;
}

inline double activation_second(double z, const ActivationConfig& cfg = {}) noexcept {
    return (1.0 - cfg.alpha) * logistic(z) * logistic(-z);
}

// Branch-free batch evaluation of (phi, phi'); auto-vectorizable and within
// ~1e-13 of phi_pair. Both hot paths (sgd_step and the particle transport)
// use this evaluator, which keeps their trajectories bit-compatible.
namespace fastmath {

inline constexpr double kLn2Hi = 6.93147180369123816490e-01;
inline constexpr double kLn2Lo = 1.90821492927058770002e-10;
inline constexpr double kInvLn2 = 1.44269504088896338700e+00;
inline constexpr double kRoundMagic = 6755399441055744.0;  // 2^52 + 2^51
inline constexpr double kSqrt2 = 1.41421356237309514547;
inline constexpr double kLn2 = 6.93147180559945286227e-01;

// exp(m) for m in [-708, 0]; callers clamp. Branch-free.
inline double exp_nonpos(double m) noexcept {
    const double kd = m * kInvLn2 + kRoundMagic;
    const double kr = kd - kRoundMagic;
    const double r = (m - kr * kLn2Hi) - kr * kLn2Lo;
    // Taylor e^r on |r| <= ln2/2, degree 13
    double p = 1.0 / 6227020800.0;
    p = p * r + 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // k in [-1022, 1], so k+1023 is a valid biased exponent
    const int ki = static_cast<int>(kr);
    const double scale = std::bit_cast<double>(static_cast<std::int64_t>(ki + 1023) << 52);
    return p * scale;
}

// log(1 + e) for e in [0, 1]. Branch-free.
inline double log1p_unit(double e) noexcept {
    const double u = 1.0 + e;
    const double factor = u > kSqrt2 ? 0.5 : 1.0;
    const double add = u > kSqrt2 ? kLn2 : 0.0;
    const double v = factor * u;
    const double s = (v - 1.0) / (v + 1.0);
    const double z2 = s * s;
    double p = 1.0 / 17.0;
    p = p * z2 + 1.0 / 15.0;
    p = p * z2 + 1.0 / 13.0;
    p = p * z2 + 1.0 / 11.0;
    p = p * z2 + 1.0 / 9.0;
    p = p * z2 + 1.0 / 7.0;
    p = p * z2 + 1.0 / 5.0;
    p = p * z2 + 1.0 / 3.0;
    p = p * z2 + 1.0;
    return add + 2.0 * s * p;
}

}  // namespace fastmath

#if defined(__AVX2__) && defined(__FMA__)

// 4-wide evaluation of the same arithmetic as the scalar path below.
inline void phi_pair4(const double* z, double alpha, double* phi, double* phip) noexcept {
    using fastmath::kInvLn2;
    using fastmath::kLn2;
    using fastmath::kLn2Hi;
    using fastmath::kLn2Lo;
    using fastmath::kRoundMagic;
    using fastmath::kSqrt2;
    const __m256d zero = _mm256_setzero_pd();
    const __m256d one = _mm256_set1_pd(1.0);
    const __m256d half = _mm256_set1_pd(0.5);
    const __m256d va = _mm256_set1_pd(alpha);

    const __m256d zi = _mm256_loadu_pd(z);
    const __m256d zpos = _mm256_max_pd(zi, zero);
    const __m256d zneg = _mm256_sub_pd(zi, zpos);
    __m256d m = _mm256_max_pd(_mm256_sub_pd(zneg, zpos), _mm256_set1_pd(-708.0));

    // e = exp(m)
    const __m256d magic = _mm256_set1_pd(kRoundMagic);
    const __m256d kd = _mm256_fmadd_pd(m, _mm256_set1_pd(kInvLn2), magic);
    const __m256d kr = _mm256_sub_pd(kd, magic);
    __m256d r = _mm256_fnmadd_pd(kr, _mm256_set1_pd(kLn2Hi), m);
    r = _mm256_fnmadd_pd(kr, _mm256_set1_pd(kLn2Lo), r);
    __m256d p = _mm256_set1_pd(1.0 / 6227020800.0);
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 479001600.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 39916800.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 3628800.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 362880.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 40320.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 5040.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 720.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 120.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 24.0));
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(1.0 / 6.0));
    p = _mm256_fmadd_pd(p, r, half);
    p = _mm256_fmadd_pd(p, r, one);
    p = _mm256_fmadd_pd(p, r, one);
    const __m128i ki = _mm256_cvtpd_epi32(kr);
    const __m256i ki64 = _mm256_cvtepi32_epi64(ki);
    const __m256i bits = _mm256_slli_epi64(_mm256_add_epi64(ki64, _mm256_set1_epi64x(1023)), 52);
    const __m256d e = _mm256_mul_pd(p, _mm256_castsi256_pd(bits));

    // lp = log(1 + e)
    const __m256d u = _mm256_add_pd(one, e);
    const __m256d big = _mm256_cmp_pd(u, _mm256_set1_pd(kSqrt2), _CMP_GT_OQ);
    const __m256d v = _mm256_mul_pd(u, _mm256_blendv_pd(one, half, big));
    const __m256d add = _mm256_and_pd(big, _mm256_set1_pd(kLn2));
    const __m256d s = _mm256_div_pd(_mm256_sub_pd(v, one), _mm256_add_pd(v, one));
    const __m256d z2 = _mm256_mul_pd(s, s);
    __m256d q = _mm256_set1_pd(1.0 / 17.0);
    q = _mm256_fmadd_pd(q, z2, _mm256_set1_pd(1.0 / 15.0));
    q = _mm256_fmadd_pd(q, z2, _mm256_set1_pd(1.0 / 13.0));
    q = _mm256_fmadd_pd(q, z2, _mm256_set1_pd(1.0 / 11.0));
    q = _mm256_fmadd_pd(q, z2, _mm256_set1_pd(1.0 / 9.0));
    q = _mm256_fmadd_pd(q, z2, _mm256_set1_pd(1.0 / 7.0));
    q = _mm256_fmadd_pd(q, z2, _mm256_set1_pd(1.0 / 5.0));
    q = _mm256_fmadd_pd(q, z2, _mm256_set1_pd(1.0 / 3.0));
    q = _mm256_fmadd_pd(q, z2, one);
    const __m256d lp = _mm256_fmadd_pd(_mm256_add_pd(s, s), q, add);

    // phi = zpos + alpha zneg + (1-alpha) lp
    const __m256d phiv =
        _mm256_fmadd_pd(_mm256_sub_pd(one, va), lp, _mm256_fmadd_pd(va, zneg, zpos));
    _mm256_storeu_pd(phi, phiv);

    // phi' = (z >= 0 ? 1 + alpha e : e + alpha) / (1 + e)
    const __m256d pos = _mm256_cmp_pd(zi, zero, _CMP_GE_OQ);
    const __m256d num = _mm256_blendv_pd(_mm256_add_pd(e, va), _mm256_fmadd_pd(va, e, one), pos);
    _mm256_storeu_pd(phip, _mm256_div_pd(num, u));
}

#endif  // __AVX2__ && __FMA__

inline void phi_pair_scalar_one(double zi, double alpha, double* phi, double* phip) noexcept {
    const double zpos = std::fmax(zi, 0.0);
    const double zneg = zi - zpos;
    const double m = std::fmax(zneg - zpos, -708.0);  // -|z|, clamped
    const double e = fastmath::exp_nonpos(m);
    const double lp = fastmath::log1p_unit(e);
    *phi = zpos + alpha * zneg + (1.0 - alpha) * lp;
    const double num = zi >= 0.0 ? 1.0 + alpha * e : e + alpha;
    *phip = num / (1.0 + e);
}

inline void phi_pair_batch(const double* z, std::size_t n, const ActivationConfig& cfg,
                           double* phi, double* phip) noexcept {
    const double alpha = cfg.alpha;
    std::size_t i = 0;
#if defined(__AVX2__) && defined(__FMA__)
    for (; i + 4 <= n; i += 4) phi_pair4(z + i, alpha, phi + i, phip + i);
#endif
    const std::size_t tail = n - i;
    for (std::size_t t = 0; t < tail; ++t) {
        phi_pair_scalar_one(z[i + t], alpha, phi + i + t, phip + i + t);
    }
}

// Binary cross-entropy l(y, f) = ln(1 + e^{-y f}), labels y in {-1, +1}.
inline void check_label(int y) {
    if (y != 1 && y != -1) throw InvalidLabel("label must be -1 or +1");
}

inline double loss_value(int y, double f) {
    check_label(y);
    return softplus(-static_cast<double>(y) * f);
}

// d l / d f = -y / (1 + exp(y f)); always in (-1, 0) for y=+1 and (0, 1) for y=-1.
inline double loss_grad(int y, double f) {
    check_label(y);
    return -static_cast<double>(y) * logistic(-static_cast<double>(y) * f);
}

struct DataPoint {
    std::vector<double> x;
    int y = 1;
};

struct Dataset {
    std::string name;
    std::string preprocessing;
    int input_dim = 0;
    std::vector<DataPoint> points;

    std::size_t size() const noexcept { return points.size(); }
    std::span<const DataPoint> all() const noexcept { return {points.data(), points.size()}; }
};

// Hatted weights of a one-hidden-layer net. Neuron r owns a_hat[r] and the
// contiguous input-weight row w_hat[r*input_dim .. (r+1)*input_dim).
struct Params {
    int width = 0;
    int input_dim = 0;
    std::vector<double> a_hat;
    std::vector<double> w_hat;

    Params() = default;
    Params(int d, int d_x)
        : width(d), input_dim(d_x), a_hat(static_cast<std::size_t>(d)),
          w_hat(static_cast<std::size_t>(d) * static_cast<std::size_t>(d_x)) {
        if (d < 1 || d_x < 1) throw ShapeError("width and input_dim must be >= 1");
    }

    std::span<const double> w_row(int r) const noexcept {
        return {w_hat.data() + static_cast<std::size_t>(r) * input_dim,
                static_cast<std::size_t>(input_dim)};
    }
    std::span<double> w_row(int r) noexcept {
        return {w_hat.data() + static_cast<std::size_t>(r) * input_dim,
                static_cast<std::size_t>(input_dim)};
    }
};

// Frozen copy of the step-0 parameters; the IC-MF correction term reads it.
class InitSnapshot {
public:
    explicit InitSnapshot(Params p) : params_(std::move(p)) {}
    const Params& params() const noexcept { return params_; }

private:
    Params params_;
};

enum class InitDist : std::uint8_t { Gaussian, UniformSymmetric };

// i.i.d. unit-variance symmetric entries; deterministic in (seed, d, d_x, dist).
// Fill order: a_hat first, then w rows.
inline Params init_params(int d, int d_x, std::uint64_t seed,
                          InitDist dist = InitDist::Gaussian) {
    Params p(d, d_x);
    Rng rng(seed);
    const double half_width = std::sqrt(3.0);  // unit-variance symmetric uniform
    auto draw = [&]() {
        return dist == InitDist::Gaussian ? rng.gaussian()
                                          : rng.uniform(-half_width, half_width);
    };
    for (auto& a : p.a_hat) a = draw();
    for (auto& w : p.w_hat) w = draw();
    return p;
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// f(x) = sigma sum_r a_hat_r phi(w_hat_r^T x).
inline double forward(const Params& p, double sigma, std::span<const double> x,
                      const ActivationConfig& cfg = {}) {
    if (static_cast<int>(x.size()) != p.input_dim) {
        throw ShapeError("input dimension mismatch in forward");
    }
    double s = 0.0;
    for (int r = 0; r < p.width; ++r) {
        s += p.a_hat[static_cast<std::size_t>(r)] * activation(dot(p.w_row(r), x), cfg);
    }
    return sigma * s;
}

inline std::vector<double> forward_batch(const Params& p, double sigma,
                                         std::span<const DataPoint> batch,
                                         const ActivationConfig& cfg = {}) {
    std::vector<double> out(batch.size(), 0.0);
    for (int r = 0; r < p.width; ++r) {
        const double ar = p.a_hat[static_cast<std::size_t>(r)];
        const auto wr = p.w_row(r);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            out[i] += ar * activation(dot(wr, batch[i].x), cfg);
        }
    }
    for (auto& f : out) f *= sigma;
    return out;
}

// One SGD step in hatted parameterization (Eqs. of the hatted dynamics):
//   da_hat_r = -eta_hat_a sigma mean_a[ grad l * phi(w_r^T x) ]
//   dw_hat_r = -eta_hat_w sigma mean_w[ grad l * a_r phi'(w_r^T x) x ]
// Both increments are evaluated at the pre-step weights (simultaneous update).
// Per-sample gradients are averaged over each batch; batch_a and batch_w may
// alias (coupled mode) or differ (independent-sample mode).
//
// bias_a / bias_w, when non-empty, are added to the logits before the loss
// gradient (the IC-MF variant's frozen initialization term).
//
// phi and phi' over (neuron, sample) are evaluated once and cached; the cache
// is the dominant memory cost, 2 * width * batch doubles.
inline Params sgd_step_biased(const Params& p, const Hyperparams& hp,
                              std::span<const DataPoint> batch_a,
                              std::span<const DataPoint> batch_w,
                              const ActivationConfig& cfg,
                              std::span<const double> bias_a,
                              std::span<const double> bias_w) {
    if (batch_a.empty() || batch_w.empty()) throw EmptyBatch("sgd_step needs non-empty batches");
    for (const auto& pt : batch_a) {
        if (static_cast<int>(pt.x.size()) != p.input_dim) throw ShapeError("batch_a dim mismatch");
    }
    for (const auto& pt : batch_w) {
        if (static_cast<int>(pt.x.size()) != p.input_dim) throw ShapeError("batch_w dim mismatch");
    }

    const bool coupled = batch_a.data() == batch_w.data() && batch_a.size() == batch_w.size();
    const std::size_t na = batch_a.size();
    const std::size_t nw = batch_w.size();
    const std::size_t d = static_cast<std::size_t>(p.width);
    const int dx = p.input_dim;

    auto feature_major = [dx](std::span<const DataPoint> b) {
        std::vector<double> xf(static_cast<std::size_t>(dx) * b.size());
        for (std::size_t j = 0; j < b.size(); ++j) {
            for (int k = 0; k < dx; ++k) xf[static_cast<std::size_t>(k) * b.size() + j] = b[j].x[k];
        }
        return xf;
    };
    const std::vector<double> xfa = feature_major(batch_a);
    const std::vector<double> xfw = coupled ? std::vector<double>{} : feature_major(batch_w);

    // phi over batch_a (for da and the a-logits), phi/phi' over batch_w.
    std::vector<double> phi_a(d * na);
    std::vector<double> phi_w(coupled ? 0 : d * nw);
    std::vector<double> phip_w(d * nw);
    std::vector<double> f_a(na, 0.0);
    std::vector<double> f_w(coupled ? 0 : nw, 0.0);
    std::vector<double> z(std::max(na, nw));
    std::vector<double> phip_scratch(coupled ? 0 : na);

    auto z_pass = [&](std::span<const double> wr, const std::vector<double>& xf, std::size_t n) {
        std::fill(z.begin(), z.begin() + n, 0.0);
        for (int k = 0; k < dx; ++k) {
            const double wk = wr[static_cast<std::size_t>(k)];
            const double* col = xf.data() + static_cast<std::size_t>(k) * n;
            for (std::size_t j = 0; j < n; ++j) z[j] += wk * col[j];
        }
    };

    for (int r = 0; r < p.width; ++r) {
        const auto wr = p.w_row(r);
        const double ar = p.a_hat[static_cast<std::size_t>(r)];
        double* pa = phi_a.data() + static_cast<std::size_t>(r) * na;
        double* ppw = phip_w.data() + static_cast<std::size_t>(r) * nw;
        z_pass(wr, xfa, na);
        if (coupled) {
            phi_pair_batch(z.data(), na, cfg, pa, ppw);
        } else {
            phi_pair_batch(z.data(), na, cfg, pa, phip_scratch.data());
        }
        for (std::size_t i = 0; i < na; ++i) f_a[i] += ar * pa[i];
        if (!coupled) {
            double* pw = phi_w.data() + static_cast<std::size_t>(r) * nw;
            z_pass(wr, xfw, nw);
            phi_pair_batch(z.data(), nw, cfg, pw, ppw);
            for (std::size_t j = 0; j < nw; ++j) f_w[j] += ar * pw[j];
        }
    }

    if (!bias_a.empty() && bias_a.size() != na) throw ShapeError("bias_a size mismatch");
    if (!bias_w.empty() && bias_w.size() != nw) throw ShapeError("bias_w size mismatch");
    std::vector<double> g_a(na);
    std::vector<double> g_w(nw);
    for (std::size_t i = 0; i < na; ++i) {
        const double b = bias_a.empty() ? 0.0 : bias_a[i];
        g_a[i] = loss_grad(batch_a[i].y, hp.sigma * f_a[i] + b);
    }
    for (std::size_t j = 0; j < nw; ++j) {
        const double b = bias_w.empty() ? 0.0 : bias_w[j];
        g_w[j] = coupled && bias_a.empty() && bias_w.empty()
                     ? g_a[j]
                     : loss_grad(batch_w[j].y, hp.sigma * (coupled ? f_a[j] : f_w[j]) + b);
    }

    const double ca = -hp.eta_hat_a * hp.sigma / static_cast<double>(na);
    const double cw = -hp.eta_hat_w * hp.sigma / static_cast<double>(nw);
    const std::vector<double>& xfw_eff = coupled ? xfa : xfw;

    Params out = p;
    std::vector<double> c(nw);
    for (int r = 0; r < p.width; ++r) {
        const double ar = p.a_hat[static_cast<std::size_t>(r)];
        const double* pa = phi_a.data() + static_cast<std::size_t>(r) * na;
        const double* ppw = phip_w.data() + static_cast<std::size_t>(r) * nw;

        double da = 0.0;
        for (std::size_t i = 0; i < na; ++i) da += g_a[i] * pa[i];
        out.a_hat[static_cast<std::size_t>(r)] += ca * da;

        const double cwr = cw * ar;
        for (std::size_t j = 0; j < nw; ++j) c[j] = cwr * g_w[j] * ppw[j];
        auto out_wr = out.w_row(r);
        for (int k = 0; k < dx; ++k) {
            const double* col = xfw_eff.data() + static_cast<std::size_t>(k) * nw;
            double acc = 0.0;
            for (std::size_t j = 0; j < nw; ++j) acc += c[j] * col[j];
            out_wr[static_cast<std::size_t>(k)] += acc;
        }
    }
    return out;
}

inline Params sgd_step(const Params& p, const Hyperparams& hp,
                       std::span<const DataPoint> batch_a,
                       std::span<const DataPoint> batch_w,
                       const ActivationConfig& cfg = {}) {
    return sgd_step_biased(p, hp, batch_a, batch_w, cfg, {}, {});
}

// IC-MF finite-width model (initialization-corrected):
//   f(x) = sigma* (d/d*)^{-1} sum_r a_r phi(w_r^T x)
//        + sigma* ((d/d*)^{-1/2} - (d/d*)^{-1}) sum_r a_r^(0) phi(w_r^(0),T x).
// At d = d* the correction coefficient is exactly zero.
struct IcmfCoefficients {
    double live = 0.0;  // sigma* (d/d*)^{-1}
    double init = 0.0;  // sigma* ((d/d*)^{-1/2} - (d/d*)^{-1})
};

inline IcmfCoefficients icmf_coefficients(double sigma_star, int d_star, int d) {
    if (d < 1 || d_star < 1) throw Error("widths must be >= 1");
    const double ratio = static_cast<double>(d) / static_cast<double>(d_star);
    const double inv = 1.0 / ratio;
    return {sigma_star * inv, sigma_star * (1.0 / std::sqrt(ratio) - inv)};
}

inline double icmf_forward(const Params& p, const InitSnapshot& snap, double sigma_star,
                           int d_star, std::span<const double> x,
                           const ActivationConfig& cfg = {}) {
    const Params& p0 = snap.params();
    if (p.width != p0.width || p.input_dim != p0.input_dim) {
        throw ShapeError("params and init snapshot disagree in shape");
    }
    if (static_cast<int>(x.size()) != p.input_dim) {
        throw ShapeError("input dimension mismatch in icmf_forward");
    }
    const IcmfCoefficients c = icmf_coefficients(sigma_star, d_star, p.width);
    double live = 0.0;
    double init = 0.0;
    for (int r = 0; r < p.width; ++r) {
        live += p.a_hat[static_cast<std::size_t>(r)] * activation(dot(p.w_row(r), x), cfg);
        init += p0.a_hat[static_cast<std::size_t>(r)] * activation(dot(p0.w_row(r), x), cfg);
    }
    return c.live * live + c.init * init;
}

}  // namespace widthscale
