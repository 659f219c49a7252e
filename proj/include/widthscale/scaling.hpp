#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>

#include "widthscale/errors.hpp"

namespace widthscale {

// Default absolute tolerance for treating a condition value as zero.
// Exponents are user-specified rationals in practice, so a tight absolute
// tolerance avoids false boundary hits.
inline constexpr double kExponentTol = 1e-9;

// Power-law exponents (q_sigma, q_tilde_a, q_tilde_w) of the width scaling
// sigma(d) = sigma* (d/d*)^{q_sigma}, eta_hat(d) = eta_hat* (d/d*)^{q_tilde}.
struct ScalingExponents {
    double q_sigma = 0.0;
    double q_tilde_a = 0.0;
    double q_tilde_w = 0.0;

    static constexpr ScalingExponents symmetric(double qs, double qt) noexcept {
        return {qs, qt, qt};
    }

    // Named scalings.
    static constexpr ScalingExponents ntk() noexcept { return symmetric(-0.5, 0.0); }
    static constexpr ScalingExponents mf() noexcept { return symmetric(-1.0, 1.0); }
    static constexpr ScalingExponents sym_default() noexcept { return symmetric(-0.5, 0.5); }
    // Constant original learning rates under He-style init: q_tilde_a = 1, q_tilde_w = 0.
    static constexpr ScalingExponents default_scaling() noexcept { return {-0.5, 1.0, 0.0}; }

    bool is_symmetric(double tol = kExponentTol) const noexcept {
        return std::fabs(q_tilde_a - q_tilde_w) <= tol;
    }

    bool all_finite() const noexcept {
        return std::isfinite(q_sigma) && std::isfinite(q_tilde_a) && std::isfinite(q_tilde_w);
    }

    // Common learning-rate exponent; taxonomy operations require symmetric mode.
    double q_tilde(double tol = kExponentTol) const {
        if (!all_finite()) throw Error("scaling exponents must be finite");
        if (!is_symmetric(tol)) {
            throw NonSymmetricScaling("operation requires q_tilde_a == q_tilde_w");
        }
        return q_tilde_a;
    }
};

// Reference-model proportionality factors (d*, sigma*, eta_hat_a*, eta_hat_w*).
struct Anchors {
    int d_star = 128;
    double sigma_star = 0.088388347648318447;   // 1/sqrt(128)
    double eta_hat_a_star = 2.56;               // 0.02 / sigma_star^2
    double eta_hat_w_star = 0.02;

    void validate() const {
        if (d_star < 1) throw Error("d_star must be >= 1");
        if (!(sigma_star > 0.0) || !(eta_hat_a_star > 0.0) || !(eta_hat_w_star > 0.0)) {
            throw Error("anchors must be strictly positive");
        }
    }

    // Width-d* net with original-parameterization learning rates eta_a = eta_w = 0.02.
    static Anchors reference() noexcept { return {}; }
};

// Hyperparameters of one member of the scaling family at a given width.
struct Hyperparams {
    double sigma = 0.0;
    double eta_hat_a = 0.0;
    double eta_hat_w = 0.0;
    int width = 0;
};

// The four separating condition values of the taxonomy:
//   s1 = q_sigma + 1/2        (finite initial logits)
//   s2 = 2 q_sigma + q~ + 1   (finite initial kernels)
//   s3 = q_sigma + q~ + 1/2   (kernels and logits of the same order)
//   s4 = q_sigma + q~         (kernels start to evolve)
struct ConditionValues {
    double s1 = 0.0;
    double s2 = 0.0;
    double s3 = 0.0;
    double s4 = 0.0;
};

enum class RegionId : std::uint8_t {
    Ntk,
    Mf,
    SymDefault,
    LowerLeftOfNtk,
    LowerRightOfNtk,
    UpperLeftOfMf,
    UpperBetweenMfAndSymDefault,
    UpperRightOfSymDefault,
    FiniteLogitLine,
    FiniteKernelLine,
    LeftFace,
    MiddleFace,
    RightFace,
};

inline constexpr int kRegionCount = 13;

inline constexpr std::array<RegionId, kRegionCount> all_regions() noexcept {
    return {RegionId::Ntk,
            RegionId::Mf,
            RegionId::SymDefault,
            RegionId::LowerLeftOfNtk,
            RegionId::LowerRightOfNtk,
            RegionId::UpperLeftOfMf,
            RegionId::UpperBetweenMfAndSymDefault,
            RegionId::UpperRightOfSymDefault,
            RegionId::FiniteLogitLine,
            RegionId::FiniteKernelLine,
            RegionId::LeftFace,
            RegionId::MiddleFace,
            RegionId::RightFace};
}

inline constexpr std::string_view region_name(RegionId r) noexcept {
    switch (r) {
        case RegionId::Ntk: return "NTK";
        case RegionId::Mf: return "MF";
        case RegionId::SymDefault: return "sym-default";
        case RegionId::LowerLeftOfNtk: return "lower-left-of-NTK";
        case RegionId::LowerRightOfNtk: return "lower-right-of-NTK";
        case RegionId::UpperLeftOfMf: return "upper-left-of-MF";
        case RegionId::UpperBetweenMfAndSymDefault: return "upper-between-MF-and-sym-default";
        case RegionId::UpperRightOfSymDefault: return "upper-right-of-sym-default";
        case RegionId::FiniteLogitLine: return "finite-logit-line";
        case RegionId::FiniteKernelLine: return "finite-kernel-line";
        case RegionId::LeftFace: return "left-face";
        case RegionId::MiddleFace: return "middle-face";
        case RegionId::RightFace: return "right-face";
    }
    return "?";
}

// Limit-dynamics recipe induced by a region's sign pattern:
//   kernel_mode     by sgn s4, init_logit_mode by sgn s3,
//   init_grad_mode  by sgn s1, late_grad_mode  by sgn s2.
enum class KernelMode : std::uint8_t { Constant, Evolving };
enum class InitLogitMode : std::uint8_t { Zero, Gaussian };
enum class GradMode : std::uint8_t { HalfY, Sigmoid, Sign };

struct GradientRegime {
    KernelMode kernel_mode = KernelMode::Constant;
    InitLogitMode init_logit_mode = InitLogitMode::Zero;
    GradMode init_grad_mode = GradMode::Sigmoid;
    GradMode late_grad_mode = GradMode::Sigmoid;

    friend bool operator==(const GradientRegime&, const GradientRegime&) = default;
};

// Sign pattern of (s1, s2, s3, s4) with entries in {-1, 0, +1}.
struct SignPattern {
    int s1 = 0, s2 = 0, s3 = 0, s4 = 0;
    friend bool operator==(const SignPattern&, const SignPattern&) = default;
};

inline int sgn_tol(double v, double tol) noexcept {
    if (std::fabs(v) <= tol) return 0;
    return v > 0.0 ? 1 : -1;
}

namespace detail {

struct RegionEntry {
    SignPattern pattern;
    RegionId id;
};

// The 13 realizable sign patterns inside the stability band s4 in [-1/2, 0].
inline constexpr std::array<RegionEntry, kRegionCount> kRegionTable = {{
    {{0, 0, 0, -1}, RegionId::Ntk},
    {{-1, 0, 1, 0}, RegionId::Mf},
    {{0, 1, 1, 0}, RegionId::SymDefault},
    {{-1, -1, 0, -1}, RegionId::LowerLeftOfNtk},
    {{1, 1, 0, -1}, RegionId::LowerRightOfNtk},
    {{-1, -1, 1, 0}, RegionId::UpperLeftOfMf},
    {{-1, 1, 1, 0}, RegionId::UpperBetweenMfAndSymDefault},
    {{1, 1, 1, 0}, RegionId::UpperRightOfSymDefault},
    {{0, 1, 1, -1}, RegionId::FiniteLogitLine},
    {{-1, 0, 1, -1}, RegionId::FiniteKernelLine},
    {{-1, -1, 1, -1}, RegionId::LeftFace},
    {{-1, 1, 1, -1}, RegionId::MiddleFace},
    {{1, 1, 1, -1}, RegionId::RightFace},
}};

}  // namespace detail

inline SignPattern region_sign_pattern(RegionId id) {
    for (const auto& e : detail::kRegionTable) {
        if (e.id == id) return e.pattern;
    }
    throw Error("unknown region id");
}

// The four separating condition values. The identities s2 - s3 = s1 and s3 - s4 = 1/2
// are made exact in floating point by deriving s3 and s2 from s4 and s1.
inline ConditionValues condition_values(const ScalingExponents& exp,
                                        double tol = kExponentTol) {
    const double qt = exp.q_tilde(tol);
    ConditionValues cv;
    cv.s1 = exp.q_sigma + 0.5;
    cv.s4 = exp.q_sigma + qt;
    cv.s3 = cv.s4 + 0.5;
    cv.s2 = cv.s1 + cv.s3;
    return cv;
}

// Dynamical stability band: q_sigma + q_tilde in [-1/2, 0].
inline bool is_dynamically_stable(const ScalingExponents& exp, double tol) {
    if (!(tol >= 0.0)) throw InvalidTolerance("tolerance must be non-negative");
    const ConditionValues cv = condition_values(exp, std::max(tol, kExponentTol));
    return cv.s4 >= -0.5 - tol && cv.s4 <= tol;
}

inline SignPattern sign_pattern(const ConditionValues& cv, double tol) {
    return {sgn_tol(cv.s1, tol), sgn_tol(cv.s2, tol), sgn_tol(cv.s3, tol),
            sgn_tol(cv.s4, tol)};
}

inline RegionId classify_region(const ScalingExponents& exp, double tol = kExponentTol) {
    if (!is_dynamically_stable(exp, tol)) {
        throw OutsideStabilityBand("scaling lies outside the band q_sigma + q_tilde in [-1/2, 0]");
    }
    const ConditionValues cv = condition_values(exp, tol);
    SignPattern p = sign_pattern(cv, tol);
    // Inside the band s3 >= 0 and s4 <= 0 by construction; values that land
    // epsilon outside because of the band tolerance snap to the boundary sign.
    if (p.s3 < 0) p.s3 = 0;
    if (p.s4 > 0) p.s4 = 0;
    for (const auto& e : detail::kRegionTable) {
        if (e.pattern == p) return e.id;
    }
    throw InconsistentSigns("sign pattern does not correspond to a realizable region");
}

// Hyperparameters at width d per the power laws. Accepts asymmetric exponents
// (the default scaling needs q_tilde_a != q_tilde_w).
inline Hyperparams hyperparams_at(const ScalingExponents& exp, const Anchors& anch, int d) {
    anch.validate();
    if (d < 1) throw Error("width must be >= 1");
    if (!exp.all_finite()) throw Error("scaling exponents must be finite");
    const double ratio = static_cast<double>(d) / static_cast<double>(anch.d_star);
    Hyperparams hp;
    hp.sigma = anch.sigma_star * std::pow(ratio, exp.q_sigma);
    hp.eta_hat_a = anch.eta_hat_a_star * std::pow(ratio, exp.q_tilde_a);
    hp.eta_hat_w = anch.eta_hat_w_star * std::pow(ratio, exp.q_tilde_w);
    hp.width = d;
    return hp;
}

// Learning rates in the original parameterization (sigma_w = 1 convention):
// eta_a = eta_hat_a sigma^2, eta_w = eta_hat_w.
inline std::pair<double, double> original_learning_rates(const Hyperparams& hp) {
    return {hp.eta_hat_a * hp.sigma * hp.sigma, hp.eta_hat_w};
}

inline GradMode grad_mode_of_sign(int s) noexcept {
    if (s < 0) return GradMode::HalfY;
    if (s == 0) return GradMode::Sigmoid;
    return GradMode::Sign;
}

inline GradientRegime gradient_regime(RegionId region) {
    const SignPattern p = region_sign_pattern(region);
    GradientRegime gr;
    gr.kernel_mode = (p.s4 == 0) ? KernelMode::Evolving : KernelMode::Constant;
    gr.init_logit_mode = (p.s3 == 0) ? InitLogitMode::Gaussian : InitLogitMode::Zero;
    gr.init_grad_mode = grad_mode_of_sign(p.s1);
    gr.late_grad_mode = grad_mode_of_sign(p.s2);
    return gr;
}

}  // namespace widthscale
