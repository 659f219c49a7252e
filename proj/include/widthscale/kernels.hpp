#pragma once

#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "widthscale/errors.hpp"
#include "widthscale/netcore.hpp"
#include "widthscale/scaling.hpp"

namespace widthscale {

// Evaluation context for tangent kernels. Holds a view of the parameters plus
// the scaling data the prefactors need; hyper must equal
// hyperparams_at(exponents, anchors, params.width).
struct KernelContext {
    const Params& params;
    Hyperparams hyper;
    Anchors anchors;
    ScalingExponents exponents;
    ActivationConfig act{};

    double width_ratio() const noexcept {
        return static_cast<double>(params.width) / static_cast<double>(anchors.d_star);
    }
};

inline KernelContext make_kernel_context(const Params& p, const ScalingExponents& exp,
                                         const Anchors& anch, const ActivationConfig& act = {}) {
    return KernelContext{p, hyperparams_at(exp, anch, p.width), anch, exp, act};
}

// A data sample together with the loss gradient at the current logit.
struct GradSample {
    std::vector<double> x;
    int y = 1;
    double grad = 0.0;
};

inline GradSample make_grad_sample(const KernelContext& ctx, std::vector<double> x, int y) {
    const double f = forward(ctx.params, ctx.hyper.sigma, x, ctx.act);
    const double g = loss_grad(y, f);
    return {std::move(x), y, g};
}

namespace detail {

inline void check_kernel_input(const KernelContext& ctx, std::span<const double> x) {
    if (static_cast<int>(x.size()) != ctx.params.input_dim) {
        throw ShapeError("kernel input dimension mismatch");
    }
}

}  // namespace detail

// K_a(x,x') = (d/d*)^{q_tilde_a} sigma^2 sum_r phi(w_r^T x) phi(w_r^T x').
// Learning-rate growth factors are embedded in the kernels; callers must not
// multiply by (d/d*)^{q_tilde} again.
inline double kernel_a(const KernelContext& ctx, std::span<const double> x,
                       std::span<const double> xp) {
    detail::check_kernel_input(ctx, x);
    detail::check_kernel_input(ctx, xp);
    const Params& p = ctx.params;
    double s = 0.0;
    for (int r = 0; r < p.width; ++r) {
        const auto wr = p.w_row(r);
        s += activation(dot(wr, x), ctx.act) * activation(dot(wr, xp), ctx.act);
    }
    const double pref = std::pow(ctx.width_ratio(), ctx.exponents.q_tilde_a)
                        * ctx.hyper.sigma * ctx.hyper.sigma;
    return pref * s;
}

// K_w(x,x') = (d/d*)^{q_tilde_w} sigma^2 sum_r |a_r|^2 phi'(w_r^T x) phi'(w_r^T x') x^T x'.
inline double kernel_w(const KernelContext& ctx, std::span<const double> x,
                       std::span<const double> xp) {
    detail::check_kernel_input(ctx, x);
    detail::check_kernel_input(ctx, xp);
    const Params& p = ctx.params;
    double s = 0.0;
    for (int r = 0; r < p.width; ++r) {
        const auto wr = p.w_row(r);
        const double ar = p.a_hat[static_cast<std::size_t>(r)];
        s += ar * ar * activation_prime(dot(wr, x), ctx.act)
             * activation_prime(dot(wr, xp), ctx.act);
    }
    const double pref = std::pow(ctx.width_ratio(), ctx.exponents.q_tilde_w)
                        * ctx.hyper.sigma * ctx.hyper.sigma;
    return pref * s * dot(x, xp);
}

// Normalized kernels K~ = (d/d*)^{-1 - q_tilde - 2 q_sigma} K; the closed form
// sigma*^2 (d*/d) sum ... converges by the law of large numbers and does not
// depend on the exponents given the same parameters.
inline std::pair<double, double> normalized_kernels(const KernelContext& ctx,
                                                    std::span<const double> x,
                                                    std::span<const double> xp) {
    ctx.exponents.q_tilde();  // symmetric mode required
    detail::check_kernel_input(ctx, x);
    detail::check_kernel_input(ctx, xp);
    const Params& p = ctx.params;
    double sa = 0.0;
    double sw = 0.0;
    for (int r = 0; r < p.width; ++r) {
        const auto wr = p.w_row(r);
        const double ar = p.a_hat[static_cast<std::size_t>(r)];
        sa += activation(dot(wr, x), ctx.act) * activation(dot(wr, xp), ctx.act);
        sw += ar * ar * activation_prime(dot(wr, x), ctx.act)
              * activation_prime(dot(wr, xp), ctx.act);
    }
    const double pref = ctx.anchors.sigma_star * ctx.anchors.sigma_star / ctx.width_ratio();
    return {pref * sa, pref * sw * dot(x, xp)};
}

// Linear parts of the one-step model increment w.r.t. the learning-rate
// proportionality factors: df'_{a/w}(x) = -grad_l(x_{a/w}) K_{a/w}(x, x_{a/w}).
inline std::pair<double, double> delta_f_prime(const KernelContext& ctx, const GradSample& gs_a,
                                               const GradSample& gs_w,
                                               std::span<const double> x) {
    return {-gs_a.grad * kernel_a(ctx, x, gs_a.x), -gs_w.grad * kernel_w(ctx, x, gs_w.x)};
}

// Linear parts of the one-step kernel increments w.r.t. the learning-rate
// factors, i.e. exact derivatives of the post-step kernels at eta_hat* = 0.
// The a-kernel carries no a_hat terms, so dK'_aa = 0 identically.

// dK'_aw = d(Delta K_a)/d eta_hat_w* at 0.
inline double delta_k_aw_prime(const KernelContext& ctx, const GradSample& gs_w,
                               std::span<const double> x, std::span<const double> xp) {
    detail::check_kernel_input(ctx, x);
    detail::check_kernel_input(ctx, xp);
    detail::check_kernel_input(ctx, gs_w.x);
    const Params& p = ctx.params;
    const double xw_x = dot(gs_w.x, x);
    const double xw_xp = dot(gs_w.x, xp);
    double s = 0.0;
    for (int r = 0; r < p.width; ++r) {
        const auto wr = p.w_row(r);
        const double zx = dot(wr, x);
        const double zxp = dot(wr, xp);
        const double zw = dot(wr, gs_w.x);
        const double ar = p.a_hat[static_cast<std::size_t>(r)];
        s += ar * activation_prime(zw, ctx.act)
             * (activation_prime(zx, ctx.act) * activation(zxp, ctx.act) * xw_x
                + activation(zx, ctx.act) * activation_prime(zxp, ctx.act) * xw_xp);
    }
    const double sigma = ctx.hyper.sigma;
    const double pref = std::pow(ctx.width_ratio(),
                                 ctx.exponents.q_tilde_a + ctx.exponents.q_tilde_w)
                        * sigma * sigma * sigma;
    return -pref * gs_w.grad * s;
}

// dK'_ww = d(Delta K_w)/d eta_hat_w* at 0.
inline double delta_k_ww_prime(const KernelContext& ctx, const GradSample& gs_w,
                               std::span<const double> x, std::span<const double> xp) {
    detail::check_kernel_input(ctx, x);
    detail::check_kernel_input(ctx, xp);
    detail::check_kernel_input(ctx, gs_w.x);
    const Params& p = ctx.params;
    const double xw_x = dot(gs_w.x, x);
    const double xw_xp = dot(gs_w.x, xp);
    const double x_xp = dot(x, xp);
    double s = 0.0;
    for (int r = 0; r < p.width; ++r) {
        const auto wr = p.w_row(r);
        const double zx = dot(wr, x);
        const double zxp = dot(wr, xp);
        const double zw = dot(wr, gs_w.x);
        const double ar = p.a_hat[static_cast<std::size_t>(r)];
        s += ar * ar * ar * activation_prime(zw, ctx.act)
             * (activation_second(zx, ctx.act) * activation_prime(zxp, ctx.act) * xw_x
                + activation_prime(zx, ctx.act) * activation_second(zxp, ctx.act) * xw_xp);
    }
    const double sigma = ctx.hyper.sigma;
    const double pref = std::pow(ctx.width_ratio(), 2.0 * ctx.exponents.q_tilde_w)
                        * sigma * sigma * sigma;
    return -pref * gs_w.grad * s * x_xp;
}

// dK'_wa = d(Delta K_w)/d eta_hat_a* at 0.
inline double delta_k_wa_prime(const KernelContext& ctx, const GradSample& gs_a,
                               std::span<const double> x, std::span<const double> xp) {
    detail::check_kernel_input(ctx, x);
    detail::check_kernel_input(ctx, xp);
    detail::check_kernel_input(ctx, gs_a.x);
    const Params& p = ctx.params;
    const double x_xp = dot(x, xp);
    double s = 0.0;
    for (int r = 0; r < p.width; ++r) {
        const auto wr = p.w_row(r);
        const double ar = p.a_hat[static_cast<std::size_t>(r)];
        s += 2.0 * ar * activation_prime(dot(wr, x), ctx.act)
             * activation_prime(dot(wr, xp), ctx.act) * activation(dot(wr, gs_a.x), ctx.act);
    }
    const double sigma = ctx.hyper.sigma;
    const double pref = std::pow(ctx.width_ratio(),
                                 ctx.exponents.q_tilde_a + ctx.exponents.q_tilde_w)
                        * sigma * sigma * sigma;
    return -pref * gs_a.grad * s * x_xp;
}

// Mean over a sample of eta_hat_a* K_a(x,x) + eta_hat_w* K_w(x,x).
inline double kernel_diag_summary(const KernelContext& ctx,
                                  std::span<const std::vector<double>> sample) {
    if (sample.empty()) throw EmptySample("kernel_diag_summary needs a non-empty sample");
    double s = 0.0;
    for (const auto& x : sample) {
        s += ctx.anchors.eta_hat_a_star * kernel_a(ctx, x, x)
             + ctx.anchors.eta_hat_w_star * kernel_w(ctx, x, x);
    }
    return s / static_cast<double>(sample.size());
}

}  // namespace widthscale
