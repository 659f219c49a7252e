#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "widthscale/errors.hpp"
#include "widthscale/netcore.hpp"
#include "widthscale/rng.hpp"
#include "widthscale/scaling.hpp"

namespace widthscale {

// Limit simulators operate over a finite pre-declared input set (train, test
// and probe points): the limit objects are functions, and kernels/logits
// outside the registered set are unavailable by design.
struct TrackedInputs {
    int input_dim = 0;
    int count = 0;
    std::vector<double> flat;       // count * input_dim, row i contiguous
    std::vector<double> flat_feat;  // input_dim * count, feature k contiguous

    std::span<const double> row(int i) const noexcept {
        return {flat.data() + static_cast<std::size_t>(i) * input_dim,
                static_cast<std::size_t>(input_dim)};
    }
    const double* feature(int k) const noexcept {
        return flat_feat.data() + static_cast<std::size_t>(k) * count;
    }
};

inline TrackedInputs make_tracked_inputs(std::span<const DataPoint> points) {
    TrackedInputs t;
    if (points.empty()) throw EmptySample("tracked input set must be non-empty");
    t.input_dim = static_cast<int>(points[0].x.size());
    t.count = static_cast<int>(points.size());
    t.flat.reserve(points.size() * points[0].x.size());
    for (const auto& p : points) {
        if (static_cast<int>(p.x.size()) != t.input_dim) throw ShapeError("ragged tracked inputs");
        t.flat.insert(t.flat.end(), p.x.begin(), p.x.end());
    }
    t.flat_feat.resize(t.flat.size());
    for (int i = 0; i < t.count; ++i) {
        for (int k = 0; k < t.input_dim; ++k) {
            t.flat_feat[static_cast<std::size_t>(k) * t.count + i] =
                t.flat[static_cast<std::size_t>(i) * t.input_dim + k];
        }
    }
    return t;
}

// Batch element: an index into the tracked set plus its label.
struct LabeledIndex {
    int index = 0;
    int y = 1;
};

// N weight-space particles discretizing the measure mu as (1/N) sum of deltas.
struct ParticleCloud {
    int input_dim = 0;
    bool antithetic = false;  // adjacent particles are (a, w), (-a, w) pairs
    std::vector<double> a;    // N
    std::vector<double> w;    // N * input_dim, particle r row contiguous

    int count() const noexcept { return static_cast<int>(a.size()); }
    std::span<const double> w_row(int r) const noexcept {
        return {w.data() + static_cast<std::size_t>(r) * input_dim,
                static_cast<std::size_t>(input_dim)};
    }
    std::span<double> w_row(int r) noexcept {
        return {w.data() + static_cast<std::size_t>(r) * input_dim,
                static_cast<std::size_t>(input_dim)};
    }
};

// Monte-Carlo limit kernels K~^(0) and init stds over the tracked inputs.
struct LimitKernelTable {
    int count = 0;
    std::vector<double> k_a;        // count*count
    std::vector<double> k_w;        // count*count
    std::vector<double> sigma0_sq;  // per input: E_w phi^2(w^T x)
    int mc_samples = 0;
    std::uint64_t seed = 0;

    double at_a(int i, int j) const noexcept {
        return k_a[static_cast<std::size_t>(i) * count + j];
    }
    double at_w(int i, int j) const noexcept {
        return k_w[static_cast<std::size_t>(i) * count + j];
    }
};

enum class LimitVariant : std::uint8_t { Plain, Icmf, DefaultInit };
enum class WhichKernel : std::uint8_t { A, W };

struct LimitState {
    GradientRegime regime;
    LimitVariant variant = LimitVariant::Plain;
    std::shared_ptr<const TrackedInputs> inputs;
    std::vector<double> f_tilde;              // normalized logits over tracked inputs
    std::optional<ParticleCloud> cloud;       // Evolving kernel mode
    std::shared_ptr<const LimitKernelTable> table;  // Constant kernel mode
    std::vector<double> init_field;  // sampled gaussian initial-logit field; doubles as
                                     // the frozen IC-MF bias. Empty when the regime
                                     // needs no gaussian draw.
    // phi / phi' of the current cloud at every tracked input (N*T, row per
    // particle); kept in sync with the cloud so transport reuses them.
    std::vector<double> phi_cache;
    std::vector<double> phip_cache;
    long step = 0;
    // At an exact sign tie (f~ = 0) the hinge-limit gradient is -y/2 rather
    // than 0, so N=1 toys do not stall; togglable.
    bool sign_tie_half = true;

    // IC-MF boundedness bookkeeping (exact bound, see icmf_limit_step).
    double icmf_bound_budget = 0.0;
    double icmf_max_xx = 0.0;
    double icmf_max_s = 0.0;  // max_x sigma*^2 d* (1/N) sum phi^2 for the current cloud
    bool icmf_bound_ok = true;

    double logit(int i) const {
        return variant == LimitVariant::Icmf ? f_tilde[i] + init_field[i] : f_tilde[i];
    }
};

// sigma^(0)2(x) estimate: mean over M draws w ~ N(0,I) of phi^2(w^T x).
// Convention: Var f^(0) = sigma*^2 d* sigma^(0)2(x); the d* factor is applied
// by callers.
inline double mc_init_variance(std::span<const double> x, int M, std::uint64_t seed,
                               const ActivationConfig& cfg = {}) {
    if (M < 1) throw Error("mc_init_variance needs M >= 1");
    Rng rng(seed);
    std::vector<double> w(x.size());
    double acc = 0.0;
    for (int m = 0; m < M; ++m) {
        for (auto& wi : w) wi = rng.gaussian();
        const double p = activation(dot(w, x), cfg);
        acc += p * p;
    }
    return acc / static_cast<double>(M);
}

// Limit kernels at initialization:
//   K~_a = sigma*^2 d* E_w phi(w^T x) phi(w^T x')
//   K~_w = sigma*^2 d* E_{a,w} |a|^2 phi'(w^T x) phi'(w^T x') x^T x'
inline double mc_limit_kernel(std::span<const double> x, std::span<const double> xp, int M,
                              std::uint64_t seed, WhichKernel which, const Anchors& anch,
                              const ActivationConfig& cfg = {}) {
    if (M < 1) throw Error("mc_limit_kernel needs M >= 1");
    if (x.size() != xp.size()) throw ShapeError("mc_limit_kernel input dim mismatch");
    anch.validate();
    Rng rng(seed);
    std::vector<double> w(x.size());
    double acc = 0.0;
    for (int m = 0; m < M; ++m) {
        const double a = rng.gaussian();
        for (auto& wi : w) wi = rng.gaussian();
        if (which == WhichKernel::A) {
            acc += activation(dot(w, x), cfg) * activation(dot(w, xp), cfg);
        } else {
            acc += a * a * activation_prime(dot(w, x), cfg) * activation_prime(dot(w, xp), cfg);
        }
    }
    double k = anch.sigma_star * anch.sigma_star * anch.d_star * acc / static_cast<double>(M);
    if (which == WhichKernel::W) k *= dot(x, xp);
    return k;
}

// One joint CLT sample of the initial NTK logit field over the tracked inputs:
//   sigma* (M d*)^{1/2} (1/M) sum_{r<=M} a_r phi(w_r^T x)
// with fresh unit-gaussian draws; preserves cross-input correlations.
inline std::vector<double> sample_init_bias(const TrackedInputs& inputs, int M,
                                            std::uint64_t seed, const Anchors& anch,
                                            const ActivationConfig& cfg = {}) {
    if (M < 1) throw Error("sample_init_bias needs M >= 1");
    anch.validate();
    Rng rng(seed);
    std::vector<double> field(inputs.count, 0.0);
    std::vector<double> w(inputs.input_dim);
    for (int m = 0; m < M; ++m) {
        const double a = rng.gaussian();
        for (auto& wi : w) wi = rng.gaussian();
        for (int i = 0; i < inputs.count; ++i) {
            field[i] += a * activation(dot(w, inputs.row(i)), cfg);
        }
    }
    const double scale = anch.sigma_star
                         * std::sqrt(static_cast<double>(anch.d_star) / static_cast<double>(M));
    for (auto& v : field) v *= scale;
    return field;
}

namespace detail {

inline LimitKernelTable build_kernel_table(const TrackedInputs& inputs, int M,
                                           std::uint64_t seed, const Anchors& anch,
                                           const ActivationConfig& cfg) {
    const int T = inputs.count;
    LimitKernelTable tab;
    tab.count = T;
    tab.mc_samples = M;
    tab.seed = seed;
    tab.k_a.assign(static_cast<std::size_t>(T) * T, 0.0);
    tab.k_w.assign(static_cast<std::size_t>(T) * T, 0.0);
    tab.sigma0_sq.assign(T, 0.0);

    Rng rng(seed);
    std::vector<double> w(inputs.input_dim);
    std::vector<double> phi(T);
    std::vector<double> aphi(T);
    for (int m = 0; m < M; ++m) {
        const double a = rng.gaussian();
        for (auto& wi : w) wi = rng.gaussian();
        for (int i = 0; i < T; ++i) {
            const double z = dot(w, inputs.row(i));
            phi[i] = activation(z, cfg);
            aphi[i] = a * activation_prime(z, cfg);
            tab.sigma0_sq[i] += phi[i] * phi[i];
        }
        for (int i = 0; i < T; ++i) {
            double* row_a = tab.k_a.data() + static_cast<std::size_t>(i) * T;
            double* row_w = tab.k_w.data() + static_cast<std::size_t>(i) * T;
            const double pi = phi[i];
            const double qi = aphi[i];
            for (int j = i; j < T; ++j) {
                row_a[j] += pi * phi[j];
                row_w[j] += qi * aphi[j];
            }
        }
    }
    const double pref = anch.sigma_star * anch.sigma_star * anch.d_star / static_cast<double>(M);
    for (int i = 0; i < T; ++i) {
        tab.sigma0_sq[i] /= static_cast<double>(M);
        for (int j = i; j < T; ++j) {
            const std::size_t ij = static_cast<std::size_t>(i) * T + j;
            const std::size_t ji = static_cast<std::size_t>(j) * T + i;
            tab.k_a[ij] *= pref;
            tab.k_a[ji] = tab.k_a[ij];
            tab.k_w[ij] *= pref * dot(inputs.row(i), inputs.row(j));
            tab.k_w[ji] = tab.k_w[ij];
        }
    }
    return tab;
}

inline ParticleCloud sample_cloud(const TrackedInputs& inputs, int N, std::uint64_t seed,
                                  LimitVariant variant, bool antithetic) {
    if (N < 1) throw Error("particle cloud needs N >= 1");
    if (antithetic && N % 2 != 0) throw Error("antithetic pairing needs even N");
    ParticleCloud cloud;
    cloud.input_dim = inputs.input_dim;
    cloud.antithetic = antithetic;
    cloud.a.assign(N, 0.0);
    cloud.w.assign(static_cast<std::size_t>(N) * inputs.input_dim, 0.0);
    Rng rng(seed);
    for (int r = 0; r < N; ++r) {
        if (antithetic && r % 2 == 1) {
            // pair (a, w) with (-a, w): exact cancellation of the initial logit
            cloud.a[r] = -cloud.a[r - 1];
            auto prev = cloud.w_row(r - 1);
            auto cur = cloud.w_row(r);
            for (int k = 0; k < inputs.input_dim; ++k) cur[k] = prev[k];
            continue;
        }
        cloud.a[r] = variant == LimitVariant::DefaultInit ? 0.0 : rng.gaussian();
        auto row = cloud.w_row(r);
        for (int k = 0; k < inputs.input_dim; ++k) row[k] = rng.gaussian();
    }
    return cloud;
}

// Adds the two members of an antithetic pair with the product rounded before
// the addition (FMA contraction would break the exact cancellation of
// (a phi) + (-a phi) at initialization).
#if defined(__GNUC__) && !defined(__clang__)
__attribute__((optimize("fp-contract=off"), noinline))
#endif
inline void
add_antithetic_pair(double* acc, const double* even_products, double a_odd,
                    const double* phi_odd, int n) {
    for (int i = 0; i < n; ++i) {
        const double p = a_odd * phi_odd[i];
        acc[i] += even_products[i] + p;
    }
}

// Recompute f~(x) = sigma* d* (1/N) sum a phi(w^T x) over all tracked inputs
// and refresh the phi / phi' caches for the current cloud in one pass.
inline void refresh_cloud_state(LimitState& st, const Anchors& anch,
                                const ActivationConfig& cfg, double* max_phi_sq = nullptr) {
    const ParticleCloud& cloud = *st.cloud;
    const TrackedInputs& inputs = *st.inputs;
    const int T = inputs.count;
    const int dx = inputs.input_dim;
    const std::size_t n = static_cast<std::size_t>(cloud.count());
    st.f_tilde.assign(T, 0.0);
    st.phi_cache.resize(n * T);
    st.phip_cache.resize(n * T);
    std::vector<double> phi_sq(max_phi_sq ? T : 0, 0.0);
    std::vector<double> z(T);
    // antithetic pairs cancel member-by-member so the centered initial logit
    // is exactly zero; pair contributions are formed before accumulation
    std::vector<double> pair_buf(cloud.antithetic ? T : 0, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const double ar = cloud.a[r];
        const auto wr = cloud.w_row(static_cast<int>(r));
        double* pc = st.phi_cache.data() + r * T;
        double* ppc = st.phip_cache.data() + r * T;
        std::fill(z.begin(), z.end(), 0.0);
        for (int k = 0; k < dx; ++k) {
            const double wk = wr[static_cast<std::size_t>(k)];
            const double* col = inputs.feature(k);
            for (int i = 0; i < T; ++i) z[static_cast<std::size_t>(i)] += wk * col[i];
        }
        phi_pair_batch(z.data(), static_cast<std::size_t>(T), cfg, pc, ppc);
        if (cloud.antithetic) {
            if (r % 2 == 0) {
                for (int i = 0; i < T; ++i) pair_buf[i] = ar * pc[i];
            } else {
                add_antithetic_pair(st.f_tilde.data(), pair_buf.data(), ar, pc, T);
            }
        } else {
            for (int i = 0; i < T; ++i) st.f_tilde[i] += ar * pc[i];
        }
        if (max_phi_sq) {
            for (int i = 0; i < T; ++i) phi_sq[i] += pc[i] * pc[i];
        }
    }
    const double scale = anch.sigma_star * anch.d_star / static_cast<double>(n);
    for (auto& v : st.f_tilde) v *= scale;
    if (max_phi_sq) {
        const double s2pref = anch.sigma_star * anch.sigma_star * anch.d_star
                              / static_cast<double>(n);
        double mx = 0.0;
        for (double v : phi_sq) mx = std::fmax(mx, s2pref * v);
        *max_phi_sq = mx;
    }
}

inline double regime_gradient(GradMode mode, int y, double f, bool tie_half) {
    switch (mode) {
        case GradMode::HalfY:
            return -0.5 * static_cast<double>(y);
        case GradMode::Sigmoid:
            return loss_grad(y, f);
        case GradMode::Sign: {
            const double yf = static_cast<double>(y) * f;
            if (yf < 0.0) return -static_cast<double>(y);
            if (yf > 0.0) return 0.0;
            return tie_half ? -0.5 * static_cast<double>(y) : 0.0;
        }
    }
    return 0.0;
}

inline void check_batch(const LimitState& st, std::span<const LabeledIndex> batch) {
    if (batch.empty()) throw EmptyBatch("limit step needs a non-empty batch");
    for (const auto& b : batch) {
        if (b.index < 0 || b.index >= st.inputs->count) {
            throw UntrackedInput("batch input is not in the tracked set");
        }
        check_label(b.y);
    }
}

// Gradient of the loss at a batch point per the regime. The first step uses
// init_grad_mode evaluated at the sampled gaussian initial-logit field (the
// physical step-0 logit); later steps use late_grad_mode at the tracked f~.
inline double batch_gradient(const LimitState& st, const LabeledIndex& b) {
    if (st.variant == LimitVariant::Icmf) {
        return loss_grad(b.y, st.logit(b.index));
    }
    if (st.step == 0) {
        const double f0 = st.regime.init_grad_mode == GradMode::HalfY || st.init_field.empty()
                              ? 0.0
                              : st.init_field[b.index];
        return regime_gradient(st.regime.init_grad_mode, b.y, f0, st.sign_tie_half);
    }
    return regime_gradient(st.regime.late_grad_mode, b.y, st.f_tilde[b.index], st.sign_tie_half);
}

}  // namespace detail

// Assemble a limit state at k = 0 for a region and variant. `size` is the
// particle count N in Evolving mode and the MC sample count M otherwise (the
// gaussian field and IC-MF bias also use it as M).
inline LimitState build_limit(RegionId region, LimitVariant variant,
                              std::shared_ptr<const TrackedInputs> inputs, int size,
                              std::uint64_t seed, const Anchors& anch,
                              const ActivationConfig& cfg = {}, bool antithetic = false) {
    if (!inputs || inputs->count == 0) throw EmptySample("build_limit needs tracked inputs");
    anch.validate();
    if (variant == LimitVariant::Icmf && region != RegionId::Mf) {
        throw IncompatibleVariant("the IC-MF variant requires the MF vertex");
    }
    if (variant == LimitVariant::DefaultInit && region != RegionId::SymDefault) {
        throw IncompatibleVariant("the default-scaling limit uses sym-default dynamics");
    }

    LimitState st;
    st.regime = gradient_regime(region);
    st.variant = variant;
    st.inputs = std::move(inputs);

    const bool needs_field = st.regime.init_logit_mode == InitLogitMode::Gaussian
                             || st.regime.init_grad_mode != GradMode::HalfY
                             || variant == LimitVariant::Icmf;
    if (needs_field) {
        st.init_field = sample_init_bias(*st.inputs, size, substream_seed(seed, 0xF1E1Dull),
                                         anch, cfg);
    }

    if (st.regime.kernel_mode == KernelMode::Constant) {
        st.table = std::make_shared<const LimitKernelTable>(detail::build_kernel_table(
            *st.inputs, size, substream_seed(seed, 0x7AB1Eull), anch, cfg));
        if (st.regime.init_logit_mode == InitLogitMode::Gaussian) {
            st.f_tilde = st.init_field;
        } else {
            st.f_tilde.assign(st.inputs->count, 0.0);
        }
    } else {
        st.cloud = detail::sample_cloud(*st.inputs, size,
                                        substream_seed(seed, 0xC10Dull), variant, antithetic);
        const bool track_bound = variant == LimitVariant::Icmf;
        detail::refresh_cloud_state(st, anch, cfg, track_bound ? &st.icmf_max_s : nullptr);
        if (track_bound) {
            double mx = 0.0;
            for (int i = 0; i < st.inputs->count; ++i) {
                for (int j = 0; j < st.inputs->count; ++j) {
                    mx = std::fmax(mx, std::fabs(dot(st.inputs->row(i), st.inputs->row(j))));
                }
            }
            st.icmf_max_xx = mx;
        }
    }
    return st;
}

// Frozen-kernel recursion (App-style constant-kernel dynamics):
//   Delta f~(x) = -eta_a* mean_a[grad K~_a(x, x_a)] - eta_w* mean_w[grad K~_w(x, x_w)].
// The kernel table is never mutated.
inline LimitState constant_kernel_step(LimitState st, const Anchors& anch,
                                       std::span<const LabeledIndex> batch_a,
                                       std::span<const LabeledIndex> batch_w) {
    if (st.regime.kernel_mode != KernelMode::Constant || !st.table) {
        throw Error("constant_kernel_step requires a constant-kernel state");
    }
    detail::check_batch(st, batch_a);
    detail::check_batch(st, batch_w);

    std::vector<double> g_a(batch_a.size());
    std::vector<double> g_w(batch_w.size());
    for (std::size_t i = 0; i < batch_a.size(); ++i) g_a[i] = detail::batch_gradient(st, batch_a[i]);
    for (std::size_t j = 0; j < batch_w.size(); ++j) g_w[j] = detail::batch_gradient(st, batch_w[j]);

    const double ca = -anch.eta_hat_a_star / static_cast<double>(batch_a.size());
    const double cw = -anch.eta_hat_w_star / static_cast<double>(batch_w.size());
    const LimitKernelTable& tab = *st.table;
    for (int t = 0; t < st.inputs->count; ++t) {
        double df = 0.0;
        for (std::size_t i = 0; i < batch_a.size(); ++i) {
            df += ca * g_a[i] * tab.at_a(t, batch_a[i].index);
        }
        for (std::size_t j = 0; j < batch_w.size(); ++j) {
            df += cw * g_w[j] * tab.at_w(t, batch_w[j].index);
        }
        st.f_tilde[t] += df;
    }
    st.step += 1;
    return st;
}

// Measure-transport step: every particle (a, w) moves by
//   [-eta_a* sigma* mean_a[grad phi(w^T x_a)], -eta_w* sigma* mean_w[grad a phi'(w^T x_w) x_w]]
// evaluated at the pre-step particle; f~ is recomputed after transport.
inline LimitState particle_step(LimitState st, const Anchors& anch,
                                std::span<const LabeledIndex> batch_a,
                                std::span<const LabeledIndex> batch_w,
                                const ActivationConfig& cfg = {}) {
    if (st.regime.kernel_mode != KernelMode::Evolving || !st.cloud) {
        throw Error("particle_step requires an evolving-kernel state");
    }
    detail::check_batch(st, batch_a);
    detail::check_batch(st, batch_w);

    std::vector<double> g_a(batch_a.size());
    std::vector<double> g_w(batch_w.size());
    for (std::size_t i = 0; i < batch_a.size(); ++i) g_a[i] = detail::batch_gradient(st, batch_a[i]);
    for (std::size_t j = 0; j < batch_w.size(); ++j) g_w[j] = detail::batch_gradient(st, batch_w[j]);

    const double ca = -anch.eta_hat_a_star * anch.sigma_star / static_cast<double>(batch_a.size());
    const double cw = -anch.eta_hat_w_star * anch.sigma_star / static_cast<double>(batch_w.size());

    ParticleCloud& cloud = *st.cloud;
    const TrackedInputs& in = *st.inputs;
    const int T = in.count;
    const int dx = in.input_dim;
    const std::size_t nw = batch_w.size();

    // feature-major copy of the w-batch
    std::vector<double> xfw(static_cast<std::size_t>(dx) * nw);
    for (std::size_t j = 0; j < nw; ++j) {
        const auto xj = in.row(batch_w[j].index);
        for (int k = 0; k < dx; ++k) xfw[static_cast<std::size_t>(k) * nw + j] = xj[k];
    }

    std::vector<double> c(nw);
    for (int r = 0; r < cloud.count(); ++r) {
        auto wr = cloud.w_row(r);
        const double ar = cloud.a[r];
        const double* pc = st.phi_cache.data() + static_cast<std::size_t>(r) * T;
        const double* ppc = st.phip_cache.data() + static_cast<std::size_t>(r) * T;

        double da = 0.0;
        for (std::size_t i = 0; i < batch_a.size(); ++i) {
            da += g_a[i] * pc[batch_a[i].index];
        }
        cloud.a[r] = ar + ca * da;

        const double cwr = cw * ar;
        for (std::size_t j = 0; j < nw; ++j) c[j] = cwr * g_w[j] * ppc[batch_w[j].index];
        for (int k = 0; k < dx; ++k) {
            const double* col = xfw.data() + static_cast<std::size_t>(k) * nw;
            double acc = 0.0;
            for (std::size_t j = 0; j < nw; ++j) acc += c[j] * col[j];
            wr[static_cast<std::size_t>(k)] += acc;
        }
    }

    detail::refresh_cloud_state(st, anch, cfg,
                                st.variant == LimitVariant::Icmf ? &st.icmf_max_s : nullptr);
    st.step += 1;
    return st;
}

// IC-MF limit step: identical transport to the MF particle step, but logits
// carry the frozen init bias and the gradient is always the sigmoid (IC-MF
// logits stay finite in the limit).
//
// Boundedness bookkeeping: the a-part of the logit change is exactly
// -eta_a* mean[g K~_a(x, x_a)] with |K~_a| <= max_x S(x),
// S(x) = sigma*^2 d* (1/N) sum phi^2(w^T x); the w-part is bounded by
// eta_w* sigma*^2 d* mean(a^2) max|x^T x'| since |phi'| <= 1 and |g| < 1.
inline LimitState icmf_limit_step(LimitState st, const Anchors& anch,
                                  std::span<const LabeledIndex> batch_a,
                                  std::span<const LabeledIndex> batch_w,
                                  const ActivationConfig& cfg = {}) {
    if (st.variant != LimitVariant::Icmf) throw Error("icmf_limit_step requires the IC-MF variant");
    if (st.init_field.empty()) throw MissingInitBias("IC-MF state lacks the frozen init bias");

    const ParticleCloud& cloud = *st.cloud;
    double mean_a_sq = 0.0;
    for (double a : cloud.a) mean_a_sq += a * a;
    mean_a_sq /= static_cast<double>(cloud.count());

    // icmf_max_s tracks the pre-step cloud (updated by the last transport).
    st.icmf_bound_budget += anch.eta_hat_a_star * st.icmf_max_s
                            + anch.eta_hat_w_star * anch.sigma_star * anch.sigma_star
                                  * anch.d_star * mean_a_sq * st.icmf_max_xx;

    st = particle_step(std::move(st), anch, batch_a, batch_w, cfg);

    double max_f = 0.0;
    double max_bias = 0.0;
    for (int i = 0; i < st.inputs->count; ++i) {
        max_f = std::fmax(max_f, std::fabs(st.logit(i)));
        max_bias = std::fmax(max_bias, std::fabs(st.init_field[i]));
    }
    if (max_f > max_bias + st.icmf_bound_budget * (1.0 + 1e-9) + 1e-12) {
        st.icmf_bound_ok = false;
    }
    return st;
}

// Step dispatcher over the three simulator kinds.
inline LimitState limit_step(LimitState st, const Anchors& anch,
                             std::span<const LabeledIndex> batch_a,
                             std::span<const LabeledIndex> batch_w,
                             const ActivationConfig& cfg = {}) {
    if (st.variant == LimitVariant::Icmf) {
        return icmf_limit_step(std::move(st), anch, batch_a, batch_w, cfg);
    }
    if (st.regime.kernel_mode == KernelMode::Constant) {
        return constant_kernel_step(std::move(st), anch, batch_a, batch_w);
    }
    return particle_step(std::move(st), anch, batch_a, batch_w, cfg);
}

}  // namespace widthscale
