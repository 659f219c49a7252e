#include <doctest.h>

#include <cmath>
#include <random>

#include "oracle_helpers.hpp"
#include "widthscale/kernels.hpp"

using namespace widthscale;

namespace {

struct Fixture {
    Anchors anch;
    ActivationConfig act{0.2};
    Params params;
    ScalingExponents exps = ScalingExponents::symmetric(-0.5, 0.25);
    std::mt19937_64 gen{101};

    Fixture(int d = 6, int d_x = 3) : params(d, d_x) {
        anch.d_star = 4;
        anch.sigma_star = 0.3;
        std::normal_distribution<double> g(0.0, 1.0);
        for (auto& a : params.a_hat) a = g(gen);
        for (auto& w : params.w_hat) w = g(gen);
    }

    KernelContext ctx() const { return make_kernel_context(params, exps, anch, act); }

    std::vector<double> vec(int n) {
        std::normal_distribution<double> g(0.0, 1.0);
        std::vector<double> x(n);
        for (auto& v : x) v = g(gen);
        return x;
    }
};

double naive_kernel_a(const KernelContext& c, std::span<const double> x,
                      std::span<const double> xp) {
    double s = 0.0;
    for (int r = 0; r < c.params.width; ++r) {
        double zx = 0.0;
        double zxp = 0.0;
        for (int k = 0; k < c.params.input_dim; ++k) {
            zx += c.params.w_hat[r * c.params.input_dim + k] * x[k];
            zxp += c.params.w_hat[r * c.params.input_dim + k] * xp[k];
        }
        s += oracle::naive_phi(zx, c.act.alpha) * oracle::naive_phi(zxp, c.act.alpha);
    }
    const double ratio = static_cast<double>(c.params.width) / c.anchors.d_star;
    return std::pow(ratio, c.exponents.q_tilde_a) * c.hyper.sigma * c.hyper.sigma * s;
}

double naive_kernel_w(const KernelContext& c, std::span<const double> x,
                      std::span<const double> xp) {
    double s = 0.0;
    double xdot = 0.0;
    for (int k = 0; k < c.params.input_dim; ++k) xdot += x[k] * xp[k];
    for (int r = 0; r < c.params.width; ++r) {
        double zx = 0.0;
        double zxp = 0.0;
        for (int k = 0; k < c.params.input_dim; ++k) {
            zx += c.params.w_hat[r * c.params.input_dim + k] * x[k];
            zxp += c.params.w_hat[r * c.params.input_dim + k] * xp[k];
        }
        s += c.params.a_hat[r] * c.params.a_hat[r] * oracle::naive_phi_prime(zx, c.act.alpha)
             * oracle::naive_phi_prime(zxp, c.act.alpha);
    }
    const double ratio = static_cast<double>(c.params.width) / c.anchors.d_star;
    return std::pow(ratio, c.exponents.q_tilde_w) * c.hyper.sigma * c.hyper.sigma * s * xdot;
}

}  // namespace

TEST_CASE("kernel_a basics") {
    Fixture f;
    const auto ctx = f.ctx();
    const auto x = f.vec(3);
    const auto xp = f.vec(3);
    CHECK(kernel_a(ctx, x, x) >= 0.0);
    CHECK(kernel_a(ctx, x, xp) == kernel_a(ctx, xp, x));
    CHECK(kernel_a(ctx, x, xp) == doctest::Approx(naive_kernel_a(ctx, x, xp)).epsilon(1e-12));

    Fixture f1(1, 2);
    const auto ctx1 = f1.ctx();
    const std::vector<double> u = {0.5, -0.25};
    const std::vector<double> v = {1.5, 2.0};
    CHECK(kernel_a(ctx1, u, v) == doctest::Approx(naive_kernel_a(ctx1, u, v)).epsilon(1e-12));

    const std::vector<double> bad = {1.0};
    CHECK_THROWS_AS(kernel_a(ctx, bad, xp), ShapeError);
}

TEST_CASE("kernel_w basics") {
    Fixture f;
    const auto ctx = f.ctx();
    const std::vector<double> x = {1.0, 0.0, 0.0};
    const std::vector<double> xo = {0.0, 1.3, -0.4};  // orthogonal to x
    CHECK(kernel_w(ctx, x, xo) == 0.0);
    const auto y = f.vec(3);
    CHECK(kernel_w(ctx, y, y) >= 0.0);
    const auto yp = f.vec(3);
    CHECK(kernel_w(ctx, y, yp) == doctest::Approx(naive_kernel_w(ctx, y, yp)).epsilon(1e-12));
    CHECK(kernel_w(ctx, y, yp) == kernel_w(ctx, yp, y));
}

TEST_CASE("normalized kernels") {
    Fixture f;
    const auto ctx = f.ctx();
    const auto x = f.vec(3);
    const auto xp = f.vec(3);
    const auto [ka, kw] = normalized_kernels(ctx, x, xp);
    const double ratio = static_cast<double>(f.params.width) / f.anch.d_star;
    const double norm =
        std::pow(ratio, -1.0 - f.exps.q_tilde_a - 2.0 * f.exps.q_sigma);
    CHECK(ka == doctest::Approx(kernel_a(ctx, x, xp) * norm).epsilon(1e-12));
    CHECK(kw == doctest::Approx(kernel_w(ctx, x, xp) * norm).epsilon(1e-12));

    // at the NTK point the normalization factor is exactly 1
    Fixture fn;
    fn.exps = ScalingExponents::ntk();
    const auto ctxn = fn.ctx();
    const auto [kna, knw] = normalized_kernels(ctxn, x, xp);
    CHECK(kna == doctest::Approx(kernel_a(ctxn, x, xp)).epsilon(1e-12));
    CHECK(knw == doctest::Approx(kernel_w(ctxn, x, xp)).epsilon(1e-12));

    Fixture fd_;
    fd_.exps = ScalingExponents::default_scaling();
    CHECK_THROWS_AS(normalized_kernels(fd_.ctx(), x, xp), NonSymmetricScaling);
}

TEST_CASE("normalized kernels converge with width (law of large numbers)") {
    Anchors anch;
    anch.d_star = 16;
    anch.sigma_star = 0.4;
    const ActivationConfig act{0.2};
    std::mt19937_64 gen(7);
    const auto x = oracle::random_unit_vector(gen, 4);
    const auto xp = oracle::random_unit_vector(gen, 4);
    auto ka_at = [&](int d, std::uint64_t seed) {
        const Params p = init_params(d, 4, seed);
        const auto ctx = make_kernel_context(p, ScalingExponents::ntk(), anch, act);
        return normalized_kernels(ctx, x, xp).first;
    };
    // spread across fresh inits shrinks roughly like d^{-1/2}
    auto spread = [&](int d) {
        double mn = 1e300;
        double mx = -1e300;
        for (std::uint64_t s = 0; s < 8; ++s) {
            const double v = ka_at(d, 1000 + s);
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        return mx - mn;
    };
    const double s_small = spread(256);
    const double s_big = spread(16384);
    CHECK(s_big < s_small);  // shrinking
    CHECK(s_big < s_small / 2.0);  // at least ~sqrt(64)/4 of the ideal factor 8
}

TEST_CASE("delta_f_prime") {
    Fixture f;
    const auto ctx = f.ctx();
    const auto x = f.vec(3);

    SUBCASE("zero gradient gives zero increments") {
        GradSample ga{f.vec(3), 1, 0.0};
        GradSample gw{f.vec(3), -1, 0.0};
        const auto [da, dw] = delta_f_prime(ctx, ga, gw, x);
        CHECK(da == 0.0);
        CHECK(dw == 0.0);
    }
    SUBCASE("matches the direct formula") {
        const GradSample ga = make_grad_sample(ctx, f.vec(3), 1);
        const GradSample gw = make_grad_sample(ctx, f.vec(3), -1);
        const auto [da, dw] = delta_f_prime(ctx, ga, gw, x);
        CHECK(da == doctest::Approx(-ga.grad * kernel_a(ctx, x, ga.x)).epsilon(1e-14));
        CHECK(dw == doctest::Approx(-gw.grad * kernel_w(ctx, x, gw.x)).epsilon(1e-14));
    }
    SUBCASE("first-order residual shrinks quadratically in the learning rates") {
        // one-step logit change minus the linear part scales as O(eta*^2)
        const GradSample ga = make_grad_sample(ctx, f.vec(3), 1);
        const GradSample gw = make_grad_sample(ctx, f.vec(3), -1);
        const auto [dfa, dfw] = delta_f_prime(ctx, ga, gw, x);
        auto residual = [&](double h) {
            // actual step with eta_hat_a* = eta_hat_w* = h, single-sample batches
            const double ratio = f.ctx().width_ratio();
            Hyperparams hp;
            hp.sigma = f.ctx().hyper.sigma;
            hp.eta_hat_a = h * std::pow(ratio, f.exps.q_tilde_a);
            hp.eta_hat_w = h * std::pow(ratio, f.exps.q_tilde_w);
            hp.width = f.params.width;
            const std::vector<DataPoint> ba = {{ga.x, ga.y}};
            const std::vector<DataPoint> bw = {{gw.x, gw.y}};
            const Params q = sgd_step(f.params, hp, {ba.data(), 1}, {bw.data(), 1}, f.act);
            const double df = forward(q, hp.sigma, x, f.act) - forward(f.params, hp.sigma, x, f.act);
            return std::fabs(df - h * dfa - h * dfw);
        };
        const double r1 = residual(2e-3);
        const double r2 = residual(1e-3);
        CHECK(r1 / r2 == doctest::Approx(4.0).epsilon(0.15));
    }
}

namespace {

// finite differences of the one-step kernel change in the learning-rate factor
struct DeltaKFd {
    const Fixture& f;
    KernelContext ctx;
    GradSample gs;

    Params stepped_w(double eta_w_star) const {
        Params q = f.params;
        const double etaw =
            eta_w_star * std::pow(ctx.width_ratio(), f.exps.q_tilde_w) * ctx.hyper.sigma;
        for (int r = 0; r < q.width; ++r) {
            const double c = -etaw * gs.grad * f.params.a_hat[r]
                             * activation_prime(dot(f.params.w_row(r), gs.x), f.act);
            for (int k = 0; k < q.input_dim; ++k) q.w_row(r)[k] += c * gs.x[k];
        }
        return q;
    }
    Params stepped_a(double eta_a_star) const {
        Params q = f.params;
        const double etaa =
            eta_a_star * std::pow(ctx.width_ratio(), f.exps.q_tilde_a) * ctx.hyper.sigma;
        for (int r = 0; r < q.width; ++r) {
            q.a_hat[r] += -etaa * gs.grad * activation(dot(f.params.w_row(r), gs.x), f.act);
        }
        return q;
    }
};

}  // namespace

TEST_CASE("kernel increment linear parts match finite differences") {
    Fixture f(4, 3);
    for (const auto exps :
         {ScalingExponents::symmetric(-0.5, 0.25), ScalingExponents::ntk(),
          ScalingExponents::default_scaling()}) {
        f.exps = exps;
        const auto ctx = f.ctx();
        const auto x = f.vec(3);
        const auto xp = f.vec(3);
        const GradSample gw = make_grad_sample(ctx, f.vec(3), 1);
        const GradSample ga = make_grad_sample(ctx, f.vec(3), -1);
        const double h = 1e-5;

        DeltaKFd fd_w{f, ctx, gw};
        auto ka_after = [&](double e) {
            const Params q = fd_w.stepped_w(e);
            return kernel_a(make_kernel_context(q, f.exps, f.anch, f.act), x, xp);
        };
        auto kw_after_w = [&](double e) {
            const Params q = fd_w.stepped_w(e);
            return kernel_w(make_kernel_context(q, f.exps, f.anch, f.act), x, xp);
        };
        DeltaKFd fd_a{f, ctx, ga};
        auto kw_after_a = [&](double e) {
            const Params q = fd_a.stepped_a(e);
            return kernel_w(make_kernel_context(q, f.exps, f.anch, f.act), x, xp);
        };
        auto ka_after_a = [&](double e) {
            const Params q = fd_a.stepped_a(e);
            return kernel_a(make_kernel_context(q, f.exps, f.anch, f.act), x, xp);
        };

        const double fd_aw = (ka_after(h) - ka_after(-h)) / (2 * h);
        const double fd_ww = (kw_after_w(h) - kw_after_w(-h)) / (2 * h);
        const double fd_wa = (kw_after_a(h) - kw_after_a(-h)) / (2 * h);
        const double fd_aa = (ka_after_a(h) - ka_after_a(-h)) / (2 * h);

        CHECK(delta_k_aw_prime(ctx, gw, x, xp) == doctest::Approx(fd_aw).epsilon(1e-4));
        CHECK(delta_k_ww_prime(ctx, gw, x, xp) == doctest::Approx(fd_ww).epsilon(1e-4));
        CHECK(delta_k_wa_prime(ctx, ga, x, xp) == doctest::Approx(fd_wa).epsilon(1e-4));
        CHECK(std::fabs(fd_aa) < 1e-10);  // dK'_aa = 0: K_a carries no a_hat terms
    }
}

TEST_CASE("kernel increment edge cases") {
    Fixture f(4, 3);
    const auto ctx = f.ctx();
    const auto x = f.vec(3);
    const auto xp = f.vec(3);
    SUBCASE("zero gradient gives zero increments") {
        GradSample g0{f.vec(3), 1, 0.0};
        CHECK(delta_k_aw_prime(ctx, g0, x, xp) == 0.0);
        CHECK(delta_k_ww_prime(ctx, g0, x, xp) == 0.0);
        CHECK(delta_k_wa_prime(ctx, g0, x, xp) == 0.0);
    }
    SUBCASE("dK'_ww vanishes on orthogonal inputs") {
        const std::vector<double> u = {1.0, 0.0, 0.0};
        const std::vector<double> v = {0.0, 2.0, -0.7};
        const GradSample gw = make_grad_sample(ctx, f.vec(3), 1);
        CHECK(delta_k_ww_prime(ctx, gw, u, v) == 0.0);
        CHECK(delta_k_wa_prime(ctx, gw, u, v) == 0.0);
    }
}

TEST_CASE("kernel diag summary") {
    Fixture f;
    const auto ctx = f.ctx();
    std::vector<std::vector<double>> sample = {f.vec(3), f.vec(3), f.vec(3)};
    double want = 0.0;
    for (const auto& x : sample) {
        want += f.anch.eta_hat_a_star * kernel_a(ctx, x, x)
                + f.anch.eta_hat_w_star * kernel_w(ctx, x, x);
    }
    want /= sample.size();
    CHECK(kernel_diag_summary(ctx, sample) == doctest::Approx(want).epsilon(1e-14));
    CHECK(kernel_diag_summary(ctx, sample) >= 0.0);
    CHECK_THROWS_AS(kernel_diag_summary(ctx, {}), EmptySample);

    // with eta_hat_w* = 0 only the a-kernel contributes
    KernelContext ctx0 = ctx;
    ctx0.anchors.eta_hat_w_star = 0.0;
    std::vector<std::vector<double>> one = {sample[0]};
    CHECK(kernel_diag_summary(ctx0, one)
          == doctest::Approx(ctx.anchors.eta_hat_a_star * kernel_a(ctx, one[0], one[0]))
                 .epsilon(1e-14));
}

TEST_CASE("the a-kernel Gram matrix is positive semidefinite") {
    Fixture f(10, 4);
    const auto ctx = f.ctx();
    const int n = 8;
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < n; ++i) pts.push_back(f.vec(4));
    std::vector<double> gram(n * n);
    double trace = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) gram[i * n + j] = kernel_a(ctx, pts[i], pts[j]);
        trace += gram[i * n + i];
    }
    const auto eig = oracle::jacobi_eigenvalues(gram, n);
    for (double e : eig) CHECK(e >= -1e-10 * trace);
}
