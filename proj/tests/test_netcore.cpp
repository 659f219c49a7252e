#include <doctest.h>

#include <cmath>
#include <random>

#include "oracle_helpers.hpp"
#include "widthscale/netcore.hpp"

using namespace widthscale;

namespace {

Params random_params(std::mt19937_64& gen, int d, int d_x, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, 1.0);
    Params p(d, d_x);
    for (auto& a : p.a_hat) a = g(gen) * scale;
    for (auto& w : p.w_hat) w = g(gen) * scale;
    return p;
}

std::vector<DataPoint> random_batch(std::mt19937_64& gen, int n, int d_x) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_int_distribution<int> coin(0, 1);
    std::vector<DataPoint> b(n);
    for (auto& pt : b) {
        pt.y = coin(gen) ? 1 : -1;
        pt.x.resize(d_x);
        for (auto& v : pt.x) v = g(gen);
    }
    return b;
}

}  // namespace

TEST_CASE("leaky softplus values and asymptotes") {
    const ActivationConfig cfg{0.2};
    CHECK(activation(0.0, cfg) == doctest::Approx(0.8 * std::log(2.0)).epsilon(1e-15));
    CHECK(activation(50.0, cfg) == doctest::Approx(50.0).epsilon(1e-12));
    CHECK(std::fabs(activation(50.0, cfg) - 50.0) < 1e-9);
    CHECK(std::fabs(activation(-50.0, cfg) - (-10.0)) < 1e-9);
    CHECK_THROWS_AS(ActivationConfig{1.5}.validate(), Error);
    CHECK_THROWS_AS(ActivationConfig{0.0}.validate(), Error);
}

TEST_CASE("activation derivatives") {
    const ActivationConfig cfg{0.2};
    CHECK(activation_prime(0.0, cfg) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(activation_second(0.0, cfg) == doctest::Approx(0.2).epsilon(1e-15));

    // central differences of phi
    const double h = 1e-5;
    for (double z : {0.7, -1.3, 2.9, 0.0}) {
        const double fd1 = (activation(z + h, cfg) - activation(z - h, cfg)) / (2 * h);
        CHECK(activation_prime(z, cfg) == doctest::Approx(fd1).epsilon(1e-7));
        const double fd2 =
            (activation_prime(z + h, cfg) - activation_prime(z - h, cfg)) / (2 * h);
        CHECK(activation_second(z, cfg) == doctest::Approx(fd2).epsilon(1e-6));
    }
}

TEST_CASE("batch activation matches the scalar path") {
    const ActivationConfig cfg{0.2};
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(-60.0, 60.0);
    std::vector<double> z(1001);
    for (auto& v : z) v = u(gen);
    z[0] = 0.0;
    z[1] = -800.0;
    z[2] = 800.0;
    std::vector<double> phi(z.size());
    std::vector<double> phip(z.size());
    phi_pair_batch(z.data(), z.size(), cfg, phi.data(), phip.data());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const ActPair ap = phi_pair(z[i], cfg);
        CHECK(phi[i] == doctest::Approx(ap.phi).epsilon(1e-12));
        CHECK(std::fabs(phip[i] - ap.phi_prime) < 1e-12);
    }
}

TEST_CASE("initialization distributions") {
    SUBCASE("determinism") {
        const Params a = init_params(64, 5, 1234);
        const Params b = init_params(64, 5, 1234);
        CHECK(a.a_hat == b.a_hat);
        CHECK(a.w_hat == b.w_hat);
        const Params c = init_params(64, 5, 1235);
        CHECK(a.a_hat != c.a_hat);
    }
    SUBCASE("moments at d = 1e5") {
        const int d = 100000;
        for (InitDist dist : {InitDist::Gaussian, InitDist::UniformSymmetric}) {
            const Params p = init_params(d, 1, 99, dist);
            double mean = 0.0;
            for (double a : p.a_hat) mean += a;
            mean /= d;
            CHECK(std::fabs(mean) < 4.0 / std::sqrt(static_cast<double>(d)));
            double var = 0.0;
            for (double a : p.a_hat) var += (a - mean) * (a - mean);
            var /= d - 1;
            CHECK(var > 0.95);
            CHECK(var < 1.05);
        }
    }
}

TEST_CASE("forward logits") {
    const ActivationConfig cfg{0.2};
    SUBCASE("single zero-weight neuron gives phi(0)") {
        Params p(1, 3);
        p.a_hat = {1.0};
        p.w_hat = {0.0, 0.0, 0.0};
        const std::vector<double> x = {0.3, -0.7, 2.0};
        CHECK(forward(p, 1.0, x, cfg) == doctest::Approx(0.8 * std::log(2.0)).epsilon(1e-15));
    }
    SUBCASE("opposite output weights cancel") {
        Params p(2, 2);
        p.a_hat = {1.0, -1.0};
        p.w_hat = {0.4, -1.1, 0.4, -1.1};
        const std::vector<double> x = {1.0, 2.0};
        CHECK(forward(p, 2.0, x, cfg) == doctest::Approx(0.0).epsilon(1e-15));
    }
    SUBCASE("random instance matches the naive oracle") {
        std::mt19937_64 gen(3);
        const Params p = random_params(gen, 3, 4);
        const auto x = oracle::random_unit_vector(gen, 4);
        CHECK(forward(p, 0.7, x, cfg)
              == doctest::Approx(oracle::naive_forward(p, 0.7, x, 0.2)).epsilon(1e-12));
    }
    SUBCASE("dimension mismatch") {
        Params p(2, 3);
        const std::vector<double> x = {1.0, 2.0};
        CHECK_THROWS_AS(forward(p, 1.0, x), ShapeError);
    }
}

TEST_CASE("cross-entropy loss and gradient") {
    CHECK(loss_grad(1, 0.0) == doctest::Approx(-0.5).epsilon(1e-15));
    CHECK(loss_grad(1, std::log(3.0)) == doctest::Approx(-0.25).epsilon(1e-14));
    CHECK(loss_value(1, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK_THROWS_AS(loss_grad(0, 1.0), InvalidLabel);
    CHECK_THROWS_AS(loss_value(2, 1.0), InvalidLabel);

    // numerically stable out to |f| = 1e6
    CHECK(std::isfinite(loss_value(1, -1e6)));
    CHECK(loss_value(1, -1e6) == doctest::Approx(1e6).epsilon(1e-12));
    CHECK(loss_value(-1, -1e6) == doctest::Approx(0.0));
    CHECK(loss_grad(1, 1e6) == doctest::Approx(0.0));
    CHECK(loss_grad(1, -1e6) == doctest::Approx(-1.0));
    // range: (-1, 0) for y=+1, (0, 1) for y=-1 (saturating at the ends in
    // floating point once |f| exceeds ~37)
    for (double f : {-30.0, -1.0, 0.0, 2.0, 30.0}) {
        CHECK(loss_grad(1, f) < 0.0);
        CHECK(loss_grad(1, f) > -1.0);
        CHECK(loss_grad(-1, f) > 0.0);
        CHECK(loss_grad(-1, f) < 1.0);
    }
    CHECK(loss_grad(1, 1e6) <= 0.0);
    CHECK(loss_grad(1, -1e6) >= -1.0);
}

TEST_CASE("sgd_step basics") {
    const ActivationConfig cfg{0.2};
    std::mt19937_64 gen(17);
    const Params p = random_params(gen, 4, 3);
    const auto batch = random_batch(gen, 3, 3);
    const std::span<const DataPoint> b{batch.data(), batch.size()};

    SUBCASE("zero learning rates leave parameters unchanged") {
        const Params q = sgd_step(p, {0.5, 0.0, 0.0, 4}, b, b, cfg);
        CHECK(q.a_hat == p.a_hat);
        CHECK(q.w_hat == p.w_hat);
    }
    SUBCASE("empty batch is rejected") {
        CHECK_THROWS_AS(sgd_step(p, {0.5, 1.0, 1.0, 4}, {}, b, cfg), EmptyBatch);
    }
    SUBCASE("dimension mismatch is rejected") {
        auto bad = batch;
        bad[0].x.pop_back();
        CHECK_THROWS_AS(
            sgd_step(p, {0.5, 1.0, 1.0, 4}, {bad.data(), bad.size()}, b, cfg), ShapeError);
    }
    SUBCASE("independent batches differ from coupled") {
        const auto batch2 = random_batch(gen, 3, 3);
        const Params q1 = sgd_step(p, {0.5, 1.0, 1.0, 4}, b, b, cfg);
        const Params q2 =
            sgd_step(p, {0.5, 1.0, 1.0, 4}, b, {batch2.data(), batch2.size()}, cfg);
        CHECK(q1.a_hat == q2.a_hat);  // a-update depends on batch_a only
        CHECK(q1.w_hat != q2.w_hat);
    }
}

TEST_CASE("single-neuron closed-form step") {
    // d = d_x = 1, sigma = 1, a = 1, w = 0, x = 1, y = +1, eta_a = eta_w = 1.
    // Frozen oracle values computed independently before the build:
    //   f      = 0.8 ln 2            = 0.55451774444795621
    //   grad   = -1/(1+e^f)          = -0.36481689431254416
    //   da     = -grad phi(0)        = 0.20229744137070041
    //   dw     = -grad phi'(0)       = 0.21889013658752648
    const ActivationConfig cfg{0.2};
    Params p(1, 1);
    p.a_hat = {1.0};
    p.w_hat = {0.0};
    const std::vector<DataPoint> batch = {{{1.0}, 1}};
    const std::span<const DataPoint> b{batch.data(), batch.size()};
    const Params q = sgd_step(p, {1.0, 1.0, 1.0, 1}, b, b, cfg);
    CHECK(q.a_hat[0] - 1.0 == doctest::Approx(0.20229744137070041).epsilon(1e-12));
    CHECK(q.w_hat[0] == doctest::Approx(0.21889013658752648).epsilon(1e-12));
}

TEST_CASE("sgd increments match finite differences of the batch loss") {
    const ActivationConfig cfg{0.2};
    std::mt19937_64 gen(23);
    for (int trial = 0; trial < 8; ++trial) {
        const int d = 2 + static_cast<int>(gen() % 7);
        const int d_x = 1 + static_cast<int>(gen() % 4);
        const Params p = random_params(gen, d, d_x, 0.8);
        const auto batch_a = random_batch(gen, 1 + static_cast<int>(gen() % 4), d_x);
        const auto batch_w = random_batch(gen, 1 + static_cast<int>(gen() % 4), d_x);
        const Hyperparams hp{0.6, 0.37, 0.81, d};
        const Params q = sgd_step(p, hp, {batch_a.data(), batch_a.size()},
                                  {batch_w.data(), batch_w.size()}, cfg);
        for (int r = 0; r < d; ++r) {
            const double fd_a = oracle::fd_loss_grad_a(
                p, hp.sigma, {batch_a.data(), batch_a.size()}, cfg.alpha, r);
            const double want_da = -hp.eta_hat_a * fd_a;
            CHECK(q.a_hat[r] - p.a_hat[r] == doctest::Approx(want_da).epsilon(1e-5));
            for (int k = 0; k < d_x; ++k) {
                const double fd_w = oracle::fd_loss_grad_w(
                    p, hp.sigma, {batch_w.data(), batch_w.size()}, cfg.alpha, r, k);
                const double want_dw = -hp.eta_hat_w * fd_w;
                const double got = q.w_hat[r * d_x + k] - p.w_hat[r * d_x + k];
                if (std::fabs(want_dw) > 1e-12) {
                    CHECK(got == doctest::Approx(want_dw).epsilon(1e-5));
                }
            }
        }
    }
}

TEST_CASE("hatted and original parameterizations give the same trajectory") {
    const ActivationConfig cfg{0.2};
    std::mt19937_64 gen(31);
    const int d = 6;
    const int d_x = 3;
    const double sigma = 0.35;
    const Hyperparams hp{sigma, 0.9, 0.7, d};
    Params p = random_params(gen, d, d_x);
    oracle::OriginalNet net = oracle::to_original(p, sigma);
    const auto [eta_a, eta_w] = original_learning_rates(hp);
    const auto batch = random_batch(gen, 5, d_x);
    const std::span<const DataPoint> b{batch.data(), batch.size()};
    for (int k = 0; k < 10; ++k) {
        p = sgd_step(p, hp, b, b, cfg);
        oracle::original_sgd_step(net, eta_a, eta_w, b, b, cfg.alpha);
    }
    for (const auto& pt : batch) {
        const double f_hat = forward(p, sigma, pt.x, cfg);
        const double f_orig = oracle::original_forward(net, pt.x, cfg.alpha);
        CHECK(std::fabs(f_hat - f_orig) < 1e-10);
    }
}

TEST_CASE("classification decisions depend only on the logit sign") {
    const ActivationConfig cfg{0.2};
    std::mt19937_64 gen(41);
    const Params p = random_params(gen, 5, 3);
    const auto batch = random_batch(gen, 20, 3);
    for (const auto& pt : batch) {
        const double f1 = forward(p, 0.3, pt.x, cfg);
        const double f2 = forward(p, 0.3 * 17.0, pt.x, cfg);
        CHECK((f1 > 0) == (f2 > 0));
    }
}

TEST_CASE("icmf_forward") {
    const ActivationConfig cfg{0.2};
    std::mt19937_64 gen(53);
    const int d_x = 3;
    const double sigma_star = 0.21;
    const int d_star = 8;

    SUBCASE("reduces to the plain model at d = d*") {
        Params p = random_params(gen, d_star, d_x);
        const InitSnapshot snap(random_params(gen, d_star, d_x));
        const auto x = oracle::random_unit_vector(gen, d_x);
        CHECK(icmf_forward(p, snap, sigma_star, d_star, x, cfg)
              == forward(p, sigma_star, x, cfg));
    }
    SUBCASE("at step 0 the two terms combine to the NTK-scaled init logit") {
        const int d = 32;
        Params p = random_params(gen, d, d_x);
        const InitSnapshot snap(p);
        const auto x = oracle::random_unit_vector(gen, d_x);
        const double want =
            sigma_star * std::pow(static_cast<double>(d) / d_star, -0.5)
            * oracle::naive_forward(p, 1.0, x, cfg.alpha);
        CHECK(icmf_forward(p, snap, sigma_star, d_star, x, cfg)
              == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("random instance matches a naive two-term oracle") {
        const int d = 16;
        Params p = random_params(gen, d, d_x);
        const InitSnapshot snap(random_params(gen, d, d_x));
        const auto x = oracle::random_unit_vector(gen, d_x);
        const double ratio = static_cast<double>(d) / d_star;
        const double want = sigma_star / ratio * oracle::naive_forward(p, 1.0, x, cfg.alpha)
                            + sigma_star * (1.0 / std::sqrt(ratio) - 1.0 / ratio)
                                  * oracle::naive_forward(snap.params(), 1.0, x, cfg.alpha);
        CHECK(icmf_forward(p, snap, sigma_star, d_star, x, cfg)
              == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("shape mismatch is rejected") {
        Params p = random_params(gen, 8, d_x);
        const InitSnapshot snap(random_params(gen, 16, d_x));
        const auto x = oracle::random_unit_vector(gen, d_x);
        CHECK_THROWS_AS(icmf_forward(p, snap, sigma_star, d_star, x, cfg), ShapeError);
    }
}

TEST_CASE("icmf training at the anchor width equals standard training") {
    const ActivationConfig cfg{0.2};
    std::mt19937_64 gen(61);
    const int d = 16;
    const int d_x = 3;
    const double sigma_star = 0.25;
    const Hyperparams hp{sigma_star, 1.1, 0.8, d};
    Params std_p = random_params(gen, d, d_x);
    Params icmf_p = std_p;
    const InitSnapshot snap(std_p);
    const auto batch = random_batch(gen, 6, d_x);
    const std::span<const DataPoint> b{batch.data(), batch.size()};
    const IcmfCoefficients c = icmf_coefficients(sigma_star, d, d);
    CHECK(c.init == 0.0);
    std::vector<double> bias(batch.size(), 0.0);
    for (int k = 0; k < 20; ++k) {
        std_p = sgd_step(std_p, hp, b, b, cfg);
        icmf_p = sgd_step_biased(icmf_p, hp, b, b, cfg, bias, bias);
    }
    for (const auto& pt : batch) {
        CHECK(forward(std_p, sigma_star, pt.x, cfg)
              == icmf_forward(icmf_p, snap, sigma_star, d, pt.x, cfg));
    }
}
