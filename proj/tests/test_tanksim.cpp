#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <limits>

#include "nlssid/signals.hpp"
#include "nlssid/tanksim.hpp"

using namespace nlssid;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

TEST_CASE("constant input settles at the Bernoulli equilibrium") {
    // k1*sqrt(x1*) = k4*u* and k2*sqrt(x1*) = k3*sqrt(x2*)
    TankParams p;
    p.k1 = 1.0;
    p.k4 = 1.0;
    const Eigen::VectorXd u = Eigen::VectorXd::Ones(4000);
    const TankSimResult sim = simulate_tanks(p, u, 1.0, Eigen::Vector2d(0.2, 0.2));
    CHECK(std::abs(sim.states(0, 3999) - 1.0) < 1e-6);
    const double x2_star = std::pow(p.k2 / p.k3, 2);  // (k2/k3)^2 * x1*
    CHECK(std::abs(sim.states(1, 3999) - x2_star) < 1e-5);
}

TEST_CASE("the origin is absorbing with zero input") {
    const TankParams p;
    const Eigen::VectorXd u = Eigen::VectorXd::Zero(50);
    const TankSimResult sim = simulate_tanks(p, u, 1.0, Eigen::Vector2d::Zero());
    CHECK(sim.states.cwiseAbs().maxCoeff() == 0.0);
    CHECK(sim.y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("RK4 trajectory matches a 100x finer reference integration") {
    TankParams p;
    p.x1_max = 50.0;  // keep the trajectory away from the stochastic overflow path
    p.x2_max = 50.0;
    const MultisineSpec spec = make_lowpass_multisine(128, 1.0, 10, 0.3, 2);
    const Eigen::VectorXd u = generate_multisine(spec, 128).array() + 1.0;
    const Eigen::Vector2d x0(1.0, 1.0);
    const TankSimResult coarse = simulate_tanks(p, u, 1.0, x0, 8);
    const TankSimResult fine = simulate_tanks(p, u, 1.0, x0, 800);
    const double scale = fine.y.cwiseAbs().maxCoeff();
    CHECK((coarse.y - fine.y).cwiseAbs().maxCoeff() < 1e-6 * scale);
}

TEST_CASE("infinite SNR returns the input unchanged") {
    const Eigen::VectorXd clean = Eigen::VectorXd::LinSpaced(30, -1.0, 1.0);
    const Eigen::VectorXd noisy = snr_scale_noise(clean, kInf, 9);
    CHECK((noisy - clean).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("0 dB noise has the signal's AC standard deviation") {
    const int n = 100000;
    Eigen::VectorXd clean(n);
    for (int t = 0; t < n; ++t) clean[t] = std::sqrt(2.0) * std::cos(2.0 * std::numbers::pi * t / 100.0);
    const double ac_std = std::sqrt((clean.array() - clean.mean()).square().mean());
    const Eigen::VectorXd noise = snr_scale_noise(clean, 0.0, 4) - clean;
    const double noise_std = std::sqrt(noise.array().square().mean());
    CHECK(std::abs(noise_std - ac_std) < 0.05 * ac_std);
}

TEST_CASE("40 dB noise on a unit-std sequence has std 0.01") {
    const int n = 100000;
    Eigen::VectorXd clean(n);
    for (int t = 0; t < n; ++t) clean[t] = std::sqrt(2.0) * std::cos(2.0 * std::numbers::pi * t / 100.0);
    const Eigen::VectorXd noise = snr_scale_noise(clean, 40.0, 4) - clean;
    const double noise_std = std::sqrt(noise.array().square().mean());
    CHECK(noise_std == doctest::Approx(0.01).epsilon(0.10));
}

TEST_CASE("states stay inside [0, x_max] under aggressive input") {
    TankParams p;
    p.x1_max = 2.0;
    p.x2_max = 2.0;
    const Eigen::VectorXd u = Eigen::VectorXd::Constant(300, 5.0);
    const TankSimResult sim = simulate_tanks(p, u, 1.0, Eigen::Vector2d(1.9, 0.0));
    CHECK(sim.states.minCoeff() >= 0.0);
    CHECK(sim.states.row(0).maxCoeff() <= p.x1_max + 1e-12);
    CHECK(sim.states.row(1).maxCoeff() <= p.x2_max + 1e-12);
}

TEST_CASE("x2 rises while the inter-tank flow balance is positive") {
    const TankParams p;
    const Eigen::VectorXd u = Eigen::VectorXd::Zero(60);
    const TankSimResult sim = simulate_tanks(p, u, 1.0, Eigen::Vector2d(4.0, 0.0));
    for (int t = 0; t + 1 < 60; ++t) {
        const double drive_now = p.k2 * std::sqrt(sim.states(0, t)) -
                                 p.k3 * std::sqrt(sim.states(1, t));
        const double drive_next = p.k2 * std::sqrt(sim.states(0, t + 1)) -
                                  p.k3 * std::sqrt(sim.states(1, t + 1));
        if (drive_now > 1e-3 && drive_next > 1e-3)
            CHECK(sim.states(1, t + 1) > sim.states(1, t));
    }
}

TEST_CASE("halving the step shrinks the error by about 2^4") {
    TankParams p;
    p.x1_max = 50.0;
    p.x2_max = 50.0;
    const MultisineSpec spec = make_lowpass_multisine(64, 1.0, 8, 0.4, 6);
    const Eigen::VectorXd u = generate_multisine(spec, 64).array() + 1.2;
    const Eigen::Vector2d x0(1.5, 1.0);
    const Eigen::VectorXd ref = simulate_tanks(p, u, 1.0, x0, 512).y;
    const double e1 = (simulate_tanks(p, u, 1.0, x0, 2).y - ref).cwiseAbs().maxCoeff();
    const double e2 = (simulate_tanks(p, u, 1.0, x0, 4).y - ref).cwiseAbs().maxCoeff();
    const double ratio = e1 / e2;
    CHECK(ratio > 8.0);
    CHECK(ratio < 32.0);
}

TEST_CASE("measurement noise is reproducible from the seed") {
    TankParams p;
    p.output_snr_db = 40.0;
    p.seed = 77;
    const Eigen::VectorXd u = Eigen::VectorXd::Constant(100, 0.8);
    const TankSimResult a = simulate_tanks(p, u, 1.0, Eigen::Vector2d(0.5, 0.5));
    const TankSimResult b = simulate_tanks(p, u, 1.0, Eigen::Vector2d(0.5, 0.5));
    CHECK((a.y - b.y).cwiseAbs().maxCoeff() == 0.0);
    p.seed = 78;
    const TankSimResult c = simulate_tanks(p, u, 1.0, Eigen::Vector2d(0.5, 0.5));
    CHECK((a.y - c.y).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("input and parameter guards") {
    TankParams p;
    Eigen::VectorXd u = Eigen::VectorXd::Ones(10);
    u[3] = -0.1;
    CHECK_THROWS_AS(simulate_tanks(p, u, 1.0, Eigen::Vector2d::Zero()), std::invalid_argument);
    CHECK_THROWS_AS(simulate_tanks(p, Eigen::VectorXd::Ones(10), 0.0, Eigen::Vector2d::Zero()),
                    std::invalid_argument);
    CHECK_THROWS_AS(simulate_tanks(p, Eigen::VectorXd::Ones(10), 1.0, Eigen::Vector2d(-1.0, 0.0)),
                    std::invalid_argument);
    p.k2 = 0.0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}
