#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "nlssid/lm.hpp"
#include "nlssid/pnlss.hpp"
#include "nlssid/signals.hpp"
#include "test_helpers.hpp"

using namespace nlssid;

namespace {

struct LinearProblem {
    Eigen::MatrixXd m;
    Eigen::VectorXd b;
    std::optional<Eigen::VectorXd> residual(const Eigen::VectorXd& theta) const {
        return Eigen::VectorXd(m * theta - b);
    }
    Eigen::MatrixXd jacobian(const Eigen::VectorXd&) const { return m; }
};

struct RosenbrockProblem {
    std::optional<Eigen::VectorXd> residual(const Eigen::VectorXd& theta) const {
        Eigen::VectorXd r(2);
        r << 1.0 - theta[0], 10.0 * (theta[1] - theta[0] * theta[0]);
        return r;
    }
    Eigen::MatrixXd jacobian(const Eigen::VectorXd& theta) const {
        Eigen::MatrixXd j(2, 2);
        j << -1.0, 0.0, -20.0 * theta[0], 10.0;
        return j;
    }
};

}  // namespace

TEST_CASE("linear least squares converges in at most two accepted steps") {
    LinearProblem problem{testutil::randn(12, 4, 400), testutil::randn_vec(12, 401)};
    LmSettings settings;
    settings.lambda_init = 1e-8;  // near-Gauss-Newton start; damping only backs off on rejection
    const FitReport report = minimize(problem, Eigen::VectorXd::Zero(4), settings);
    const Eigen::VectorXd normal =
        (problem.m.transpose() * problem.m).ldlt().solve(problem.m.transpose() * problem.b);
    CHECK(report.accepted_steps <= 2);
    CHECK((report.theta - normal).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("Rosenbrock valley reaches the global minimum") {
    Eigen::VectorXd start(2);
    start << -1.2, 1.0;
    LmSettings settings;
    settings.max_iterations = 500;
    const FitReport report = minimize(RosenbrockProblem{}, start, settings);
    CHECK(std::abs(report.theta[0] - 1.0) < 1e-8);
    CHECK(std::abs(report.theta[1] - 1.0) < 1e-8);
}

TEST_CASE("PNLSS fit recovers a slightly perturbed truth") {
    PnlssModel truth = make_pnlss(testutil::random_stable_system(2, 1, 1, 410, 0.5), 2);
    truth.E = 0.05 * testutil::randn(truth.E.rows(), truth.E.cols(), 411);
    truth.F = 0.05 * testutil::randn(truth.F.rows(), truth.F.cols(), 412);
    const Eigen::MatrixXd u = 0.5 * testutil::randn(1, 300, 413);
    const Eigen::MatrixXd y = simulate_pnlss(truth, u).y;
    const double y_std = std::sqrt((y.array() - y.mean()).square().mean());

    const FreeSelection sel = FreeSelection::for_model(truth);
    const Eigen::VectorXd theta = pack_parameters(truth, sel);
    const Eigen::VectorXd start =
        theta.array() * (1.0 + 0.01 * testutil::randn_vec(theta.size(), 414).array());
    LmSettings settings;
    settings.max_iterations = 100;
    auto [fitted, report] = fit_pnlss(unpack_parameters(truth, sel, start), u, y, sel, settings);
    const Eigen::MatrixXd y_fit = simulate_pnlss(fitted, u).y;
    CHECK(rms_error(y_fit.row(0).transpose(), y.row(0).transpose()) < 1e-8 * y_std);
}

TEST_CASE("frequency cost vanishes only at equality and obeys Parseval") {
    const Eigen::VectorXd y = testutil::randn_vec(32, 420);
    const Eigen::VectorXd y_mod = y.array() + 0.1 * testutil::randn_vec(32, 421).array();
    CHECK(frequency_cost(y, y) == 0.0);
    const double freq = frequency_cost(y_mod, y);
    const double time = 32.0 * (y_mod - y).squaredNorm();
    CHECK(std::abs(freq - time) < 1e-10 * time);
}

TEST_CASE("doubling one bin's weight halves its contribution") {
    const Eigen::VectorXd y = testutil::randn_vec(16, 422);
    const Eigen::VectorXd y_mod = y.array() + 0.2 * testutil::randn_vec(16, 423).array();
    const std::vector<int> bins = {3};
    const double base = frequency_cost(y_mod, y, Eigen::VectorXd::Ones(1), bins);
    const double doubled = frequency_cost(y_mod, y, Eigen::VectorXd::Constant(1, 2.0), bins);
    CHECK(doubled == doctest::Approx(base / 2.0).epsilon(1e-12));
}

TEST_CASE("accepted cost trace decreases strictly") {
    Eigen::VectorXd start(2);
    start << -1.2, 1.0;
    const FitReport report = minimize(RosenbrockProblem{}, start);
    REQUIRE(report.cost_trace.size() >= 2);
    for (std::size_t i = 1; i < report.cost_trace.size(); ++i)
        CHECK(report.cost_trace[i] < report.cost_trace[i - 1]);
}

TEST_CASE("reordering the parameters does not change the final cost") {
    const Eigen::MatrixXd m = testutil::randn(10, 3, 430);
    const Eigen::VectorXd b = testutil::randn_vec(10, 431);
    Eigen::MatrixXd permuted(10, 3);
    permuted << m.col(2), m.col(0), m.col(1);
    const FitReport a = minimize(LinearProblem{m, b}, Eigen::VectorXd::Zero(3));
    const FitReport p = minimize(LinearProblem{permuted, b}, Eigen::VectorXd::Zero(3));
    CHECK(std::abs(a.final_cost() - p.final_cost()) < 1e-12 * std::max(1.0, a.final_cost()));
}

TEST_CASE("freeing x0 never ends above the frozen-x0 cost") {
    PnlssModel truth = make_pnlss(testutil::random_stable_system(2, 1, 1, 440, 0.6), 2);
    truth.E = 0.03 * testutil::randn(truth.E.rows(), truth.E.cols(), 441);
    truth.x0 = Eigen::Vector2d(0.4, -0.3);
    const Eigen::MatrixXd u = 0.5 * testutil::randn(1, 150, 442);
    const Eigen::MatrixXd y = simulate_pnlss(truth, u).y;

    PnlssModel init = truth;
    init.x0.setZero();  // both fits start blind to the true initial state
    LmSettings settings;
    settings.max_iterations = 60;
    FreeSelection frozen;
    frozen.x0 = false;
    FreeSelection free = frozen;
    free.x0 = true;
    init.x0_estimated = false;
    const auto frozen_fit = fit_pnlss(init, u, y, frozen, settings);
    init.x0_estimated = true;
    const auto free_fit = fit_pnlss(init, u, y, free, settings);
    CHECK(free_fit.second.final_cost() <= frozen_fit.second.final_cost() * (1.0 + 1e-9) + 1e-24);
}

TEST_CASE("non-finite initial residual is rejected up front") {
    LinearProblem problem{testutil::randn(4, 2, 450), testutil::randn_vec(4, 451)};
    Eigen::VectorXd bad(2);
    bad << std::numeric_limits<double>::quiet_NaN(), 0.0;
    CHECK_THROWS_AS(minimize(problem, bad), std::runtime_error);
}

TEST_CASE("termination reasons are reported") {
    LinearProblem problem{testutil::randn(6, 2, 460), testutil::randn_vec(6, 461)};
    LmSettings settings;
    settings.max_iterations = 1;
    const FitReport capped = minimize(problem, Eigen::VectorXd::Zero(2), settings);
    CHECK(capped.termination == LmTermination::max_iterations);
    const FitReport full = minimize(problem, Eigen::VectorXd::Zero(2));
    CHECK(full.termination != LmTermination::max_iterations);
    CHECK(to_string(full.termination) != to_string(capped.termination));
}
