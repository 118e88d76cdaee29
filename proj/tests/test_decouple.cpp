#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "nlssid/decouple.hpp"
#include "nlssid/pnlss.hpp"
#include "test_helpers.hpp"

using namespace nlssid;

namespace {

// Decoupled truth with gentle scales so everything downstream stays bounded.
DecoupledModel random_decoupled(std::uint64_t seed, int r = 2, int d = 3) {
    DecoupledModel model;
    model.lin = testutil::random_stable_system(2, 1, 1, seed, 0.5);
    model.v = testutil::randn(3, r, seed + 1);
    for (int l = 0; l < r; ++l) model.v.col(l).normalize();
    model.w_x = 0.1 * testutil::randn(2, r, seed + 2);
    model.w_y = 0.1 * testutil::randn(1, r, seed + 3);
    model.coeffs = 0.3 * testutil::randn(r, d - 1, seed + 4);
    model.degree = d;
    model.x0 = Eigen::VectorXd::Zero(2);
    return model;
}

// p(s) = [E zeta(s); F eta(s)] for the coupled form.
Eigen::VectorXd coupled_p(const PnlssModel& model, const Eigen::VectorXd& z) {
    Eigen::VectorXd out(model.n() + model.n_y());
    out.head(model.n()) = model.E * model.basis_state.evaluate(z);
    out.tail(model.n_y()) = model.F * model.basis_output.evaluate(z);
    return out;
}

// Same map in decoupled coordinates: [W_x; W_y] g(V^T z).
Eigen::VectorXd decoupled_p(const DecoupledModel& model, const Eigen::VectorXd& z) {
    Eigen::VectorXd g, dg;
    model.branch_values(model.v.transpose() * z, g, dg);
    Eigen::VectorXd out(model.n() + model.n_y());
    out.head(model.n()) = model.w_x * g;
    out.tail(model.n_y()) = model.w_y * g;
    return out;
}

JacobianTensor tensor_from_factors(const Eigen::MatrixXd& w, const Eigen::MatrixXd& v,
                                   const Eigen::MatrixXd& h, std::uint64_t seed) {
    JacobianTensor tensor;
    tensor.points = testutil::randn(v.rows(), h.rows(), seed);
    for (Eigen::Index k = 0; k < h.rows(); ++k) {
        Eigen::MatrixXd slice = Eigen::MatrixXd::Zero(w.rows(), v.rows());
        for (Eigen::Index l = 0; l < w.cols(); ++l)
            slice += h(k, l) * w.col(l) * v.col(l).transpose();
        tensor.slices.push_back(slice);
    }
    return tensor;
}

// best |cosine| match of column c against any column of m
double best_alignment(const Eigen::MatrixXd& m, const Eigen::VectorXd& c) {
    double best = 0.0;
    for (Eigen::Index l = 0; l < m.cols(); ++l) {
        const double cosine =
            std::abs(m.col(l).dot(c)) / (m.col(l).norm() * c.norm());
        best = std::max(best, cosine);
    }
    return best;
}

}  // namespace

TEST_CASE("zero polynomial part gives an identically zero tensor") {
    const PnlssModel model = make_pnlss(testutil::random_stable_system(2, 1, 1, 700, 0.6), 3);
    const JacobianTensor tensor = sample_jacobians(model, 20, 701);
    REQUIRE(tensor.n_samples() == 20);
    for (const auto& slice : tensor.slices) CHECK(slice.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("a single x^2 monomial has Jacobian 2s") {
    LinearStateSpace lin;
    lin.A = Eigen::MatrixXd::Zero(1, 1);
    lin.B = Eigen::MatrixXd::Zero(1, 1);
    lin.C = Eigen::MatrixXd::Ones(1, 1);
    lin.D = Eigen::MatrixXd::Zero(1, 1);
    PnlssModel model = make_pnlss(lin, 2);
    model.E(0, 0) = 1.0;  // x^2 column
    const JacobianTensor tensor = sample_jacobians(model, 30, 702);
    for (Eigen::Index k = 0; k < 30; ++k) {
        const double x = tensor.points(0, k);
        CHECK(std::abs(tensor.slices[static_cast<std::size_t>(k)](0, 0) - 2.0 * x) < 1e-14);
    }
}

TEST_CASE("sampled Jacobians match central finite differences of p") {
    PnlssModel model = make_pnlss(testutil::random_stable_system(2, 1, 1, 710, 0.6), 3);
    model.E = 0.2 * testutil::randn(model.E.rows(), model.E.cols(), 711);
    model.F = 0.2 * testutil::randn(model.F.rows(), model.F.cols(), 712);
    const JacobianTensor tensor = sample_jacobians(model, 10, 713);
    for (Eigen::Index k = 0; k < 10; ++k) {
        const Eigen::VectorXd z = tensor.points.col(k);
        for (int j = 0; j < 3; ++j) {
            const double h = 1e-6 * std::max(1.0, std::abs(z[j]));
            Eigen::VectorXd zp = z, zm = z;
            zp[j] += h;
            zm[j] -= h;
            const Eigen::VectorXd fd = (coupled_p(model, zp) - coupled_p(model, zm)) / (2.0 * h);
            CHECK((tensor.slices[static_cast<std::size_t>(k)].col(j) - fd).cwiseAbs().maxCoeff() <
                  1e-8 * std::max(1.0, fd.cwiseAbs().maxCoeff()));
        }
    }
}

TEST_CASE("CPD recovers exact rank-2 factors") {
    Eigen::MatrixXd w = testutil::randn(3, 2, 720);
    Eigen::MatrixXd v = testutil::randn(3, 2, 721);
    const Eigen::MatrixXd h = testutil::randn(40, 2, 722);
    const JacobianTensor tensor = tensor_from_factors(w, v, h, 723);
    const CpdFactors factors = cpd_als(tensor, 2, 10, 500, 1e-12, 724);
    CHECK(factors.residual < 1e-8);
    CHECK(factors.converged);
    // generators match up to permutation and scaling
    for (int l = 0; l < 2; ++l) {
        CHECK(best_alignment(factors.v, v.col(l)) > 1.0 - 1e-6);
        CHECK(best_alignment(factors.w, w.col(l)) > 1.0 - 1e-6);
    }
    // normalization convention: V and W columns unit norm
    for (int l = 0; l < 2; ++l) {
        CHECK(factors.v.col(l).norm() == doctest::Approx(1.0).epsilon(1e-10));
        CHECK(factors.w.col(l).norm() == doctest::Approx(1.0).epsilon(1e-10));
    }
    // branch ordering: H column norms descending
    CHECK(factors.h.col(0).norm() >= factors.h.col(1).norm());
}

TEST_CASE("rank-1 outer product is recovered exactly") {
    const Eigen::MatrixXd w = testutil::randn(3, 1, 730);
    const Eigen::MatrixXd v = testutil::randn(3, 1, 731);
    const Eigen::MatrixXd h = testutil::randn(25, 1, 732);
    const JacobianTensor tensor = tensor_from_factors(w, v, h, 733);
    const CpdFactors factors = cpd_als(tensor, 1, 5, 500, 1e-12, 734);
    CHECK(factors.residual < 1e-10);
}

TEST_CASE("zero tensor is accepted with residual zero") {
    JacobianTensor tensor;
    tensor.points = testutil::randn(3, 10, 740);
    for (int k = 0; k < 10; ++k) tensor.slices.push_back(Eigen::MatrixXd::Zero(3, 3));
    const CpdFactors factors = cpd_als(tensor, 2, 3, 100, 1e-10, 741);
    CHECK(factors.residual == 0.0);
    CHECK(factors.w.cwiseAbs().maxCoeff() == 0.0);
    CHECK(factors.v.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ALS residual is non-increasing across sweeps") {
    PnlssModel model = make_pnlss(testutil::random_stable_system(2, 1, 1, 750, 0.6), 3);
    model.E = 0.2 * testutil::randn(model.E.rows(), model.E.cols(), 751);
    model.F = 0.2 * testutil::randn(model.F.rows(), model.F.cols(), 752);
    const JacobianTensor tensor = sample_jacobians(model, 25, 753);
    double prev = std::numeric_limits<double>::infinity();
    for (int sweeps : {1, 2, 5, 10, 25}) {
        const CpdFactors factors = cpd_als(tensor, 2, 1, sweeps, 0.0, 754);
        CHECK(factors.residual <= prev * (1.0 + 1e-12));
        prev = factors.residual;
    }
}

TEST_CASE("exact quadratic derivative data fits to (0, 3)") {
    CpdFactors factors;
    factors.rank = 1;
    factors.v = Eigen::MatrixXd::Zero(3, 1);
    factors.v << 0.5, -0.3, 0.8;
    factors.v.col(0).normalize();
    JacobianTensor tensor;
    tensor.points = testutil::randn(3, 20, 760);
    for (int k = 0; k < 20; ++k) tensor.slices.push_back(Eigen::MatrixXd::Zero(3, 3));
    factors.w = Eigen::MatrixXd::Ones(3, 1);
    factors.h.resize(20, 1);
    const Eigen::VectorXd s_tilde = tensor.points.transpose() * factors.v.col(0);
    factors.h.col(0) = 3.0 * s_tilde.array().square();
    const BranchDerivatives derivs = fit_branch_derivatives(factors, tensor, 3);
    CHECK(std::abs(derivs.coeffs(0, 0)) < 1e-10);
    CHECK(derivs.coeffs(0, 1) == doctest::Approx(3.0).epsilon(1e-10));
    CHECK(derivs.residuals[0] < 1e-10);
}

TEST_CASE("constant derivative data leaves the normal-equations residual") {
    CpdFactors factors;
    factors.rank = 1;
    factors.v = Eigen::MatrixXd::Zero(3, 1);
    factors.v << 1.0, 0.0, 0.0;
    JacobianTensor tensor;
    tensor.points = testutil::randn(3, 15, 770);
    for (int k = 0; k < 15; ++k) tensor.slices.push_back(Eigen::MatrixXd::Zero(3, 3));
    factors.w = Eigen::MatrixXd::Ones(3, 1);
    factors.h = Eigen::MatrixXd::Constant(15, 1, 2.0);
    const BranchDerivatives derivs = fit_branch_derivatives(factors, tensor, 3);
    // oracle: least squares of the constant vector on [s, s^2] directly
    const Eigen::VectorXd s = tensor.points.transpose() * factors.v.col(0);
    Eigen::MatrixXd vand(15, 2);
    vand.col(0) = s;
    vand.col(1) = s.array().square();
    const Eigen::VectorXd c =
        (vand.transpose() * vand).ldlt().solve(vand.transpose() * factors.h.col(0));
    const double oracle = (vand * c - factors.h.col(0)).norm();
    CHECK(derivs.residuals[0] > 1e-3);
    CHECK(derivs.residuals[0] == doctest::Approx(oracle).epsilon(1e-10));
}

TEST_CASE("integration maps derivative coefficients to branch polynomials") {
    Eigen::MatrixXd c(1, 2);
    c << 0.0, 3.0;  // h = 3 s^2
    const Eigen::MatrixXd g = integrate_branches(c);
    CHECK(g(0, 0) == 0.0);
    CHECK(g(0, 1) == 1.0);  // g = s^3
    c << 2.0, 0.0;  // h = 2 s
    const Eigen::MatrixXd g2 = integrate_branches(c);
    CHECK(g2(0, 0) == 1.0);  // g = s^2
    CHECK(g2(0, 1) == 0.0);
}

TEST_CASE("differentiating the integrated branches is the identity") {
    const Eigen::MatrixXd c = testutil::randn(3, 4, 780);
    const Eigen::MatrixXd g = integrate_branches(c);
    Eigen::MatrixXd back = g;
    for (Eigen::Index m = 0; m < back.cols(); ++m) back.col(m) *= static_cast<double>(m + 2);
    CHECK((back - c).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("constructive pipeline reproduces the base model before optimization") {
    const DecoupledModel truth = random_decoupled(790);
    const PnlssModel base = expand_to_pnlss(truth);
    const JacobianTensor tensor = sample_jacobians(base, 200, 791);
    const CpdFactors factors = cpd_als(tensor, 2, 10, 500, 1e-12, 792);
    const BranchDerivatives derivs = fit_branch_derivatives(factors, tensor, 3);
    const DecoupledModel recovered = assemble_decoupled(base, factors, derivs, 3);

    const Eigen::MatrixXd u = 0.5 * testutil::randn(1, 200, 793);
    const Eigen::MatrixXd y_base = simulate_pnlss(base, u).y;
    const Eigen::MatrixXd y_rec = simulate_decoupled(recovered, u).y;
    const double scale = std::sqrt(y_base.array().square().mean());
    const double rmse = std::sqrt((y_base - y_rec).array().square().mean());
    CHECK(rmse < 1e-6 * std::max(1.0, scale));
}

TEST_CASE("end-to-end function recovery on fresh points") {
    const DecoupledModel truth = random_decoupled(800);
    const PnlssModel base = expand_to_pnlss(truth);
    const JacobianTensor tensor = sample_jacobians(base, 300, 801);
    const CpdFactors factors = cpd_als(tensor, 2, 10, 500, 1e-12, 802);
    const BranchDerivatives derivs = fit_branch_derivatives(factors, tensor, 3);
    const DecoupledModel recovered = assemble_decoupled(base, factors, derivs, 3);

    const Eigen::MatrixXd fresh = testutil::randn(3, 1000, 803);
    double scale = 0.0, err = 0.0;
    for (Eigen::Index k = 0; k < fresh.cols(); ++k) {
        const Eigen::VectorXd expect = coupled_p(base, fresh.col(k));
        const Eigen::VectorXd got = decoupled_p(recovered, fresh.col(k));
        scale = std::max(scale, expect.cwiseAbs().maxCoeff());
        err = std::max(err, (expect - got).cwiseAbs().maxCoeff());
    }
    CHECK(err < 1e-6 * scale);
}

TEST_CASE("multinomial expansion simulates identically to the branches") {
    const DecoupledModel truth = random_decoupled(810, 2, 3);
    const PnlssModel expanded = expand_to_pnlss(truth);
    const Eigen::MatrixXd u = 0.5 * testutil::randn(1, 300, 811);
    const Eigen::MatrixXd y_dec = simulate_decoupled(truth, u).y;
    const Eigen::MatrixXd y_exp = simulate_pnlss(expanded, u).y;
    const double rmse = std::sqrt((y_dec - y_exp).array().square().mean());
    CHECK(rmse < 1e-10);
}

TEST_CASE("decoupled sensitivities match central finite differences") {
    const DecoupledModel model = random_decoupled(820);
    const Eigen::MatrixXd u = 0.4 * testutil::randn(1, 40, 821);
    const Eigen::MatrixXd jac = decoupled_output_jacobian(model, u);
    const Eigen::VectorXd theta = pack_decoupled(model);
    const double scale = jac.cwiseAbs().maxCoeff();
    for (Eigen::Index p = 0; p < theta.size(); ++p) {
        const double h = 1e-6 * std::max(1.0, std::abs(theta[p]));
        Eigen::VectorXd tp = theta, tm = theta;
        tp[p] += h;
        tm[p] -= h;
        const Eigen::MatrixXd yp = simulate_decoupled(unpack_decoupled(model, tp), u).y;
        const Eigen::MatrixXd ym = simulate_decoupled(unpack_decoupled(model, tm), u).y;
        const Eigen::VectorXd fd = (yp - ym).row(0).transpose() / (2.0 * h);
        CHECK((jac.col(p) - fd).cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, scale));
    }
}

TEST_CASE("diagonal quadratic models are contained in the decoupled class") {
    // coupled truth: only pure-square columns of the d=2 basis are active
    PnlssModel coupled = make_pnlss(testutil::random_stable_system(2, 1, 1, 830, 0.5), 2);
    // basis over (x1,x2,u): x1^2, x1x2, x1u, x2^2, x2u, u^2
    coupled.E(0, 0) = 0.04;
    coupled.E(1, 3) = -0.03;
    coupled.E(0, 5) = 0.02;
    coupled.F(0, 0) = 0.03;
    coupled.F(0, 5) = -0.02;

    DecoupledModel equivalent;
    equivalent.lin = coupled.lin;
    equivalent.degree = 2;
    equivalent.v = Eigen::MatrixXd::Identity(3, 3);  // branch l reads variable l
    equivalent.w_x = Eigen::MatrixXd::Zero(2, 3);
    equivalent.w_x(0, 0) = 0.04;
    equivalent.w_x(1, 1) = -0.03;
    equivalent.w_x(0, 2) = 0.02;
    equivalent.w_y = Eigen::MatrixXd::Zero(1, 3);
    equivalent.w_y(0, 0) = 0.03;
    equivalent.w_y(0, 2) = -0.02;
    equivalent.coeffs = Eigen::MatrixXd::Ones(3, 1);  // g_l(s) = s^2
    equivalent.x0 = Eigen::VectorXd::Zero(2);

    const Eigen::MatrixXd u = 0.5 * testutil::randn(1, 150, 831);
    const Eigen::MatrixXd y_coupled = simulate_pnlss(coupled, u).y;
    const Eigen::MatrixXd y_equiv = simulate_decoupled(equivalent, u).y;
    CHECK((y_coupled - y_equiv).cwiseAbs().maxCoeff() < 1e-12);

    // noisy data: the optimizer must never finish above its starting cost
    const Eigen::MatrixXd y_noisy = y_coupled + 0.01 * testutil::randn(1, 150, 832);
    LmSettings settings;
    settings.max_iterations = 30;
    const auto [refined, report] = optimize_decoupled(equivalent, u, y_noisy, settings);
    CHECK(report.final_cost() <= report.initial_cost());
}

TEST_CASE("both parameter-count conventions are reported") {
    const DecoupledParameterCount counts = count_decoupled_parameters(3, 1, 1, 3, 5);
    CHECK(counts.published == 55);
    CHECK(counts.structural == 50);
    const DecoupledParameterCount zero = count_decoupled_parameters(3, 1, 1, 3, 0);
    CHECK(zero.published == 0);
    CHECK(zero.structural == 0);
}

TEST_CASE("structural count equals the packed nonlinear block length") {
    const DecoupledModel model = random_decoupled(840, 3, 3);
    const auto counts = count_decoupled_parameters(model.n(), model.n_u(), model.n_y(),
                                                   model.degree, model.r());
    const Eigen::Index linear = model.lin.A.size() + model.lin.B.size() + model.lin.C.size() +
                                model.lin.D.size();
    const Eigen::Index nonlinear = pack_decoupled(model).size() - linear - model.x0.size();
    CHECK(static_cast<std::uint64_t>(nonlinear) == counts.structural);
}

TEST_CASE("structural count grows affinely in the degree, the full basis does not") {
    const int r = 5;
    std::vector<std::uint64_t> structural, full;
    for (int d = 2; d <= 6; ++d) {
        structural.push_back(count_decoupled_parameters(3, 1, 1, d, r).structural);
        full.push_back(count_nonlinear_parameters(3, 1, 1, d));
    }
    for (std::size_t i = 1; i < structural.size(); ++i)
        CHECK(structural[i] - structural[i - 1] == static_cast<std::uint64_t>(r));
    for (std::size_t i = 2; i < full.size(); ++i)
        CHECK(full[i] - full[i - 1] > full[i - 1] - full[i - 2]);
}

TEST_CASE("empirical scaling reflects the state and input spread") {
    PnlssModel model = make_pnlss(testutil::random_stable_system(2, 1, 1, 850, 0.5), 2);
    const Eigen::MatrixXd u = 2.0 * testutil::randn(1, 400, 851);
    const Eigen::VectorXd scale = empirical_scaling(model, u);
    REQUIRE(scale.size() == 3);
    CHECK(scale.minCoeff() > 0.0);
    const double u_std = std::sqrt((u.array() - u.mean()).square().mean());
    CHECK(scale[2] == doctest::Approx(u_std).epsilon(1e-10));
}
