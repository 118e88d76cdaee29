#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <concepts>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlssid/signals.hpp"

namespace nlssid {

/// Damped Gauss-Newton settings. The damping update is multiplicative:
/// *increase_factor on a rejected step, /decrease_factor on an accepted one.
struct LmSettings {
    int max_iterations = 200;
    double lambda_init = 1e-3;
    double lambda_increase = 10.0;
    double lambda_decrease = 3.0;
    double lambda_max = 1e12;
    double cost_rel_tol = 1e-10;  ///< |cost drop| <= tol*cost terminates
    double cost_abs_tol = 0.0;    ///< cost <= tol terminates
    double step_tol = 1e-12;      ///< ||delta|| <= tol*(||theta||+tol) terminates
    double gradient_tol = 0.0;    ///< ||J^T r||_inf <= tol terminates

    void validate() const {
        if (max_iterations < 0) throw std::invalid_argument("lm: negative iteration budget");
        if (lambda_init <= 0.0) throw std::invalid_argument("lm: damping must be positive");
        if (lambda_increase <= 1.0 || lambda_decrease <= 1.0)
            throw std::invalid_argument("lm: damping factors must exceed 1");
    }
};

enum class LmTermination {
    max_iterations,
    cost_tolerance,
    step_tolerance,
    gradient_tolerance,
    damping_limit,  ///< no acceptable step below lambda_max
};

inline const char* to_string(LmTermination t) {
    switch (t) {
        case LmTermination::max_iterations: return "max_iterations";
        case LmTermination::cost_tolerance: return "cost_tolerance";
        case LmTermination::step_tolerance: return "step_tolerance";
        case LmTermination::gradient_tolerance: return "gradient_tolerance";
        case LmTermination::damping_limit: return "damping_limit";
    }
    return "unknown";
}

/// Outcome of one minimize() call. `cost_trace` holds the cost after every
/// accepted step (entry 0 is the initial cost); it is non-increasing by
/// construction.
struct FitReport {
    std::vector<double> cost_trace;
    std::vector<double> lambda_trace;  ///< damping in effect for each accepted step
    std::vector<double> step_trace;    ///< norm of each accepted step
    Eigen::VectorXd theta;
    int iterations = 0;           ///< outer iterations consumed
    int accepted_steps = 0;
    LmTermination termination = LmTermination::max_iterations;
    double rmse = std::numeric_limits<double>::quiet_NaN();  ///< filled by callers per dataset

    double initial_cost() const { return cost_trace.empty() ? 0.0 : cost_trace.front(); }
    double final_cost() const { return cost_trace.empty() ? 0.0 : cost_trace.back(); }
};

/// A least-squares problem hands the optimizer residuals and the Jacobian
/// d r / d theta. residual() returns nullopt when the model diverges at
/// theta; such points are treated as infinite cost and rejected.
template <typename P>
concept LeastSquaresProblem = requires(const P& p, const Eigen::VectorXd& theta) {
    { p.residual(theta) } -> std::convertible_to<std::optional<Eigen::VectorXd>>;
    { p.jacobian(theta) } -> std::convertible_to<Eigen::MatrixXd>;
};

/// Levenberg-Marquardt minimization of sum(r_i^2).
///
/// Solves (J^T J + lambda*diag(J^T J)) delta = -J^T r each step; jacobian()
/// is only evaluated at accepted points. Singular or indefinite damped
/// systems raise the damping rather than fail.
template <LeastSquaresProblem P>
FitReport minimize(const P& problem, const Eigen::VectorXd& theta_init,
                   const LmSettings& settings = {}) {
    settings.validate();

    Eigen::VectorXd theta = theta_init;
    std::optional<Eigen::VectorXd> r0 = problem.residual(theta);
    if (!r0 || !r0->allFinite())
        throw std::runtime_error("lm: non-finite residual at the initial point");
    Eigen::VectorXd r = *r0;
    double cost = r.squaredNorm();

    FitReport report;
    report.cost_trace.push_back(cost);
    report.theta = theta;

    double lambda = settings.lambda_init;

    for (int iter = 0; iter < settings.max_iterations; ++iter) {
        report.iterations = iter + 1;

        if (cost <= settings.cost_abs_tol) {
            report.termination = LmTermination::cost_tolerance;
            report.iterations = iter;
            break;
        }

        Eigen::MatrixXd J = problem.jacobian(theta);
        if (J.rows() != r.size() || J.cols() != theta.size())
            throw std::runtime_error("lm: jacobian shape mismatch");
        Eigen::VectorXd g = J.transpose() * r;
        if (g.lpNorm<Eigen::Infinity>() <= settings.gradient_tol) {
            report.termination = LmTermination::gradient_tolerance;
            report.iterations = iter;
            break;
        }
        Eigen::MatrixXd jtj = J.transpose() * J;
        Eigen::VectorXd diag = jtj.diagonal();
        const double diag_floor = std::max(diag.maxCoeff(), 0.0) * 1e-14 +
                                  std::numeric_limits<double>::min();
        diag = diag.cwiseMax(diag_floor);

        bool accepted = false;
        while (!accepted) {
            Eigen::MatrixXd damped = jtj;
            damped.diagonal() += lambda * diag;
            Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
            Eigen::VectorXd delta;
            bool solvable = (ldlt.info() == Eigen::Success);
            if (solvable) {
                delta = ldlt.solve(-g);
                solvable = delta.allFinite();
            }
            if (solvable) {
                Eigen::VectorXd theta_try = theta + delta;
                std::optional<Eigen::VectorXd> r_try = problem.residual(theta_try);
                if (r_try && r_try->allFinite()) {
                    const double cost_try = r_try->squaredNorm();
                    if (cost_try < cost) {
                        const double drop = cost - cost_try;
                        const double step_norm = delta.norm();
                        theta = std::move(theta_try);
                        r = std::move(*r_try);
                        cost = cost_try;
                        report.lambda_trace.push_back(lambda);
                        report.step_trace.push_back(step_norm);
                        lambda = std::max(lambda / settings.lambda_decrease, 1e-16);
                        accepted = true;
                        ++report.accepted_steps;
                        report.cost_trace.push_back(cost);
                        if (drop <= settings.cost_rel_tol * std::max(cost, 1e-300)) {
                            report.termination = LmTermination::cost_tolerance;
                            goto done;
                        }
                        if (step_norm <= settings.step_tol * (theta.norm() + settings.step_tol)) {
                            report.termination = LmTermination::step_tolerance;
                            goto done;
                        }
                        break;
                    }
                }
            }
            lambda *= settings.lambda_increase;
            if (lambda > settings.lambda_max) {
                report.termination = LmTermination::damping_limit;
                goto done;
            }
        }
        report.termination = LmTermination::max_iterations;
    }

done:
    report.theta = theta;
    return report;
}

/// Frequency-domain weighted output-error cost
///   sum_k |Ymod(k) - Y(k)|^2 / W(k)
/// over the selected bins (all bins when `bins` is empty). With W == 1 and
/// all bins this equals N * sum_t (y_mod - y)^2 by Parseval under the
/// library's DFT convention.
inline double frequency_cost(const Eigen::Ref<const Eigen::VectorXd>& y_mod,
                             const Eigen::Ref<const Eigen::VectorXd>& y,
                             const Eigen::VectorXd& weights = Eigen::VectorXd(),
                             const std::vector<int>& bins = {}) {
    if (y_mod.size() != y.size()) throw std::invalid_argument("frequency_cost: length mismatch");
    const auto n = y.size();
    Eigen::VectorXcd dy = dft_single_period(y_mod) - dft_single_period(y);
    std::vector<int> use_bins = bins;
    if (use_bins.empty()) {
        use_bins.resize(static_cast<std::size_t>(n));
        for (Eigen::Index k = 0; k < n; ++k) use_bins[static_cast<std::size_t>(k)] = static_cast<int>(k);
    }
    double cost = 0.0;
    for (std::size_t i = 0; i < use_bins.size(); ++i) {
        const int k = use_bins[i];
        if (k < 0 || k >= n) throw std::invalid_argument("frequency_cost: bin out of range");
        double w = 1.0;
        if (weights.size()) {
            w = weights.size() == n ? weights[k] : weights[static_cast<Eigen::Index>(i)];
            if (w <= 0.0) throw std::invalid_argument("frequency_cost: nonpositive weight");
        }
        cost += std::norm(dy[k]) / w;
    }
    return cost;
}

}  // namespace nlssid
