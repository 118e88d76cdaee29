#pragma once

#include <Eigen/Core>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nlssid/lm.hpp"
#include "nlssid/signals.hpp"
#include "nlssid/state_space.hpp"
#include "nlssid/util.hpp"

namespace nlssid {

/// Exact minimizer of the regularized state-sequence objective
///   sum_t ||y(t) - C x(t)||^2 + lambda * sum_t ||x(t+1) - A x(t) - B u(t)||^2.
/// e_y and e_x are the two sums at the optimum, unweighted; the objective
/// value is e_y + lambda * e_x.
struct StateEstimate {
    Eigen::MatrixXd states;  ///< n x T
    double lambda = 0.0;
    double e_y = 0.0;
    double e_x = 0.0;

    double objective() const { return e_y + lambda * e_x; }
};

/// Solves the block-tridiagonal normal equations of the objective above with
/// a sparse Cholesky factorization; the result is the exact global minimizer
/// of the quadratic. The output equation carries no D u term by construction;
/// the feedthrough is handled where residual targets are formed.
inline StateEstimate estimate_states(const LinearStateSpace& ss,
                                     const Eigen::Ref<const Eigen::MatrixXd>& u,
                                     const Eigen::Ref<const Eigen::MatrixXd>& y,
                                     double lambda) {
    ss.validate();
    if (lambda < 0.0 || !std::isfinite(lambda))
        throw std::invalid_argument("estimate_states: lambda must be finite and >= 0");
    if (u.rows() != ss.n_u() || y.rows() != ss.n_y() || u.cols() != y.cols())
        throw std::invalid_argument("estimate_states: data shape mismatch");
    const int n = ss.n();
    const auto t_end = u.cols();
    if (n < 1 || t_end < 1) throw std::invalid_argument("estimate_states: empty problem");

    const Eigen::MatrixXd ctc = ss.C.transpose() * ss.C;
    const Eigen::MatrixXd ata = ss.A.transpose() * ss.A;
    const Eigen::MatrixXd atb = ss.A.transpose() * ss.B;

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(t_end) * n * n * 3);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(t_end * n);
    auto add_block = [&trip, n](Eigen::Index bi, Eigen::Index bj, const Eigen::MatrixXd& m) {
        for (int c = 0; c < n; ++c)
            for (int r = 0; r < n; ++r)
                if (m(r, c) != 0.0)
                    trip.emplace_back(static_cast<int>(bi * n + r), static_cast<int>(bj * n + c),
                                      m(r, c));
    };

    for (Eigen::Index t = 0; t < t_end; ++t) {
        Eigen::MatrixXd diag = ctc;
        Eigen::VectorXd r = ss.C.transpose() * y.col(t);
        if (t < t_end - 1) {
            diag += lambda * ata;
            r -= lambda * (atb * u.col(t));
            add_block(t, t + 1, (-lambda * ss.A.transpose()).eval());
        }
        if (t > 0) {
            diag += lambda * Eigen::MatrixXd::Identity(n, n);
            r += lambda * (ss.B * u.col(t - 1));
            add_block(t, t - 1, (-lambda * ss.A).eval());
        }
        add_block(t, t, diag);
        rhs.segment(t * n, n) = r;
    }

    Eigen::SparseMatrix<double> normal(t_end * n, t_end * n);
    normal.setFromTriplets(trip.begin(), trip.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(normal);
    Eigen::VectorXd x;
    bool ok = solver.info() == Eigen::Success;
    if (ok) {
        x = solver.solve(rhs);
        ok = solver.info() == Eigen::Success && x.allFinite();
        // Iterative refinement: large lambda makes the normal matrix stiff and
        // a single LDLT solve can lose several digits.
        for (int sweep = 0; ok && sweep < 5; ++sweep) {
            const Eigen::VectorXd residual = rhs - normal * x;
            if (residual.norm() <= 1e-14 * std::max(1.0, rhs.norm())) break;
            const Eigen::VectorXd dx = solver.solve(residual);
            if (solver.info() != Eigen::Success || !dx.allFinite()) break;
            x += dx;
        }
        ok = ok && x.allFinite() &&
             (normal * x - rhs).norm() <= 1e-8 * std::max(1.0, rhs.norm());
    }
    if (!ok)
        throw std::runtime_error(
            "estimate_states: normal matrix is singular or near-singular (the output map plus "
            "the lambda-weighted dynamics do not determine every state; size " +
            std::to_string(t_end * n) + ", lambda " + std::to_string(lambda) + ")");

    StateEstimate est;
    est.lambda = lambda;
    est.states = Eigen::Map<const Eigen::MatrixXd>(x.data(), n, t_end);
    est.e_y = (y - ss.C * est.states).squaredNorm();
    if (t_end > 1)
        est.e_x = (est.states.rightCols(t_end - 1) - ss.A * est.states.leftCols(t_end - 1) -
                   ss.B * u.leftCols(t_end - 1))
                      .squaredNorm();
    return est;
}

inline StateEstimate estimate_states(const LinearStateSpace& ss, const Dataset& data,
                                     double lambda) {
    data.validate();
    return estimate_states(ss, data.u.transpose(), data.y.transpose(), lambda);
}

enum class Activation {
    tanh_sigmoid,  ///< zero-centered, suits zero-mean residual targets
    logistic,
};

inline Activation parse_activation(const std::string& name) {
    if (name == "tanh") return Activation::tanh_sigmoid;
    if (name == "logistic") return Activation::logistic;
    throw std::invalid_argument("unknown activation: " + name);
}

inline std::string to_string(Activation a) {
    return a == Activation::tanh_sigmoid ? "tanh" : "logistic";
}

/// One-hidden-layer sigmoid network y = W2 act(W1 z + b1) + b2.
/// Parameter vector order: W1 (column-major), b1, W2 (column-major), b2.
struct SigmoidNetwork {
    Eigen::MatrixXd w1;  ///< n_hidden x n_in
    Eigen::VectorXd b1;  ///< n_hidden
    Eigen::MatrixXd w2;  ///< n_out x n_hidden
    Eigen::VectorXd b2;  ///< n_out
    Activation activation = Activation::tanh_sigmoid;

    int n_in() const { return static_cast<int>(w1.cols()); }
    int n_out() const { return static_cast<int>(w2.rows()); }
    int n_hidden() const { return static_cast<int>(w1.rows()); }

    void validate() const {
        if (w1.rows() < 1 || w1.cols() < 1) throw std::invalid_argument("network: empty layer");
        if (b1.size() != w1.rows() || w2.cols() != w1.rows() || b2.size() != w2.rows())
            throw std::invalid_argument("network: weight shapes inconsistent");
        if (!w1.allFinite() || !b1.allFinite() || !w2.allFinite() || !b2.allFinite())
            throw std::invalid_argument("network: non-finite weights");
    }

    static SigmoidNetwork zero(int n_in, int n_out, int n_hidden, Activation act) {
        SigmoidNetwork net;
        net.w1 = Eigen::MatrixXd::Zero(n_hidden, n_in);
        net.b1 = Eigen::VectorXd::Zero(n_hidden);
        net.w2 = Eigen::MatrixXd::Zero(n_out, n_hidden);
        net.b2 = Eigen::VectorXd::Zero(n_out);
        net.activation = act;
        return net;
    }

    double act(double s) const {
        return activation == Activation::tanh_sigmoid ? std::tanh(s) : 1.0 / (1.0 + std::exp(-s));
    }
    double act_deriv_from_value(double a) const {
        return activation == Activation::tanh_sigmoid ? 1.0 - a * a : a * (1.0 - a);
    }

    Eigen::VectorXd hidden(const Eigen::Ref<const Eigen::VectorXd>& z) const {
        Eigen::VectorXd a = w1 * z + b1;
        for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = act(a[i]);
        return a;
    }

    Eigen::VectorXd evaluate(const Eigen::Ref<const Eigen::VectorXd>& z) const {
        return w2 * hidden(z) + b2;
    }

    Eigen::MatrixXd evaluate_batch(const Eigen::Ref<const Eigen::MatrixXd>& z) const {
        Eigen::MatrixXd out(n_out(), z.cols());
        for (Eigen::Index i = 0; i < z.cols(); ++i) out.col(i) = evaluate(z.col(i));
        return out;
    }

    /// d evaluate / d z, n_out x n_in.
    Eigen::MatrixXd input_jacobian(const Eigen::Ref<const Eigen::VectorXd>& z) const {
        const Eigen::VectorXd a = hidden(z);
        Eigen::VectorXd da(a.size());
        for (Eigen::Index i = 0; i < a.size(); ++i) da[i] = act_deriv_from_value(a[i]);
        return w2 * da.asDiagonal() * w1;
    }

    Eigen::Index parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

    /// d evaluate / d theta, n_out x parameter_count(), columns in pack order.
    Eigen::MatrixXd parameter_jacobian(const Eigen::Ref<const Eigen::VectorXd>& z) const {
        const int h = n_hidden();
        const int no = n_out();
        const Eigen::VectorXd a = hidden(z);
        Eigen::VectorXd da(h);
        for (int i = 0; i < h; ++i) da[i] = act_deriv_from_value(a[i]);

        Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(no, parameter_count());
        Eigen::Index at = 0;
        for (int j = 0; j < n_in(); ++j)
            for (int q = 0; q < h; ++q) jac.col(at++) = w2.col(q) * (da[q] * z[j]);
        for (int q = 0; q < h; ++q) jac.col(at++) = w2.col(q) * da[q];
        for (int q = 0; q < h; ++q)
            for (int p = 0; p < no; ++p) jac(p, at++) = a[q];
        for (int p = 0; p < no; ++p) jac(p, at++) = 1.0;
        return jac;
    }

    Eigen::VectorXd pack() const {
        Eigen::VectorXd theta(parameter_count());
        Eigen::Index at = 0;
        theta.segment(at, w1.size()) = Eigen::Map<const Eigen::VectorXd>(w1.data(), w1.size());
        at += w1.size();
        theta.segment(at, b1.size()) = b1;
        at += b1.size();
        theta.segment(at, w2.size()) = Eigen::Map<const Eigen::VectorXd>(w2.data(), w2.size());
        at += w2.size();
        theta.segment(at, b2.size()) = b2;
        return theta;
    }

    SigmoidNetwork with_parameters(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
        if (theta.size() != parameter_count())
            throw std::invalid_argument("network: parameter vector length mismatch");
        SigmoidNetwork net = *this;
        Eigen::Index at = 0;
        net.w1 = Eigen::Map<const Eigen::MatrixXd>(theta.data() + at, w1.rows(), w1.cols());
        at += w1.size();
        net.b1 = theta.segment(at, b1.size());
        at += b1.size();
        net.w2 = Eigen::Map<const Eigen::MatrixXd>(theta.data() + at, w2.rows(), w2.cols());
        at += w2.size();
        net.b2 = theta.segment(at, b2.size());
        return net;
    }
};

namespace detail {

struct NetworkRegressionProblem {
    SigmoidNetwork shape;   ///< supplies dimensions and activation
    Eigen::MatrixXd z;      ///< n_in x N (already standardized)
    Eigen::MatrixXd target; ///< n_out x N

    double scale() const { return 1.0 / std::sqrt(static_cast<double>(target.size())); }

    std::optional<Eigen::VectorXd> residual(const Eigen::VectorXd& theta) const {
        const SigmoidNetwork net = shape.with_parameters(theta);
        Eigen::MatrixXd err = (net.evaluate_batch(z) - target) * scale();
        if (!err.allFinite()) return std::nullopt;
        return Eigen::Map<const Eigen::VectorXd>(err.data(), err.size()).eval();
    }

    Eigen::MatrixXd jacobian(const Eigen::VectorXd& theta) const {
        const SigmoidNetwork net = shape.with_parameters(theta);
        const int no = net.n_out();
        Eigen::MatrixXd jac(target.size(), net.parameter_count());
        for (Eigen::Index i = 0; i < z.cols(); ++i)
            jac.middleRows(i * no, no) = net.parameter_jacobian(z.col(i)) * scale();
        return jac;
    }
};

}  // namespace detail

struct StaticFitResult {
    SigmoidNetwork net;
    FitReport report;   ///< of the winning restart; rmse in raw target units
    int best_restart = -1;
};

/// Multi-start LM regression of a sigmoid network onto static targets.
/// Inputs are standardized per row for conditioning and the affine map is
/// folded back into the first layer, so the returned network acts on raw
/// inputs. Restart k uses the seed stream derive_seed(seed, k); the best
/// final cost wins.
inline StaticFitResult fit_static_nonlinearity(const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                                               const Eigen::Ref<const Eigen::MatrixXd>& targets,
                                               int n_hidden, Activation activation,
                                               int restarts = 10, std::uint64_t seed = 1,
                                               const LmSettings& settings = {}) {
    if (inputs.cols() != targets.cols())
        throw std::invalid_argument("fit_static_nonlinearity: sample count mismatch");
    if (inputs.cols() < 2) throw std::invalid_argument("fit_static_nonlinearity: need >= 2 samples");
    if (n_hidden < 1) throw std::invalid_argument("fit_static_nonlinearity: need >= 1 hidden neuron");
    if (restarts < 1) throw std::invalid_argument("fit_static_nonlinearity: need >= 1 restart");

    const auto n_in = inputs.rows();
    const auto n_samples = inputs.cols();
    Eigen::VectorXd mu = inputs.rowwise().mean();
    Eigen::VectorXd sigma(n_in);
    for (Eigen::Index i = 0; i < n_in; ++i) {
        sigma[i] = std::sqrt((inputs.row(i).array() - mu[i]).square().sum() /
                             static_cast<double>(n_samples));
        if (!(sigma[i] > 0.0))
            throw std::invalid_argument("fit_static_nonlinearity: input row " + std::to_string(i) +
                                        " has zero variance");
    }
    Eigen::MatrixXd z = (inputs.colwise() - mu).array().colwise() / sigma.array();

    detail::NetworkRegressionProblem problem;
    problem.shape = SigmoidNetwork::zero(static_cast<int>(n_in), static_cast<int>(targets.rows()),
                                         n_hidden, activation);
    problem.z = std::move(z);
    problem.target = targets;

    StaticFitResult best;
    double best_cost = std::numeric_limits<double>::infinity();
    const double w1_scale = 1.0 / std::sqrt(static_cast<double>(n_in));
    for (int k = 0; k < restarts; ++k) {
        auto rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
        std::normal_distribution<double> gauss(0.0, 1.0);
        SigmoidNetwork init = problem.shape;
        for (Eigen::Index i = 0; i < init.w1.size(); ++i) init.w1.data()[i] = w1_scale * gauss(rng);
        for (Eigen::Index i = 0; i < init.b1.size(); ++i) init.b1[i] = 0.2 * gauss(rng);
        for (Eigen::Index i = 0; i < init.w2.size(); ++i) init.w2.data()[i] = 0.5 * gauss(rng);

        FitReport report = minimize(problem, init.pack(), settings);
        if (report.final_cost() < best_cost) {
            best_cost = report.final_cost();
            best.report = std::move(report);
            best.best_restart = k;
        }
    }
    best.report.rmse = std::sqrt(best.report.final_cost());
    SigmoidNetwork net = problem.shape.with_parameters(best.report.theta);
    // Fold z = (raw - mu)/sigma into the first layer.
    net.w1 = net.w1 * sigma.cwiseInverse().asDiagonal();
    net.b1 -= net.w1 * mu;
    best.net = std::move(net);
    best.net.validate();
    return best;
}

/// State-space model with sigmoid-network nonlinearities on both equations:
///   x(t+1) = A x + B u + f([x;u]),  y = C x + D u + g([x;u]).
struct Nlss2Model {
    LinearStateSpace lin;
    SigmoidNetwork f_net;
    SigmoidNetwork g_net;
    Eigen::VectorXd x0;

    int n() const { return lin.n(); }
    int n_u() const { return lin.n_u(); }
    int n_y() const { return lin.n_y(); }

    void validate() const {
        lin.validate();
        f_net.validate();
        g_net.validate();
        if (f_net.n_in() != n() + n_u() || f_net.n_out() != n())
            throw std::invalid_argument("nlss2: f network dimensions mismatch");
        if (g_net.n_in() != n() + n_u() || g_net.n_out() != n_y())
            throw std::invalid_argument("nlss2: g network dimensions mismatch");
        if (x0.size() != n() || !x0.allFinite())
            throw std::invalid_argument("nlss2: x0 must be a finite n-vector");
    }

    Eigen::Index parameter_count() const {
        return lin.A.size() + lin.B.size() + lin.C.size() + lin.D.size() +
               f_net.parameter_count() + g_net.parameter_count() + x0.size();
    }
};

struct Nlss2Simulation {
    Eigen::MatrixXd states;  ///< n x T
    Eigen::MatrixXd y;       ///< n_y x T
};

inline Nlss2Simulation simulate_nlss2(const Nlss2Model& model,
                                      const Eigen::Ref<const Eigen::MatrixXd>& u) {
    model.validate();
    if (u.rows() != model.n_u()) throw std::invalid_argument("simulate_nlss2: input channel mismatch");
    const int n = model.n();
    const auto t_end = u.cols();

    Nlss2Simulation sim;
    sim.states.resize(n, t_end);
    sim.y.resize(model.n_y(), t_end);
    Eigen::VectorXd x = model.x0;
    Eigen::VectorXd z(n + model.n_u());
    for (Eigen::Index t = 0; t < t_end; ++t) {
        const double mag = x.cwiseAbs().maxCoeff();
        if (!x.allFinite() || mag > kDivergenceGuard)
            throw SimulationDiverged(static_cast<std::size_t>(t), mag);
        z.head(n) = x;
        z.tail(model.n_u()) = u.col(t);
        sim.states.col(t) = x;
        sim.y.col(t) = model.lin.C * x + model.lin.D * u.col(t) + model.g_net.evaluate(z);
        x = model.lin.A * x + model.lin.B * u.col(t) + model.f_net.evaluate(z);
    }
    if (!sim.y.allFinite())
        throw SimulationDiverged(static_cast<std::size_t>(t_end),
                                 std::numeric_limits<double>::infinity());
    return sim;
}

inline std::optional<Nlss2Simulation> try_simulate_nlss2(const Nlss2Model& model,
                                                         const Eigen::Ref<const Eigen::MatrixXd>& u) {
    try {
        return simulate_nlss2(model, u);
    } catch (const SimulationDiverged&) {
        return std::nullopt;
    }
}

namespace detail {

struct Nlss2Offsets {
    Eigen::Index a = 0, b = 0, c = 0, d = 0, f = 0, g = 0, x0 = 0, total = 0;
};

inline Nlss2Offsets nlss2_offsets(const Nlss2Model& m) {
    Nlss2Offsets off;
    Eigen::Index at = 0;
    off.a = at; at += m.lin.A.size();
    off.b = at; at += m.lin.B.size();
    off.c = at; at += m.lin.C.size();
    off.d = at; at += m.lin.D.size();
    off.f = at; at += m.f_net.parameter_count();
    off.g = at; at += m.g_net.parameter_count();
    off.x0 = at; at += m.x0.size();
    off.total = at;
    return off;
}

}  // namespace detail

/// Full joint parameter vector: A, B, C, D (column-major), f network,
/// g network, x0.
inline Eigen::VectorXd pack_nlss2(const Nlss2Model& model) {
    const auto off = detail::nlss2_offsets(model);
    Eigen::VectorXd theta(off.total);
    auto put = [&theta](Eigen::Index pos, const Eigen::MatrixXd& m) {
        theta.segment(pos, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    };
    put(off.a, model.lin.A);
    put(off.b, model.lin.B);
    put(off.c, model.lin.C);
    put(off.d, model.lin.D);
    theta.segment(off.f, model.f_net.parameter_count()) = model.f_net.pack();
    theta.segment(off.g, model.g_net.parameter_count()) = model.g_net.pack();
    theta.segment(off.x0, model.x0.size()) = model.x0;
    return theta;
}

inline Nlss2Model unpack_nlss2(const Nlss2Model& shape, const Eigen::Ref<const Eigen::VectorXd>& theta) {
    const auto off = detail::nlss2_offsets(shape);
    if (theta.size() != off.total) throw std::invalid_argument("unpack_nlss2: theta length mismatch");
    Nlss2Model out = shape;
    auto take = [&theta](Eigen::Index pos, Eigen::MatrixXd& m) {
        m = Eigen::Map<const Eigen::MatrixXd>(theta.data() + pos, m.rows(), m.cols());
    };
    take(off.a, out.lin.A);
    take(off.b, out.lin.B);
    take(off.c, out.lin.C);
    take(off.d, out.lin.D);
    out.f_net = shape.f_net.with_parameters(theta.segment(off.f, shape.f_net.parameter_count()));
    out.g_net = shape.g_net.with_parameters(theta.segment(off.g, shape.g_net.parameter_count()));
    out.x0 = theta.segment(off.x0, shape.x0.size());
    return out;
}

/// d y(t) / d theta over the full joint parameter vector; forward
/// sensitivities S(t+1) = (A + df/dx) S(t) + direct terms, network parameter
/// derivatives analytic.
inline Eigen::MatrixXd nlss2_output_jacobian(const Nlss2Model& model,
                                             const Eigen::Ref<const Eigen::MatrixXd>& u) {
    model.validate();
    const int n = model.n();
    const int nu = model.n_u();
    const int ny = model.n_y();
    const auto t_end = u.cols();
    const auto off = detail::nlss2_offsets(model);

    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(t_end * ny, off.total);
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, off.total);
    s.block(0, off.x0, n, n).setIdentity();

    Eigen::VectorXd x = model.x0;
    Eigen::VectorXd z(n + nu);
    for (Eigen::Index t = 0; t < t_end; ++t) {
        const double mag = x.cwiseAbs().maxCoeff();
        if (!x.allFinite() || mag > kDivergenceGuard)
            throw SimulationDiverged(static_cast<std::size_t>(t), mag);
        z.head(n) = x;
        z.tail(nu) = u.col(t);

        const Eigen::MatrixXd jf_x = model.f_net.input_jacobian(z).leftCols(n);
        const Eigen::MatrixXd jg_x = model.g_net.input_jacobian(z).leftCols(n);

        auto rows = jac.middleRows(t * ny, ny);
        rows.noalias() = (model.lin.C + jg_x) * s;
        for (int q = 0; q < n; ++q)
            for (int p = 0; p < ny; ++p) rows(p, off.c + q * ny + p) += x[q];
        for (int q = 0; q < nu; ++q)
            for (int p = 0; p < ny; ++p) rows(p, off.d + q * ny + p) += u(q, t);
        rows.middleCols(off.g, model.g_net.parameter_count()) += model.g_net.parameter_jacobian(z);

        Eigen::MatrixXd s_next = (model.lin.A + jf_x) * s;
        for (int q = 0; q < n; ++q)
            for (int p = 0; p < n; ++p) s_next(p, off.a + q * n + p) += x[q];
        for (int q = 0; q < nu; ++q)
            for (int p = 0; p < n; ++p) s_next(p, off.b + q * n + p) += u(q, t);
        s_next.middleCols(off.f, model.f_net.parameter_count()) +=
            model.f_net.parameter_jacobian(z);

        x = model.lin.A * x + model.lin.B * u.col(t) + model.f_net.evaluate(z);
        s = std::move(s_next);
    }
    return jac;
}

struct Nlss2OutputErrorProblem {
    Nlss2Model reference;
    Eigen::MatrixXd u;
    Eigen::MatrixXd y;

    double scale() const { return 1.0 / std::sqrt(static_cast<double>(y.size())); }

    std::optional<Eigen::VectorXd> residual(const Eigen::VectorXd& theta) const {
        const Nlss2Model model = unpack_nlss2(reference, theta);
        const auto sim = try_simulate_nlss2(model, u);
        if (!sim) return std::nullopt;
        Eigen::MatrixXd err = (sim->y - y) * scale();
        return Eigen::Map<const Eigen::VectorXd>(err.data(), err.size()).eval();
    }

    Eigen::MatrixXd jacobian(const Eigen::VectorXd& theta) const {
        const Nlss2Model model = unpack_nlss2(reference, theta);
        return nlss2_output_jacobian(model, u) * scale();
    }
};

/// Joint LM over A, B, C, D, both networks, and x0; cost is the mean squared
/// output error, so report.rmse = sqrt(final cost).
inline std::pair<Nlss2Model, FitReport> optimize_full_nlss2(
    const Nlss2Model& initial, const Eigen::Ref<const Eigen::MatrixXd>& u,
    const Eigen::Ref<const Eigen::MatrixXd>& y, const LmSettings& settings = {}) {
    initial.validate();
    if (u.cols() != y.cols() || y.rows() != initial.n_y())
        throw std::invalid_argument("optimize_full_nlss2: data shape mismatch");

    Nlss2OutputErrorProblem problem{initial, u, y};
    FitReport report = minimize(problem, pack_nlss2(initial), settings);
    report.rmse = std::sqrt(report.final_cost());
    Nlss2Model fitted = unpack_nlss2(initial, report.theta);
    return {std::move(fitted), report};
}

struct Nlss2InitOptions {
    int n_hidden = 2;
    Activation activation = Activation::tanh_sigmoid;
    int restarts = 10;
    std::uint64_t seed = 1;
    LmSettings net_settings = {};
};

/// Assemble an initialized model from a linear part: estimate the state
/// sequence at the given lambda, then regress each equation's residual on
/// [x;u]. The f target leaves out the last sample (one-step-ahead form);
/// the g target subtracts the full linear output C x + D u. The linear part
/// stays frozen here; the joint refinement frees it.
inline Nlss2Model initialize_nlss2(const LinearStateSpace& ss,
                                   const Eigen::Ref<const Eigen::MatrixXd>& u,
                                   const Eigen::Ref<const Eigen::MatrixXd>& y, double lambda,
                                   const Nlss2InitOptions& opts = {}) {
    const StateEstimate est = estimate_states(ss, u, y, lambda);
    const auto t_end = u.cols();
    const int n = ss.n();
    if (t_end < 3) throw std::invalid_argument("initialize_nlss2: record too short");

    Eigen::MatrixXd zu(n + ss.n_u(), t_end);
    zu.topRows(n) = est.states;
    zu.bottomRows(ss.n_u()) = u;

    const Eigen::MatrixXd f_targets = est.states.rightCols(t_end - 1) -
                                      ss.A * est.states.leftCols(t_end - 1) -
                                      ss.B * u.leftCols(t_end - 1);
    const Eigen::MatrixXd g_targets = y - ss.C * est.states - ss.D * u;

    Nlss2Model model;
    model.lin = ss;
    model.f_net = fit_static_nonlinearity(zu.leftCols(t_end - 1), f_targets, opts.n_hidden,
                                          opts.activation, opts.restarts,
                                          derive_seed(opts.seed, 0x665f6e65), opts.net_settings)
                      .net;
    model.g_net = fit_static_nonlinearity(zu, g_targets, opts.n_hidden, opts.activation,
                                          opts.restarts, derive_seed(opts.seed, 0x675f6e65),
                                          opts.net_settings)
                      .net;
    model.x0 = est.states.col(0);
    return model;
}

struct LambdaSelection {
    double lambda = 0.0;
    int best_index = -1;
    std::vector<double> grid;
    std::vector<double> validation_rmse;  ///< NaN where the candidate failed
    std::vector<std::string> failures;    ///< empty string where the candidate succeeded
    Nlss2Model best_model;                ///< initialized (not yet jointly refined)
};

/// Evaluate the lambda grid: initialize at each value on the estimation
/// record, simulate on the validation record, keep the smallest validation
/// RMSE. Candidates share the same seed, so duplicate grid entries tie
/// exactly and the first (smallest-index) entry wins; strict improvement is
/// required to replace the incumbent. When the validation record is the
/// continuation of the estimation record, pass the whole record plus
/// eval_from so the simulation starts at the model's initial state but the
/// RMSE covers only the held-out tail.
inline LambdaSelection select_lambda(const LinearStateSpace& ss,
                                     const Eigen::Ref<const Eigen::MatrixXd>& u_est,
                                     const Eigen::Ref<const Eigen::MatrixXd>& y_est,
                                     const Eigen::Ref<const Eigen::MatrixXd>& u_val,
                                     const Eigen::Ref<const Eigen::MatrixXd>& y_val,
                                     const std::vector<double>& grid,
                                     const Nlss2InitOptions& opts = {}, Eigen::Index eval_from = 0) {
    if (grid.empty()) throw std::invalid_argument("select_lambda: empty grid");
    if (eval_from < 0 || eval_from >= y_val.cols())
        throw std::invalid_argument("select_lambda: eval_from out of range");

    LambdaSelection sel;
    sel.grid = grid;
    sel.validation_rmse.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
    sel.failures.assign(grid.size(), "");
    double best = std::numeric_limits<double>::infinity();

    for (std::size_t i = 0; i < grid.size(); ++i) {
        try {
            Nlss2Model model = initialize_nlss2(ss, u_est, y_est, grid[i], opts);
            const auto sim = try_simulate_nlss2(model, u_val);
            if (!sim) {
                sel.failures[i] = "validation simulation diverged";
                continue;
            }
            const auto held = y_val.cols() - eval_from;
            double sq = (sim->y.rightCols(held) - y_val.rightCols(held)).squaredNorm() /
                        static_cast<double>(held * y_val.rows());
            if (!std::isfinite(sq)) {
                sel.failures[i] = "non-finite validation error";
                continue;
            }
            sel.validation_rmse[i] = std::sqrt(sq);
            if (sel.validation_rmse[i] < best) {
                best = sel.validation_rmse[i];
                sel.best_index = static_cast<int>(i);
                sel.lambda = grid[i];
                sel.best_model = std::move(model);
            }
        } catch (const std::exception& ex) {
            sel.failures[i] = ex.what();
        }
    }
    if (sel.best_index < 0) {
        std::string msg = "select_lambda: every candidate failed:";
        for (std::size_t i = 0; i < grid.size(); ++i)
            msg += "\n  lambda " + std::to_string(grid[i]) + ": " + sel.failures[i];
        throw std::runtime_error(msg);
    }
    return sel;
}

}  // namespace nlssid
