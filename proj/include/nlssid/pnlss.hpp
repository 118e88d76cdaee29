#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>

#include "nlssid/lm.hpp"
#include "nlssid/monomials.hpp"
#include "nlssid/state_space.hpp"
#include "nlssid/util.hpp"

namespace nlssid {

/// Polynomial nonlinear state-space model:
///   x(t+1) = A x + B u + E zeta([x;u])
///   y(t)   = C x + D u + F eta([x;u])
/// zeta/eta are monomials of total degree 2..d; the linear part owns degree
/// 0 and 1. x0_estimated marks x0 as a free parameter in fits.
struct PnlssModel {
    LinearStateSpace lin;
    MonomialBasis basis_state;
    MonomialBasis basis_output;
    Eigen::MatrixXd E;  ///< n x basis_state.size()
    Eigen::MatrixXd F;  ///< n_y x basis_output.size()
    Eigen::VectorXd x0;
    bool x0_estimated = false;

    int n() const { return lin.n(); }
    int n_u() const { return lin.n_u(); }
    int n_y() const { return lin.n_y(); }

    void validate() const {
        lin.validate();
        basis_state.validate();
        basis_output.validate();
        if (basis_state.n_vars != n() + n_u() || basis_output.n_vars != n() + n_u())
            throw std::invalid_argument("pnlss: basis variable count must be n + n_u");
        if (E.rows() != n() || E.cols() != basis_state.size())
            throw std::invalid_argument("pnlss: E shape mismatch");
        if (F.rows() != n_y() || F.cols() != basis_output.size())
            throw std::invalid_argument("pnlss: F shape mismatch");
        if (x0.size() != n() || !x0.allFinite())
            throw std::invalid_argument("pnlss: x0 must be a finite n-vector");
    }
};

/// Zero-E/F PNLSS wrapper around a linear model; the usual fit starting point.
inline PnlssModel make_pnlss(const LinearStateSpace& lin, int degree,
                             StructuralMask mask_state = StructuralMask::all,
                             StructuralMask mask_output = StructuralMask::all) {
    lin.validate();
    PnlssModel model;
    model.lin = lin;
    model.basis_state = build_basis(lin.n(), lin.n_u(), degree, mask_state);
    model.basis_output = build_basis(lin.n(), lin.n_u(), degree, mask_output);
    model.E = Eigen::MatrixXd::Zero(lin.n(), model.basis_state.size());
    model.F = Eigen::MatrixXd::Zero(lin.n_y(), model.basis_output.size());
    model.x0 = Eigen::VectorXd::Zero(lin.n());
    return model;
}

struct PnlssSimulation {
    Eigen::MatrixXd states;  ///< n x T, state at each output instant
    Eigen::MatrixXd y;       ///< n_y x T
};

/// Iterates the recursion from x0. States beyond the divergence guard abort
/// with the offending step so optimizers can reject the parameter point.
inline PnlssSimulation simulate_pnlss(const PnlssModel& model,
                                      const Eigen::Ref<const Eigen::MatrixXd>& u) {
    model.validate();
    if (u.rows() != model.n_u()) throw std::invalid_argument("simulate_pnlss: input channel mismatch");
    const auto t_end = u.cols();
    const int n = model.n();

    PnlssSimulation sim;
    sim.states.resize(n, t_end);
    sim.y.resize(model.n_y(), t_end);

    Eigen::VectorXd x = model.x0;
    Eigen::VectorXd z(n + model.n_u());
    for (Eigen::Index t = 0; t < t_end; ++t) {
        const double mag = n > 0 ? x.cwiseAbs().maxCoeff() : 0.0;
        if (!x.allFinite() || mag > kDivergenceGuard)
            throw SimulationDiverged(static_cast<std::size_t>(t), mag);
        z.head(n) = x;
        z.tail(model.n_u()) = u.col(t);
        const Eigen::VectorXd zeta = model.basis_state.evaluate(z);
        const Eigen::VectorXd eta = model.basis_output.evaluate(z);
        sim.states.col(t) = x;
        sim.y.col(t) = model.lin.C * x + model.lin.D * u.col(t) + model.F * eta;
        x = model.lin.A * x + model.lin.B * u.col(t) + model.E * zeta;
    }
    if (!sim.y.allFinite())
        throw SimulationDiverged(static_cast<std::size_t>(t_end), std::numeric_limits<double>::infinity());
    return sim;
}

inline std::optional<PnlssSimulation> try_simulate_pnlss(const PnlssModel& model,
                                                         const Eigen::Ref<const Eigen::MatrixXd>& u) {
    try {
        return simulate_pnlss(model, u);
    } catch (const SimulationDiverged&) {
        return std::nullopt;
    }
}

/// Which parameter blocks vary in a fit. Layout order of the packed vector is
/// A, B, C, D, E, F, x0, column-major within each block.
struct FreeSelection {
    bool a = true;
    bool b = true;
    bool c = true;
    bool d = true;
    bool e = true;
    bool f = true;
    bool x0 = false;

    static FreeSelection for_model(const PnlssModel& model) {
        FreeSelection sel;
        sel.x0 = model.x0_estimated;
        return sel;
    }
};

namespace detail {

struct BlockOffsets {
    Eigen::Index a = -1, b = -1, c = -1, d = -1, e = -1, f = -1, x0 = -1;
    Eigen::Index total = 0;
};

inline BlockOffsets block_offsets(const PnlssModel& m, const FreeSelection& sel) {
    BlockOffsets off;
    Eigen::Index at = 0;
    auto place = [&at](bool used, Eigen::Index count) {
        const Eigen::Index pos = used ? at : -1;
        if (used) at += count;
        return pos;
    };
    off.a = place(sel.a, static_cast<Eigen::Index>(m.n()) * m.n());
    off.b = place(sel.b, static_cast<Eigen::Index>(m.n()) * m.n_u());
    off.c = place(sel.c, static_cast<Eigen::Index>(m.n_y()) * m.n());
    off.d = place(sel.d, static_cast<Eigen::Index>(m.n_y()) * m.n_u());
    off.e = place(sel.e, m.E.size());
    off.f = place(sel.f, m.F.size());
    off.x0 = place(sel.x0, m.n());
    off.total = at;
    return off;
}

}  // namespace detail

inline Eigen::Index parameter_count(const PnlssModel& model, const FreeSelection& sel) {
    return detail::block_offsets(model, sel).total;
}

inline Eigen::VectorXd pack_parameters(const PnlssModel& model, const FreeSelection& sel) {
    const auto off = detail::block_offsets(model, sel);
    Eigen::VectorXd theta(off.total);
    auto put = [&theta](Eigen::Index pos, const Eigen::MatrixXd& m) {
        if (pos >= 0) theta.segment(pos, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    };
    put(off.a, model.lin.A);
    put(off.b, model.lin.B);
    put(off.c, model.lin.C);
    put(off.d, model.lin.D);
    put(off.e, model.E);
    put(off.f, model.F);
    if (off.x0 >= 0) theta.segment(off.x0, model.n()) = model.x0;
    return theta;
}

inline PnlssModel unpack_parameters(const PnlssModel& model, const FreeSelection& sel,
                                    const Eigen::Ref<const Eigen::VectorXd>& theta) {
    const auto off = detail::block_offsets(model, sel);
    if (theta.size() != off.total)
        throw std::invalid_argument("unpack_parameters: theta length mismatch");
    PnlssModel out = model;
    auto take = [&theta](Eigen::Index pos, Eigen::MatrixXd& m) {
        if (pos >= 0)
            m = Eigen::Map<const Eigen::MatrixXd>(theta.segment(pos, m.size()).eval().data(),
                                                  m.rows(), m.cols());
    };
    take(off.a, out.lin.A);
    take(off.b, out.lin.B);
    take(off.c, out.lin.C);
    take(off.d, out.lin.D);
    take(off.e, out.E);
    take(off.f, out.F);
    if (off.x0 >= 0) out.x0 = theta.segment(off.x0, model.n());
    return out;
}

/// d y(t) / d theta for every output sample, rows ordered t-major then
/// output channel, columns per the pack layout. Sensitivities propagate
/// through the forward recursion
///   S(t+1) = (A + E dzeta/dx) S(t) + direct terms,
/// with C, D, F entering the output map only.
inline Eigen::MatrixXd output_jacobian(const PnlssModel& model,
                                       const Eigen::Ref<const Eigen::MatrixXd>& u,
                                       const FreeSelection& sel) {
    model.validate();
    if (u.rows() != model.n_u()) throw std::invalid_argument("output_jacobian: input channel mismatch");
    const int n = model.n();
    const int nu = model.n_u();
    const int ny = model.n_y();
    const auto t_end = u.cols();
    const auto off = detail::block_offsets(model, sel);

    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(t_end * ny, off.total);
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, off.total);
    if (off.x0 >= 0) s.block(0, off.x0, n, n).setIdentity();

    Eigen::VectorXd x = model.x0;
    Eigen::VectorXd z(n + nu);
    for (Eigen::Index t = 0; t < t_end; ++t) {
        const double mag = n > 0 ? x.cwiseAbs().maxCoeff() : 0.0;
        if (!x.allFinite() || mag > kDivergenceGuard)
            throw SimulationDiverged(static_cast<std::size_t>(t), mag);
        z.head(n) = x;
        z.tail(nu) = u.col(t);
        const Eigen::VectorXd zeta = model.basis_state.evaluate(z);
        const Eigen::VectorXd eta = model.basis_output.evaluate(z);
        const Eigen::MatrixXd dzeta_dx = model.basis_state.jacobian(z).leftCols(n);
        const Eigen::MatrixXd deta_dx = model.basis_output.jacobian(z).leftCols(n);

        auto rows = jac.middleRows(t * ny, ny);
        rows.noalias() = (model.lin.C + model.F * deta_dx) * s;
        if (off.c >= 0)
            for (int q = 0; q < n; ++q)
                for (int p = 0; p < ny; ++p) rows(p, off.c + q * ny + p) += x[q];
        if (off.d >= 0)
            for (int q = 0; q < nu; ++q)
                for (int p = 0; p < ny; ++p) rows(p, off.d + q * ny + p) += u(q, t);
        if (off.f >= 0)
            for (Eigen::Index q = 0; q < eta.size(); ++q)
                for (int p = 0; p < ny; ++p) rows(p, off.f + q * ny + p) += eta[q];

        Eigen::MatrixXd s_next = (model.lin.A + model.E * dzeta_dx) * s;
        if (off.a >= 0)
            for (int q = 0; q < n; ++q)
                for (int p = 0; p < n; ++p) s_next(p, off.a + q * n + p) += x[q];
        if (off.b >= 0)
            for (int q = 0; q < nu; ++q)
                for (int p = 0; p < n; ++p) s_next(p, off.b + q * n + p) += u(q, t);
        if (off.e >= 0)
            for (Eigen::Index q = 0; q < zeta.size(); ++q)
                for (int p = 0; p < n; ++p) s_next(p, off.e + q * n + p) += zeta[q];

        x = model.lin.A * x + model.lin.B * u.col(t) + model.E * zeta;
        s = std::move(s_next);
    }
    return jac;
}

/// Time-domain output-error problem for minimize(): residuals are
/// (y_model - y) / sqrt(samples * n_y), so the cost is the mean squared
/// error and sqrt(cost) the RMSE. Leading transient samples can be excluded
/// from the residual while still being simulated through.
struct PnlssOutputErrorProblem {
    PnlssModel reference;  ///< supplies structure and the frozen blocks
    Eigen::MatrixXd u;     ///< n_u x T
    Eigen::MatrixXd y;     ///< n_y x T
    FreeSelection free_params;
    int n_transient = 0;

    double scale() const {
        const auto m = (y.cols() - n_transient) * y.rows();
        return 1.0 / std::sqrt(static_cast<double>(m));
    }

    std::optional<Eigen::VectorXd> residual(const Eigen::VectorXd& theta) const {
        const PnlssModel model = unpack_parameters(reference, free_params, theta);
        const auto sim = try_simulate_pnlss(model, u);
        if (!sim) return std::nullopt;
        const auto cols = y.cols() - n_transient;
        Eigen::MatrixXd err = (sim->y - y).rightCols(cols) * scale();
        return Eigen::Map<const Eigen::VectorXd>(err.data(), err.size()).eval();
    }

    Eigen::MatrixXd jacobian(const Eigen::VectorXd& theta) const {
        const PnlssModel model = unpack_parameters(reference, free_params, theta);
        const Eigen::MatrixXd full = output_jacobian(model, u, free_params);
        return full.bottomRows(full.rows() - static_cast<Eigen::Index>(n_transient) * y.rows()) *
               scale();
    }
};

/// Output-error fit of the free blocks; report.rmse is on the fitted record.
inline std::pair<PnlssModel, FitReport> fit_pnlss(const PnlssModel& initial,
                                                  const Eigen::Ref<const Eigen::MatrixXd>& u,
                                                  const Eigen::Ref<const Eigen::MatrixXd>& y,
                                                  const FreeSelection& sel,
                                                  const LmSettings& settings = {},
                                                  int n_transient = 0) {
    initial.validate();
    if (y.rows() != initial.n_y() || u.cols() != y.cols())
        throw std::invalid_argument("fit_pnlss: data shape mismatch");
    if (n_transient < 0 || n_transient >= y.cols())
        throw std::invalid_argument("fit_pnlss: transient length out of range");

    PnlssOutputErrorProblem problem{initial, u, y, sel, n_transient};
    FitReport report = minimize(problem, pack_parameters(initial, sel), settings);
    report.rmse = std::sqrt(report.final_cost());
    PnlssModel fitted = unpack_parameters(initial, sel, report.theta);
    return {std::move(fitted), report};
}

}  // namespace nlssid
