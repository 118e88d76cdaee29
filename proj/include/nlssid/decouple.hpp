#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "nlssid/lm.hpp"
#include "nlssid/monomials.hpp"
#include "nlssid/pnlss.hpp"
#include "nlssid/state_space.hpp"
#include "nlssid/util.hpp"

namespace nlssid {

/// Jacobians of the stacked polynomial map p(s) = [E zeta(s); F eta(s)]
/// at Gaussian sampling points: slice k holds dp/ds at points.col(k).
struct JacobianTensor {
    std::vector<Eigen::MatrixXd> slices;  ///< each (n+n_y) x (n+n_u)
    Eigen::MatrixXd points;               ///< (n+n_u) x N_s
    std::uint64_t seed = 0;

    Eigen::Index rows() const { return slices.empty() ? 0 : slices.front().rows(); }
    Eigen::Index cols() const { return slices.empty() ? 0 : slices.front().cols(); }
    Eigen::Index n_samples() const { return static_cast<Eigen::Index>(slices.size()); }
};

/// Draw componentwise-Gaussian points (std 1 per variable unless an explicit
/// per-variable scaling is given) and evaluate the analytic Jacobian of the
/// model's polynomial part at each.
inline JacobianTensor sample_jacobians(const PnlssModel& model, int n_samples, std::uint64_t seed,
                                       Eigen::VectorXd scaling = Eigen::VectorXd()) {
    model.validate();
    if (n_samples < 1) throw std::invalid_argument("sample_jacobians: need at least one sample");
    const int n_vars = model.n() + model.n_u();
    if (scaling.size() == 0) scaling = Eigen::VectorXd::Ones(n_vars);
    if (scaling.size() != n_vars || (scaling.array() <= 0.0).any())
        throw std::invalid_argument("sample_jacobians: scaling must be positive per variable");

    JacobianTensor tensor;
    tensor.seed = seed;
    tensor.points.resize(n_vars, n_samples);
    tensor.slices.reserve(static_cast<std::size_t>(n_samples));

    auto rng = make_rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd slice(model.n() + model.n_y(), n_vars);
    for (int k = 0; k < n_samples; ++k) {
        for (int j = 0; j < n_vars; ++j) tensor.points(j, k) = scaling[j] * gauss(rng);
        slice.topRows(model.n()) = model.E * model.basis_state.jacobian(tensor.points.col(k));
        slice.bottomRows(model.n_y()) = model.F * model.basis_output.jacobian(tensor.points.col(k));
        tensor.slices.push_back(slice);
    }
    return tensor;
}

/// Per-variable standard deviations of the simulated states and the input,
/// the recommended sampling scale when states are far from unit size.
inline Eigen::VectorXd empirical_scaling(const PnlssModel& model,
                                         const Eigen::Ref<const Eigen::MatrixXd>& u) {
    const PnlssSimulation sim = simulate_pnlss(model, u);
    Eigen::VectorXd scale(model.n() + model.n_u());
    auto row_std = [](const Eigen::Ref<const Eigen::MatrixXd>& m, Eigen::Index r) {
        const double mean = m.row(r).mean();
        return std::sqrt((m.row(r).array() - mean).square().sum() /
                         static_cast<double>(m.cols()));
    };
    for (int i = 0; i < model.n(); ++i) scale[i] = row_std(sim.states, i);
    for (int j = 0; j < model.n_u(); ++j) scale[model.n() + j] = row_std(u, j);
    // Constant channels carry no scale information; sample them at unit std.
    for (Eigen::Index i = 0; i < scale.size(); ++i)
        if (!(scale[i] > 0.0)) scale[i] = 1.0;
    return scale;
}

/// Rank-r canonical polyadic factors J_ijk ~ sum_l w_il v_jl h_kl.
/// V and W columns are unit norm with the scale absorbed into H; branches
/// are ordered by descending H column norm.
struct CpdFactors {
    Eigen::MatrixXd w;  ///< (n+n_y) x r
    Eigen::MatrixXd v;  ///< (n+n_u) x r
    Eigen::MatrixXd h;  ///< N_s x r
    int rank = 0;
    double residual = 0.0;   ///< relative Frobenius misfit
    bool converged = false;  ///< residual change fell below tol within the sweep budget
    bool degenerate = false; ///< best restart had collinear V columns (all restarts discarded)
    bool undersampled = false;
};

namespace detail {

/// Column-wise Khatri-Rao product; row (ka * rows_b + kb) = a(ka,l) * b(kb,l).
inline Eigen::MatrixXd khatri_rao(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out(a.rows() * b.rows(), a.cols());
    for (Eigen::Index l = 0; l < a.cols(); ++l)
        for (Eigen::Index i = 0; i < a.rows(); ++i)
            out.block(i * b.rows(), l, b.rows(), 1) = a(i, l) * b.col(l);
    return out;
}

inline Eigen::MatrixXd pinv(const Eigen::MatrixXd& m) {
    return m.completeOrthogonalDecomposition().pseudoInverse();
}

}  // namespace detail

/// Alternating least squares CPD with multi-start. Factor updates use the
/// pseudo-inverse of the Gram matrix, so each half-step is the exact
/// least-squares solution and the residual never increases. A restart whose
/// normalized V has two collinear columns (|inner| > 0.999) is discarded as
/// degenerate; if every restart degenerates the best one is returned with
/// the flag set rather than failing.
inline CpdFactors cpd_als(const JacobianTensor& tensor, int r, int restarts = 10,
                          int max_sweeps = 500, double tol = 1e-10, std::uint64_t seed = 1) {
    if (r < 1) throw std::invalid_argument("cpd_als: rank must be >= 1");
    if (restarts < 1 || max_sweeps < 1) throw std::invalid_argument("cpd_als: invalid budget");
    const auto i_dim = tensor.rows();
    const auto j_dim = tensor.cols();
    const auto k_dim = tensor.n_samples();
    if (k_dim < 1) throw std::invalid_argument("cpd_als: empty tensor");

    Eigen::MatrixXd x1(i_dim, j_dim * k_dim);
    Eigen::MatrixXd x2(j_dim, i_dim * k_dim);
    Eigen::MatrixXd x3(k_dim, i_dim * j_dim);
    for (Eigen::Index k = 0; k < k_dim; ++k) {
        const Eigen::MatrixXd& s = tensor.slices[static_cast<std::size_t>(k)];
        if (!s.allFinite()) throw std::invalid_argument("cpd_als: non-finite tensor entry");
        x1.middleCols(k * j_dim, j_dim) = s;
        x2.middleCols(k * i_dim, i_dim) = s.transpose();
        x3.row(k) = Eigen::Map<const Eigen::RowVectorXd>(s.data(), s.size());
    }
    const double norm_x = x1.norm();

    CpdFactors best;
    best.rank = r;
    best.undersampled = k_dim < static_cast<Eigen::Index>(r) * std::max(i_dim, j_dim);
    if (norm_x == 0.0) {
        best.w = Eigen::MatrixXd::Zero(i_dim, r);
        best.v = Eigen::MatrixXd::Zero(j_dim, r);
        best.h = Eigen::MatrixXd::Zero(k_dim, r);
        best.residual = 0.0;
        best.converged = true;
        return best;
    }

    double best_score = std::numeric_limits<double>::infinity();
    bool have_clean = false;
    for (int restart = 0; restart < restarts; ++restart) {
        auto rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(restart)));
        std::normal_distribution<double> gauss(0.0, 1.0);
        auto randn = [&rng, &gauss](Eigen::Index rows, Eigen::Index cols) {
            Eigen::MatrixXd m(rows, cols);
            for (Eigen::Index c = 0; c < cols; ++c)
                for (Eigen::Index rr = 0; rr < rows; ++rr) m(rr, c) = gauss(rng);
            return m;
        };
        Eigen::MatrixXd w = randn(i_dim, r);
        Eigen::MatrixXd v = randn(j_dim, r);
        Eigen::MatrixXd h = randn(k_dim, r);

        double res = std::numeric_limits<double>::infinity();
        bool converged = false;
        for (int sweep = 0; sweep < max_sweeps; ++sweep) {
            w = x1 * detail::khatri_rao(h, v) *
                detail::pinv(((h.transpose() * h).cwiseProduct(v.transpose() * v)).eval());
            v = x2 * detail::khatri_rao(h, w) *
                detail::pinv(((h.transpose() * h).cwiseProduct(w.transpose() * w)).eval());
            h = x3 * detail::khatri_rao(v, w) *
                detail::pinv(((v.transpose() * v).cwiseProduct(w.transpose() * w)).eval());
            const double res_new =
                (x1 - w * detail::khatri_rao(h, v).transpose()).norm() / norm_x;
            if (res - res_new < tol) {
                res = std::min(res, res_new);
                converged = true;
                break;
            }
            res = res_new;
        }

        // Unit-norm V and W columns, scale into H, branches by H norm.
        for (int l = 0; l < r; ++l) {
            const double nw = w.col(l).norm();
            const double nv = v.col(l).norm();
            if (nw > 0) w.col(l) /= nw;
            if (nv > 0) v.col(l) /= nv;
            h.col(l) *= nw * nv;
        }
        std::vector<int> order(static_cast<std::size_t>(r));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&h](int a, int b) { return h.col(a).norm() > h.col(b).norm(); });
        Eigen::MatrixXd ws(i_dim, r), vs(j_dim, r), hs(k_dim, r);
        for (int l = 0; l < r; ++l) {
            ws.col(l) = w.col(order[static_cast<std::size_t>(l)]);
            vs.col(l) = v.col(order[static_cast<std::size_t>(l)]);
            hs.col(l) = h.col(order[static_cast<std::size_t>(l)]);
        }

        bool collinear = false;
        for (int a = 0; a < r && !collinear; ++a)
            for (int b = a + 1; b < r; ++b)
                if (std::abs(vs.col(a).dot(vs.col(b))) > 0.999) {
                    collinear = true;
                    break;
                }

        const bool better = collinear
                                ? (!have_clean && res < best_score)
                                : (!have_clean || res < best_score);
        if (better) {
            best_score = res;
            best.w = std::move(ws);
            best.v = std::move(vs);
            best.h = std::move(hs);
            best.residual = res;
            best.converged = converged;
            best.degenerate = collinear;
            if (!collinear) have_clean = true;
        }
    }
    return best;
}

/// Least-squares coefficients of each branch's derivative on powers
/// 1..d-1 of the projected samples (no constant column), plus the fit
/// residual per branch.
struct BranchDerivatives {
    Eigen::MatrixXd coeffs;     ///< r x (d-1); column m-1 is the power-m coefficient
    Eigen::VectorXd residuals;  ///< Euclidean misfit per branch
};

inline BranchDerivatives fit_branch_derivatives(const CpdFactors& factors,
                                                const JacobianTensor& tensor, int d) {
    if (d < 2) throw std::invalid_argument("fit_branch_derivatives: degree must be >= 2");
    const auto n_s = tensor.n_samples();
    if (n_s < d - 1)
        throw std::invalid_argument("fit_branch_derivatives: fewer samples than coefficients");
    if (factors.h.rows() != n_s || factors.v.rows() != tensor.cols())
        throw std::invalid_argument("fit_branch_derivatives: factor/tensor shape mismatch");

    const int r = factors.rank;
    BranchDerivatives out;
    out.coeffs.resize(r, d - 1);
    out.residuals.resize(r);
    for (int l = 0; l < r; ++l) {
        const Eigen::VectorXd s_tilde = tensor.points.transpose() * factors.v.col(l);
        Eigen::MatrixXd vand(n_s, d - 1);
        Eigen::VectorXd p = s_tilde;
        for (int m = 1; m <= d - 1; ++m) {
            vand.col(m - 1) = p;
            p = p.cwiseProduct(s_tilde);
        }
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(vand);
        if (qr.rank() < d - 1)
            throw std::runtime_error(
                "fit_branch_derivatives: rank-deficient projected-sample matrix on branch " +
                std::to_string(l) + "; draw more sampling points");
        const Eigen::VectorXd c = qr.solve(factors.h.col(l));
        out.coeffs.row(l) = c.transpose();
        out.residuals[l] = (vand * c - factors.h.col(l)).norm();
    }
    return out;
}

/// Antiderivative per branch: the power-m derivative coefficient becomes
/// the degree-(m+1) polynomial coefficient c'_m/(m+1). Degrees run 2..d;
/// constants and linear terms stay zero by construction.
inline Eigen::MatrixXd integrate_branches(const Eigen::Ref<const Eigen::MatrixXd>& derivative_coeffs) {
    Eigen::MatrixXd coeffs = derivative_coeffs;
    for (Eigen::Index m = 0; m < coeffs.cols(); ++m)
        coeffs.col(m) /= static_cast<double>(m + 2);
    return coeffs;
}

/// Parallel-branch replacement of a coupled polynomial part:
///   x(t+1) = A x + B u + W_x g(V^T [x;u]),  y = C x + D u + W_y g(V^T [x;u])
/// with g_l a univariate polynomial of degrees 2..d.
struct DecoupledModel {
    LinearStateSpace lin;
    Eigen::MatrixXd v;       ///< (n+n_u) x r
    Eigen::MatrixXd w_x;     ///< n x r
    Eigen::MatrixXd w_y;     ///< n_y x r
    Eigen::MatrixXd coeffs;  ///< r x (d-1); column j is the degree-(j+2) coefficient
    int degree = 2;
    Eigen::VectorXd x0;
    bool x0_estimated = false;

    int n() const { return lin.n(); }
    int n_u() const { return lin.n_u(); }
    int n_y() const { return lin.n_y(); }
    int r() const { return static_cast<int>(v.cols()); }

    void validate() const {
        lin.validate();
        if (degree < 2) throw std::invalid_argument("decoupled: degree must be >= 2");
        if (v.rows() != n() + n_u()) throw std::invalid_argument("decoupled: V row count mismatch");
        if (w_x.rows() != n() || w_x.cols() != v.cols())
            throw std::invalid_argument("decoupled: W_x shape mismatch");
        if (w_y.rows() != n_y() || w_y.cols() != v.cols())
            throw std::invalid_argument("decoupled: W_y shape mismatch");
        if (coeffs.rows() != v.cols() || coeffs.cols() != degree - 1)
            throw std::invalid_argument("decoupled: branch coefficient shape mismatch");
        if (x0.size() != n() || !x0.allFinite())
            throw std::invalid_argument("decoupled: x0 must be a finite n-vector");
    }

    /// g_l(s) and g_l'(s) for all branches at the projected point.
    void branch_values(const Eigen::Ref<const Eigen::VectorXd>& s_tilde, Eigen::VectorXd& g,
                       Eigen::VectorXd& dg) const {
        const int rr = r();
        g.resize(rr);
        dg.resize(rr);
        for (int l = 0; l < rr; ++l) {
            const double s = s_tilde[l];
            double acc = 0.0, dacc = 0.0;
            double p = s;  // s^(deg-1) while iterating deg = 2..d
            for (int j = 0; j < degree - 1; ++j) {
                const double c = coeffs(l, j);
                dacc += c * (j + 2) * p;
                p *= s;
                acc += c * p;
            }
            g[l] = acc;
            dg[l] = dacc;
        }
    }
};

struct DecoupledSimulation {
    Eigen::MatrixXd states;
    Eigen::MatrixXd y;
};

inline DecoupledSimulation simulate_decoupled(const DecoupledModel& model,
                                              const Eigen::Ref<const Eigen::MatrixXd>& u) {
    model.validate();
    if (u.rows() != model.n_u())
        throw std::invalid_argument("simulate_decoupled: input channel mismatch");
    const int n = model.n();
    const auto t_end = u.cols();

    DecoupledSimulation sim;
    sim.states.resize(n, t_end);
    sim.y.resize(model.n_y(), t_end);
    Eigen::VectorXd x = model.x0;
    Eigen::VectorXd z(n + model.n_u());
    Eigen::VectorXd g, dg;
    for (Eigen::Index t = 0; t < t_end; ++t) {
        const double mag = x.cwiseAbs().maxCoeff();
        if (!x.allFinite() || mag > kDivergenceGuard)
            throw SimulationDiverged(static_cast<std::size_t>(t), mag);
        z.head(n) = x;
        z.tail(model.n_u()) = u.col(t);
        model.branch_values(model.v.transpose() * z, g, dg);
        sim.states.col(t) = x;
        sim.y.col(t) = model.lin.C * x + model.lin.D * u.col(t) + model.w_y * g;
        x = model.lin.A * x + model.lin.B * u.col(t) + model.w_x * g;
    }
    if (!sim.y.allFinite())
        throw SimulationDiverged(static_cast<std::size_t>(t_end),
                                 std::numeric_limits<double>::infinity());
    return sim;
}

inline std::optional<DecoupledSimulation> try_simulate_decoupled(
    const DecoupledModel& model, const Eigen::Ref<const Eigen::MatrixXd>& u) {
    try {
        return simulate_decoupled(model, u);
    } catch (const SimulationDiverged&) {
        return std::nullopt;
    }
}

namespace detail {

struct DecoupledOffsets {
    Eigen::Index a = 0, b = 0, c = 0, d = 0, v = 0, wx = 0, wy = 0, coeffs = 0, x0 = 0, total = 0;
};

inline DecoupledOffsets decoupled_offsets(const DecoupledModel& m) {
    DecoupledOffsets off;
    Eigen::Index at = 0;
    off.a = at; at += m.lin.A.size();
    off.b = at; at += m.lin.B.size();
    off.c = at; at += m.lin.C.size();
    off.d = at; at += m.lin.D.size();
    off.v = at; at += m.v.size();
    off.wx = at; at += m.w_x.size();
    off.wy = at; at += m.w_y.size();
    off.coeffs = at; at += m.coeffs.size();
    off.x0 = at; at += m.x0.size();
    off.total = at;
    return off;
}

}  // namespace detail

inline Eigen::VectorXd pack_decoupled(const DecoupledModel& model) {
    const auto off = detail::decoupled_offsets(model);
    Eigen::VectorXd theta(off.total);
    auto put = [&theta](Eigen::Index pos, const Eigen::MatrixXd& m) {
        theta.segment(pos, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    };
    put(off.a, model.lin.A);
    put(off.b, model.lin.B);
    put(off.c, model.lin.C);
    put(off.d, model.lin.D);
    put(off.v, model.v);
    put(off.wx, model.w_x);
    put(off.wy, model.w_y);
    put(off.coeffs, model.coeffs);
    theta.segment(off.x0, model.x0.size()) = model.x0;
    return theta;
}

inline DecoupledModel unpack_decoupled(const DecoupledModel& shape,
                                       const Eigen::Ref<const Eigen::VectorXd>& theta) {
    const auto off = detail::decoupled_offsets(shape);
    if (theta.size() != off.total)
        throw std::invalid_argument("unpack_decoupled: theta length mismatch");
    DecoupledModel out = shape;
    auto take = [&theta](Eigen::Index pos, Eigen::MatrixXd& m) {
        m = Eigen::Map<const Eigen::MatrixXd>(theta.data() + pos, m.rows(), m.cols());
    };
    take(off.a, out.lin.A);
    take(off.b, out.lin.B);
    take(off.c, out.lin.C);
    take(off.d, out.lin.D);
    take(off.v, out.v);
    take(off.wx, out.w_x);
    take(off.wy, out.w_y);
    take(off.coeffs, out.coeffs);
    out.x0 = theta.segment(off.x0, shape.x0.size());
    return out;
}

/// d y(t) / d theta over [A,B,C,D,V,W_x,W_y,branch coeffs,x0]. V feeds both
/// equations, so its direct terms appear in the state and the output rows.
inline Eigen::MatrixXd decoupled_output_jacobian(const DecoupledModel& model,
                                                 const Eigen::Ref<const Eigen::MatrixXd>& u) {
    model.validate();
    const int n = model.n();
    const int nu = model.n_u();
    const int ny = model.n_y();
    const int r = model.r();
    const int n_vars = n + nu;
    const auto t_end = u.cols();
    const auto off = detail::decoupled_offsets(model);

    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(t_end * ny, off.total);
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, off.total);
    s.block(0, off.x0, n, n).setIdentity();

    Eigen::VectorXd x = model.x0;
    Eigen::VectorXd z(n_vars), g, dg;
    for (Eigen::Index t = 0; t < t_end; ++t) {
        const double mag = x.cwiseAbs().maxCoeff();
        if (!x.allFinite() || mag > kDivergenceGuard)
            throw SimulationDiverged(static_cast<std::size_t>(t), mag);
        z.head(n) = x;
        z.tail(nu) = u.col(t);
        const Eigen::VectorXd s_tilde = model.v.transpose() * z;
        model.branch_values(s_tilde, g, dg);
        // dg scaled columns: d(W g)/dx = W diag(dg) Vx^T.
        const Eigen::MatrixXd vx_t = model.v.topRows(n).transpose();  // r x n

        auto rows = jac.middleRows(t * ny, ny);
        rows.noalias() = (model.lin.C + model.w_y * dg.asDiagonal() * vx_t) * s;
        for (int q = 0; q < n; ++q)
            for (int p = 0; p < ny; ++p) rows(p, off.c + q * ny + p) += x[q];
        for (int q = 0; q < nu; ++q)
            for (int p = 0; p < ny; ++p) rows(p, off.d + q * ny + p) += u(q, t);

        Eigen::MatrixXd s_next = (model.lin.A + model.w_x * dg.asDiagonal() * vx_t) * s;
        for (int q = 0; q < n; ++q)
            for (int p = 0; p < n; ++p) s_next(p, off.a + q * n + p) += x[q];
        for (int q = 0; q < nu; ++q)
            for (int p = 0; p < n; ++p) s_next(p, off.b + q * n + p) += u(q, t);

        for (int l = 0; l < r; ++l) {
            for (int j = 0; j < n_vars; ++j) {
                const auto col = off.v + l * n_vars + j;
                const double dv = dg[l] * z[j];
                s_next.col(col) += model.w_x.col(l) * dv;
                rows.col(col) += model.w_y.col(l) * dv;
            }
            for (int p = 0; p < n; ++p) s_next(p, off.wx + l * n + p) += g[l];
            for (int p = 0; p < ny; ++p) rows(p, off.wy + l * ny + p) += g[l];
            double p_pow = s_tilde[l] * s_tilde[l];  // s^(j+2) while j runs
            for (int j = 0; j < model.degree - 1; ++j) {
                const auto col = off.coeffs + j * r + l;
                s_next.col(col) += model.w_x.col(l) * p_pow;
                rows.col(col) += model.w_y.col(l) * p_pow;
                p_pow *= s_tilde[l];
            }
        }

        x = model.lin.A * x + model.lin.B * u.col(t) + model.w_x * g;
        s = std::move(s_next);
    }
    return jac;
}

struct DecoupledOutputErrorProblem {
    DecoupledModel reference;
    Eigen::MatrixXd u;
    Eigen::MatrixXd y;

    double scale() const { return 1.0 / std::sqrt(static_cast<double>(y.size())); }

    std::optional<Eigen::VectorXd> residual(const Eigen::VectorXd& theta) const {
        const DecoupledModel model = unpack_decoupled(reference, theta);
        const auto sim = try_simulate_decoupled(model, u);
        if (!sim) return std::nullopt;
        Eigen::MatrixXd err = (sim->y - y) * scale();
        return Eigen::Map<const Eigen::VectorXd>(err.data(), err.size()).eval();
    }

    Eigen::MatrixXd jacobian(const Eigen::VectorXd& theta) const {
        const DecoupledModel model = unpack_decoupled(reference, theta);
        return decoupled_output_jacobian(model, u) * scale();
    }
};

/// Initialized decoupled model from CPD factors and integrated branches;
/// carries the base model's linear part and initial state.
inline DecoupledModel assemble_decoupled(const PnlssModel& base, const CpdFactors& factors,
                                         const BranchDerivatives& derivatives, int d) {
    base.validate();
    if (factors.w.rows() != base.n() + base.n_y())
        throw std::invalid_argument("assemble_decoupled: W row count mismatch");
    if (factors.v.rows() != base.n() + base.n_u())
        throw std::invalid_argument("assemble_decoupled: V row count mismatch");
    DecoupledModel model;
    model.lin = base.lin;
    model.v = factors.v;
    model.w_x = factors.w.topRows(base.n());
    model.w_y = factors.w.bottomRows(base.n_y());
    model.coeffs = integrate_branches(derivatives.coeffs);
    model.degree = d;
    model.x0 = base.x0;
    model.x0_estimated = base.x0_estimated;
    model.validate();
    return model;
}

/// Joint LM over the full decoupled parameterization; cost is the mean
/// squared output error and report.rmse = sqrt(final cost).
inline std::pair<DecoupledModel, FitReport> optimize_decoupled(
    const DecoupledModel& initial, const Eigen::Ref<const Eigen::MatrixXd>& u,
    const Eigen::Ref<const Eigen::MatrixXd>& y, const LmSettings& settings = {}) {
    initial.validate();
    if (u.cols() != y.cols() || y.rows() != initial.n_y())
        throw std::invalid_argument("optimize_decoupled: data shape mismatch");

    DecoupledOutputErrorProblem problem{initial, u, y};
    FitReport report = minimize(problem, pack_decoupled(initial), settings);
    report.rmse = std::sqrt(report.final_cost());
    DecoupledModel fitted = unpack_decoupled(initial, report.theta);
    return {std::move(fitted), report};
}

struct DecoupledParameterCount {
    std::uint64_t published = 0;   ///< (2n + n_u + n_y + d) * r
    std::uint64_t structural = 0;  ///< ((n+n_u) + (n+n_y) + (d-1)) * r
};

/// Both nonlinear-parameter counts for the decoupled structure. The printed
/// closed form overshoots the parameters actually present (V, W, and the
/// d-1 branch coefficients) by r; reports show both rather than silently
/// correcting either.
inline DecoupledParameterCount count_decoupled_parameters(int n, int n_u, int n_y, int d, int r) {
    if (n < 0 || n_u < 0 || n_y < 0 || d < 1 || r < 0)
        throw std::invalid_argument("count_decoupled_parameters: invalid arguments");
    DecoupledParameterCount out;
    out.published = static_cast<std::uint64_t>(2 * n + n_u + n_y + d) * static_cast<std::uint64_t>(r);
    out.structural = static_cast<std::uint64_t>((n + n_u) + (n + n_y) + (d - 1)) *
                     static_cast<std::uint64_t>(r);
    return out;
}

/// Expand the parallel branches into coupled E/F coefficients over the full
/// monomial basis (multinomial theorem); the expansion simulates identically
/// to the decoupled model and anchors the decoupling tests.
inline PnlssModel expand_to_pnlss(const DecoupledModel& model) {
    model.validate();
    PnlssModel out = make_pnlss(model.lin, model.degree);
    out.x0 = model.x0;
    out.x0_estimated = model.x0_estimated;

    std::map<std::vector<int>, Eigen::Index> index_of;
    for (Eigen::Index row = 0; row < out.basis_state.exponents.rows(); ++row) {
        std::vector<int> key(static_cast<std::size_t>(out.basis_state.n_vars));
        for (int c = 0; c < out.basis_state.n_vars; ++c) key[static_cast<std::size_t>(c)] =
            out.basis_state.exponents(row, c);
        index_of.emplace(std::move(key), row);
    }

    const int n_vars = model.n() + model.n_u();
    std::vector<double> factorial(static_cast<std::size_t>(model.degree) + 1, 1.0);
    for (std::size_t i = 1; i < factorial.size(); ++i)
        factorial[i] = factorial[i - 1] * static_cast<double>(i);

    for (int l = 0; l < model.r(); ++l) {
        for (int deg = 2; deg <= model.degree; ++deg) {
            const double c = model.coeffs(l, deg - 2);
            if (c == 0.0) continue;
            std::vector<Eigen::VectorXi> comps;
            Eigen::VectorXi current(n_vars);
            detail::enumerate_compositions(deg, 0, current, comps);
            for (const auto& alpha : comps) {
                double multinom = factorial[static_cast<std::size_t>(deg)];
                double v_pow = 1.0;
                for (int j = 0; j < n_vars; ++j) {
                    multinom /= factorial[static_cast<std::size_t>(alpha[j])];
                    for (int k = 0; k < alpha[j]; ++k) v_pow *= model.v(j, l);
                }
                std::vector<int> key(static_cast<std::size_t>(n_vars));
                for (int j = 0; j < n_vars; ++j) key[static_cast<std::size_t>(j)] = alpha[j];
                const Eigen::Index idx = index_of.at(key);
                const double contrib = c * multinom * v_pow;
                out.E.col(idx) += model.w_x.col(l) * contrib;
                out.F.col(idx) += model.w_y.col(l) * contrib;
            }
        }
    }
    return out;
}

}  // namespace nlssid
