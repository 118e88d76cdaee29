#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include "nlssid/frf.hpp"
#include "nlssid/lm.hpp"
#include "nlssid/state_space.hpp"

namespace nlssid {

/// Rational transfer function in the backward shift operator q^{-1}:
///   G(q) = (b0 + b1 q^{-1} + ... + b_nb q^{-nb}) / (1 + a1 q^{-1} + ... + a_na q^{-na}).
/// Scaling invariance is fixed by a0 = 1.
struct TransferFunctionModel {
    Eigen::VectorXd b;  ///< b0..b_nb
    Eigen::VectorXd a;  ///< a0..a_na with a[0] == 1
    bool stable_denominator = true;

    int n_b() const { return static_cast<int>(b.size()) - 1; }
    int n_a() const { return static_cast<int>(a.size()) - 1; }

    std::complex<double> evaluate(std::complex<double> z) const {
        const std::complex<double> zi = 1.0 / z;
        std::complex<double> num(0, 0), den(0, 0), p(1, 0);
        for (Eigen::Index i = 0; i < std::max(a.size(), b.size()); ++i) {
            if (i < b.size()) num += b[i] * p;
            if (i < a.size()) den += a[i] * p;
            p *= zi;
        }
        return num / den;
    }

    /// Poles as roots of z^na + a1 z^{na-1} + ... + a_na (companion eigenvalues).
    Eigen::VectorXcd poles() const {
        const int n = n_a();
        if (n == 0) return Eigen::VectorXcd();
        Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(n, n);
        for (int i = 0; i < n; ++i) companion(0, i) = -a[i + 1];
        companion.block(1, 0, n - 1, n - 1).setIdentity();
        return companion.eigenvalues();
    }
};

namespace detail {

struct TfFitProblem {
    std::vector<std::complex<double>> z;    ///< e^{j w_k} per bin
    std::vector<std::complex<double>> g;    ///< measured FRF per bin
    std::vector<double> inv_sqrt_w;         ///< 1/sqrt(weight) per bin
    int n_a = 0;
    int n_b = 0;

    // theta = [a1..a_na, b0..b_nb]; residuals stack Re and Im parts.
    std::optional<Eigen::VectorXd> residual(const Eigen::VectorXd& theta) const {
        const auto f = static_cast<Eigen::Index>(z.size());
        Eigen::VectorXd r(2 * f);
        for (Eigen::Index k = 0; k < f; ++k) {
            const auto [num, den] = eval_polys(theta, z[static_cast<std::size_t>(k)]);
            if (std::abs(den) < 1e-300) return std::nullopt;
            const std::complex<double> e =
                (g[static_cast<std::size_t>(k)] - num / den) * inv_sqrt_w[static_cast<std::size_t>(k)];
            r[2 * k] = e.real();
            r[2 * k + 1] = e.imag();
        }
        return r;
    }

    Eigen::MatrixXd jacobian(const Eigen::VectorXd& theta) const {
        const auto f = static_cast<Eigen::Index>(z.size());
        Eigen::MatrixXd jac(2 * f, theta.size());
        for (Eigen::Index k = 0; k < f; ++k) {
            const std::complex<double> zk = z[static_cast<std::size_t>(k)];
            const auto [num, den] = eval_polys(theta, zk);
            const double s = inv_sqrt_w[static_cast<std::size_t>(k)];
            // d r / d a_i = num * z^{-i} / den^2 ; d r / d b_i = -z^{-i} / den
            std::complex<double> p = 1.0 / zk;
            for (int i = 1; i <= n_a; ++i) {
                const std::complex<double> d = s * num * p / (den * den);
                jac(2 * k, i - 1) = d.real();
                jac(2 * k + 1, i - 1) = d.imag();
                p /= zk;
            }
            p = 1.0;
            for (int i = 0; i <= n_b; ++i) {
                const std::complex<double> d = -s * p / den;
                jac(2 * k, n_a + i) = d.real();
                jac(2 * k + 1, n_a + i) = d.imag();
                p /= zk;
            }
        }
        return jac;
    }

    std::pair<std::complex<double>, std::complex<double>> eval_polys(
        const Eigen::VectorXd& theta, std::complex<double> zk) const {
        std::complex<double> den(1, 0), num(0, 0), p(1, 0);
        const std::complex<double> zi = 1.0 / zk;
        for (int i = 1; i <= n_a; ++i) {
            p *= zi;
            den += theta[i - 1] * p;
        }
        p = {1, 0};
        for (int i = 0; i <= n_b; ++i) {
            num += theta[n_a + i] * p;
            p *= zi;
        }
        return {num, den};
    }
};

}  // namespace detail

/// Weighted least-squares rational fit to a nonparametric FRF.
///
/// Initialized with the Levy linearization |G*A - B|^2 (a linear LS problem),
/// then refined by Levenberg-Marquardt on the true cost
///   V = sum_k |G_k - B/A|^2 / w_k.
/// Default weights are the FRF variance where available (total variance if
/// realization averaging happened, noise variance otherwise) and 1 elsewhere;
/// degenerate variances fall back to 1 across the board.
inline TransferFunctionModel fit_transfer_function(const FrfEstimate& frf, int n_a, int n_b,
                                                   Eigen::VectorXd weights = Eigen::VectorXd(),
                                                   const LmSettings& settings = {}) {
    const auto n_bins = static_cast<Eigen::Index>(frf.excited_bins.size());
    if (n_a < 0 || n_b < 0) throw std::invalid_argument("fit_transfer_function: negative order");
    if (2 * n_bins < n_a + n_b + 1)
        throw std::invalid_argument("fit_transfer_function: too few excited bins for the order");

    if (weights.size() == 0) {
        const Eigen::VectorXd* var = nullptr;
        if (frf.var_total.size() == n_bins) var = &frf.var_total;
        else if (frf.var_noise.size() == n_bins) var = &frf.var_noise;
        if (var && (var->array() > 0.0).all()) weights = *var;
        else weights = Eigen::VectorXd::Ones(n_bins);
    }
    if (weights.size() != n_bins || (weights.array() <= 0.0).any())
        throw std::invalid_argument("fit_transfer_function: weights must be positive per bin");

    detail::TfFitProblem problem;
    problem.n_a = n_a;
    problem.n_b = n_b;
    problem.z.reserve(static_cast<std::size_t>(n_bins));
    problem.g.reserve(static_cast<std::size_t>(n_bins));
    problem.inv_sqrt_w.reserve(static_cast<std::size_t>(n_bins));
    for (Eigen::Index i = 0; i < n_bins; ++i) {
        const double w_k = 2.0 * std::numbers::pi * frf.excited_bins[static_cast<std::size_t>(i)] /
                           static_cast<double>(frf.period_length);
        problem.z.push_back(std::polar(1.0, w_k));
        problem.g.push_back(frf.response[i]);
        problem.inv_sqrt_w.push_back(1.0 / std::sqrt(weights[i]));
    }

    // Levy linearization: G*(1 + sum a_i z^-i) - sum b_i z^-i ~ 0.
    const int n_params = n_a + n_b + 1;
    Eigen::MatrixXd m(2 * n_bins, n_params);
    Eigen::VectorXd rhs(2 * n_bins);
    for (Eigen::Index k = 0; k < n_bins; ++k) {
        const std::complex<double> zk = problem.z[static_cast<std::size_t>(k)];
        const std::complex<double> gk = problem.g[static_cast<std::size_t>(k)];
        const double s = problem.inv_sqrt_w[static_cast<std::size_t>(k)];
        std::complex<double> p = 1.0 / zk;
        for (int i = 1; i <= n_a; ++i) {
            const std::complex<double> c = -s * gk * p;
            m(2 * k, i - 1) = c.real();
            m(2 * k + 1, i - 1) = c.imag();
            p /= zk;
        }
        p = {1, 0};
        for (int i = 0; i <= n_b; ++i) {
            const std::complex<double> c = s * p;
            m(2 * k, n_a + i) = c.real();
            m(2 * k + 1, n_a + i) = c.imag();
            p /= zk;
        }
        rhs[2 * k] = (s * gk).real();
        rhs[2 * k + 1] = (s * gk).imag();
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
    if (qr.rank() < n_params) {
        throw std::runtime_error(
            "fit_transfer_function: rank-deficient initialization (rank " +
            std::to_string(qr.rank()) + " of " + std::to_string(n_params) +
            "); lower the order or excite more bins");
    }
    Eigen::VectorXd theta0 = qr.solve(rhs);

    FitReport report = minimize(problem, theta0, settings);

    TransferFunctionModel tf;
    tf.a.resize(n_a + 1);
    tf.a[0] = 1.0;
    for (int i = 1; i <= n_a; ++i) tf.a[i] = report.theta[i - 1];
    tf.b = report.theta.tail(n_b + 1);
    tf.stable_denominator = n_a == 0 || tf.poles().cwiseAbs().maxCoeff() < 1.0;
    return tf;
}

/// Reflect any pole outside the unit circle to its reciprocal radius,
/// preserving the magnitude response shape. Used by pipelines before
/// realization when the fit was flagged unstable.
inline TransferFunctionModel stabilize_denominator(const TransferFunctionModel& tf) {
    Eigen::VectorXcd p = tf.poles();
    bool changed = false;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (std::abs(p[i]) >= 1.0) {
            p[i] = p[i] / std::norm(p[i]);  // 1/conj(pole)
            changed = true;
        }
    }
    if (!changed) {
        TransferFunctionModel out = tf;
        out.stable_denominator = true;
        return out;
    }
    // Rebuild monic z-polynomial from the reflected roots.
    Eigen::VectorXcd coef = Eigen::VectorXcd::Zero(p.size() + 1);
    coef[0] = 1.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        for (Eigen::Index j = i + 1; j >= 1; --j) coef[j] -= p[i] * coef[j - 1];
    }
    TransferFunctionModel out = tf;
    for (Eigen::Index i = 0; i < coef.size(); ++i) out.a[i] = coef[i].real();
    out.a[0] = 1.0;
    out.stable_denominator = true;
    return out;
}

/// Controllable canonical realization of a proper transfer function
/// (n_b <= n_a); n = n_a states, SISO.
inline LinearStateSpace realize_state_space(const TransferFunctionModel& tf) {
    const int n = tf.n_a();
    if (tf.n_b() > n)
        throw std::invalid_argument("realize_state_space: improper transfer function (n_b > n_a)");
    if (tf.a.size() == 0 || tf.a[0] != 1.0)
        throw std::invalid_argument("realize_state_space: denominator must be monic (a0 = 1)");

    LinearStateSpace ss;
    const double d = tf.b.size() ? tf.b[0] : 0.0;
    ss.A = Eigen::MatrixXd::Zero(n, n);
    ss.B = Eigen::MatrixXd::Zero(n, 1);
    ss.C = Eigen::MatrixXd::Zero(1, n);
    ss.D = Eigen::MatrixXd::Constant(1, 1, d);
    if (n == 0) return ss;

    for (int i = 0; i < n; ++i) ss.A(0, i) = -tf.a[i + 1];
    if (n > 1) ss.A.block(1, 0, n - 1, n - 1).setIdentity();
    ss.B(0, 0) = 1.0;
    // Strictly proper part: b_i - b0*a_i picks up the feedthrough division.
    for (int i = 1; i <= n; ++i) {
        const double bi = i < tf.b.size() ? tf.b[i] : 0.0;
        ss.C(0, i - 1) = bi - d * tf.a[i];
    }
    return ss;
}

/// Solve the discrete Lyapunov equation A X A^T - X + Q = 0 by the
/// Kronecker-product linear system; intended for the small orders used here.
inline Eigen::MatrixXd solve_discrete_lyapunov(const Eigen::MatrixXd& A, const Eigen::MatrixXd& Q) {
    const auto n = A.rows();
    if (A.cols() != n || Q.rows() != n || Q.cols() != n)
        throw std::invalid_argument("lyapunov: dimension mismatch");
    if (n == 0) return Eigen::MatrixXd();
    if (n > 40) throw std::invalid_argument("lyapunov: Kronecker solve limited to n <= 40");
    Eigen::MatrixXd k(n * n, n * n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            k.block(i * n, j * n, n, n) = A(i, j) * A;  // A (x) A acting on vec(X)
    Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(n * n, n * n) - k;
    Eigen::VectorXd q = Eigen::Map<const Eigen::VectorXd>(Q.data(), n * n);
    Eigen::VectorXd x = lhs.partialPivLu().solve(q);
    Eigen::MatrixXd X = Eigen::Map<Eigen::MatrixXd>(x.data(), n, n);
    return 0.5 * (X + X.transpose());
}

inline Eigen::MatrixXd controllability_gramian(const LinearStateSpace& ss) {
    return solve_discrete_lyapunov(ss.A, ss.B * ss.B.transpose());
}

inline Eigen::MatrixXd observability_gramian(const LinearStateSpace& ss) {
    return solve_discrete_lyapunov(ss.A.transpose(), ss.C.transpose() * ss.C);
}

/// Square-root balancing: returns a similarity-transformed system whose
/// controllability and observability Gramians are both diag(sigma), the
/// Hankel singular values in decreasing order. Requires a stable A.
inline LinearStateSpace balance_realization(const LinearStateSpace& ss) {
    ss.validate();
    if (ss.n() == 0) return ss;
    if (ss.spectral_radius() >= 1.0)
        throw std::invalid_argument("balance_realization: unstable A (spectral radius >= 1)");

    const Eigen::MatrixXd wc = controllability_gramian(ss);
    const Eigen::MatrixXd wo = observability_gramian(ss);

    Eigen::LLT<Eigen::MatrixXd> llt(wc);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("balance_realization: controllability Gramian not positive "
                                 "definite (non-minimal realization)");
    const Eigen::MatrixXd s = llt.matrixL();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s.transpose() * wo * s);
    if (eig.info() != Eigen::Success)
        throw std::runtime_error("balance_realization: eigensolver failed");
    // Eigen sorts ascending; flip to put the largest Hankel value first.
    const auto n = ss.n();
    Eigen::VectorXd lam(n);
    Eigen::MatrixXd u(n, n);
    for (int i = 0; i < n; ++i) {
        lam[i] = eig.eigenvalues()[n - 1 - i];
        u.col(i) = eig.eigenvectors().col(n - 1 - i);
    }
    if (lam[n - 1] <= lam[0] * 1e-14)
        throw std::runtime_error("balance_realization: realization is numerically non-minimal");

    // T = S U L^{-1/4} gives T^{-1} Wc T^{-T} = T^T Wo T = L^{1/2}; the
    // inverse therefore carries the +1/4 power.
    Eigen::MatrixXd t = s * u * lam.array().pow(-0.25).matrix().asDiagonal();
    Eigen::MatrixXd t_inv = lam.array().pow(0.25).matrix().asDiagonal() * u.transpose() *
                            s.triangularView<Eigen::Lower>().solve(
                                Eigen::MatrixXd::Identity(n, n));

    LinearStateSpace out;
    out.A = t_inv * ss.A * t;
    out.B = t_inv * ss.B;
    out.C = ss.C * t;
    out.D = ss.D;
    return out;
}

}  // namespace nlssid
