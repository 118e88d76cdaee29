#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <complex>
#include <stdexcept>

namespace nlssid {

/// Discrete-time linear state-space model x(t+1) = Ax + Bu, y = Cx + Du.
/// n = 0 (pure gain) is a valid model with empty A.
struct LinearStateSpace {
    Eigen::MatrixXd A;
    Eigen::MatrixXd B;
    Eigen::MatrixXd C;
    Eigen::MatrixXd D;

    int n() const { return static_cast<int>(A.rows()); }
    int n_u() const { return static_cast<int>(D.cols()); }
    int n_y() const { return static_cast<int>(D.rows()); }

    void validate() const {
        if (A.rows() != A.cols()) throw std::invalid_argument("state space: A must be square");
        if (B.rows() != A.rows() || C.cols() != A.cols())
            throw std::invalid_argument("state space: B/C dimensions inconsistent with A");
        if (D.rows() != C.rows() || D.cols() != B.cols())
            throw std::invalid_argument("state space: D dimensions inconsistent with B/C");
    }

    double spectral_radius() const {
        if (n() == 0) return 0.0;
        return A.eigenvalues().cwiseAbs().maxCoeff();
    }
};

struct LinearSimResult {
    Eigen::MatrixXd states;  ///< n x T
    Eigen::MatrixXd y;       ///< n_y x T
};

/// Iterate the recursion from x0 over the columns of U (n_u x T).
inline LinearSimResult simulate_linear(const LinearStateSpace& ss,
                                       const Eigen::Ref<const Eigen::MatrixXd>& U,
                                       const Eigen::VectorXd& x0) {
    ss.validate();
    if (U.rows() != ss.n_u()) throw std::invalid_argument("simulate_linear: input row count != n_u");
    if (x0.size() != ss.n()) throw std::invalid_argument("simulate_linear: x0 size != n");
    const Eigen::Index T = U.cols();
    LinearSimResult out;
    out.states.resize(ss.n(), T);
    out.y.resize(ss.n_y(), T);
    Eigen::VectorXd x = x0;
    for (Eigen::Index t = 0; t < T; ++t) {
        out.states.col(t) = x;
        out.y.col(t) = ss.C * x + ss.D * U.col(t);
        x = ss.A * x + ss.B * U.col(t);
    }
    return out;
}

/// SISO convenience: u and y as plain vectors, x0 = 0 unless given.
inline Eigen::VectorXd simulate_linear_siso(const LinearStateSpace& ss,
                                            const Eigen::Ref<const Eigen::VectorXd>& u,
                                            const Eigen::VectorXd& x0 = Eigen::VectorXd()) {
    if (ss.n_u() != 1 || ss.n_y() != 1)
        throw std::invalid_argument("simulate_linear_siso: model is not SISO");
    Eigen::VectorXd x_start = x0.size() ? x0 : Eigen::VectorXd::Zero(ss.n());
    return simulate_linear(ss, u.transpose(), x_start).y.transpose();
}

/// Transfer matrix C (zI - A)^{-1} B + D at a point on (or off) the unit circle.
inline Eigen::MatrixXcd frequency_response(const LinearStateSpace& ss, std::complex<double> z) {
    if (ss.n() == 0) return ss.D.cast<std::complex<double>>();
    Eigen::MatrixXcd zi = z * Eigen::MatrixXcd::Identity(ss.n(), ss.n()) -
                          ss.A.cast<std::complex<double>>();
    Eigen::MatrixXcd x = zi.partialPivLu().solve(ss.B.cast<std::complex<double>>());
    return ss.C.cast<std::complex<double>>() * x + ss.D.cast<std::complex<double>>();
}

}  // namespace nlssid
