#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nlssid {

/// Structural restriction applied after enumerating the full basis.
enum class StructuralMask {
    all,             ///< every monomial of degree 2..d
    none,            ///< empty basis (linear model)
    no_cross_terms,  ///< pure powers x_i^k, u_j^k only
};

/// Monomials of total degree 2..d over the stacked variables [x; u].
/// Constants and linear terms are never part of the basis; the linear part
/// of the model owns those. Rows of `exponents` are sorted by total degree,
/// then descending-lexicographic, so parameter ordering is deterministic.
struct MonomialBasis {
    int n_vars = 0;
    int degree = 0;              ///< d, the maximum total degree
    Eigen::MatrixXi exponents;   ///< one row per monomial, n_vars columns

    Eigen::Index size() const { return exponents.rows(); }

    void validate() const {
        if (n_vars < 1) throw std::invalid_argument("basis: n_vars must be >= 1");
        if (exponents.size() > 0 && exponents.cols() != n_vars)
            throw std::invalid_argument("basis: exponent column count mismatch");
        for (Eigen::Index r = 0; r < exponents.rows(); ++r) {
            if ((exponents.row(r).array() < 0).any())
                throw std::invalid_argument("basis: negative exponent");
            const int total = exponents.row(r).sum();
            if (total < 2 || total > degree)
                throw std::invalid_argument("basis: total degree outside [2, d]");
        }
    }

    /// Values of every monomial at one point.
    Eigen::VectorXd evaluate(const Eigen::Ref<const Eigen::VectorXd>& vars) const {
        Eigen::VectorXd out(exponents.rows());
        for (Eigen::Index r = 0; r < exponents.rows(); ++r) {
            double v = 1.0;
            for (int c = 0; c < n_vars; ++c) {
                const int e = exponents(r, c);
                for (int k = 0; k < e; ++k) v *= vars[c];
            }
            out[r] = v;
        }
        return out;
    }

    /// d(monomial_r)/d(var_c) at one point; rows follow the basis order.
    Eigen::MatrixXd jacobian(const Eigen::Ref<const Eigen::VectorXd>& vars) const {
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(exponents.rows(), n_vars);
        for (Eigen::Index r = 0; r < exponents.rows(); ++r) {
            for (int c = 0; c < n_vars; ++c) {
                const int e = exponents(r, c);
                if (e == 0) continue;
                double v = static_cast<double>(e);
                for (int k = 0; k < e - 1; ++k) v *= vars[c];
                for (int c2 = 0; c2 < n_vars; ++c2) {
                    if (c2 == c) continue;
                    const int e2 = exponents(r, c2);
                    for (int k = 0; k < e2; ++k) v *= vars[c2];
                }
                out(r, c) = v;
            }
        }
        return out;
    }
};

namespace detail {

inline void enumerate_compositions(int remaining, int var, Eigen::VectorXi& current,
                                   std::vector<Eigen::VectorXi>& out) {
    if (var == current.size() - 1) {
        current[var] = remaining;
        out.push_back(current);
        return;
    }
    // Descending first-variable exponent gives descending-lex order per degree.
    for (int e = remaining; e >= 0; --e) {
        current[var] = e;
        enumerate_compositions(remaining - e, var + 1, current, out);
    }
}

}  // namespace detail

inline MonomialBasis build_basis(int n, int n_u, int d, StructuralMask mask = StructuralMask::all) {
    if (d < 2) throw std::invalid_argument("build_basis: degree must be >= 2");
    if (n < 0 || n_u < 0 || n + n_u < 1)
        throw std::invalid_argument("build_basis: need at least one variable");

    MonomialBasis basis;
    basis.n_vars = n + n_u;
    basis.degree = d;
    std::vector<Eigen::VectorXi> rows;
    if (mask != StructuralMask::none) {
        Eigen::VectorXi current(basis.n_vars);
        for (int k = 2; k <= d; ++k) detail::enumerate_compositions(k, 0, current, rows);
        if (mask == StructuralMask::no_cross_terms) {
            std::vector<Eigen::VectorXi> pure;
            for (const auto& row : rows)
                if (row.maxCoeff() == row.sum()) pure.push_back(row);
            rows = std::move(pure);
        }
    }
    basis.exponents.resize(static_cast<Eigen::Index>(rows.size()), basis.n_vars);
    for (std::size_t i = 0; i < rows.size(); ++i)
        basis.exponents.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return basis;
}

inline StructuralMask parse_structural_mask(const std::string& name) {
    if (name == "all") return StructuralMask::all;
    if (name == "none") return StructuralMask::none;
    if (name == "no-cross-terms" || name == "no_cross_terms") return StructuralMask::no_cross_terms;
    throw std::invalid_argument("unknown structural mask: " + name);
}

inline std::string to_string(StructuralMask mask) {
    switch (mask) {
        case StructuralMask::all: return "all";
        case StructuralMask::none: return "none";
        case StructuralMask::no_cross_terms: return "no-cross-terms";
    }
    throw std::invalid_argument("unknown structural mask value");
}

/// Published closed-form count of nonlinear coefficients for a full basis on
/// both equations: ((n+n_u+d)! / (d! (n+n_u)!) - (n+n_u)) * (n+n_y).
/// The binomial term counts all monomials of degree 0..d, so this exceeds
/// the coefficients of an actual degree-2..d basis by one constant column
/// per equation row, i.e. by exactly (n+n_y).
inline std::uint64_t count_nonlinear_parameters(int n, int n_u, int n_y, int d) {
    if (n < 0 || n_u < 0 || n_y < 0 || d < 1)
        throw std::invalid_argument("count_nonlinear_parameters: invalid arguments");
    const std::uint64_t v = static_cast<std::uint64_t>(n) + static_cast<std::uint64_t>(n_u);
    // C(v+d, d) built incrementally; each partial product is itself a binomial,
    // so dividing early keeps the values exact.
    std::uint64_t binom = 1;
    for (std::uint64_t i = 1; i <= static_cast<std::uint64_t>(d); ++i) {
        std::uint64_t next;
        if (__builtin_mul_overflow(binom, v + i, &next))
            throw std::overflow_error("count_nonlinear_parameters: binomial overflow");
        binom = next / i;
    }
    const std::uint64_t per_row = binom - v;
    std::uint64_t total;
    if (__builtin_mul_overflow(per_row, static_cast<std::uint64_t>(n) + static_cast<std::uint64_t>(n_y),
                               &total))
        throw std::overflow_error("count_nonlinear_parameters: product overflow");
    return total;
}

}  // namespace nlssid
