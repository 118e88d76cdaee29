#pragma once

#include <Eigen/Core>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlssid/signals.hpp"

namespace nlssid {

/// Nonparametric best linear approximation on the excited frequency grid,
/// with the variance of the estimate where the data support it.
struct FrfEstimate {
    std::vector<int> excited_bins;  ///< DFT bin indices, ascending
    Eigen::VectorXcd response;      ///< G per excited bin
    Eigen::VectorXd var_noise;      ///< noise variance of G (empty when unavailable)
    Eigen::VectorXd var_total;      ///< noise + nonlinear-distortion variance (empty when unavailable)
    int n_periods_used = 0;
    int n_realizations_used = 0;
    int period_length = 0;
    double sample_rate = 1.0;
    bool variance_noise_available = false;
    bool variance_total_available = false;

    double frequency_hz(std::size_t i) const {
        return excited_bins[i] * sample_rate / period_length;
    }

    void validate() const {
        const auto n = static_cast<Eigen::Index>(excited_bins.size());
        if (response.size() != n) throw std::invalid_argument("frf: response/bin size mismatch");
        if (variance_noise_available && (var_noise.size() != n || (var_noise.array() < 0).any()))
            throw std::invalid_argument("frf: invalid noise variance");
        if (variance_total_available && (var_total.size() != n || (var_total.array() < 0).any()))
            throw std::invalid_argument("frf: invalid total variance");
    }
};

/// Robust-method BLA: discard transient periods, average period spectra per
/// realization, divide Y/U at the excited bins, then average over
/// realizations. The sample variance over periods gives the noise variance;
/// the sample variance over realizations (M >= 2) adds the stochastic
/// nonlinear distortions. Both are variances of the final mean.
///
/// Degenerate data (one usable period, one realization) yields the raw
/// division with both availability flags false; pass require_variance to make
/// that an error instead.
inline FrfEstimate estimate_bla(const Dataset& data, const MultisineSpec& spec,
                                int discard_periods = 1, bool require_variance = false) {
    data.validate();
    spec.validate();
    if (spec.period_length != data.period_length)
        throw std::invalid_argument("estimate_bla: dataset and excitation period lengths differ");
    if (discard_periods < 0 || discard_periods >= data.n_periods)
        throw std::invalid_argument("estimate_bla: discard_periods must leave at least one period");

    const int n = data.period_length;
    const int p_used = data.n_periods - discard_periods;
    const int m_real = data.n_realizations;
    if (require_variance && p_used < 2)
        throw std::invalid_argument("estimate_bla: variance requested but fewer than 2 usable periods");

    const auto n_bins = static_cast<Eigen::Index>(spec.harmonics.size());
    FrfEstimate out;
    out.excited_bins = spec.harmonics;
    out.period_length = n;
    out.sample_rate = data.fs;
    out.n_periods_used = p_used;
    out.n_realizations_used = m_real;
    out.variance_noise_available = p_used >= 2;
    out.variance_total_available = m_real >= 2;

    Eigen::VectorXcd g_mean = Eigen::VectorXcd::Zero(n_bins);
    Eigen::VectorXd var_noise_acc = Eigen::VectorXd::Zero(n_bins);
    Eigen::VectorXd var_total_acc = Eigen::VectorXd::Zero(n_bins);
    std::vector<Eigen::VectorXcd> g_per_realization;
    g_per_realization.reserve(static_cast<std::size_t>(m_real));

    for (int m = 0; m < m_real; ++m) {
        const auto u_m = data.realization_u(m);
        const auto y_m = data.realization_y(m);
        Eigen::MatrixXcd g_period(n_bins, p_used);
        Eigen::VectorXcd u_sum = Eigen::VectorXcd::Zero(n_bins);
        Eigen::VectorXcd y_sum = Eigen::VectorXcd::Zero(n_bins);
        for (int p = 0; p < p_used; ++p) {
            const Eigen::Index start = static_cast<Eigen::Index>(discard_periods + p) * n;
            const Eigen::VectorXcd u_spec = dft_single_period(u_m.segment(start, n));
            const Eigen::VectorXcd y_spec = dft_single_period(y_m.segment(start, n));
            const double u_scale = u_spec.cwiseAbs().maxCoeff();
            for (Eigen::Index i = 0; i < n_bins; ++i) {
                const int k = out.excited_bins[static_cast<std::size_t>(i)];
                const std::complex<double> uk = u_spec[k];
                if (std::abs(uk) <= 1e-12 * u_scale)
                    throw std::runtime_error("estimate_bla: input spectrum vanishes at excited bin " +
                                             std::to_string(k));
                g_period(i, p) = y_spec[k] / uk;
                u_sum[i] += uk;
                y_sum[i] += y_spec[k];
            }
        }
        Eigen::VectorXcd g_m = y_sum.cwiseQuotient(u_sum);
        if (p_used >= 2) {
            // Sample variance over periods; /p_used turns it into the
            // variance of the per-realization mean.
            for (Eigen::Index i = 0; i < n_bins; ++i) {
                double acc = 0;
                for (int p = 0; p < p_used; ++p) acc += std::norm(g_period(i, p) - g_m[i]);
                var_noise_acc[i] += acc / ((p_used - 1.0) * p_used);
            }
        }
        g_mean += g_m;
        g_per_realization.push_back(std::move(g_m));
    }
    g_mean /= static_cast<double>(m_real);
    out.response = g_mean;

    if (out.variance_noise_available) out.var_noise = var_noise_acc / (static_cast<double>(m_real) * m_real);
    if (out.variance_total_available) {
        for (const auto& g_m : g_per_realization)
            var_total_acc += (g_m - g_mean).cwiseAbs2();
        out.var_total = var_total_acc / ((m_real - 1.0) * m_real);
    }
    return out;
}

}  // namespace nlssid
