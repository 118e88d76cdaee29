#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "nlssid/util.hpp"

namespace nlssid {

/// Random-phase multisine specification: a sum of harmonically related
/// cosines, exactly periodic over `period_length` samples.
///
/// u(t) = sum_k A(k) * cos(2*pi*k*t/N + phi_k), t in samples.
struct MultisineSpec {
    int period_length = 0;             ///< N, samples per period
    double sample_rate = 1.0;          ///< fs in Hz
    std::vector<int> harmonics;        ///< excited harmonic indices k >= 1
    std::vector<double> amplitudes;    ///< A(k), aligned with `harmonics`
    std::vector<double> phases;        ///< phi_k in radians, aligned
    std::uint64_t seed = 0;            ///< seed used for random-phase draws

    void validate() const {
        if (period_length < 2) throw std::invalid_argument("multisine: period_length must be >= 2");
        if (sample_rate <= 0.0) throw std::invalid_argument("multisine: sample_rate must be positive");
        if (harmonics.empty()) throw std::invalid_argument("multisine: no harmonics");
        if (amplitudes.size() != harmonics.size() || phases.size() != harmonics.size())
            throw std::invalid_argument("multisine: harmonics/amplitudes/phases size mismatch");
        for (std::size_t i = 0; i < harmonics.size(); ++i) {
            if (harmonics[i] < 1) throw std::invalid_argument("multisine: harmonic index must be >= 1");
            if (2 * harmonics[i] >= period_length)
                throw std::invalid_argument("multisine: harmonic at or above Nyquist (k_max >= N/2)");
            if (amplitudes[i] < 0.0) throw std::invalid_argument("multisine: negative amplitude");
        }
    }

    int k_max() const {
        return harmonics.empty() ? 0 : *std::max_element(harmonics.begin(), harmonics.end());
    }
};

/// Highest excited harmonic for a band limit f_max, floor convention:
/// k_max = floor(f_max * N / fs).
inline int harmonic_count_for_band(double f_max, int period_length, double sample_rate) {
    if (f_max <= 0.0 || sample_rate <= 0.0 || period_length < 2)
        throw std::invalid_argument("harmonic_count_for_band: invalid arguments");
    return static_cast<int>(std::floor(f_max * static_cast<double>(period_length) / sample_rate));
}

/// Default excitation used throughout: full harmonic grid 1..k_max with a
/// two-level amplitude profile (the lowest third of the band at `a0`, the
/// rest at 0.3*a0) and uniformly random phases drawn from `seed`.
inline MultisineSpec make_lowpass_multisine(int period_length, double sample_rate, int k_max,
                                            double a0, std::uint64_t seed) {
    MultisineSpec spec;
    spec.period_length = period_length;
    spec.sample_rate = sample_rate;
    spec.seed = seed;
    auto rng = make_rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const int k_knee = static_cast<int>(std::ceil(static_cast<double>(k_max) / 3.0));
    for (int k = 1; k <= k_max; ++k) {
        spec.harmonics.push_back(k);
        spec.amplitudes.push_back(k <= k_knee ? a0 : 0.3 * a0);
        spec.phases.push_back(phase(rng));
    }
    spec.validate();
    return spec;
}

/// Evaluate the multisine at sample instants t = 0..n_samples-1.
/// The phase argument is reduced with integer arithmetic (k*t mod N), so the
/// sequence is exactly periodic with period `period_length`.
inline Eigen::VectorXd generate_multisine(const MultisineSpec& spec, std::int64_t n_samples) {
    spec.validate();
    if (n_samples < 1) throw std::invalid_argument("generate_multisine: n_samples must be >= 1");
    const auto n = static_cast<std::int64_t>(spec.period_length);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(n_samples);
    const double two_pi_over_n = 2.0 * std::numbers::pi / static_cast<double>(n);
    for (std::size_t i = 0; i < spec.harmonics.size(); ++i) {
        const auto k = static_cast<std::int64_t>(spec.harmonics[i]);
        const double a = spec.amplitudes[i];
        const double phi = spec.phases[i];
        for (std::int64_t t = 0; t < n_samples; ++t) {
            const std::int64_t kt = (k * (t % n)) % n;
            u[t] += a * std::cos(two_pi_over_n * static_cast<double>(kt) + phi);
        }
    }
    return u;
}

/// Plain (unnormalized) DFT of one period:
///   X(k) = sum_{t=0}^{N-1} x(t) * exp(-i*2*pi*k*t/N).
/// Parseval under this convention: sum_t |x(t)|^2 = (1/N) * sum_k |X(k)|^2.
/// All frequency-domain quantities in this library use this normalization.
inline Eigen::VectorXcd dft_single_period(const Eigen::Ref<const Eigen::VectorXd>& samples) {
    const auto n = samples.size();
    if (n < 1) throw std::invalid_argument("dft: empty input");
    Eigen::VectorXcd spectrum(n);
    const double w0 = -2.0 * std::numbers::pi / static_cast<double>(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        std::complex<double> acc(0.0, 0.0);
        for (Eigen::Index t = 0; t < n; ++t) {
            const auto kt = static_cast<double>((k * t) % n);
            acc += samples[t] * std::polar(1.0, w0 * kt);
        }
        spectrum[k] = acc;
    }
    return spectrum;
}

/// Per-bin complex spectrum averaged over all whole periods contained in
/// `samples`. Length must be an integer multiple of `period_length`.
inline Eigen::VectorXcd dft_spectrum(const Eigen::Ref<const Eigen::VectorXd>& samples,
                                     int period_length) {
    if (period_length < 1) throw std::invalid_argument("dft_spectrum: period_length must be >= 1");
    if (samples.size() == 0 || samples.size() % period_length != 0)
        throw std::invalid_argument("dft_spectrum: length is not a whole number of periods");
    const auto periods = samples.size() / period_length;
    // Averaging the periods first equals averaging per-period DFTs.
    Eigen::VectorXd mean_period = Eigen::VectorXd::Zero(period_length);
    for (Eigen::Index p = 0; p < periods; ++p)
        mean_period += samples.segment(p * period_length, period_length);
    mean_period /= static_cast<double>(periods);
    return dft_single_period(mean_period);
}

/// Root-mean-square difference between two equal-length sequences.
inline double rms_error(const Eigen::Ref<const Eigen::VectorXd>& y_mod,
                        const Eigen::Ref<const Eigen::VectorXd>& y) {
    if (y_mod.size() != y.size()) throw std::invalid_argument("rms_error: length mismatch");
    if (y_mod.size() == 0) throw std::invalid_argument("rms_error: empty input");
    return std::sqrt((y_mod - y).squaredNorm() / static_cast<double>(y.size()));
}

/// Sampled input/output record. Realizations are stored back to back, each
/// of length period_length * n_periods.
struct Dataset {
    Eigen::VectorXd u;
    Eigen::VectorXd y;
    double fs = 1.0;
    int period_length = 0;
    int n_periods = 1;
    int n_realizations = 1;

    Eigen::Index samples_per_realization() const {
        return static_cast<Eigen::Index>(period_length) * n_periods;
    }

    void validate() const {
        if (fs <= 0.0) throw std::invalid_argument("dataset: fs must be positive");
        if (period_length < 1 || n_periods < 1 || n_realizations < 1)
            throw std::invalid_argument("dataset: invalid period structure");
        const Eigen::Index expect = samples_per_realization() * n_realizations;
        if (u.size() != expect || y.size() != expect)
            throw std::invalid_argument("dataset: u/y length does not match N*P*M");
    }

    Eigen::Ref<const Eigen::VectorXd> realization_u(int m) const {
        return u.segment(static_cast<Eigen::Index>(m) * samples_per_realization(),
                         samples_per_realization());
    }
    Eigen::Ref<const Eigen::VectorXd> realization_y(int m) const {
        return y.segment(static_cast<Eigen::Index>(m) * samples_per_realization(),
                         samples_per_realization());
    }

    /// Contiguous sub-record (single-realization datasets only).
    Dataset slice(Eigen::Index start, Eigen::Index count) const {
        if (n_realizations != 1)
            throw std::invalid_argument("dataset: slice requires a single realization");
        if (start < 0 || count < 0 || start + count > u.size())
            throw std::out_of_range("dataset: slice out of range");
        Dataset out;
        out.u = u.segment(start, count);
        out.y = y.segment(start, count);
        out.fs = fs;
        out.period_length = static_cast<int>(count);
        out.n_periods = 1;
        out.n_realizations = 1;
        return out;
    }
};

}  // namespace nlssid
