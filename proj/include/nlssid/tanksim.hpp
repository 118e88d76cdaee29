#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>

#include "nlssid/signals.hpp"
#include "nlssid/util.hpp"

namespace nlssid {

/// Physical surrogate parameters for the two-tank process
///
///   x1' = -k1*sqrt(x1) + k4*u + w1
///   x2' =  k2*sqrt(x1) - k3*sqrt(x2) + w2
///   y   =  x2 + e
///
/// with saturation at the tank capacities and a partly stochastic overflow
/// from the upper into the lower tank. All constants are surrogate values;
/// nothing downstream may depend on their specific magnitudes.
struct TankParams {
    double k1 = 0.5;
    double k2 = 0.4;
    double k3 = 0.3;
    double k4 = 1.0;
    double x1_max = 10.0;
    double x2_max = 10.0;
    // Fraction of upper-tank overflow that reaches the lower tank, redrawn
    // uniformly from [lo, hi] for every overflowing substep.
    double overflow_lo = 0.3;
    double overflow_hi = 0.7;
    double process_noise_std = 0.0;  ///< std of w1, w2 (piecewise constant per sample)
    double output_snr_db = std::numeric_limits<double>::infinity();
    std::uint64_t seed = 0;

    void validate() const {
        if (k1 <= 0 || k2 <= 0 || k3 <= 0 || k4 <= 0)
            throw std::invalid_argument("tanks: flow constants must be positive");
        if (x1_max <= 0 || x2_max <= 0)
            throw std::invalid_argument("tanks: tank capacities must be positive");
        if (!(0.0 <= overflow_lo && overflow_lo <= overflow_hi && overflow_hi <= 1.0))
            throw std::invalid_argument("tanks: overflow fraction range must satisfy 0<=lo<=hi<=1");
        if (process_noise_std < 0.0) throw std::invalid_argument("tanks: negative noise std");
    }
};

struct TankSimResult {
    Eigen::MatrixXd states;  ///< 2 x T, sampled at the output instants
    Eigen::VectorXd y;       ///< x2 samples plus measurement noise
};

/// Add white Gaussian noise scaled so that rms(noise) hits the requested SNR
/// relative to the AC power of `clean`. Infinite SNR returns the input.
inline Eigen::VectorXd snr_scale_noise(const Eigen::Ref<const Eigen::VectorXd>& clean,
                                       double snr_db, std::uint64_t seed) {
    if (std::isinf(snr_db) && snr_db > 0) return clean;
    const double mean = clean.mean();
    const double ac_rms =
        std::sqrt((clean.array() - mean).square().sum() / static_cast<double>(clean.size()));
    const double noise_std = ac_rms * std::pow(10.0, -snr_db / 20.0);
    auto rng = make_rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd noisy(clean.size());
    for (Eigen::Index t = 0; t < clean.size(); ++t) noisy[t] = clean[t] + noise_std * gauss(rng);
    return noisy;
}

namespace detail {

inline void tank_drift(const TankParams& p, double u, double w1, double w2, double x1, double x2,
                       double& d1, double& d2) {
    // sqrt(max(x,0)): the drift is not Lipschitz at zero and RK4 stages can
    // overshoot below it.
    const double s1 = std::sqrt(std::max(x1, 0.0));
    const double s2 = std::sqrt(std::max(x2, 0.0));
    d1 = -p.k1 * s1 + p.k4 * u + w1;
    d2 = p.k2 * s1 - p.k3 * s2 + w2;
}

}  // namespace detail

/// Integrate the tank dynamics with fixed-step RK4 at step 1/(fs*oversample),
/// zero-order-hold input. States are clamped to [0, x_max] after every
/// substep; upper-tank excess is split between the lower tank (fraction
/// alpha ~ U[lo,hi]) and the reservoir. y picks up white measurement noise
/// scaled to `output_snr_db`.
inline TankSimResult simulate_tanks(const TankParams& params,
                                    const Eigen::Ref<const Eigen::VectorXd>& u, double fs,
                                    const Eigen::Vector2d& x_init, int oversample = 8) {
    params.validate();
    if (fs <= 0.0) throw std::invalid_argument("simulate_tanks: fs must be positive");
    if (oversample < 1) throw std::invalid_argument("simulate_tanks: oversample must be >= 1");
    if (u.size() < 1) throw std::invalid_argument("simulate_tanks: empty input");
    if ((u.array() < 0.0).any())
        throw std::invalid_argument("simulate_tanks: negative pump voltage sample");
    if (x_init[0] < 0.0 || x_init[1] < 0.0)
        throw std::invalid_argument("simulate_tanks: negative initial level");

    const Eigen::Index n_samples = u.size();
    const double h = 1.0 / (fs * static_cast<double>(oversample));

    auto rng = make_rng(params.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> alpha_draw(params.overflow_lo, params.overflow_hi);

    Eigen::MatrixXd states(2, n_samples);
    double x1 = std::min(x_init[0], params.x1_max);
    double x2 = std::min(x_init[1], params.x2_max);

    for (Eigen::Index t = 0; t < n_samples; ++t) {
        states(0, t) = x1;
        states(1, t) = x2;

        const double ut = u[t];
        const double w1 = params.process_noise_std > 0 ? params.process_noise_std * gauss(rng) : 0.0;
        const double w2 = params.process_noise_std > 0 ? params.process_noise_std * gauss(rng) : 0.0;

        for (int s = 0; s < oversample; ++s) {
            double k1a, k2a, k1b, k2b, k1c, k2c, k1d, k2d;
            detail::tank_drift(params, ut, w1, w2, x1, x2, k1a, k2a);
            detail::tank_drift(params, ut, w1, w2, x1 + 0.5 * h * k1a, x2 + 0.5 * h * k2a, k1b, k2b);
            detail::tank_drift(params, ut, w1, w2, x1 + 0.5 * h * k1b, x2 + 0.5 * h * k2b, k1c, k2c);
            detail::tank_drift(params, ut, w1, w2, x1 + h * k1c, x2 + h * k2c, k1d, k2d);
            x1 += h / 6.0 * (k1a + 2.0 * k1b + 2.0 * k1c + k1d);
            x2 += h / 6.0 * (k2a + 2.0 * k2b + 2.0 * k2c + k2d);

            x1 = std::max(x1, 0.0);
            x2 = std::max(x2, 0.0);
            if (x1 > params.x1_max) {
                const double excess = x1 - params.x1_max;
                x1 = params.x1_max;
                x2 += alpha_draw(rng) * excess;  // rest flows back to the reservoir
            }
            x2 = std::min(x2, params.x2_max);
        }
    }

    TankSimResult result;
    result.states = std::move(states);
    result.y = snr_scale_noise(result.states.row(1).transpose(), params.output_snr_db,
                               derive_seed(params.seed, 0x6d656173));
    return result;
}

}  // namespace nlssid
