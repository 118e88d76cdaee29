#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "nlssid/frf.hpp"
#include "nlssid/signals.hpp"
#include "nlssid/state_space.hpp"
#include "test_helpers.hpp"

using namespace nlssid;

namespace {

// Steady-state periodic record: simulate extra warmup periods and keep the tail.
Dataset lti_dataset(const LinearStateSpace& ss, const MultisineSpec& spec, int periods,
                    int warmup = 4) {
    const int n = spec.period_length;
    const Eigen::VectorXd u = generate_multisine(spec, static_cast<std::int64_t>(n) * (periods + warmup));
    const Eigen::VectorXd y = simulate_linear_siso(ss, u);
    Dataset data;
    data.u = u.tail(static_cast<Eigen::Index>(n) * periods);
    data.y = y.tail(static_cast<Eigen::Index>(n) * periods);
    data.fs = spec.sample_rate;
    data.period_length = n;
    data.n_periods = periods;
    data.validate();
    return data;
}

}  // namespace

TEST_CASE("BLA of a linear system is the system") {
    const LinearStateSpace ss = testutil::random_stable_system(2, 1, 1, 100, 0.7);
    const MultisineSpec spec = make_lowpass_multisine(64, 1.0, 20, 1.0, 8);
    const Dataset data = lti_dataset(ss, spec, 2);
    const FrfEstimate frf = estimate_bla(data, spec, 0);
    for (std::size_t i = 0; i < frf.excited_bins.size(); ++i) {
        const double w = 2.0 * std::numbers::pi * frf.excited_bins[i] / 64.0;
        const std::complex<double> g0 = frequency_response(ss, std::polar(1.0, w))(0, 0);
        CHECK(std::abs(frf.response[static_cast<Eigen::Index>(i)] - g0) < 1e-8);
    }
    CHECK(frf.n_periods_used == 2);
}

TEST_CASE("identity system gives unit FRF with vanishing noise variance") {
    const MultisineSpec spec = make_lowpass_multisine(32, 1.0, 10, 1.0, 3);
    Dataset data;
    data.u = generate_multisine(spec, 3 * 32);
    data.y = data.u;
    data.period_length = 32;
    data.n_periods = 3;
    data.validate();
    const FrfEstimate frf = estimate_bla(data, spec, 0);
    for (Eigen::Index i = 0; i < frf.response.size(); ++i) {
        CHECK(std::abs(frf.response[i] - std::complex<double>(1.0, 0.0)) < 1e-12);
        CHECK(frf.var_noise[i] < 1e-20);
    }
    CHECK(frf.variance_noise_available);
}

TEST_CASE("static cubic distortion varies over realizations, not over periods") {
    const int n = 64, periods = 2, realizations = 8;
    Dataset data;
    data.period_length = n;
    data.n_periods = periods;
    data.n_realizations = realizations;
    data.fs = 1.0;
    data.u.resize(static_cast<Eigen::Index>(n) * periods * realizations);
    data.y.resize(data.u.size());
    MultisineSpec spec;
    for (int m = 0; m < realizations; ++m) {
        spec = make_lowpass_multisine(n, 1.0, 15, 1.0, 500 + static_cast<std::uint64_t>(m));
        const Eigen::VectorXd u = generate_multisine(spec, static_cast<std::int64_t>(n) * periods);
        data.u.segment(static_cast<Eigen::Index>(m) * n * periods, n * periods) = u;
        data.y.segment(static_cast<Eigen::Index>(m) * n * periods, n * periods) = u.array().cube();
    }
    const FrfEstimate frf = estimate_bla(data, spec, 0);
    REQUIRE(frf.variance_total_available);
    REQUIRE(frf.variance_noise_available);
    // periodic distortion: zero period-to-period variance, large realization scatter
    CHECK(frf.var_total.mean() > 100.0 * frf.var_noise.mean());
}

TEST_CASE("FRF is invariant under a common input/output scaling") {
    const LinearStateSpace ss = testutil::random_stable_system(3, 1, 1, 101, 0.6);
    const MultisineSpec spec = make_lowpass_multisine(64, 1.0, 18, 1.0, 9);
    Dataset data = lti_dataset(ss, spec, 2);
    const FrfEstimate base = estimate_bla(data, spec, 0);
    data.u *= 3.7;
    data.y *= 3.7;
    const FrfEstimate scaled = estimate_bla(data, spec, 0);
    for (Eigen::Index i = 0; i < base.response.size(); ++i)
        CHECK(std::abs(base.response[i] - scaled.response[i]) < 1e-12);
}

TEST_CASE("LTI response does not depend on the realization phases") {
    const LinearStateSpace ss = testutil::random_stable_system(2, 1, 1, 102, 0.5);
    const MultisineSpec spec_a = make_lowpass_multisine(64, 1.0, 12, 1.0, 21);
    const MultisineSpec spec_b = make_lowpass_multisine(64, 1.0, 12, 1.0, 22);
    const FrfEstimate a = estimate_bla(lti_dataset(ss, spec_a, 2), spec_a, 0);
    const FrfEstimate b = estimate_bla(lti_dataset(ss, spec_b, 2), spec_b, 0);
    for (Eigen::Index i = 0; i < a.response.size(); ++i)
        CHECK(std::abs(a.response[i] - b.response[i]) < 1e-8);
}

TEST_CASE("discarding more transient periods never increases the LTI error") {
    const LinearStateSpace ss = testutil::random_stable_system(2, 1, 1, 103, 0.9);
    const MultisineSpec spec = make_lowpass_multisine(64, 1.0, 15, 1.0, 13);
    // start from rest: the first periods carry a decaying transient
    const Eigen::VectorXd u = generate_multisine(spec, 4 * 64);
    Dataset data;
    data.u = u;
    data.y = simulate_linear_siso(ss, u);
    data.period_length = 64;
    data.n_periods = 4;
    data.validate();
    auto max_error = [&](int discard) {
        const FrfEstimate frf = estimate_bla(data, spec, discard);
        double err = 0.0;
        for (std::size_t i = 0; i < frf.excited_bins.size(); ++i) {
            const double w = 2.0 * std::numbers::pi * frf.excited_bins[i] / 64.0;
            const std::complex<double> g0 = frequency_response(ss, std::polar(1.0, w))(0, 0);
            err = std::max(err, std::abs(frf.response[static_cast<Eigen::Index>(i)] - g0));
        }
        return err;
    };
    const double e0 = max_error(0);
    const double e1 = max_error(1);
    const double e2 = max_error(2);
    CHECK(e1 <= e0 * (1.0 + 1e-9));
    CHECK(e2 <= e1 * (1.0 + 1e-9));
}

TEST_CASE("frequency axis maps bins to hertz") {
    const MultisineSpec spec = make_lowpass_multisine(1024, 0.25, 58, 1.0, 1);
    Dataset data;
    data.u = generate_multisine(spec, 1024);
    data.y = data.u;
    data.period_length = 1024;
    data.fs = 0.25;
    data.validate();
    const FrfEstimate frf = estimate_bla(data, spec, 0);
    REQUIRE(static_cast<int>(frf.excited_bins.size()) == 58);
    CHECK(frf.frequency_hz(0) == doctest::Approx(0.25 / 1024.0).epsilon(1e-12));
    CHECK(frf.frequency_hz(57) == doctest::Approx(58.0 * 0.25 / 1024.0).epsilon(1e-12));
    CHECK_FALSE(frf.variance_noise_available);
}

TEST_CASE("variance request fails without enough periods") {
    const MultisineSpec spec = make_lowpass_multisine(32, 1.0, 8, 1.0, 2);
    Dataset data;
    data.u = generate_multisine(spec, 32);
    data.y = data.u;
    data.period_length = 32;
    data.validate();
    CHECK_THROWS_AS(estimate_bla(data, spec, 0, true), std::invalid_argument);
}
