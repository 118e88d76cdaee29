#pragma once

#include <Eigen/Core>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nlssid/decouple.hpp"
#include "nlssid/frf.hpp"
#include "nlssid/linfit.hpp"
#include "nlssid/nlss2.hpp"
#include "nlssid/pnlss.hpp"
#include "nlssid/serialize.hpp"
#include "nlssid/signals.hpp"
#include "nlssid/state_space.hpp"
#include "nlssid/tanksim.hpp"
#include "nlssid/util.hpp"

namespace nlssid {

/// Full experiment description: data acquisition, record splitting, the
/// model roster, and every hyperparameter the pipeline consumes.
struct ExperimentConfig {
    // data acquisition
    std::string data_mode = "simulate";  ///< "simulate" | "load"
    std::string est_path;                ///< load mode: estimation record CSV
    std::string test_path;               ///< load mode: optional test record CSV

    // simulate mode
    TankParams tank;
    int period_length = 1024;
    double sample_rate = 0.25;  ///< 4 s sampling period
    double f_max_hz = 0.0144;   ///< excited band upper edge
    double amplitude = 0.12;    ///< RMS of the zero-mean excitation
    double dc_offset = 0.72;    ///< operating point; keeps the pump input nonnegative
    int oversample = 8;

    // record splitting (first split absorbs the rounding remainder)
    double est_fraction = 0.7;
    double val_fraction = 0.3;

    // roster and per-model hyperparameters
    std::vector<std::string> roster = {"bla", "pnlss", "pnlss-i", "pnlss-i-dec", "nlss2"};
    int order = 3;            ///< n = denominator order of the linear fit
    int numerator_order = 3;  ///< n_b <= order
    double max_pole_radius = 0.98;  ///< clamp fitted poles; 1 disables
    int degree = 3;
    StructuralMask mask = StructuralMask::all;
    int decouple_rank = 5;
    int decouple_samples = 500;
    int decouple_restarts = 10;
    bool decouple_empirical_scaling = false;  ///< default: unit-std sampling
    std::vector<double> lambda_grid = {1e-2, 1.0, 1e2, 1e4};
    int n_hidden = 2;
    Activation activation = Activation::tanh_sigmoid;
    int net_restarts = 10;
    int net_iterations = 100;

    LmSettings lm;
    /// Evaluate the running model on the validation tail every this many LM
    /// iterations and keep the best iterate (0 = plain single run). Output
    /// error alone happily walks into models that track the fitted segment
    /// but diverge beyond it; selection on held-out data is the standard
    /// counter, same pattern as the lambda grid search.
    int val_selection_interval = 2;
    std::uint64_t seed = 1;
    std::string out_dir;

    void validate() const {
        if (data_mode != "simulate" && data_mode != "load")
            throw std::invalid_argument("config: data_mode must be simulate or load");
        if (data_mode == "load" && est_path.empty())
            throw std::invalid_argument("config: load mode needs an estimation record path");
        if (data_mode == "simulate") {
            tank.validate();
            if (period_length < 16) throw std::invalid_argument("config: period_length too short");
            if (sample_rate <= 0 || f_max_hz <= 0 || amplitude <= 0 || oversample < 1)
                throw std::invalid_argument("config: invalid excitation settings");
            if (dc_offset < 0) throw std::invalid_argument("config: negative input offset");
        }
        if (!(est_fraction > 0) || !(val_fraction > 0) ||
            est_fraction + val_fraction > 1.0 + 1e-12)
            throw std::invalid_argument("config: split fractions must be positive and sum <= 1");
        if (roster.empty()) throw std::invalid_argument("config: empty model roster");
        for (const auto& name : roster)
            if (name != "bla" && name != "pnlss" && name != "pnlss-i" && name != "pnlss-i-dec" &&
                name != "nlss2")
                throw std::invalid_argument("config: unknown roster entry: " + name);
        if (order < 1 || numerator_order < 0 || numerator_order > order)
            throw std::invalid_argument("config: invalid linear orders");
        if (!(max_pole_radius > 0) || max_pole_radius > 1.0)
            throw std::invalid_argument("config: max_pole_radius must be in (0, 1]");
        if (degree < 2) throw std::invalid_argument("config: degree must be >= 2");
        if (decouple_rank < 1 || decouple_samples < 1 || decouple_restarts < 1)
            throw std::invalid_argument("config: invalid decoupling settings");
        if (lambda_grid.empty()) throw std::invalid_argument("config: empty lambda grid");
        for (double l : lambda_grid)
            if (!(l >= 0) || !std::isfinite(l))
                throw std::invalid_argument("config: lambda grid entries must be finite and >= 0");
        if (n_hidden < 1 || net_restarts < 1 || net_iterations < 1)
            throw std::invalid_argument("config: invalid network settings");
        if (val_selection_interval < 0)
            throw std::invalid_argument("config: negative validation selection interval");
        lm.validate();
    }
};

namespace detail {

inline void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                               const std::string& section) {
    for (const auto& item : j.items()) {
        bool found = false;
        for (const char* k : known)
            if (item.key() == k) {
                found = true;
                break;
            }
        if (!found)
            throw std::invalid_argument("config: unknown key \"" + item.key() + "\" in " + section);
    }
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json tank = {{"k1", c.tank.k1},
                           {"k2", c.tank.k2},
                           {"k3", c.tank.k3},
                           {"k4", c.tank.k4},
                           {"x1_max", c.tank.x1_max},
                           {"x2_max", c.tank.x2_max},
                           {"overflow_lo", c.tank.overflow_lo},
                           {"overflow_hi", c.tank.overflow_hi},
                           {"process_noise_std", c.tank.process_noise_std}};
    if (std::isfinite(c.tank.output_snr_db)) tank["output_snr_db"] = c.tank.output_snr_db;
    nlohmann::json data = {{"mode", c.data_mode},
                           {"period_length", c.period_length},
                           {"sample_rate", c.sample_rate},
                           {"f_max_hz", c.f_max_hz},
                           {"amplitude", c.amplitude},
                           {"dc_offset", c.dc_offset},
                           {"oversample", c.oversample},
                           {"tank", tank}};
    if (!c.est_path.empty()) data["est_path"] = c.est_path;
    if (!c.test_path.empty()) data["test_path"] = c.test_path;
    return {{"format_version", kFormatVersion},
            {"data", data},
            {"split", {{"estimation", c.est_fraction}, {"validation", c.val_fraction}}},
            {"roster", c.roster},
            {"linear",
             {{"order", c.order},
              {"numerator_order", c.numerator_order},
              {"max_pole_radius", c.max_pole_radius}}},
            {"pnlss", {{"degree", c.degree}, {"mask", to_string(c.mask)}}},
            {"decouple",
             {{"rank", c.decouple_rank},
              {"samples", c.decouple_samples},
              {"restarts", c.decouple_restarts},
              {"empirical_scaling", c.decouple_empirical_scaling}}},
            {"nlss2",
             {{"lambda_grid", c.lambda_grid},
              {"hidden", c.n_hidden},
              {"activation", to_string(c.activation)},
              {"restarts", c.net_restarts},
              {"iterations", c.net_iterations}}},
            {"lm",
             {{"max_iterations", c.lm.max_iterations},
              {"lambda_init", c.lm.lambda_init},
              {"lambda_increase", c.lm.lambda_increase},
              {"lambda_decrease", c.lm.lambda_decrease},
              {"lambda_max", c.lm.lambda_max},
              {"cost_rel_tol", c.lm.cost_rel_tol},
              {"cost_abs_tol", c.lm.cost_abs_tol},
              {"step_tol", c.lm.step_tol},
              {"gradient_tol", c.lm.gradient_tol},
              {"selection_interval", c.val_selection_interval}}},
            {"seed", c.seed},
            {"out_dir", c.out_dir}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    detail::require_known_keys(j, {"format_version", "data", "split", "roster", "linear", "pnlss",
                                   "decouple", "nlss2", "lm", "seed", "out_dir"},
                               "top level");
    ExperimentConfig c;
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::require_known_keys(d,
                                   {"mode", "est_path", "test_path", "period_length", "sample_rate",
                                    "f_max_hz", "amplitude", "dc_offset", "oversample", "tank"},
                                   "data");
        c.data_mode = d.value("mode", c.data_mode);
        c.est_path = d.value("est_path", c.est_path);
        c.test_path = d.value("test_path", c.test_path);
        c.period_length = d.value("period_length", c.period_length);
        c.sample_rate = d.value("sample_rate", c.sample_rate);
        c.f_max_hz = d.value("f_max_hz", c.f_max_hz);
        c.amplitude = d.value("amplitude", c.amplitude);
        c.dc_offset = d.value("dc_offset", c.dc_offset);
        c.oversample = d.value("oversample", c.oversample);
        if (d.contains("tank")) {
            const auto& t = d.at("tank");
            detail::require_known_keys(t,
                                       {"k1", "k2", "k3", "k4", "x1_max", "x2_max", "overflow_lo",
                                        "overflow_hi", "process_noise_std", "output_snr_db"},
                                       "data.tank");
            c.tank.k1 = t.value("k1", c.tank.k1);
            c.tank.k2 = t.value("k2", c.tank.k2);
            c.tank.k3 = t.value("k3", c.tank.k3);
            c.tank.k4 = t.value("k4", c.tank.k4);
            c.tank.x1_max = t.value("x1_max", c.tank.x1_max);
            c.tank.x2_max = t.value("x2_max", c.tank.x2_max);
            c.tank.overflow_lo = t.value("overflow_lo", c.tank.overflow_lo);
            c.tank.overflow_hi = t.value("overflow_hi", c.tank.overflow_hi);
            c.tank.process_noise_std = t.value("process_noise_std", c.tank.process_noise_std);
            c.tank.output_snr_db =
                t.value("output_snr_db", std::numeric_limits<double>::infinity());
        }
    }
    if (j.contains("split")) {
        const auto& s = j.at("split");
        detail::require_known_keys(s, {"estimation", "validation"}, "split");
        c.est_fraction = s.value("estimation", c.est_fraction);
        c.val_fraction = s.value("validation", c.val_fraction);
    }
    if (j.contains("roster")) c.roster = j.at("roster").get<std::vector<std::string>>();
    if (j.contains("linear")) {
        const auto& l = j.at("linear");
        detail::require_known_keys(l, {"order", "numerator_order", "max_pole_radius"}, "linear");
        c.order = l.value("order", c.order);
        c.numerator_order = l.value("numerator_order", c.order);
        c.max_pole_radius = l.value("max_pole_radius", c.max_pole_radius);
    }
    if (j.contains("pnlss")) {
        const auto& p = j.at("pnlss");
        detail::require_known_keys(p, {"degree", "mask"}, "pnlss");
        c.degree = p.value("degree", c.degree);
        if (p.contains("mask")) c.mask = parse_structural_mask(p.at("mask").get<std::string>());
    }
    if (j.contains("decouple")) {
        const auto& d = j.at("decouple");
        detail::require_known_keys(d, {"rank", "samples", "restarts", "empirical_scaling"},
                                   "decouple");
        c.decouple_rank = d.value("rank", c.decouple_rank);
        c.decouple_samples = d.value("samples", c.decouple_samples);
        c.decouple_restarts = d.value("restarts", c.decouple_restarts);
        c.decouple_empirical_scaling = d.value("empirical_scaling", c.decouple_empirical_scaling);
    }
    if (j.contains("nlss2")) {
        const auto& n = j.at("nlss2");
        detail::require_known_keys(n, {"lambda_grid", "hidden", "activation", "restarts", "iterations"},
                                   "nlss2");
        if (n.contains("lambda_grid")) c.lambda_grid = n.at("lambda_grid").get<std::vector<double>>();
        c.n_hidden = n.value("hidden", c.n_hidden);
        if (n.contains("activation"))
            c.activation = parse_activation(n.at("activation").get<std::string>());
        c.net_restarts = n.value("restarts", c.net_restarts);
        c.net_iterations = n.value("iterations", c.net_iterations);
    }
    if (j.contains("lm")) {
        const auto& l = j.at("lm");
        detail::require_known_keys(l,
                                   {"max_iterations", "lambda_init", "lambda_increase",
                                    "lambda_decrease", "lambda_max", "cost_rel_tol", "cost_abs_tol",
                                    "step_tol", "gradient_tol", "selection_interval"},
                                   "lm");
        c.lm.max_iterations = l.value("max_iterations", c.lm.max_iterations);
        c.lm.lambda_init = l.value("lambda_init", c.lm.lambda_init);
        c.lm.lambda_increase = l.value("lambda_increase", c.lm.lambda_increase);
        c.lm.lambda_decrease = l.value("lambda_decrease", c.lm.lambda_decrease);
        c.lm.lambda_max = l.value("lambda_max", c.lm.lambda_max);
        c.lm.cost_rel_tol = l.value("cost_rel_tol", c.lm.cost_rel_tol);
        c.lm.cost_abs_tol = l.value("cost_abs_tol", c.lm.cost_abs_tol);
        c.lm.step_tol = l.value("step_tol", c.lm.step_tol);
        c.lm.gradient_tol = l.value("gradient_tol", c.lm.gradient_tol);
        c.val_selection_interval = l.value("selection_interval", c.val_selection_interval);
    }
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.validate();
    return c;
}

inline std::uint64_t fnv1a_hash(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (const char ch : s) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ull;
    }
    return h;
}

/// Stable hexadecimal digest of the canonical config serialization
/// (key-sorted JSON), for report provenance.
inline std::string config_digest(const ExperimentConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a_hash(config_to_json(c).dump())));
    return buf;
}

/// Contiguous, order-preserving record split. Every segment after the first
/// gets floor(fraction * T) samples; the first takes the remainder, so the
/// segments always concatenate back to the record.
inline std::vector<Dataset> split_dataset(const Dataset& data,
                                          const std::vector<double>& fractions) {
    data.validate();
    if (data.n_realizations != 1)
        throw std::invalid_argument("split_dataset: single-realization records only");
    if (fractions.empty()) throw std::invalid_argument("split_dataset: no fractions");
    double sum = 0;
    for (double f : fractions) {
        if (!(f > 0)) throw std::invalid_argument("split_dataset: fractions must be positive");
        sum += f;
    }
    if (sum > 1.0 + 1e-12) throw std::invalid_argument("split_dataset: fractions sum above 1");

    const Eigen::Index total = data.u.size();
    std::vector<Eigen::Index> counts(fractions.size());
    Eigen::Index tail = 0;
    for (std::size_t i = 1; i < fractions.size(); ++i) {
        counts[i] = static_cast<Eigen::Index>(std::floor(fractions[i] * static_cast<double>(total)));
        tail += counts[i];
    }
    counts[0] = total - tail;

    std::vector<Dataset> out;
    Eigen::Index start = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] < 10)
            throw std::invalid_argument("split_dataset: segment " + std::to_string(i) +
                                        " has fewer than 10 samples (" +
                                        std::to_string(counts[i]) + ")");
        out.push_back(data.slice(start, counts[i]));
        start += counts[i];
    }
    return out;
}

/// Pull every denominator root inside radius rho; single noisy records
/// routinely produce a spurious pole hugging the unit circle, and
/// polynomial state feedback around a near-integrator diverges off the
/// fitted segment.
inline TransferFunctionModel clamp_pole_radius(const TransferFunctionModel& tf, double rho) {
    if (!(rho > 0) || rho > 1.0)
        throw std::invalid_argument("clamp_pole_radius: radius must be in (0, 1]");
    Eigen::VectorXcd p = tf.poles();
    bool changed = false;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double mag = std::abs(p[i]);
        if (mag > rho) {
            p[i] *= rho / mag;
            changed = true;
        }
    }
    if (!changed) return tf;
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

/// Unit-amplitude excitation descriptor for a band; carries the excited-bin
/// set that BLA estimation needs when the true excitation is not on file.
inline MultisineSpec excitation_for_band(int period_length, double sample_rate, double f_max_hz) {
    const int k_max = harmonic_count_for_band(f_max_hz, period_length, sample_rate);
    MultisineSpec spec;
    spec.period_length = period_length;
    spec.sample_rate = sample_rate;
    for (int k = 1; k <= k_max; ++k) {
        spec.harmonics.push_back(k);
        spec.amplitudes.push_back(1.0);
        spec.phases.push_back(0.0);
    }
    spec.validate();
    return spec;
}

struct ExperimentData {
    Dataset est;   ///< full estimation record
    Dataset test;  ///< test record; empty when absent
    bool has_test = false;
    MultisineSpec excitation;  ///< excited-bin description of the input
    Eigen::Vector2d x_init = Eigen::Vector2d::Zero();  ///< simulate mode: shared initial state
};

/// Simulate-mode data generation: one estimation and one test record, both
/// periodic lowpass multisines (independent phase realizations) with a DC
/// offset, both started from the same nonzero random initial state.
inline ExperimentData simulate_experiment_data(const ExperimentConfig& c) {
    const int k_max = harmonic_count_for_band(c.f_max_hz, c.period_length, c.sample_rate);
    ExperimentData data;

    auto rng = make_rng(derive_seed(c.seed, 0x78696e69));
    std::uniform_real_distribution<double> frac(0.15, 0.40);
    data.x_init[0] = frac(rng) * c.tank.x1_max;
    data.x_init[1] = frac(rng) * c.tank.x2_max;

    auto make_record = [&c, k_max](std::uint64_t phase_seed, std::uint64_t sim_seed,
                                   const Eigen::Vector2d& x_init, MultisineSpec* spec_out) {
        MultisineSpec spec =
            make_lowpass_multisine(c.period_length, c.sample_rate, k_max, 1.0, phase_seed);
        // Exact RMS over one period is sqrt(sum a_k^2 / 2); rescale to the
        // requested level before adding the offset.
        double power = 0.0;
        for (const double a : spec.amplitudes) power += 0.5 * a * a;
        for (double& a : spec.amplitudes) a *= c.amplitude / std::sqrt(power);
        Eigen::VectorXd u =
            generate_multisine(spec, c.period_length).array() + c.dc_offset;
        if ((u.array() < 0).any())
            throw std::invalid_argument(
                "simulate_experiment_data: input goes negative; raise dc_offset");
        TankParams params = c.tank;
        params.seed = sim_seed;
        const TankSimResult sim = simulate_tanks(params, u, c.sample_rate, x_init, c.oversample);
        Dataset record;
        record.u = u;
        record.y = sim.y;
        record.fs = c.sample_rate;
        record.period_length = c.period_length;
        record.n_periods = 1;
        record.n_realizations = 1;
        if (spec_out) *spec_out = spec;
        return record;
    };

    data.est = make_record(derive_seed(c.seed, 0x65737470), derive_seed(c.seed, 0x65737473),
                           data.x_init, &data.excitation);
    data.test = make_record(derive_seed(c.seed, 0x74737470), derive_seed(c.seed, 0x74737473),
                            data.x_init, nullptr);
    data.has_test = true;
    return data;
}

inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
    ExperimentData data;
    data.est = read_dataset_csv(c.est_path);
    if (!c.test_path.empty()) {
        data.test = read_dataset_csv(c.test_path);
        data.has_test = true;
    }
    data.excitation =
        excitation_for_band(data.est.period_length, data.est.fs, c.f_max_hz);
    return data;
}

inline ExperimentData acquire_experiment_data(const ExperimentConfig& c) {
    return c.data_mode == "simulate" ? simulate_experiment_data(c) : load_experiment_data(c);
}

struct SplitRmse {
    double est = std::numeric_limits<double>::quiet_NaN();
    double val = std::numeric_limits<double>::quiet_NaN();
    double test = std::numeric_limits<double>::quiet_NaN();
};

struct ModelResult {
    std::string name;
    bool ok = false;
    std::string failure;
    Eigen::Index parameters_total = 0;
    std::uint64_t nonlinear_structural = 0;
    std::uint64_t nonlinear_published = 0;  ///< closed-form count where one exists
    SplitRmse rmse;
    int iterations = 0;
    std::string termination = "-";
};

struct ComparisonReport {
    std::vector<ModelResult> rows;
    std::string digest;
    std::uint64_t seed = 0;

    bool all_ok() const {
        for (const auto& row : rows)
            if (!row.ok) return false;
        return true;
    }

    std::string to_csv() const {
        auto num = [](double v) {
            if (std::isnan(v)) return std::string("nan");
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6g", v);
            return std::string(buf);
        };
        auto escape = [](std::string s) {
            for (auto& ch : s)
                if (ch == ',' || ch == '\n') ch = ';';
            return s;
        };
        std::string out =
            "model,ok,parameters_total,nonlinear_structural,nonlinear_published,"
            "rmse_est,rmse_val,rmse_test,iterations,termination,failure\n";
        for (const auto& r : rows) {
            out += r.name + ',' + (r.ok ? "1" : "0") + ',' + std::to_string(r.parameters_total) +
                   ',' + std::to_string(r.nonlinear_structural) + ',' +
                   std::to_string(r.nonlinear_published) + ',' + num(r.rmse.est) + ',' +
                   num(r.rmse.val) + ',' + num(r.rmse.test) + ',' + std::to_string(r.iterations) +
                   ',' + r.termination + ',' + escape(r.failure) + '\n';
        }
        return out;
    }

    std::string to_table() const {
        auto num = [](double v) {
            char buf[32];
            if (std::isnan(v)) std::snprintf(buf, sizeof buf, "%12s", "-");
            else std::snprintf(buf, sizeof buf, "%12.5f", v);
            return std::string(buf);
        };
        char head[160];
        std::snprintf(head, sizeof head, "%-12s %8s %9s %9s %12s %12s %12s %6s %-16s\n", "model",
                      "params", "nl(strct)", "nl(publ)", "rmse(est)", "rmse(val)", "rmse(test)",
                      "iters", "termination");
        std::string out = head;
        out += std::string(101, '-') + '\n';
        for (const auto& r : rows) {
            std::string status = r.ok ? r.termination : ("FAILED: " + r.failure).substr(0, 60);
            if (r.ok && !r.failure.empty()) status += " *";
            char line[256];
            std::snprintf(line, sizeof line, "%-12s %8lld %9llu %9llu %s %s %s %6d %-16s\n",
                          r.name.c_str(), static_cast<long long>(r.parameters_total),
                          static_cast<unsigned long long>(r.nonlinear_structural),
                          static_cast<unsigned long long>(r.nonlinear_published),
                          num(r.rmse.est).c_str(), num(r.rmse.val).c_str(), num(r.rmse.test).c_str(),
                          r.iterations, status.c_str());
            out += line;
        }
        for (const auto& r : rows)
            if (r.ok && !r.failure.empty()) out += "  * " + r.name + ": " + r.failure + '\n';
        out += "digest " + digest + " seed " + std::to_string(seed) + '\n';
        return out;
    }
};

struct PipelineResult {
    ExperimentData data;     ///< records as acquired, uncentered
    double u_offset = 0.0;   ///< estimation-record input mean, removed before fitting
    double y_offset = 0.0;   ///< estimation-record output mean, removed before fitting
    Eigen::Index n_est = 0;  ///< samples of the estimation record used for fitting
    FrfEstimate frf;
    bool linear_ok = false;
    std::string linear_failure;
    TransferFunctionModel tf;
    LinearStateSpace linear;
    std::map<std::string, nlohmann::json> models;      ///< fitted models, serialized
    std::map<std::string, FitReport> fit_reports;
    std::map<std::string, Eigen::VectorXd> pred_est;   ///< model output over the estimation record
    std::map<std::string, Eigen::VectorXd> pred_test;  ///< model output over the test record
    ComparisonReport report;
};

namespace detail {

inline double segment_rms(const Eigen::VectorXd& y_mod, const Eigen::VectorXd& y,
                          Eigen::Index start, Eigen::Index count) {
    return rms_error(y_mod.segment(start, count), y.segment(start, count));
}

/// RMSE per split. The estimation segment simulates standalone and must
/// succeed (otherwise the fit cannot be judged and the row fails). The
/// validation tail extends the same trajectory and the test record is
/// independent; a divergence there only leaves that column NaN, with a note
/// on the row.
template <typename SimFn>
void evaluate_splits(SimFn&& simulate, const ExperimentData& data, Eigen::Index n_est,
                     ModelResult& row, std::map<std::string, Eigen::VectorXd>& pred_est,
                     std::map<std::string, Eigen::VectorXd>& pred_test) {
    const Eigen::Index total = data.est.u.size();
    Eigen::VectorXd y_seg = simulate(data.est.u.head(n_est));
    if (!y_seg.allFinite())
        throw std::runtime_error("evaluation: non-finite model output on the estimation segment");
    row.rmse.est = segment_rms(y_seg, data.est.y, 0, n_est);

    auto note = [&row](const std::string& where, const std::string& what) {
        if (!row.failure.empty()) row.failure += "; ";
        row.failure += where + ": " + what;
    };
    Eigen::VectorXd y_full =
        Eigen::VectorXd::Constant(total, std::numeric_limits<double>::quiet_NaN());
    y_full.head(n_est) = y_seg;
    if (total > n_est) {
        try {
            Eigen::VectorXd y_mod = simulate(data.est.u);
            if (!y_mod.allFinite()) throw std::runtime_error("non-finite model output");
            row.rmse.val = segment_rms(y_mod, data.est.y, n_est, total - n_est);
            y_full = std::move(y_mod);
        } catch (const std::exception& ex) {
            note("validation segment", ex.what());
        }
    }
    pred_est[row.name] = std::move(y_full);

    if (data.has_test) {
        try {
            Eigen::VectorXd y_test = simulate(data.test.u);
            if (!y_test.allFinite()) throw std::runtime_error("non-finite model output");
            row.rmse.test = rms_error(y_test, data.test.y);
            pred_test[row.name] = std::move(y_test);
        } catch (const std::exception& ex) {
            note("test record", ex.what());
        }
    }
}

inline Eigen::Index linear_parameter_count(const LinearStateSpace& ss) {
    return ss.A.size() + ss.B.size() + ss.C.size() + ss.D.size();
}

struct SelectionMeta {
    FitReport report;           ///< merged over all chunks
    double val_rmse = std::numeric_limits<double>::infinity();
    int selected_after = 0;     ///< LM iterations completed when the pick was made
};

/// Run the optimizer in chunks of `interval` iterations (warm restarts) and
/// keep the iterate with the best validation RMSE; the initial model is a
/// candidate too, so a usable model always comes back. `fit_one(model,
/// settings)` performs one chunk; `val_rmse_of(model)` returns the held-out
/// RMSE or nullopt on divergence.
template <typename Model, typename FitFn, typename ValFn>
std::pair<Model, SelectionMeta> fit_with_validation_selection(Model model, const LmSettings& lm,
                                                              int interval, FitFn&& fit_one,
                                                              ValFn&& val_rmse_of) {
    SelectionMeta meta;
    Model best = model;
    if (const auto v0 = val_rmse_of(model)) meta.val_rmse = *v0;

    const int budget = lm.max_iterations;
    const int step = interval > 0 ? std::min(interval, budget) : budget;
    int done = 0;
    bool first = true;
    double lambda = lm.lambda_init;
    do {
        LmSettings chunk = lm;
        chunk.max_iterations = std::min(step, budget - done);
        chunk.lambda_init = lambda;  // resuming keeps the damping trajectory
        auto [next, rep] = fit_one(std::move(model), chunk);
        model = std::move(next);
        done += rep.iterations;
        if (!rep.lambda_trace.empty()) lambda = rep.lambda_trace.back();
        if (first) {
            meta.report = rep;
            first = false;
        } else {
            meta.report.iterations += rep.iterations;
            meta.report.accepted_steps += rep.accepted_steps;
            for (std::size_t i = 1; i < rep.cost_trace.size(); ++i)
                meta.report.cost_trace.push_back(rep.cost_trace[i]);
            meta.report.lambda_trace.insert(meta.report.lambda_trace.end(),
                                            rep.lambda_trace.begin(), rep.lambda_trace.end());
            meta.report.step_trace.insert(meta.report.step_trace.end(), rep.step_trace.begin(),
                                          rep.step_trace.end());
            meta.report.termination = rep.termination;
            meta.report.theta = rep.theta;
        }
        if (const auto v = val_rmse_of(model); v && *v < meta.val_rmse) {
            meta.val_rmse = *v;
            best = model;
            meta.selected_after = done;
        }
        if (rep.termination != LmTermination::max_iterations || rep.accepted_steps == 0) break;
    } while (done < budget);
    if (interval <= 0) {  // selection disabled: the plain LM result stands
        best = std::move(model);
        meta.selected_after = done;
    }
    meta.report.rmse = std::sqrt(meta.report.final_cost());
    return {std::move(best), std::move(meta)};
}

}  // namespace detail

/// The four-stage workflow: nonparametric BLA, parametric linear fit with
/// balancing, per-roster-model initialization, full output-error
/// optimization (plus decoupling where asked). A stage failure is recorded
/// on the affected rows; the remaining roster entries still run.
inline PipelineResult run_pipeline(const ExperimentConfig& config) {
    config.validate();
    PipelineResult result;
    result.report.digest = config_digest(config);
    result.report.seed = config.seed;
    result.data = acquire_experiment_data(config);
    result.data.est.validate();

    // All models are affine-free, so identification runs on centered
    // signals; the estimation-record means define the operating point for
    // the test record too. Excited DFT bins are invariant to the shift.
    result.u_offset = result.data.est.u.mean();
    result.y_offset = result.data.est.y.mean();
    ExperimentData work = result.data;
    work.est.u.array() -= result.u_offset;
    work.est.y.array() -= result.y_offset;
    if (work.has_test) {
        work.test.u.array() -= result.u_offset;
        work.test.y.array() -= result.y_offset;
    }

    const auto splits = split_dataset(work.est, {config.est_fraction, config.val_fraction});
    result.n_est = splits[0].u.size();
    const Eigen::MatrixXd u_fit = splits[0].u.transpose();
    const Eigen::MatrixXd y_fit = splits[0].y.transpose();

    // Shared linear stage.
    try {
        const int discard = work.est.n_periods > 1 ? 1 : 0;
        result.frf = estimate_bla(work.est, work.excitation, discard);
        result.tf = fit_transfer_function(result.frf, config.order, config.numerator_order);
        TransferFunctionModel tf_stable =
            result.tf.stable_denominator ? result.tf : stabilize_denominator(result.tf);
        tf_stable = clamp_pole_radius(tf_stable, config.max_pole_radius);
        result.linear = balance_realization(realize_state_space(tf_stable));
        result.linear_ok = true;
        result.models["linear"] = model_to_json(result.linear);
    } catch (const std::exception& ex) {
        result.linear_failure = ex.what();
    }

    std::optional<PnlssModel> pnlss_i_model;  // cached for the decoupling stage

    // Held-out score for iterate selection: the validation tail of the
    // estimation record, simulated as one pass from the model's own x0.
    auto val_tail_rmse = [&work, &result](const auto& model,
                                          auto&& simulate) -> std::optional<double> {
        try {
            const Eigen::VectorXd y_mod = simulate(model, work.est.u);
            if (!y_mod.allFinite()) return std::nullopt;
            return detail::segment_rms(y_mod, work.est.y, result.n_est,
                                       work.est.u.size() - result.n_est);
        } catch (const std::exception&) {
            return std::nullopt;
        }
    };
    auto simulate_pnlss_siso = [](const PnlssModel& m, const Eigen::VectorXd& u) {
        return simulate_pnlss(m, u.transpose()).y.row(0).transpose().eval();
    };

    auto fit_pnlss_variant = [&](bool estimate_x0) {
        PnlssModel init = make_pnlss(result.linear, config.degree, config.mask, config.mask);
        init.x0_estimated = estimate_x0;
        const FreeSelection sel = FreeSelection::for_model(init);
        return detail::fit_with_validation_selection(
            std::move(init), config.lm, config.val_selection_interval,
            [&](PnlssModel m, const LmSettings& s) { return fit_pnlss(m, u_fit, y_fit, sel, s); },
            [&](const PnlssModel& m) { return val_tail_rmse(m, simulate_pnlss_siso); });
    };

    for (const std::string& name : config.roster) {
        ModelResult row;
        row.name = name;
        if (!result.linear_ok) {
            row.failure = "linear stage failed: " + result.linear_failure;
            result.report.rows.push_back(std::move(row));
            continue;
        }
        try {
            if (name == "bla") {
                row.parameters_total = detail::linear_parameter_count(result.linear);
                const LinearStateSpace& ss = result.linear;
                detail::evaluate_splits(
                    [&ss](const Eigen::VectorXd& u) { return simulate_linear_siso(ss, u); },
                    work, result.n_est, row, result.pred_est, result.pred_test);
                row.termination = "-";
                row.ok = true;
            } else if (name == "pnlss" || name == "pnlss-i") {
                auto [model, meta] = fit_pnlss_variant(name == "pnlss-i");
                row.parameters_total =
                    parameter_count(model, FreeSelection::for_model(model));
                row.nonlinear_structural =
                    static_cast<std::uint64_t>(model.E.size() + model.F.size());
                row.nonlinear_published = count_nonlinear_parameters(
                    model.n(), model.n_u(), model.n_y(), config.degree);
                row.iterations = meta.report.iterations;
                row.termination = to_string(meta.report.termination);
                detail::evaluate_splits(
                    [&model](const Eigen::VectorXd& u) {
                        return simulate_pnlss(model, u.transpose()).y.row(0).transpose().eval();
                    },
                    work, result.n_est, row, result.pred_est, result.pred_test);
                row.ok = true;
                result.models[name] = model_to_json(model);
                result.fit_reports[name] = meta.report;
                if (name == "pnlss-i") pnlss_i_model = std::move(model);
            } else if (name == "pnlss-i-dec") {
                if (!pnlss_i_model) pnlss_i_model = fit_pnlss_variant(true).first;
                const PnlssModel& base = *pnlss_i_model;
                Eigen::VectorXd scaling;
                if (config.decouple_empirical_scaling)
                    scaling = empirical_scaling(base, u_fit);
                const JacobianTensor tensor =
                    sample_jacobians(base, config.decouple_samples,
                                     derive_seed(config.seed, 0x64656373), scaling);
                const CpdFactors factors =
                    cpd_als(tensor, config.decouple_rank, config.decouple_restarts, 500, 1e-10,
                            derive_seed(config.seed, 0x63706473));
                const BranchDerivatives derivs =
                    fit_branch_derivatives(factors, tensor, config.degree);
                DecoupledModel init = assemble_decoupled(base, factors, derivs, config.degree);
                auto [model, meta] = detail::fit_with_validation_selection(
                    std::move(init), config.lm, config.val_selection_interval,
                    [&](DecoupledModel m, const LmSettings& s) {
                        return optimize_decoupled(m, u_fit, y_fit, s);
                    },
                    [&](const DecoupledModel& m) {
                        return val_tail_rmse(m, [](const DecoupledModel& dm,
                                                   const Eigen::VectorXd& u) {
                            return simulate_decoupled(dm, u.transpose()).y.row(0).transpose().eval();
                        });
                    });
                const auto counts =
                    count_decoupled_parameters(model.n(), model.n_u(), model.n_y(),
                                               config.degree, config.decouple_rank);
                row.parameters_total = detail::linear_parameter_count(model.lin) +
                                       static_cast<Eigen::Index>(counts.structural) + model.n();
                row.nonlinear_structural = counts.structural;
                row.nonlinear_published = counts.published;
                row.iterations = meta.report.iterations;
                row.termination = to_string(meta.report.termination);
                detail::evaluate_splits(
                    [&model](const Eigen::VectorXd& u) {
                        return simulate_decoupled(model, u.transpose()).y.row(0).transpose().eval();
                    },
                    work, result.n_est, row, result.pred_est, result.pred_test);
                row.ok = true;
                result.models[name] = model_to_json(model);
                result.fit_reports[name] = meta.report;
            } else if (name == "nlss2") {
                Nlss2InitOptions opts;
                opts.n_hidden = config.n_hidden;
                opts.activation = config.activation;
                opts.restarts = config.net_restarts;
                opts.seed = derive_seed(config.seed, 0x6e6c7332);
                opts.net_settings = config.lm;
                opts.net_settings.max_iterations = config.net_iterations;
                const Eigen::MatrixXd u_full = work.est.u.transpose();
                const Eigen::MatrixXd y_full = work.est.y.transpose();
                const LambdaSelection sel =
                    select_lambda(result.linear, u_fit, y_fit, u_full, y_full, config.lambda_grid,
                                  opts, result.n_est);
                auto [model, meta] = detail::fit_with_validation_selection(
                    sel.best_model, config.lm, config.val_selection_interval,
                    [&](Nlss2Model m, const LmSettings& s) {
                        return optimize_full_nlss2(m, u_fit, y_fit, s);
                    },
                    [&](const Nlss2Model& m) {
                        return val_tail_rmse(m, [](const Nlss2Model& nm, const Eigen::VectorXd& u) {
                            return simulate_nlss2(nm, u.transpose()).y.row(0).transpose().eval();
                        });
                    });
                row.parameters_total = model.parameter_count();
                row.nonlinear_structural = static_cast<std::uint64_t>(
                    model.f_net.parameter_count() + model.g_net.parameter_count());
                row.nonlinear_published = row.nonlinear_structural;
                row.iterations = meta.report.iterations;
                row.termination = to_string(meta.report.termination);
                detail::evaluate_splits(
                    [&model](const Eigen::VectorXd& u) {
                        return simulate_nlss2(model, u.transpose()).y.row(0).transpose().eval();
                    },
                    work, result.n_est, row, result.pred_est, result.pred_test);
                row.ok = true;
                result.models[name] = model_to_json(model);
                result.fit_reports[name] = meta.report;
            }
        } catch (const std::exception& ex) {
            row.ok = false;
            row.failure = ex.what();
        }
        result.report.rows.push_back(std::move(row));
    }

    if (!config.out_dir.empty()) {
        namespace fs = std::filesystem;
        const fs::path dir(config.out_dir);
        fs::create_directories(dir);
        detail::write_text_file((dir / "config.json").string(),
                                config_to_json(config).dump(2) + "\n");
        write_dataset_csv((dir / "estimation.csv").string(), result.data.est);
        if (result.data.has_test) write_dataset_csv((dir / "test.csv").string(), result.data.test);
        if (result.linear_ok) {
            write_frf_csv((dir / "frf.csv").string(), result.frf);
            save_model((dir / "transfer_function.json").string(), result.tf);
        }
        for (const auto& [name, json] : result.models) {
            std::string file = name;
            std::replace(file.begin(), file.end(), '-', '_');
            detail::write_text_file((dir / (file + ".json")).string(), json.dump(2) + "\n");
        }
        for (const auto& [name, rep] : result.fit_reports) {
            std::string file = name;
            std::replace(file.begin(), file.end(), '-', '_');
            detail::write_text_file((dir / (file + "_fit.json")).string(),
                                    fit_report_to_json(rep).dump(2) + "\n");
        }
        // Model outputs are on the centered scale; shift back for the files.
        auto write_predictions = [y_off = result.y_offset](
                                     const std::string& path, const Dataset& data,
                                     const std::map<std::string, Eigen::VectorXd>& preds) {
            std::string out = "t,y";
            for (const auto& [name, _] : preds) out += ",y_" + name;
            out += '\n';
            for (Eigen::Index t = 0; t < data.y.size(); ++t) {
                out += std::to_string(t) + ',' + detail::format_double(data.y[t]);
                for (const auto& [_, y_mod] : preds)
                    out += ',' + detail::format_double(y_mod[t] + y_off);
                out += '\n';
            }
            detail::write_text_file(path, out);
        };
        write_predictions((dir / "predictions_estimation.csv").string(), result.data.est,
                          result.pred_est);
        if (result.data.has_test)
            write_predictions((dir / "predictions_test.csv").string(), result.data.test,
                              result.pred_test);
        detail::write_text_file((dir / "offsets.json").string(),
                                nlohmann::json{{"u_offset", result.u_offset},
                                               {"y_offset", result.y_offset}}
                                        .dump(2) +
                                    "\n");
        detail::write_text_file((dir / "report.csv").string(), result.report.to_csv());
        detail::write_text_file((dir / "report.txt").string(), result.report.to_table());
    }
    return result;
}

}  // namespace nlssid
