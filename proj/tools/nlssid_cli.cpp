// Command-line front end for the identification pipeline. Every subcommand
// resolves an ExperimentConfig (defaults, then --config, then flag
// overrides) and drives the same code paths as the library harness, so a
// CLI run and a programmatic run with equal configs produce equal artifacts.
#include <CLI11.hpp>

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nlssid/harness.hpp"

using namespace nlssid;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir;
    bool out_dir_set = false;
};

nlohmann::json parse_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return nlohmann::json::parse(in);
}

ExperimentConfig resolve_config(const GlobalArgs& args) {
    ExperimentConfig c;
    if (!args.config_path.empty()) c = config_from_json(parse_json_file(args.config_path));
    if (args.seed_set) c.seed = args.seed;
    if (args.out_dir_set) c.out_dir = args.out_dir;
    return c;
}

void print_iteration_table(const std::string& name, const FitReport& report) {
    std::printf("%s: %d iterations, %d accepted, termination %s\n", name.c_str(),
                report.iterations, report.accepted_steps, to_string(report.termination));
    std::printf("  %4s  %14s  %12s  %12s\n", "step", "cost", "damping", "step norm");
    std::printf("  %4d  %14.6e  %12s  %12s\n", 0, report.initial_cost(), "-", "-");
    for (std::size_t i = 1; i < report.cost_trace.size(); ++i)
        std::printf("  %4zu  %14.6e  %12.4e  %12.4e\n", i, report.cost_trace[i],
                    report.lambda_trace[i - 1], report.step_trace[i - 1]);
}

/// Run the pipeline with the roster narrowed to one stage. Exit code 0 when
/// every requested row fits, 2 when some row failed but a report exists.
int run_roster(ExperimentConfig config, const std::vector<std::string>& roster,
               bool show_linear = false) {
    if (!roster.empty()) config.roster = roster;
    const PipelineResult result = run_pipeline(config);

    if (show_linear) {
        if (!result.linear_ok) {
            std::printf("linear stage failed: %s\n", result.linear_failure.c_str());
        } else {
            std::printf("transfer function (b over a, ascending powers of z^-1):\n  b =");
            for (Eigen::Index i = 0; i < result.tf.b.size(); ++i)
                std::printf(" %.10g", result.tf.b[i]);
            std::printf("\n  a =");
            for (Eigen::Index i = 0; i < result.tf.a.size(); ++i)
                std::printf(" %.10g", result.tf.a[i]);
            std::printf("\npoles (modulus):");
            const Eigen::VectorXcd poles = result.tf.poles();
            for (Eigen::Index i = 0; i < poles.size(); ++i)
                std::printf(" %.6f%+.6fi (%.4f)", poles[i].real(), poles[i].imag(),
                            std::abs(poles[i]));
            std::printf("\nbalanced realization: n = %lld states\n",
                        static_cast<long long>(result.linear.n()));
        }
        std::printf("frf: %zu excited bins, %d periods, %d realizations\n",
                    result.frf.excited_bins.size(), result.frf.n_periods_used,
                    result.frf.n_realizations_used);
    }

    for (const auto& [name, report] : result.fit_reports) print_iteration_table(name, report);
    std::printf("%s", result.report.to_table().c_str());
    if (!config.out_dir.empty()) std::printf("artifacts written to %s\n", config.out_dir.c_str());
    return result.report.all_ok() ? 0 : 2;
}

int cmd_simulate(const ExperimentConfig& config) {
    if (config.out_dir.empty()) {
        std::fprintf(stderr, "simulate: --out-dir (or config out_dir) is required\n");
        return 1;
    }
    const ExperimentData data = acquire_experiment_data(config);
    const std::filesystem::path dir(config.out_dir);
    std::filesystem::create_directories(dir);
    write_dataset_csv((dir / "estimation.csv").string(), data.est);
    if (data.has_test) write_dataset_csv((dir / "test.csv").string(), data.test);

    nlohmann::json prov;
    prov["format_version"] = kFormatVersion;
    prov["digest"] = config_digest(config);
    prov["config"] = config_to_json(config);
    prov["x_init"] = {data.x_init[0], data.x_init[1]};
    prov["excited_harmonics"] = data.excitation.harmonics;
    std::ofstream out(dir / "provenance.json");
    out << prov.dump(2) << "\n";
    if (!out) {
        std::fprintf(stderr, "simulate: cannot write provenance.json\n");
        return 1;
    }

    std::printf("estimation record: %lld samples, fs %.6g Hz, %zu excited harmonics\n",
                static_cast<long long>(data.est.u.size()), data.est.fs,
                data.excitation.harmonics.size());
    if (data.has_test)
        std::printf("test record: %lld samples\n", static_cast<long long>(data.test.u.size()));
    std::printf("records written to %s\n", config.out_dir.c_str());
    return 0;
}

int cmd_evaluate(const ExperimentConfig& config, const std::string& model_path,
                 const std::string& offsets_path) {
    const nlohmann::json j = load_model_json(model_path);
    const std::string type = model_type(j);

    ExperimentData data = acquire_experiment_data(config);
    double u_offset = data.est.u.mean();
    double y_offset = data.est.y.mean();
    if (!offsets_path.empty()) {
        const nlohmann::json off = parse_json_file(offsets_path);
        u_offset = off.at("u_offset").get<double>();
        y_offset = off.at("y_offset").get<double>();
    }
    data.est.u.array() -= u_offset;
    data.est.y.array() -= y_offset;
    if (data.has_test) {
        data.test.u.array() -= u_offset;
        data.test.y.array() -= y_offset;
    }

    auto simulate = [&](const Eigen::VectorXd& u) -> Eigen::VectorXd {
        if (type == "linear") return simulate_linear_siso(linear_from_json(j), u);
        if (type == "transfer_function")
            return simulate_linear_siso(realize_state_space(transfer_function_from_json(j)), u);
        if (type == "pnlss")
            return simulate_pnlss(pnlss_from_json(j), u.transpose()).y.row(0).transpose();
        if (type == "nlss2")
            return simulate_nlss2(nlss2_from_json(j), u.transpose()).y.row(0).transpose();
        if (type == "decoupled")
            return simulate_decoupled(decoupled_from_json(j), u.transpose()).y.row(0).transpose();
        throw std::runtime_error("evaluate: unknown model type \"" + type + "\"");
    };

    const auto splits = split_dataset(data.est, {config.est_fraction, config.val_fraction});
    ModelResult row;
    row.name = type;
    std::map<std::string, Eigen::VectorXd> pred_est, pred_test;
    detail::evaluate_splits(simulate, data, splits[0].u.size(), row, pred_est, pred_test);

    auto num = [](double v) { return std::isnan(v) ? std::string("-") : std::to_string(v); };
    std::printf("model %s (%s)\n", model_path.c_str(), type.c_str());
    std::printf("  rmse est  %s\n  rmse val  %s\n  rmse test %s\n", num(row.rmse.est).c_str(),
                num(row.rmse.val).c_str(), num(row.rmse.test).c_str());
    if (!row.failure.empty()) std::printf("  note: %s\n", row.failure.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nonlinear state-space identification pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs globals;
    const auto opt_seed = app.add_option("--seed", globals.seed, "override the config seed");
    const auto opt_out = app.add_option("--out-dir", globals.out_dir, "artifact directory");
    app.add_option("--config", globals.config_path, "experiment configuration JSON")
        ->check(CLI::ExistingFile);

    auto* sc_simulate =
        app.add_subcommand("simulate", "generate tank records and write them as CSV");
    auto* sc_bla = app.add_subcommand("bla", "nonparametric best linear approximation");
    auto* sc_fit_linear =
        app.add_subcommand("fit-linear", "rational fit of the BLA plus balanced realization");

    auto* sc_fit_pnlss = app.add_subcommand("fit-pnlss", "polynomial state-space fit");
    std::string variant = "both";
    sc_fit_pnlss->add_option("--variant", variant, "pnlss | pnlss-i | both")
        ->check(CLI::IsMember({"pnlss", "pnlss-i", "both"}));

    auto* sc_fit_nlss2 =
        app.add_subcommand("fit-nlss2", "state-estimation + sigmoid-network initialization");
    std::vector<double> lambda_grid;
    int n_hidden = 0, net_restarts = 0, net_iterations = 0;
    sc_fit_nlss2->add_option("--lambda-grid", lambda_grid, "state-estimation weights to try");
    const auto opt_hidden =
        sc_fit_nlss2->add_option("--n-hidden", n_hidden, "hidden units per network");
    const auto opt_nrestarts =
        sc_fit_nlss2->add_option("--net-restarts", net_restarts, "random restarts per network");
    const auto opt_niters =
        sc_fit_nlss2->add_option("--net-iterations", net_iterations, "LM budget per network");

    auto* sc_decouple = app.add_subcommand("decouple", "decoupled reparameterization");
    int rank = 0, samples = 0, restarts = 0, degree = 0;
    const auto opt_rank = sc_decouple->add_option("--rank", rank, "number of branches");
    const auto opt_samples =
        sc_decouple->add_option("--samples", samples, "Jacobian sampling points");
    const auto opt_restarts = sc_decouple->add_option("--restarts", restarts, "CPD restarts");
    const auto opt_degree = sc_decouple->add_option("--degree", degree, "branch polynomial degree");

    auto* sc_run = app.add_subcommand("run", "full pipeline over the configured roster");
    auto* sc_evaluate = app.add_subcommand("evaluate", "score a saved model on a dataset");
    std::string model_path, offsets_path;
    sc_evaluate->add_option("--model", model_path, "model JSON to evaluate")
        ->required()
        ->check(CLI::ExistingFile);
    sc_evaluate->add_option("--offsets", offsets_path, "offsets JSON from a pipeline run")
        ->check(CLI::ExistingFile);

    // Orders of the linear fit are plain flags; they land in the config.
    int order = 0, numerator_order = 0;
    const auto opt_order = app.add_option("--order", order, "denominator order of the linear fit");
    const auto opt_num_order =
        app.add_option("--numerator-order", numerator_order, "numerator order of the linear fit");

    CLI11_PARSE(app, argc, argv);
    globals.seed_set = opt_seed->count() > 0;
    globals.out_dir_set = opt_out->count() > 0;

    try {
        ExperimentConfig config = resolve_config(globals);
        if (opt_order->count()) config.order = order;
        if (opt_num_order->count()) config.numerator_order = numerator_order;

        if (sc_simulate->parsed()) return cmd_simulate(config);
        if (sc_bla->parsed()) return run_roster(config, {"bla"}, true);
        if (sc_fit_linear->parsed()) return run_roster(config, {"bla"}, true);
        if (sc_fit_pnlss->parsed()) {
            const std::vector<std::string> roster =
                variant == "both" ? std::vector<std::string>{"pnlss", "pnlss-i"}
                                  : std::vector<std::string>{variant};
            return run_roster(config, roster);
        }
        if (sc_fit_nlss2->parsed()) {
            if (!lambda_grid.empty()) config.lambda_grid = lambda_grid;
            if (opt_hidden->count()) config.n_hidden = n_hidden;
            if (opt_nrestarts->count()) config.net_restarts = net_restarts;
            if (opt_niters->count()) config.net_iterations = net_iterations;
            return run_roster(config, {"nlss2"});
        }
        if (sc_decouple->parsed()) {
            if (opt_rank->count()) config.decouple_rank = rank;
            if (opt_samples->count()) config.decouple_samples = samples;
            if (opt_restarts->count()) config.decouple_restarts = restarts;
            if (opt_degree->count()) config.degree = degree;
            return run_roster(config, {"pnlss-i-dec"});
        }
        if (sc_run->parsed()) return run_roster(config, {});
        if (sc_evaluate->parsed()) return cmd_evaluate(config, model_path, offsets_path);
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
    return 0;
}
