#pragma once

#include <Eigen/Core>

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlssid/decouple.hpp"
#include "nlssid/frf.hpp"
#include "nlssid/linfit.hpp"
#include "nlssid/lm.hpp"
#include "nlssid/nlss2.hpp"
#include "nlssid/pnlss.hpp"
#include "nlssid/signals.hpp"
#include "nlssid/state_space.hpp"

namespace nlssid {

inline constexpr int kFormatVersion = 1;

namespace detail {

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto n_rows = static_cast<Eigen::Index>(j.size());
    Eigen::Index n_cols = 0;
    if (n_rows > 0) n_cols = static_cast<Eigen::Index>(j.at(0).size());
    Eigen::MatrixXd m(n_rows, n_cols);
    for (Eigen::Index r = 0; r < n_rows; ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        if (static_cast<Eigen::Index>(row.size()) != n_cols)
            throw std::invalid_argument("model file: ragged matrix");
        for (Eigen::Index c = 0; c < n_cols; ++c)
            m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    return m;
}

inline nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j.at(static_cast<std::size_t>(i)).get<double>();
    return v;
}

inline nlohmann::json imatrix_to_json(const Eigen::MatrixXi& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXi imatrix_from_json(const nlohmann::json& j, Eigen::Index n_cols_hint) {
    const auto n_rows = static_cast<Eigen::Index>(j.size());
    Eigen::Index n_cols = n_cols_hint;
    if (n_rows > 0) n_cols = static_cast<Eigen::Index>(j.at(0).size());
    Eigen::MatrixXi m(n_rows, n_cols);
    for (Eigen::Index r = 0; r < n_rows; ++r)
        for (Eigen::Index c = 0; c < n_cols; ++c)
            m(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<int>();
    return m;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline nlohmann::json linear_to_json(const LinearStateSpace& ss) {
    return {{"A", detail::matrix_to_json(ss.A)},
            {"B", detail::matrix_to_json(ss.B)},
            {"C", detail::matrix_to_json(ss.C)},
            {"D", detail::matrix_to_json(ss.D)}};
}

inline LinearStateSpace linear_from_json(const nlohmann::json& j) {
    LinearStateSpace ss;
    ss.A = detail::matrix_from_json(j.at("A"));
    ss.B = detail::matrix_from_json(j.at("B"));
    ss.C = detail::matrix_from_json(j.at("C"));
    ss.D = detail::matrix_from_json(j.at("D"));
    ss.validate();
    return ss;
}

inline nlohmann::json basis_to_json(const MonomialBasis& basis) {
    return {{"n_vars", basis.n_vars},
            {"degree", basis.degree},
            {"exponents", detail::imatrix_to_json(basis.exponents)}};
}

inline MonomialBasis basis_from_json(const nlohmann::json& j) {
    MonomialBasis basis;
    basis.n_vars = j.at("n_vars").get<int>();
    basis.degree = j.at("degree").get<int>();
    basis.exponents = detail::imatrix_from_json(j.at("exponents"), basis.n_vars);
    basis.validate();
    return basis;
}

inline nlohmann::json network_to_json(const SigmoidNetwork& net) {
    return {{"w1", detail::matrix_to_json(net.w1)},
            {"b1", detail::vector_to_json(net.b1)},
            {"w2", detail::matrix_to_json(net.w2)},
            {"b2", detail::vector_to_json(net.b2)},
            {"activation", to_string(net.activation)}};
}

inline SigmoidNetwork network_from_json(const nlohmann::json& j) {
    SigmoidNetwork net;
    net.w1 = detail::matrix_from_json(j.at("w1"));
    net.b1 = detail::vector_from_json(j.at("b1"));
    net.w2 = detail::matrix_from_json(j.at("w2"));
    net.b2 = detail::vector_from_json(j.at("b2"));
    net.activation = parse_activation(j.at("activation").get<std::string>());
    net.validate();
    return net;
}

inline nlohmann::json model_to_json(const LinearStateSpace& ss) {
    nlohmann::json j = linear_to_json(ss);
    j["format_version"] = kFormatVersion;
    j["type"] = "linear";
    return j;
}

inline nlohmann::json model_to_json(const TransferFunctionModel& tf) {
    return {{"format_version", kFormatVersion},
            {"type", "transfer_function"},
            {"b", detail::vector_to_json(tf.b)},
            {"a", detail::vector_to_json(tf.a)},
            {"stable_denominator", tf.stable_denominator}};
}

inline nlohmann::json model_to_json(const PnlssModel& model) {
    nlohmann::json j = linear_to_json(model.lin);
    j["format_version"] = kFormatVersion;
    j["type"] = "pnlss";
    j["E"] = detail::matrix_to_json(model.E);
    j["F"] = detail::matrix_to_json(model.F);
    j["basis_state"] = basis_to_json(model.basis_state);
    j["basis_output"] = basis_to_json(model.basis_output);
    j["x0"] = detail::vector_to_json(model.x0);
    j["x0_estimated"] = model.x0_estimated;
    return j;
}

inline nlohmann::json model_to_json(const Nlss2Model& model) {
    nlohmann::json j = linear_to_json(model.lin);
    j["format_version"] = kFormatVersion;
    j["type"] = "nlss2";
    j["f_net"] = network_to_json(model.f_net);
    j["g_net"] = network_to_json(model.g_net);
    j["x0"] = detail::vector_to_json(model.x0);
    return j;
}

inline nlohmann::json model_to_json(const DecoupledModel& model) {
    nlohmann::json j = linear_to_json(model.lin);
    j["format_version"] = kFormatVersion;
    j["type"] = "decoupled";
    j["V"] = detail::matrix_to_json(model.v);
    j["W_x"] = detail::matrix_to_json(model.w_x);
    j["W_y"] = detail::matrix_to_json(model.w_y);
    j["branch_coefficients"] = detail::matrix_to_json(model.coeffs);
    j["degree"] = model.degree;
    j["x0"] = detail::vector_to_json(model.x0);
    j["x0_estimated"] = model.x0_estimated;
    return j;
}

inline nlohmann::json load_model_json(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(detail::read_text_file(path));
    const int version = j.value("format_version", 0);
    if (version != kFormatVersion)
        throw std::runtime_error(path + ": unsupported model format version " +
                                 std::to_string(version));
    if (!j.contains("type")) throw std::runtime_error(path + ": missing model type");
    return j;
}

inline std::string model_type(const nlohmann::json& j) { return j.at("type").get<std::string>(); }

inline TransferFunctionModel transfer_function_from_json(const nlohmann::json& j) {
    TransferFunctionModel tf;
    tf.b = detail::vector_from_json(j.at("b"));
    tf.a = detail::vector_from_json(j.at("a"));
    tf.stable_denominator = j.at("stable_denominator").get<bool>();
    return tf;
}

inline PnlssModel pnlss_from_json(const nlohmann::json& j) {
    PnlssModel model;
    model.lin = linear_from_json(j);
    model.E = detail::matrix_from_json(j.at("E"));
    model.F = detail::matrix_from_json(j.at("F"));
    model.basis_state = basis_from_json(j.at("basis_state"));
    model.basis_output = basis_from_json(j.at("basis_output"));
    model.x0 = detail::vector_from_json(j.at("x0"));
    model.x0_estimated = j.at("x0_estimated").get<bool>();
    model.validate();
    return model;
}

inline Nlss2Model nlss2_from_json(const nlohmann::json& j) {
    Nlss2Model model;
    model.lin = linear_from_json(j);
    model.f_net = network_from_json(j.at("f_net"));
    model.g_net = network_from_json(j.at("g_net"));
    model.x0 = detail::vector_from_json(j.at("x0"));
    model.validate();
    return model;
}

inline DecoupledModel decoupled_from_json(const nlohmann::json& j) {
    DecoupledModel model;
    model.lin = linear_from_json(j);
    model.v = detail::matrix_from_json(j.at("V"));
    model.w_x = detail::matrix_from_json(j.at("W_x"));
    model.w_y = detail::matrix_from_json(j.at("W_y"));
    model.coeffs = detail::matrix_from_json(j.at("branch_coefficients"));
    model.degree = j.at("degree").get<int>();
    model.x0 = detail::vector_from_json(j.at("x0"));
    model.x0_estimated = j.at("x0_estimated").get<bool>();
    model.validate();
    return model;
}

template <typename Model>
void save_model(const std::string& path, const Model& model) {
    detail::write_text_file(path, model_to_json(model).dump(2) + "\n");
}

/// CSV columns `t,u,y`; period structure and sample rate ride in a JSON
/// sidecar at <path>.meta.json. A missing sidecar loads as a single period,
/// single realization at unit rate.
inline void write_dataset_csv(const std::string& path, const Dataset& data) {
    data.validate();
    std::ostringstream out;
    out << "t,u,y\n";
    for (Eigen::Index t = 0; t < data.u.size(); ++t)
        out << t << ',' << detail::format_double(data.u[t]) << ','
            << detail::format_double(data.y[t]) << '\n';
    detail::write_text_file(path, out.str());
    const nlohmann::json meta = {{"format_version", kFormatVersion},
                                 {"fs", data.fs},
                                 {"period_length", data.period_length},
                                 {"n_periods", data.n_periods},
                                 {"n_realizations", data.n_realizations}};
    detail::write_text_file(path + ".meta.json", meta.dump(2) + "\n");
}

inline Dataset read_dataset_csv(const std::string& path) {
    std::istringstream in(detail::read_text_file(path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("t,u,y", 0) != 0)
        throw std::runtime_error(path + ": expected header t,u,y");
    std::vector<double> u, y;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        double tv = 0, uv = 0, yv = 0;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &tv, &uv, &yv) != 3)
            throw std::runtime_error(path + ": malformed row: " + line);
        u.push_back(uv);
        y.push_back(yv);
    }
    Dataset data;
    data.u = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
    data.y = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
    data.period_length = static_cast<int>(u.size());
    data.n_periods = 1;
    data.n_realizations = 1;

    std::ifstream meta_in(path + ".meta.json");
    if (meta_in) {
        nlohmann::json meta = nlohmann::json::parse(meta_in);
        data.fs = meta.value("fs", 1.0);
        data.period_length = meta.value("period_length", data.period_length);
        data.n_periods = meta.value("n_periods", 1);
        data.n_realizations = meta.value("n_realizations", 1);
    }
    data.validate();
    return data;
}

inline void write_frf_csv(const std::string& path, const FrfEstimate& frf) {
    frf.validate();
    std::ostringstream out;
    out << "bin,freq_hz,re,im,var_noise,var_total\n";
    for (std::size_t i = 0; i < frf.excited_bins.size(); ++i) {
        const auto idx = static_cast<Eigen::Index>(i);
        out << frf.excited_bins[i] << ',' << detail::format_double(frf.frequency_hz(i)) << ','
            << detail::format_double(frf.response[idx].real()) << ','
            << detail::format_double(frf.response[idx].imag()) << ','
            << (frf.variance_noise_available ? detail::format_double(frf.var_noise[idx]) : "nan")
            << ','
            << (frf.variance_total_available ? detail::format_double(frf.var_total[idx]) : "nan")
            << '\n';
    }
    detail::write_text_file(path, out.str());
}

inline nlohmann::json fit_report_to_json(const FitReport& report) {
    return {{"format_version", kFormatVersion},
            {"iterations", report.iterations},
            {"accepted_steps", report.accepted_steps},
            {"termination", to_string(report.termination)},
            {"initial_cost", report.initial_cost()},
            {"final_cost", report.final_cost()},
            {"rmse", report.rmse},
            {"cost_trace", report.cost_trace},
            {"lambda_trace", report.lambda_trace},
            {"step_trace", report.step_trace}};
}

}  // namespace nlssid
