// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>

#include "deki/common.hpp"
#include "deki/schemes.hpp"

namespace deki {

enum class ProblemKind { kTransport, kDarcy, kSyntheticLinear };
enum class SchemeKind { kEki, kNaiveDeki, kDeki, kLeki };

inline std::string to_string(ProblemKind p) {
  switch (p) {
    case ProblemKind::kTransport: return "transport";
    case ProblemKind::kDarcy: return "darcy";
    case ProblemKind::kSyntheticLinear: return "synthetic-linear";
  }
  return "?";
}

inline std::string to_string(SchemeKind s) {
  switch (s) {
    case SchemeKind::kEki: return "eki";
    case SchemeKind::kNaiveDeki: return "naive-deki";
    case SchemeKind::kDeki: return "deki";
    case SchemeKind::kLeki: return "leki";
  }
  return "?";
}

/// Flat experiment description; one key per field, unknown keys rejected.
struct ExperimentConfig {
  int schema_version = 1;
  ProblemKind problem = ProblemKind::kTransport;
  SchemeKind scheme = SchemeKind::kDeki;

  // problem geometry
  int d_u = 120;              // transport grid / synthetic parameter count
  int d_y = 60;               // observations (transport / synthetic)
  double speed = 0.5;         // transport speed a
  double final_time = 1.0;    // transport horizon T
  double gamma = 0.1;         // regularization strength
  double sigma_noise = 1e-2;  // observation noise in the data
  int grid_n = 32;            // Darcy grid
  double kernel_sigma = 0.1;  // Darcy KL kernel
  double length_x = 0.1;
  double length_y = 0.1;
  double kl_eps = 1e-3;

  // scheme parameters
  int ensemble_size = 20;   // J
  double keep_rate = 0.5;   // lambda
  double htilde = 2.5;      // reference mean step
  double step_ratio = 0.1;  // h_n / h~_n
  double eps0 = 1e-12;
  double mg_factor = 10.0;
  double init_scale = 0.1;          // ensemble init N(0, scale^2 I)
  std::string mean_step_norm = "dropout";  // dropout | ensemble
  double r_loc = 1.5;               // LEKI localization radius
  bool leki_know_speed = true;
  double leki_sigma = 1e-3;

  // experiment control
  int n_steps = 100;
  int n_rep = 100;
  std::uint64_t seed = 1;
  bool randomize_problem = false;  // re-draw speed/data per repeat
  bool record_covariances = false;

  StepSchedule schedule() const {
    StepSchedule s;
    s.mu = htilde;
    s.theta = step_ratio * htilde;
    s.eps0 = eps0;
    s.mean_norm = mean_step_norm == "ensemble" ? MeanStepNorm::kEnsembleCovariance
                                               : MeanStepNorm::kDropoutCovariance;
    return s;
  }

  void validate() const {
    require(schema_version == 1, "config: unsupported schema_version");
    require(d_u >= 1 && d_y >= 1 && grid_n >= 4, "config: positive dimensions");
    require(ensemble_size >= 2, "config: J >= 2");
    require(keep_rate > 0.0 && keep_rate < 1.0, "config: lambda in (0,1)");
    require(htilde > 0.0 && step_ratio > 0.0, "config: positive steps");
    require(n_steps >= 0 && n_rep >= 1, "config: step/repeat counts");
    require(gamma > 0.0, "config: gamma > 0");
    require(sigma_noise >= 0.0 && leki_sigma >= 0.0, "config: noise >= 0");
    require(kl_eps > 0.0 && kl_eps <= 1.0, "config: kl_eps in (0,1]");
    require(mean_step_norm == "dropout" || mean_step_norm == "ensemble",
            "config: mean_step_norm is dropout or ensemble");
    require(init_scale >= 0.0, "config: init_scale >= 0");
    require(r_loc > 0.0, "config: r_loc > 0");
  }
};

namespace detail {

template <typename T>
T parse_scalar(const std::string& value, const std::string& key);

template <>
inline double parse_scalar<double>(const std::string& v, const std::string& key) {
  std::size_t pos = 0;
  const double x = std::stod(v, &pos);
  require(pos == v.size(), "config: malformed number for " + key);
  return x;
}

template <>
inline int parse_scalar<int>(const std::string& v, const std::string& key) {
  std::size_t pos = 0;
  const long x = std::stol(v, &pos);
  require(pos == v.size(), "config: malformed integer for " + key);
  return static_cast<int>(x);
}

template <>
inline std::uint64_t parse_scalar<std::uint64_t>(const std::string& v,
                                                 const std::string& key) {
  std::size_t pos = 0;
  const unsigned long long x = std::stoull(v, &pos);
  require(pos == v.size(), "config: malformed integer for " + key);
  return static_cast<std::uint64_t>(x);
}

template <>
inline bool parse_scalar<bool>(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidArgument("config: malformed bool for " + key);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace detail

/// Applies "key = value" to a config; throws on unknown keys.
inline void config_set(ExperimentConfig& c, const std::string& key,
                       const std::string& value) {
  using detail::parse_scalar;
  if (key == "schema_version") c.schema_version = parse_scalar<int>(value, key);
  else if (key == "problem") {
    if (value == "transport") c.problem = ProblemKind::kTransport;
    else if (value == "darcy") c.problem = ProblemKind::kDarcy;
    else if (value == "synthetic-linear") c.problem = ProblemKind::kSyntheticLinear;
    else throw InvalidArgument("config: unknown problem " + value);
  } else if (key == "scheme") {
    if (value == "eki") c.scheme = SchemeKind::kEki;
    else if (value == "naive-deki") c.scheme = SchemeKind::kNaiveDeki;
    else if (value == "deki") c.scheme = SchemeKind::kDeki;
    else if (value == "leki") c.scheme = SchemeKind::kLeki;
    else throw InvalidArgument("config: unknown scheme " + value);
  }
  else if (key == "d_u") c.d_u = parse_scalar<int>(value, key);
  else if (key == "d_y") c.d_y = parse_scalar<int>(value, key);
  else if (key == "speed") c.speed = parse_scalar<double>(value, key);
  else if (key == "final_time") c.final_time = parse_scalar<double>(value, key);
  else if (key == "gamma") c.gamma = parse_scalar<double>(value, key);
  else if (key == "sigma_noise") c.sigma_noise = parse_scalar<double>(value, key);
  else if (key == "grid_n") c.grid_n = parse_scalar<int>(value, key);
  else if (key == "kernel_sigma") c.kernel_sigma = parse_scalar<double>(value, key);
  else if (key == "length_x") c.length_x = parse_scalar<double>(value, key);
  else if (key == "length_y") c.length_y = parse_scalar<double>(value, key);
  else if (key == "kl_eps") c.kl_eps = parse_scalar<double>(value, key);
  else if (key == "ensemble_size") c.ensemble_size = parse_scalar<int>(value, key);
  else if (key == "keep_rate") c.keep_rate = parse_scalar<double>(value, key);
  else if (key == "htilde") c.htilde = parse_scalar<double>(value, key);
  else if (key == "step_ratio") c.step_ratio = parse_scalar<double>(value, key);
  else if (key == "eps0") c.eps0 = parse_scalar<double>(value, key);
  else if (key == "mg_factor") c.mg_factor = parse_scalar<double>(value, key);
  else if (key == "init_scale") c.init_scale = parse_scalar<double>(value, key);
  else if (key == "mean_step_norm") c.mean_step_norm = value;
  else if (key == "r_loc") c.r_loc = parse_scalar<double>(value, key);
  else if (key == "leki_know_speed") c.leki_know_speed = parse_scalar<bool>(value, key);
  else if (key == "leki_sigma") c.leki_sigma = parse_scalar<double>(value, key);
  else if (key == "n_steps") c.n_steps = parse_scalar<int>(value, key);
  else if (key == "n_rep") c.n_rep = parse_scalar<int>(value, key);
  else if (key == "seed") c.seed = parse_scalar<std::uint64_t>(value, key);
  else if (key == "randomize_problem") c.randomize_problem = parse_scalar<bool>(value, key);
  else if (key == "record_covariances")
    c.record_covariances = parse_scalar<bool>(value, key);
  else throw InvalidArgument("config: unknown key " + key);
}

/// Parses the flat "key = value" format (# starts a comment line).
inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  bool saw_version = false;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    require(eq != std::string::npos, "config: expected key = value, got: " + t);
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key == "schema_version") saw_version = true;
    config_set(c, key, value);
  }
  require(saw_version, "config: schema_version required");
  c.validate();
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

/// Canonical serialization; parse(serialize(c)) reproduces c.
inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "schema_version = " << c.schema_version << "\n";
  out << "problem = " << to_string(c.problem) << "\n";
  out << "scheme = " << to_string(c.scheme) << "\n";
  out << "d_u = " << c.d_u << "\n";
  out << "d_y = " << c.d_y << "\n";
  out << "speed = " << c.speed << "\n";
  out << "final_time = " << c.final_time << "\n";
  out << "gamma = " << c.gamma << "\n";
  out << "sigma_noise = " << c.sigma_noise << "\n";
  out << "grid_n = " << c.grid_n << "\n";
  out << "kernel_sigma = " << c.kernel_sigma << "\n";
  out << "length_x = " << c.length_x << "\n";
  out << "length_y = " << c.length_y << "\n";
  out << "kl_eps = " << c.kl_eps << "\n";
  out << "ensemble_size = " << c.ensemble_size << "\n";
  out << "keep_rate = " << c.keep_rate << "\n";
  out << "htilde = " << c.htilde << "\n";
  out << "step_ratio = " << c.step_ratio << "\n";
  out << "eps0 = " << c.eps0 << "\n";
  out << "mg_factor = " << c.mg_factor << "\n";
  out << "init_scale = " << c.init_scale << "\n";
  out << "mean_step_norm = " << c.mean_step_norm << "\n";
  out << "r_loc = " << c.r_loc << "\n";
  out << "leki_know_speed = " << (c.leki_know_speed ? "true" : "false") << "\n";
  out << "leki_sigma = " << c.leki_sigma << "\n";
  out << "n_steps = " << c.n_steps << "\n";
  out << "n_rep = " << c.n_rep << "\n";
  out << "seed = " << c.seed << "\n";
  out << "randomize_problem = " << (c.randomize_problem ? "true" : "false") << "\n";
  out << "record_covariances = " << (c.record_covariances ? "true" : "false") << "\n";
  return out.str();
}

}  // namespace deki
