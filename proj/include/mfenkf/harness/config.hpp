#pragma once

// Declarative description of a twin experiment, loaded from a JSON file.  The
// schema is documented in the repository README; the short version:
//
//   seed, runs, output            master seed, repetition count, CSV path
//   nature                        model spec + initial-condition protocol
//   observations                  count, variance, window
//   schedule                      steps, spinup, t0, tf
//   sweep                         ensemble_sizes list, inflations list or
//                                 {min, max, count} range
//   forests                       list of forest topologies to compare
//
// Model specs: {"type": "lorenz96", k, forcing, substeps_per_window},
// {"type": "qg", nx, ny, re, ro, dt_internal}, {"type": "identity", dim},
// and, for surrogate children only, {"type": "pod", basis, dt_internal} where
// `basis` names a reduced-basis file (relative paths resolve against the
// config file's directory).

#include "mfenkf/ensemble.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfenkf {

struct ModelSpec {
  std::string type;

  // lorenz96
  Index k = 40;
  double forcing = 8.0;
  int substeps_per_window = 5;

  // qg
  Index nx = 63;
  Index ny = 127;
  double re = 450.0;
  double ro = 0.0036;

  // qg and pod
  double dt_internal = 0.0109 / 48.0;

  // identity
  Index dim = 1;

  // pod
  std::string basis;
};

struct NodeSpec {
  ModelSpec model;
  std::string space;
  Index size = 12;              // ancillary members; ignored on roots
  double alpha = 1.0;           // ignored on roots (the sweep supplies it)
  double gain_fraction = 0.0;   // 0 selects the equal split 1/(M+1)
  std::vector<NodeSpec> children;
};

struct ForestSpec {
  std::string id;
  std::vector<double> weights;
  std::vector<NodeSpec> trees;  // inter-tree transfers are identity maps
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int runs = 1;
  std::string output;

  ModelSpec nature;
  double init_spread = 1.0;      // scale of the pre-spin-up random draw
  int spinup_windows = 0;        // free-run windows before the truth starts

  Index obs_count = 1;
  double obs_variance = 1.0;
  double window = 0.0;

  int steps = 0;
  int spinup = 0;  // assimilation steps excluded from the aggregate error
  int t0 = 1;
  int tf = 1;

  std::vector<Index> ensemble_sizes;
  std::vector<double> inflations;
  double ensemble_spread = 1.0;  // initial spread in climatological units

  std::vector<ForestSpec> forests;

  std::string base_dir;  // directory of the config file
};

namespace detail {

[[noreturn]] inline void config_error(const std::string& what) {
  throw std::invalid_argument("config: " + what);
}

template <class T>
T field(const nlohmann::json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    config_error("field '" + key + "' has the wrong type");
  }
}

template <class T>
T required_field(const nlohmann::json& j, const std::string& key) {
  if (!j.contains(key)) config_error("missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    config_error("field '" + key + "' has the wrong type");
  }
}

inline ModelSpec parse_model(const nlohmann::json& j) {
  if (!j.is_object()) config_error("model spec must be an object");
  ModelSpec m;
  m.type = required_field<std::string>(j, "type");
  if (m.type == "lorenz96") {
    m.k = field<Index>(j, "k", m.k);
    m.forcing = field<double>(j, "forcing", m.forcing);
    m.substeps_per_window = field<int>(j, "substeps_per_window", m.substeps_per_window);
  } else if (m.type == "qg") {
    m.nx = field<Index>(j, "nx", m.nx);
    m.ny = field<Index>(j, "ny", m.ny);
    m.re = field<double>(j, "re", m.re);
    m.ro = field<double>(j, "ro", m.ro);
    m.dt_internal = field<double>(j, "dt_internal", m.dt_internal);
  } else if (m.type == "identity") {
    m.dim = field<Index>(j, "dim", m.dim);
  } else if (m.type == "pod") {
    m.basis = required_field<std::string>(j, "basis");
    m.dt_internal = field<double>(j, "dt_internal", m.dt_internal);
  } else {
    config_error("unknown model type '" + m.type + "'");
  }
  return m;
}

inline NodeSpec parse_node(const nlohmann::json& j, bool is_root) {
  NodeSpec n;
  if (j.contains("model")) {
    n.model = parse_model(j.at("model"));
  } else if (j.contains("basis")) {
    // Shorthand for surrogate children: the basis supplies both the operators
    // and the reduced dynamics.
    n.model.type = "pod";
    n.model.basis = required_field<std::string>(j, "basis");
    n.model.dt_internal = field<double>(j, "dt_internal", n.model.dt_internal);
  } else {
    config_error("node needs a 'model' (or a 'basis' shorthand for surrogates)");
  }
  n.space = field<std::string>(j, "space", std::string{});
  n.size = field<Index>(j, "size", n.size);
  n.alpha = field<double>(j, "alpha", n.alpha);
  n.gain_fraction = field<double>(j, "gain_fraction", n.gain_fraction);
  if (j.contains("children")) {
    const auto& kids = j.at("children");
    if (!kids.is_array()) config_error("'children' must be an array");
    for (const auto& c : kids) n.children.push_back(parse_node(c, false));
  }
  if (is_root && n.model.type == "pod") config_error("a tree root cannot be a 'pod' surrogate");
  return n;
}

inline std::vector<double> parse_inflations(const nlohmann::json& j) {
  if (j.is_array()) {
    std::vector<double> v;
    for (const auto& x : j) {
      if (!x.is_number()) config_error("'inflations' entries must be numbers");
      v.push_back(x.get<double>());
    }
    return v;
  }
  if (j.is_object()) {
    const double lo = required_field<double>(j, "min");
    const double hi = required_field<double>(j, "max");
    const int count = field<int>(j, "count", 11);
    if (count < 1) config_error("'inflations.count' must be positive");
    if (!(hi >= lo)) config_error("'inflations' range must satisfy max >= min");
    std::vector<double> v(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
      v[static_cast<std::size_t>(i)] =
          count == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
    return v;
  }
  config_error("'inflations' must be a list or a {min, max, count} range");
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) detail::config_error("top level must be an object");
  ExperimentConfig cfg;
  cfg.seed = detail::field<std::uint64_t>(j, "seed", 0);
  cfg.runs = detail::field<int>(j, "runs", 1);
  cfg.output = detail::field<std::string>(j, "output", std::string{});

  const auto& nature = j.contains("nature") ? j.at("nature") : nlohmann::json::object();
  if (!nature.contains("model")) detail::config_error("missing field 'nature.model'");
  cfg.nature = detail::parse_model(nature.at("model"));
  cfg.init_spread = detail::field<double>(nature, "init_spread", cfg.init_spread);
  cfg.spinup_windows = detail::field<int>(nature, "spinup_windows", cfg.spinup_windows);

  const auto& obs = j.contains("observations") ? j.at("observations") : nlohmann::json::object();
  cfg.obs_count = detail::field<Index>(obs, "count", cfg.obs_count);
  cfg.obs_variance = detail::field<double>(obs, "variance", cfg.obs_variance);
  cfg.window = detail::required_field<double>(obs, "window");

  const auto& sched = j.contains("schedule") ? j.at("schedule") : nlohmann::json::object();
  cfg.steps = detail::required_field<int>(sched, "steps");
  cfg.spinup = detail::field<int>(sched, "spinup", cfg.spinup);
  cfg.t0 = detail::field<int>(sched, "t0", cfg.spinup + 1);
  cfg.tf = detail::field<int>(sched, "tf", cfg.steps);

  const auto& sweep = j.contains("sweep") ? j.at("sweep") : nlohmann::json::object();
  if (!sweep.contains("ensemble_sizes")) detail::config_error("missing field 'sweep.ensemble_sizes'");
  for (const auto& x : sweep.at("ensemble_sizes")) {
    if (!x.is_number_integer()) detail::config_error("'ensemble_sizes' entries must be integers");
    cfg.ensemble_sizes.push_back(x.get<Index>());
  }
  cfg.inflations = sweep.contains("inflations") ? detail::parse_inflations(sweep.at("inflations"))
                                                : std::vector<double>{1.0};
  cfg.ensemble_spread = detail::field<double>(j, "ensemble_spread", cfg.ensemble_spread);

  if (!j.contains("forests")) detail::config_error("missing field 'forests'");
  const auto& forests = j.at("forests");
  if (!forests.is_array()) detail::config_error("'forests' must be an array");
  for (const auto& f : forests) {
    ForestSpec fs;
    fs.id = detail::required_field<std::string>(f, "id");
    if (!f.contains("trees") || !f.at("trees").is_array())
      detail::config_error("forest '" + fs.id + "' needs a 'trees' array");
    for (const auto& t : f.at("trees")) fs.trees.push_back(detail::parse_node(t, true));
    if (f.contains("weights")) {
      for (const auto& w : f.at("weights")) fs.weights.push_back(w.get<double>());
    } else {
      fs.weights.assign(fs.trees.size(), 1.0 / static_cast<double>(fs.trees.size()));
    }
    cfg.forests.push_back(std::move(fs));
  }
  return cfg;
}

namespace detail {

inline void validate_node(const NodeSpec& n, bool is_root, const std::string& where) {
  if (!is_root) {
    if (n.size < 2) config_error(where + ": surrogate ensembles need at least two members");
    if (!(n.alpha >= 1.0)) config_error(where + ": inflation must be at least one");
    if (n.gain_fraction < 0.0 || n.gain_fraction >= 1.0)
      config_error(where + ": gain_fraction must lie in [0, 1)");
    if (n.model.type != "pod") config_error(where + ": surrogate nodes must use a 'pod' model");
  }
  int c = 1;
  for (const NodeSpec& kid : n.children) {
    validate_node(kid, false, where + "." + std::to_string(c));
    ++c;
  }
}

}  // namespace detail

inline void validate_config(const ExperimentConfig& cfg) {
  using detail::config_error;
  if (cfg.runs < 1) config_error("'runs' must be at least one");
  if (cfg.steps < 1) config_error("'steps' must be at least one");
  if (!(cfg.spinup < cfg.t0)) config_error("schedule must satisfy spinup < t0");
  if (!(cfg.t0 <= cfg.tf)) config_error("schedule must satisfy t0 <= tf");
  if (cfg.tf > cfg.steps) config_error("schedule must satisfy tf <= steps");
  if (!(cfg.window > 0.0)) config_error("'observations.window' must be positive");
  if (!(cfg.obs_variance > 0.0)) config_error("'observations.variance' must be positive");
  if (cfg.obs_count < 1) config_error("'observations.count' must be positive");
  if (cfg.ensemble_sizes.empty()) config_error("'sweep.ensemble_sizes' must be non-empty");
  for (Index n : cfg.ensemble_sizes)
    if (n < 2) config_error("every swept ensemble size must be at least two");
  if (cfg.inflations.empty()) config_error("'sweep.inflations' must be non-empty");
  for (double a : cfg.inflations)
    if (!(a >= 1.0)) config_error("every swept inflation must be at least one");
  if (!(cfg.init_spread > 0.0)) config_error("'nature.init_spread' must be positive");
  if (cfg.spinup_windows < 0) config_error("'nature.spinup_windows' must be nonnegative");
  if (!(cfg.ensemble_spread > 0.0)) config_error("'ensemble_spread' must be positive");
  if (cfg.nature.type == "pod") config_error("the nature model cannot be a 'pod' surrogate");

  if (cfg.forests.empty()) config_error("'forests' must be non-empty");
  std::set<std::string> ids;
  for (const ForestSpec& f : cfg.forests) {
    if (f.id.empty()) config_error("every forest needs a non-empty 'id'");
    if (!ids.insert(f.id).second) config_error("duplicate forest id '" + f.id + "'");
    if (f.trees.empty()) config_error("forest '" + f.id + "' has no trees");
    if (f.weights.size() != f.trees.size())
      config_error("forest '" + f.id + "': weights and trees must have equal length");
    int t = 1;
    for (const NodeSpec& tree : f.trees) {
      detail::validate_node(tree, true, f.id + ".tree" + std::to_string(t));
      ++t;
    }
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: " + std::string(e.what()));
  }
  ExperimentConfig cfg = parse_config(j);
  const auto slash = path.find_last_of('/');
  cfg.base_dir = slash == std::string::npos ? std::string{} : path.substr(0, slash + 1);
  validate_config(cfg);
  return cfg;
}

// Resolves a (possibly relative) resource path against the config location.
inline std::string resolve_path(const ExperimentConfig& cfg, const std::string& path) {
  if (path.empty() || path.front() == '/') return path;
  return cfg.base_dir + path;
}

}  // namespace mfenkf
