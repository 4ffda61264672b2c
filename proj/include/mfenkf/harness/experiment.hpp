#pragma once

// Twin-experiment driver: builds models and forests from the declarative
// config, simulates a synthetic truth, runs the forecast/analysis/heuristics
// cycle against noisy observations of that truth, and reports spatio-temporal
// analysis errors.

#include "mfenkf/analysis.hpp"
#include "mfenkf/forecast.hpp"
#include "mfenkf/harness/config.hpp"
#include "mfenkf/io.hpp"
#include "mfenkf/models/lorenz96.hpp"
#include "mfenkf/models/observation.hpp"
#include "mfenkf/models/pod.hpp"
#include "mfenkf/models/qg.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mfenkf {

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t double_bits(double v) {
  std::uint64_t out;
  static_assert(sizeof out == sizeof v);
  std::memcpy(&out, &v, sizeof v);
  return out;
}

}  // namespace detail

// Seed for everything that varies per sweep cell: ensemble draws and
// perturbed observations.
inline std::uint64_t derive_run_seed(std::uint64_t master, Index n, double alpha, int run_id) {
  std::uint64_t h = detail::mix64(master ^ 0x72756E73ull);
  h = detail::mix64(h ^ static_cast<std::uint64_t>(n));
  h = detail::mix64(h ^ detail::double_bits(alpha));
  return detail::mix64(h ^ static_cast<std::uint64_t>(run_id));
}

// Seed for the synthetic truth and its observation noise.  Repetitions get
// fresh realizations; all sweep cells of one repetition share the same truth
// so that filters are compared on identical problem instances.
inline std::uint64_t derive_truth_seed(std::uint64_t master, int run_id) {
  return detail::mix64(detail::mix64(master ^ 0x74727574ull) ^ static_cast<std::uint64_t>(run_id));
}

struct BuiltModel {
  ModelStepFn step;
  Index dim = 0;
};

inline BuiltModel build_model(const ExperimentConfig& cfg, const ModelSpec& spec) {
  if (spec.type == "lorenz96")
    return {lorenz96_model(spec.k, spec.forcing, spec.substeps_per_window), spec.k};
  if (spec.type == "qg") {
    QGConfig qc;
    qc.nx = spec.nx;
    qc.ny = spec.ny;
    qc.re = spec.re;
    qc.ro = spec.ro;
    qc.dt_internal = spec.dt_internal;
    auto solver = std::make_shared<const QGSolver>(qc);
    return {[solver](const Vector& x, double dt) { return solver->step(x, dt); },
            spec.nx * spec.ny};
  }
  if (spec.type == "identity")
    return {[](const Vector& x, double) { return x; }, spec.dim};
  if (spec.type == "pod") {
    const PODBasis b = read_pod_basis(resolve_path(cfg, spec.basis));
    return {pod_model(b, spec.dt_internal), b.rank()};
  }
  throw std::invalid_argument("config: unknown model type '" + spec.type + "'");
}

namespace detail {

inline ModelNode build_node(const ExperimentConfig& cfg, const NodeSpec& spec, ModelIndex index,
                            Index coupled_with) {
  ModelNode node;
  node.index = index;
  const bool is_root = index.path.size() == 1;
  node.space = spec.space.empty()
                   ? (is_root ? std::string("x") : "u" + index.str())
                   : spec.space;
  node.n_control = coupled_with;
  if (is_root) {
    BuiltModel m = build_model(cfg, spec.model);
    node.model = std::move(m.step);
    node.dim = m.dim;
  } else {
    const PODBasis b = read_pod_basis(resolve_path(cfg, spec.model.basis));
    node.model = pod_model(b, spec.model.dt_internal);
    node.dim = b.rank();
    node.theta = pod_theta(b);
    node.phi = pod_phi(b);
    node.alpha = spec.alpha;
    node.n_ancillary = spec.size;
  }
  const int siblings = static_cast<int>(spec.children.size());
  for (int c = 0; c < siblings; ++c) {
    ModelNode kid = build_node(cfg, spec.children[static_cast<std::size_t>(c)],
                               index.child(c + 1), is_root ? node.n_control : node.n_ancillary);
    if (spec.children[static_cast<std::size_t>(c)].gain_fraction > 0.0) {
      GainSpec g;
      g.mode = GainMode::FixedFraction;
      g.fraction = spec.children[static_cast<std::size_t>(c)].gain_fraction;
      kid.gain = g;
    } else {
      kid.gain = fixed_fraction_gain(siblings);
    }
    node.children.push_back(std::move(kid));
  }
  return node;
}

}  // namespace detail

// Materializes a forest for one sweep cell: the swept ensemble size and root
// inflation apply to every tree root; inter-tree transfers are identities.
// When a counter is supplied, every root-model propagation bumps it.
inline ModelForest build_forest(const ExperimentConfig& cfg, const ForestSpec& fs, Index n_members,
                                double alpha, std::shared_ptr<long long> hf_counter = nullptr) {
  ModelForest forest;
  forest.weights = fs.weights;
  for (std::size_t t = 0; t < fs.trees.size(); ++t) {
    const int label = static_cast<int>(t) + 1;
    ModelNode root = detail::build_node(cfg, fs.trees[t], ModelIndex{{label}}, n_members);
    root.alpha = alpha;
    if (hf_counter) {
      ModelStepFn inner = std::move(root.model);
      root.model = [inner, hf_counter](const Vector& x, double dt) {
        ++*hf_counter;
        return inner(x, dt);
      };
    }
    forest.trees.push_back(std::move(root));
  }
  for (std::size_t t = 1; t < forest.trees.size(); ++t)
    if (forest.trees[t].dim != forest.trees[0].dim)
      throw std::invalid_argument("identity transfers require equal root dimensions");
  const int m = forest.tree_count();
  for (int a = 1; a <= m; ++a)
    for (int b = 1; b <= m; ++b)
      if (a != b) forest.transfers[{a, b}] = [](const Vector& v) { return v; };
  return forest;
}

// Spatio-temporal root mean square error over assimilation steps t0..tf
// (1-based indices into the supplied sequences).
inline double rmse(const std::vector<Vector>& analysis_means, const std::vector<Vector>& truth,
                   int t0, int tf) {
  if (t0 < 1 || tf < t0) throw std::invalid_argument("empty assimilation range");
  if (analysis_means.size() < static_cast<std::size_t>(tf) ||
      truth.size() < static_cast<std::size_t>(tf))
    throw std::invalid_argument("sequences do not cover the assimilation range");
  double acc = 0.0;
  Index n = 0;
  for (int i = t0; i <= tf; ++i) {
    const Vector& a = analysis_means[static_cast<std::size_t>(i - 1)];
    const Vector& t = truth[static_cast<std::size_t>(i - 1)];
    if (a.size() != t.size() || (n != 0 && a.size() != n))
      throw std::invalid_argument("state dimension mismatch");
    n = a.size();
    acc += (a - t).squaredNorm();
  }
  return std::sqrt(acc / (static_cast<double>(tf - t0 + 1) * static_cast<double>(n)));
}

struct TruthRealization {
  std::vector<Vector> states;        // states[i]: truth after i windows, i = 0..steps
  std::vector<Vector> observations;  // observations[i-1]: measurement at step i
  double spread = 0.0;               // pooled climatological deviation scale
};

// Simulates the synthetic truth for one repetition: random draw, free spin-up,
// one state per assimilation window, plus noisy gridpoint observations.  The
// pooled deviation of the trajectory around its global mean serves as the
// climatological scale for initial ensemble spread and divergence detection.
inline TruthRealization make_truth(const ExperimentConfig& cfg, int run_id) {
  const BuiltModel nature = build_model(cfg, cfg.nature);
  const std::uint64_t seed = derive_truth_seed(cfg.seed, run_id);
  auto gen = make_stream(seed, Stream::TruthInit, 0);
  Vector x = cfg.init_spread * normal_matrix(gen, nature.dim, 1).col(0);
  for (int w = 0; w < cfg.spinup_windows; ++w) x = nature.step(x, cfg.window);

  TruthRealization out;
  out.states.reserve(static_cast<std::size_t>(cfg.steps) + 1);
  out.states.push_back(std::move(x));
  for (int i = 1; i <= cfg.steps; ++i)
    out.states.push_back(nature.step(out.states.back(), cfg.window));

  double mean = 0.0;
  long long count = 0;
  for (const Vector& s : out.states) {
    mean += s.sum();
    count += s.size();
  }
  mean /= static_cast<double>(count);
  double dev = 0.0;
  for (const Vector& s : out.states) dev += (s.array() - mean).matrix().squaredNorm();
  out.spread = std::sqrt(dev / static_cast<double>(count));

  const StateMap h = observe_gridpoints(nature.dim, cfg.obs_count);
  const double noise_std = std::sqrt(cfg.obs_variance);
  out.observations.reserve(static_cast<std::size_t>(cfg.steps));
  for (int i = 1; i <= cfg.steps; ++i) {
    auto ngen = make_stream(seed, Stream::ObsNoise, static_cast<std::uint64_t>(i));
    out.observations.push_back(h(out.states[static_cast<std::size_t>(i)]) +
                               noise_std * normal_matrix(ngen, cfg.obs_count, 1).col(0));
  }
  return out;
}

struct RunResult {
  std::vector<double> step_rmse;  // one entry per completed analysis step
  double aggregate = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
  Index ensemble_size = 0;
  double inflation = 1.0;
  int run_id = 0;
  std::string forest_id;
  double wall_seconds = 0.0;
  long long hf_model_runs = 0;
  int steps_completed = 0;
};

namespace detail {

// Initial surrogate ensembles: controls are projections of the ensemble they
// pair with; ancillaries are fresh truth-centred climatological draws pushed
// down the projection chain from the full space.
inline void init_children(const ModelNode& node, const Ensemble& subtree_principal,
                          const Vector& truth0, double spread, std::uint64_t run_seed,
                          const StateMap& chain, std::uint64_t& ordinal,
                          std::vector<NodeState>& out) {
  out.resize(node.children.size());
  for (std::size_t c = 0; c < node.children.size(); ++c) {
    const ModelNode& kid = node.children[c];
    StateMap to_child =
        chain ? StateMap([chain, th = kid.theta](const Vector& v) { return th(chain(v)); })
              : kid.theta;
    out[c].control = map_members(subtree_principal, kid.theta, kid.space);
    auto gen = make_stream(run_seed, Stream::AncillaryInit, ++ordinal);
    Matrix draws = spread * normal_matrix(gen, truth0.size(), kid.n_ancillary);
    draws.colwise() += truth0;
    Matrix anc(kid.dim, kid.n_ancillary);
    for (Index j = 0; j < kid.n_ancillary; ++j) anc.col(j) = to_child(draws.col(j));
    out[c].ancillary = Ensemble{std::move(anc), kid.space};
    init_children(kid, out[c].ancillary, truth0, spread, run_seed, to_child, ordinal,
                  out[c].children);
  }
}

}  // namespace detail

// One repetition of one sweep cell against a precomputed truth realization.
// Model blow-ups and error growth past 1000 climatological spreads flag the
// result as diverged instead of throwing.
inline RunResult run_twin_experiment(const ExperimentConfig& cfg, std::size_t forest_index,
                                     Index n_members, double alpha, int run_id,
                                     const TruthRealization& truth) {
  const auto t_start = std::chrono::steady_clock::now();
  const ForestSpec& fs = cfg.forests.at(forest_index);

  RunResult result;
  result.ensemble_size = n_members;
  result.inflation = alpha;
  result.run_id = run_id;
  result.forest_id = fs.id;

  auto hf_counter = std::make_shared<long long>(0);
  ModelForest forest = build_forest(cfg, fs, n_members, alpha, hf_counter);
  const Index dim = forest.trees[0].dim;
  if (truth.states.at(0).size() != dim)
    throw std::invalid_argument("nature and filter state dimensions disagree");

  const std::uint64_t run_seed = derive_run_seed(cfg.seed, n_members, alpha, run_id);
  const double spread = cfg.ensemble_spread * truth.spread;

  ForestState state;
  state.trees.resize(forest.trees.size());
  std::uint64_t ordinal = 0;
  for (std::size_t t = 0; t < forest.trees.size(); ++t) {
    const ModelNode& root = forest.trees[t];
    auto gen = make_stream(run_seed, Stream::EnsembleInit, static_cast<std::uint64_t>(t + 1));
    Matrix members = spread * normal_matrix(gen, dim, n_members);
    members.colwise() += truth.states[0];
    state.trees[t].principal = Ensemble{std::move(members), root.space};
    detail::init_children(root, state.trees[t].principal, truth.states[0], spread, run_seed,
                          StateMap{}, ordinal, state.trees[t].children);
    initialize_tree_state(root, state.trees[t]);
  }

  ObservationSpec ospec(observe_gridpoints(dim, cfg.obs_count),
                        cfg.obs_variance * Matrix::Identity(cfg.obs_count, cfg.obs_count),
                        run_seed, 0);
  const double threshold = 1e3 * truth.spread;
  try {
    for (int i = 1; i <= cfg.steps; ++i) {
      propagate_forest(forest, state, cfg.window);
      ospec.step = i;
      forest_analysis(forest, state, truth.observations[static_cast<std::size_t>(i - 1)], ospec);
      apply_heuristics(forest, state);
      const Vector mean = ensemble_mean(state.trees[0].total_variate);
      const double err =
          std::sqrt((mean - truth.states[static_cast<std::size_t>(i)]).squaredNorm() /
                    static_cast<double>(dim));
      result.step_rmse.push_back(err);
      result.steps_completed = i;
      if (!std::isfinite(err) || err > threshold) {
        result.diverged = true;
        break;
      }
    }
  } catch (const std::runtime_error&) {
    result.diverged = true;
  }
  result.hf_model_runs = *hf_counter;

  if (!result.diverged) {
    double acc = 0.0;
    for (int i = cfg.t0; i <= cfg.tf; ++i) {
      const double r = result.step_rmse[static_cast<std::size_t>(i - 1)];
      acc += r * r;
    }
    result.aggregate = std::sqrt(acc / static_cast<double>(cfg.tf - cfg.t0 + 1));
  }
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

inline RunResult run_twin_experiment(const ExperimentConfig& cfg, std::size_t forest_index,
                                     Index n_members, double alpha, int run_id) {
  return run_twin_experiment(cfg, forest_index, n_members, alpha, run_id,
                             make_truth(cfg, run_id));
}

}  // namespace mfenkf
