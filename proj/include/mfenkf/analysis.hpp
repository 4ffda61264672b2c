#pragma once

// Perturbed-observations analysis: the classical stochastic EnKF update, its
// multifidelity variant over a model tree, the forest variant that merges
// per-tree statistics through transfer operators and swap ensembles, and the
// post-analysis consistency heuristics (recentering, inflation, control
// rebuild).
//
// Every gain is assembled from background statistics before any ensemble is
// touched, so the update order cannot leak analysis information into another
// level's gain.  Within a tree all levels share one perturbed-observation
// ensemble per distinct ensemble size; distinct trees draw independently.

#include "mfenkf/forecast.hpp"
#include "mfenkf/numerics.hpp"
#include "mfenkf/rng.hpp"

#include <Eigen/Cholesky>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mfenkf {

// Observation model: member-wise operator into observation space, error
// covariance, and the stream perturbed-observation ensembles are drawn from.
struct ObservationSpec {
  StateMap op;     // empty means identity
  Matrix obs_cov;  // symmetric positive definite
  std::uint64_t seed = 0;
  long long step = 0;  // assimilation cycle index, advanced by the caller
  Matrix noise_chol;   // cached lower Cholesky factor of obs_cov

  ObservationSpec(StateMap h, Matrix r, std::uint64_t seed_in = 0, long long step_in = 0)
      : op(std::move(h)), obs_cov(std::move(r)), seed(seed_in), step(step_in) {
    if (obs_cov.rows() == 0 || obs_cov.rows() != obs_cov.cols())
      throw std::invalid_argument("observation covariance must be square");
    const double scale = obs_cov.cwiseAbs().maxCoeff();
    if (!obs_cov.allFinite() ||
        (obs_cov - obs_cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw std::invalid_argument("observation covariance must be symmetric positive definite");
    Eigen::LLT<Matrix> llt(obs_cov);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("observation covariance must be symmetric positive definite");
    noise_chol = llt.matrixL();
  }

  Index obs_dim() const { return obs_cov.rows(); }
};

struct KalmanGain {
  Matrix matrix;     // state dimension x observation dimension
  ModelIndex level;  // node whose ensembles this gain updates
};

struct AnalysisReport {
  std::vector<KalmanGain> gains;
  bool used_ridge = false;
  std::vector<std::string> warnings;
};

namespace detail {

// Perturbation draws are a pure function of (step, tree, ensemble size), so
// levels of one tree that share a size share the ensemble bitwise and reruns
// are reproducible regardless of update order.  Valid for steps below 2^31
// and ensemble sizes below 2^24.
inline std::uint64_t perturb_key(long long step, int tree_label, Index n) {
  return (static_cast<std::uint64_t>(step) << 32) ^
         (static_cast<std::uint64_t>(tree_label) << 24) ^ static_cast<std::uint64_t>(n);
}

}  // namespace detail

inline Ensemble perturb_observations(const Vector& y, const ObservationSpec& spec, Index n,
                                     int tree_label = 1) {
  if (y.size() != spec.obs_dim()) throw std::invalid_argument("observation dimension mismatch");
  if (n < 2)
    throw std::invalid_argument("perturbed-observation ensemble needs at least two members");
  auto gen =
      make_stream(spec.seed, Stream::ObsPerturb, detail::perturb_key(spec.step, tree_label, n));
  const Matrix noise = spec.noise_chol * normal_matrix(gen, spec.obs_dim(), n);
  return Ensemble{noise.colwise() + y, "obs"};
}

namespace detail {

inline StateMap compose(const StateMap& outer, const StateMap& inner) {
  if (!outer) return inner;
  if (!inner) return outer;
  return [outer, inner](const Vector& v) { return outer(inner(v)); };
}

inline Ensemble observed(const Ensemble& e, const StateMap& h, Index obs_dim) {
  Ensemble out = mapped(h, e, "obs");
  if (out.dim() != obs_dim)
    throw std::invalid_argument("observation operator returned wrong dimension");
  return out;
}

// Scalar weight of a node's correction term in the analysis-time covariance
// expansions.  Matrix-valued gains only shape the total-variate ensemble
// itself; the observed-side expansion has no matrix counterpart, so those
// nodes fall back to the equal-split fraction here.
inline double scalar_weight(const GainSpec& g, std::size_t sibling_count) {
  if (g.mode == GainMode::FixedFraction && g.fraction) return *g.fraction;
  return 1.0 / (static_cast<double>(sibling_count) + 1.0);
}

inline Matrix kalman_solve(const Matrix& c_zh, const Matrix& c_hh, const ObservationSpec& spec,
                           const ModelIndex& level, AnalysisReport* report) {
  const Matrix a = c_hh + spec.obs_cov;
  SpdSolveReport srep;
  const Matrix k = solve_spd(a, Matrix(c_zh.transpose()), &srep).transpose();
  if (!k.allFinite())
    throw std::runtime_error("Kalman gain has non-finite entries (node " + level.str() + ")");
  if (report) {
    if (srep.used_ridge) {
      report->used_ridge = true;
      report->warnings.push_back("innovation covariance regularized (node " + level.str() + ")");
    }
    report->gains.push_back(KalmanGain{k, level});
  }
  return k;
}

// One deferred constituent update; innovations are observed background
// ensembles, applied only once every gain exists.
struct PendingUpdate {
  Ensemble* target = nullptr;
  Matrix gain;
  Ensemble obs;
  int tree_label = 1;
};

inline void apply_updates(std::vector<PendingUpdate>& plan, const Vector& y,
                          const ObservationSpec& spec) {
  for (PendingUpdate& u : plan) {
    const Ensemble ey = perturb_observations(y, spec, u.target->size(), u.tree_label);
    u.target->members -= u.gain * (u.obs.members - ey.members);
  }
}

// Per-child pieces shared between the full-space and reduced-space
// total-variate statistics of one level.
struct ChildTerms {
  double s = 0.5;
  Ensemble vhat;   // phi(control) in the parent space
  Ensemble v;      // phi(ancillary) in the parent space
  Ensemble hvhat;  // observed control, i.e. the child-level operator on the control
  Ensemble hv;     // observed ancillary
};

inline std::vector<ChildTerms> make_child_terms(const ModelNode& node,
                                                const std::vector<NodeState>& kids,
                                                const StateMap& h_level, Index obs_dim) {
  if (kids.size() != node.children.size()) throw std::logic_error("tree state shape mismatch");
  std::vector<ChildTerms> out;
  out.reserve(kids.size());
  for (std::size_t c = 0; c < kids.size(); ++c) {
    const ModelNode& cn = node.children[c];
    ChildTerms t;
    t.s = scalar_weight(cn.gain, node.children.size());
    t.vhat = mapped(cn.phi, kids[c].control, node.space);
    t.v = mapped(cn.phi, kids[c].ancillary, node.space);
    t.hvhat = observed(t.vhat, h_level, obs_dim);
    t.hv = observed(t.v, h_level, obs_dim);
    out.push_back(std::move(t));
  }
  return out;
}

// Gain for a subtree's own level.  The coupled part of the expansion is kept
// as the exact residual ensemble P - sum_c s_c phi(control_c), which equals
// the term-by-term bilinear expansion including the control cross terms; the
// ancillaries are independent of it and of each other, so they contribute
// their own s^2 blocks.
inline Matrix level_gain(const ModelNode& node, const Ensemble& principal, const Ensemble& hp,
                         const std::vector<ChildTerms>& terms, const ObservationSpec& spec,
                         AnalysisReport* report) {
  Matrix zc = principal.members;
  Matrix hzc = hp.members;
  for (const ChildTerms& t : terms) {
    zc -= t.s * t.vhat.members;
    hzc -= t.s * t.hvhat.members;
  }
  const Ensemble zce{std::move(zc), principal.space};
  const Ensemble hzce{std::move(hzc), "obs"};
  Matrix c_zh = cross_cov(zce, hzce);
  Matrix c_hh = cross_cov(hzce);
  for (const ChildTerms& t : terms) {
    c_zh += (t.s * t.s) * cross_cov(t.v, t.hv);
    c_hh += (t.s * t.s) * cross_cov(t.hv);
  }
  return kalman_solve(c_zh, c_hh, spec, node.index, report);
}

// Gains and deferred updates for every child level of a subtree; recursion
// treats each ancillary as its subtree's principal.  The reduced-space
// statistics use the child's own triple (theta(P), control, ancillary)
// observed through the recursively composed operator.
inline void plan_children(const ModelNode& node, const Ensemble& principal,
                          std::vector<NodeState>& kids, const std::vector<ChildTerms>& terms,
                          const StateMap& h_level, const ObservationSpec& spec, int tree_label,
                          std::vector<PendingUpdate>& plan, AnalysisReport* report) {
  const Index p = spec.obs_dim();
  for (std::size_t c = 0; c < kids.size(); ++c) {
    const ModelNode& cn = node.children[c];
    NodeState& ks = kids[c];
    const ChildTerms& t = terms[c];
    const Ensemble tp = mapped(cn.theta, principal, cn.space);
    const Ensemble htp = observed(mapped(cn.phi, tp, node.space), h_level, p);
    const Ensemble zc{Matrix(tp.members - t.s * ks.control.members), cn.space};
    const Ensemble hzc{Matrix(htp.members - t.s * t.hvhat.members), "obs"};
    const Matrix c_zh = cross_cov(zc, hzc) + (t.s * t.s) * cross_cov(ks.ancillary, t.hv);
    const Matrix c_hh = cross_cov(hzc) + (t.s * t.s) * cross_cov(t.hv);
    const Matrix k = kalman_solve(c_zh, c_hh, spec, cn.index, report);
    plan.push_back(PendingUpdate{&ks.control, k, t.hvhat, tree_label});
    plan.push_back(PendingUpdate{&ks.ancillary, k, t.hv, tree_label});
    if (!cn.children.empty()) {
      const StateMap h_child = compose(h_level, cn.phi);
      const auto sub_terms = make_child_terms(cn, ks.children, h_child, p);
      plan_children(cn, ks.ancillary, ks.children, sub_terms, h_child, spec, tree_label, plan,
                    report);
    }
  }
}

}  // namespace detail

// Stochastic EnKF update of a single ensemble.
inline Ensemble enkf_analysis(const Ensemble& prior, const Vector& y, const ObservationSpec& spec,
                              AnalysisReport* report = nullptr, int tree_label = 1) {
  require_nonempty(prior);
  const Index p = spec.obs_dim();
  const Ensemble hx = detail::observed(prior, spec.op, p);
  const Matrix c_zh = cross_cov(prior, hx);
  const Matrix c_hh = cross_cov(hx);
  const Matrix k = detail::kalman_solve(c_zh, c_hh, spec, ModelIndex{{tree_label}}, report);
  Ensemble posterior = prior;
  const Ensemble ey = perturb_observations(y, spec, prior.size(), tree_label);
  posterior.members -= k * (hx.members - ey.members);
  return posterior;
}

// Multifidelity update of a whole tree: each level's ensembles shift by their
// own gain, built from that level's total-variate statistics; the control and
// ancillary of one node share a gain.  Ends by refreshing the cached analysis
// total variate.
inline void mfenkf_tree_analysis(const ModelNode& tree, TreeState& state, const Vector& y,
                                 const ObservationSpec& spec, AnalysisReport* report = nullptr) {
  require_nonempty(state.principal);
  const int tree_label = tree.index.path.empty() ? 1 : tree.index.path.front();
  const Index p = spec.obs_dim();
  std::vector<detail::PendingUpdate> plan;
  const Ensemble hp = detail::observed(state.principal, spec.op, p);
  const auto terms = detail::make_child_terms(tree, state.children, spec.op, p);
  const Matrix k_root = detail::level_gain(tree, state.principal, hp, terms, spec, report);
  plan.push_back(detail::PendingUpdate{&state.principal, k_root, hp, tree_label});
  detail::plan_children(tree, state.principal, state.children, terms, spec.op, spec, tree_label,
                        plan, report);
  detail::apply_updates(plan, y, spec);
  state.total_variate = detail::assemble_subtree_variate(tree, state.principal, state.children);
}

namespace detail {

// Surrogate-level gains of one tree in a multi-tree forest: the forest
// statistics (transferred total variates and swap ensembles) are projected
// member-wise into the child space and observed through the recursively
// composed operator, then double-weighted exactly like the root blocks.
inline void plan_forest_children(const ModelNode& node, std::vector<NodeState>& kids,
                                 const std::vector<Ensemble>& tz,
                                 const std::map<std::pair<int, int>, Ensemble>& tsw,
                                 const ModelForest& forest, int label, const StateMap& h_level,
                                 const ObservationSpec& spec, std::vector<PendingUpdate>& plan,
                                 AnalysisReport* report) {
  if (kids.size() != node.children.size()) throw std::logic_error("tree state shape mismatch");
  const Index p = spec.obs_dim();
  const int m = forest.tree_count();
  for (std::size_t c = 0; c < kids.size(); ++c) {
    const ModelNode& cn = node.children[c];
    NodeState& ks = kids[c];
    const StateMap h_child = compose(h_level, cn.phi);
    std::vector<Ensemble> ptz(static_cast<std::size_t>(m));
    std::vector<Ensemble> optz(static_cast<std::size_t>(m));
    std::map<std::pair<int, int>, Ensemble> ptsw, optsw;
    for (int b = 0; b < m; ++b) {
      ptz[b] = mapped(cn.theta, tz[b], cn.space);
      optz[b] = observed(ptz[b], h_child, p);
    }
    for (const auto& kv : tsw) {
      Ensemble pe = mapped(cn.theta, kv.second, cn.space);
      optsw[kv.first] = observed(pe, h_child, p);
      ptsw[kv.first] = std::move(pe);
    }
    std::map<std::pair<int, int>, Matrix> zh, hh;
    for (int a = 0; a < m; ++a)
      for (int b = 0; b < m; ++b) {
        if (a == b) {
          zh[{a + 1, b + 1}] = cross_cov(ptz[a], optz[a]);
          hh[{a + 1, b + 1}] = cross_cov(optz[a]);
        } else {
          zh[{a + 1, b + 1}] = 0.5 * (cross_cov(ptz[a], optsw.at({b, a})) +
                                      cross_cov(ptsw.at({a, b}), optz[b]));
          hh[{a + 1, b + 1}] = 0.5 * (cross_cov(optz[a], optsw.at({b, a})) +
                                      cross_cov(optsw.at({a, b}), optz[b]));
        }
      }
    const Matrix c_zh = forest_average_cov(zh, forest, label);
    const Matrix c_hh = forest_average_cov(hh, forest, label);
    const Matrix k = kalman_solve(c_zh, c_hh, spec, cn.index, report);
    plan.push_back(PendingUpdate{&ks.control, k, observed(ks.control, h_child, p), label});
    plan.push_back(PendingUpdate{&ks.ancillary, k, observed(ks.ancillary, h_child, p), label});
    if (!cn.children.empty())
      plan_forest_children(cn, ks.children, ptz, ptsw, forest, label, h_child, spec, plan,
                           report);
  }
}

}  // namespace detail

// Forest update.  A one-tree forest delegates verbatim to the tree path.  For
// multiple trees the gains come from the model-averaged total-variate
// statistics: diagonal blocks from each tree's total-variate ensemble,
// off-diagonal blocks from the swap estimator, double-weighted by the tree
// weights and carried into each tree's space.  The observation operator is
// defined on the space of tree 1; other trees observe through the transfer
// into that space.
inline void forest_analysis(const ModelForest& forest, ForestState& state, const Vector& y,
                            const ObservationSpec& spec, AnalysisReport* report = nullptr) {
  const int m = forest.tree_count();
  if (m == 0) throw std::invalid_argument("forest has no trees");
  if (static_cast<int>(state.trees.size()) != m)
    throw std::logic_error("forest state shape mismatch");
  if (m == 1) {
    mfenkf_tree_analysis(forest.trees[0], state.trees[0], y, spec, report);
    return;
  }
  const Index p = spec.obs_dim();
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b)
      if (a != b) state.swap_forecast(a, b);  // every ordered pair must exist

  // Observed total variates and swaps.  Observation happens through the
  // transfer into tree 1's space directly (transfers compose, so routing a
  // block through a third tree's space would only add round-off).
  std::vector<const Ensemble*> z(static_cast<std::size_t>(m));
  std::vector<Ensemble> oz(static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a) {
    const Ensemble& za = state.trees[a].total_variate;
    if (za.size() == 0) throw std::logic_error("total variate not initialized");
    z[a] = &za;
    oz[a] = detail::observed(detail::mapped(forest.transfer(1, a + 1), za, forest.trees[0].space),
                             spec.op, p);
  }
  std::map<std::pair<int, int>, Ensemble> osw;
  for (const auto& kv : state.swaps)
    osw[kv.first] = detail::observed(
        detail::mapped(forest.transfer(1, kv.first.first + 1), kv.second, forest.trees[0].space),
        spec.op, p);

  // Innovation statistics are the same for every target space.
  std::map<std::pair<int, int>, Matrix> hh;
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) {
      if (a == b)
        hh[{a + 1, b + 1}] = cross_cov(oz[a]);
      else
        hh[{a + 1, b + 1}] =
            0.5 * (cross_cov(oz[a], osw.at({b, a})) + cross_cov(osw.at({a, b}), oz[b]));
    }
  const Matrix c_hh = forest_average_cov(hh, forest, 1);

  std::vector<detail::PendingUpdate> plan;
  for (int i = 0; i < m; ++i) {
    const ModelNode& root = forest.trees[i];
    const int label = i + 1;
    TreeState& ts = state.trees[i];
    std::vector<Ensemble> tz(static_cast<std::size_t>(m));
    std::map<std::pair<int, int>, Ensemble> tsw;
    for (int b = 0; b < m; ++b)
      tz[b] = detail::mapped(forest.transfer(label, b + 1), *z[b], root.space);
    for (const auto& kv : state.swaps)
      tsw[kv.first] =
          detail::mapped(forest.transfer(label, kv.first.first + 1), kv.second, root.space);
    std::map<std::pair<int, int>, Matrix> zh;
    for (int a = 0; a < m; ++a)
      for (int b = 0; b < m; ++b) {
        if (a == b)
          zh[{a + 1, b + 1}] = cross_cov(tz[a], oz[a]);
        else
          zh[{a + 1, b + 1}] =
              0.5 * (cross_cov(tz[a], osw.at({b, a})) + cross_cov(tsw.at({a, b}), oz[b]));
      }
    const Matrix c_zh = forest_average_cov(zh, forest, label);
    const Matrix k = detail::kalman_solve(c_zh, c_hh, spec, root.index, report);
    const StateMap h_root = detail::compose(spec.op, forest.transfer(1, label));
    plan.push_back(detail::PendingUpdate{&ts.principal, k,
                                         detail::observed(ts.principal, h_root, p), label});
    detail::plan_forest_children(root, ts.children, tz, tsw, forest, label, h_root, spec, plan,
                                 report);
  }
  detail::apply_updates(plan, y, spec);
  for (int i = 0; i < m; ++i)
    state.trees[i].total_variate = detail::assemble_subtree_variate(
        forest.trees[i], state.trees[i].principal, state.trees[i].children);
}

namespace detail {

// Recenter a level's principal-side ensemble and recurse, carrying the
// projected total-variate ensemble down so every level's target is the mean
// of the projected analysis total variate.
inline void recenter_pass(const ModelNode& node, Ensemble& principal,
                          std::vector<NodeState>& kids, const Ensemble& z_level,
                          const Vector& target) {
  if (kids.size() != node.children.size()) throw std::logic_error("tree state shape mismatch");
  recenter(principal, target);
  for (std::size_t c = 0; c < kids.size(); ++c) {
    const ModelNode& cn = node.children[c];
    const Ensemble zc = mapped(cn.theta, z_level, cn.space);
    recenter_pass(cn, kids[c].ancillary, kids[c].children, zc, ensemble_mean(zc));
  }
}

inline void inflate_pass(const ModelNode& node, Ensemble& principal,
                         std::vector<NodeState>& kids) {
  principal = inflate(principal, node.alpha);
  for (std::size_t c = 0; c < kids.size(); ++c)
    inflate_pass(node.children[c], kids[c].ancillary, kids[c].children);
}

inline void rebuild_pass(const ModelNode& node, const Ensemble& principal,
                         std::vector<NodeState>& kids) {
  for (std::size_t c = 0; c < kids.size(); ++c) {
    const ModelNode& cn = node.children[c];
    kids[c].control = mapped(cn.theta, principal, cn.space);
    rebuild_pass(cn, kids[c].ancillary, kids[c].children);
  }
}

}  // namespace detail

// Post-analysis heuristics, per tree: (1) recenter every level on the (forest
// averaged) analysis total-variate mean projected to that level, (2) inflate
// anomalies, (3) discard the controls and rebuild them by projecting the
// final parent principal, which restores exact principal-control coupling.
// Controls therefore inherit the parent level's inflation factor.  Ends by
// refreshing each tree's cached total variate.
inline void apply_heuristics(const ModelForest& forest, ForestState& state) {
  const int m = forest.tree_count();
  if (static_cast<int>(state.trees.size()) != m)
    throw std::logic_error("forest state shape mismatch");
  std::vector<StateVector> z_means;
  z_means.reserve(static_cast<std::size_t>(m));
  for (int a = 0; a < m; ++a) {
    const Ensemble& za = state.trees[a].total_variate;
    if (za.size() == 0) throw std::logic_error("total variate not initialized");
    z_means.push_back(StateVector{ensemble_mean(za), za.space});
  }
  for (int a = 0; a < m; ++a) {
    const ModelNode& root = forest.trees[a];
    TreeState& ts = state.trees[a];
    const Vector target =
        m == 1 ? z_means[0].values : forest_average_mean(z_means, forest, a + 1).values;
    Ensemble z_rec = ts.total_variate;
    recenter(z_rec, target);
    detail::recenter_pass(root, ts.principal, ts.children, z_rec, target);
    detail::inflate_pass(root, ts.principal, ts.children);
    detail::rebuild_pass(root, ts.principal, ts.children);
    ts.total_variate = detail::assemble_subtree_variate(root, ts.principal, ts.children);
  }
}

}  // namespace mfenkf
