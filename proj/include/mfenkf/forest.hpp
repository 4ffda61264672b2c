#pragma once

// Model-tree and model-forest topology: node indexing, operator registration,
// structural validation, and the weighted cross-tree averaging used to merge
// per-tree statistics into a single space.

#include "mfenkf/control_variates.hpp"
#include "mfenkf/ensemble.hpp"

#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mfenkf {

// state, window length -> state advanced by one window
using ModelStepFn = std::function<Vector(const Vector&, double)>;

// Tuple index of a node: (m) is the root of tree m, (m, c) its c-th child, and
// so on.  Entries are 1-based.
struct ModelIndex {
  std::vector<int> path;

  bool is_root() const { return path.size() == 1; }

  ModelIndex parent() const {
    if (path.size() < 2) throw std::logic_error("root index has no parent");
    return ModelIndex{std::vector<int>(path.begin(), path.end() - 1)};
  }

  ModelIndex child(int c) const {
    ModelIndex out = *this;
    out.path.push_back(c);
    return out;
  }

  std::string str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < path.size(); ++i) os << (i ? "," : "") << path[i];
    os << ")";
    return os.str();
  }

  friend bool operator==(const ModelIndex& a, const ModelIndex& b) { return a.path == b.path; }
};

// One model in a tree.  The root carries the principal ensemble; every other
// node carries a control/ancillary pair in its own reduced space.  theta maps
// parent space to this space, phi maps back.
struct ModelNode {
  ModelIndex index;
  std::string space;  // space label for wiring checks
  Index dim = 0;
  ModelStepFn model;
  StateMap theta;  // empty on the root
  StateMap phi;    // empty on the root
  GainSpec gain;   // control-variate gain policy for this node's correction term
  // Post-analysis anomaly inflation for the ensemble this node's subtree is
  // anchored on (root: the principal; child: its ancillary).  Controls inherit
  // the parent's factor through the rebuild step.
  double alpha = 1.0;
  Index n_control = 0;    // members coupled with the parent principal (root: principal size)
  Index n_ancillary = 0;  // independent members (unused on the root)
  std::vector<ModelNode> children;
};

// Visit children in ascending order, then the node itself.
template <class Fn>
inline void for_each_post_order(const ModelNode& node, Fn&& fn) {
  for (const ModelNode& c : node.children) for_each_post_order(c, fn);
  fn(node);
}

template <class Fn>
inline void for_each_post_order(ModelNode& node, Fn&& fn) {
  for (ModelNode& c : node.children) for_each_post_order(c, fn);
  fn(node);
}

// A weighted collection of trees plus transfer maps between root spaces.
// transfers[(m, l)] carries a state of tree l into the space of tree m; the
// diagonal defaults to the identity.
struct ModelForest {
  std::vector<ModelNode> trees;
  std::vector<double> weights;
  std::map<std::pair<int, int>, StateMap> transfers;

  int tree_count() const { return static_cast<int>(trees.size()); }

  // Transfer from tree `from` into the space of tree `to`.
  StateMap transfer(int to, int from) const {
    const auto it = transfers.find({to, from});
    if (it != transfers.end()) return it->second;
    if (to == from) return StateMap{};  // identity
    std::ostringstream os;
    os << "missing transfer operator (" << to << "," << from << ")";
    throw std::invalid_argument(os.str());
  }
};

struct ValidationIssue {
  std::string where;    // node index or forest-level tag
  std::string message;
};

struct NodeRoundTrip {
  std::string node;
  double deviation = 0.0;  // max relative theta(phi(u)) - u over supplied probes
};

struct TransferRoundTrip {
  int to = 0, from = 0;
  double deviation = 0.0;
};

struct ValidationReport {
  std::vector<ValidationIssue> failures;
  std::vector<NodeRoundTrip> node_round_trips;
  std::vector<TransferRoundTrip> transfer_round_trips;
  double weight_sum_residual = 0.0;
  bool ok() const { return failures.empty(); }
};

namespace detail {

inline void validate_node(const ModelNode& node, const ModelIndex& expected, bool root,
                          Index coupled_with, const std::vector<StateVector>& probes,
                          ValidationReport& report) {
  const std::string where = node.index.str();
  if (!(node.index == expected))
    report.failures.push_back({where, "node index disagrees with its position"});
  if (node.dim <= 0) report.failures.push_back({where, "node dimension must be positive"});
  if (!node.model) report.failures.push_back({where, "missing model operator"});
  if (!(node.alpha >= 1.0))
    report.failures.push_back({where, "inflation factor must be at least one"});
  if (root) {
    if (node.theta || node.phi)
      report.failures.push_back({where, "root node must not carry projection operators"});
    if (node.n_control < 2)
      report.failures.push_back({where, "principal ensemble needs at least two members"});
  } else {
    if (!node.theta) report.failures.push_back({where, "missing projection operator"});
    if (!node.phi) report.failures.push_back({where, "missing interpolation operator"});
    if (node.n_control != coupled_with)
      report.failures.push_back({where, "control size must match the parent principal"});
    if (node.n_ancillary < 2)
      report.failures.push_back({where, "ancillary ensemble needs at least two members"});
    if (node.gain.mode == GainMode::FixedFraction &&
        (!node.gain.fraction || !(*node.gain.fraction > 0.0) || *node.gain.fraction > 1.0))
      report.failures.push_back({where, "fixed gain fraction must lie in (0,1]"});
    if (node.theta && node.phi) {
      double worst = 0.0;
      for (const StateVector& p : probes) {
        if (p.space != node.space) continue;
        if (p.values.size() != node.dim) continue;
        const Vector back = node.theta(node.phi(p.values));
        const double denom = p.values.norm();
        if (denom > 0.0) worst = std::max(worst, (back - p.values).norm() / denom);
      }
      report.node_round_trips.push_back({where, worst});
      if (worst > 1e-8)
        report.failures.push_back({where, "projection round-trip exceeds tolerance"});
    }
  }
  for (std::size_t c = 0; c < node.children.size(); ++c) {
    const Index subtree_principal = root ? node.n_control : node.n_ancillary;
    validate_node(node.children[c], node.index.child(static_cast<int>(c) + 1), false,
                  subtree_principal, probes, report);
  }
}

}  // namespace detail

// Structural validation of a forest; probe states (matched to nodes and trees
// by space label) drive the operator round-trip diagnostics.
inline ValidationReport validate_forest(const ModelForest& f,
                                        const std::vector<StateVector>& probes = {}) {
  ValidationReport report;
  const int m_count = f.tree_count();
  if (m_count == 0) {
    report.failures.push_back({"forest", "forest has no trees"});
    return report;
  }
  if (static_cast<int>(f.weights.size()) != m_count) {
    report.failures.push_back({"forest", "weight count does not match tree count"});
  } else {
    double sum = 0.0;
    bool positive = true;
    for (double w : f.weights) {
      sum += w;
      positive = positive && w > 0.0;
    }
    report.weight_sum_residual = std::abs(sum - 1.0);
    if (!positive) report.failures.push_back({"forest", "weights must be positive"});
    if (report.weight_sum_residual > 1e-12)
      report.failures.push_back({"forest", "weights do not sum to one"});
  }
  for (int m = 1; m <= m_count; ++m)
    detail::validate_node(f.trees[m - 1], ModelIndex{{m}}, true,
                          f.trees[m - 1].n_control, probes, report);
  for (int to = 1; to <= m_count; ++to)
    for (int from = 1; from <= m_count; ++from) {
      if (to == from) continue;
      if (!f.transfers.count({to, from})) {
        std::ostringstream os;
        os << "missing transfer operator (" << to << "," << from << ")";
        report.failures.push_back({"forest", os.str()});
        continue;
      }
      if (!f.transfers.count({from, to})) continue;  // round trip needs both directions
      const StateMap fwd = f.transfer(to, from);
      const StateMap back = f.transfer(from, to);
      double worst = 0.0;
      for (const StateVector& p : probes) {
        if (p.space != f.trees[from - 1].space) continue;
        if (p.values.size() != f.trees[from - 1].dim) continue;
        const Vector round = back(fwd(p.values));
        const double denom = p.values.norm();
        if (denom > 0.0) worst = std::max(worst, (round - p.values).norm() / denom);
      }
      report.transfer_round_trips.push_back({to, from, worst});
    }
  return report;
}

// Weighted average of per-tree states carried into the space of tree `target`.
inline StateVector forest_average_mean(const std::vector<StateVector>& means,
                                       const ModelForest& f, int target) {
  const int m_count = f.tree_count();
  if (static_cast<int>(means.size()) != m_count)
    throw std::invalid_argument("one state per tree required");
  if (target < 1 || target > m_count) throw std::invalid_argument("unknown target tree");
  Vector acc;
  for (int from = 1; from <= m_count; ++from) {
    const StateMap tau = f.transfer(target, from);
    const Vector moved = tau ? tau(means[from - 1].values) : means[from - 1].values;
    if (from == 1)
      acc = f.weights[from - 1] * moved;
    else
      acc += f.weights[from - 1] * moved;
  }
  return StateVector{acc, f.trees[target - 1].space};
}

// Double-weighted combination of already-transferred covariance blocks:
// blocks[(a, b)] = Cov(tau(X_a), tau(X_b)) expressed in the space of `target`.
inline Matrix forest_average_cov(const std::map<std::pair<int, int>, Matrix>& blocks,
                                 const ModelForest& f, int target) {
  const int m_count = f.tree_count();
  if (target < 1 || target > m_count) throw std::invalid_argument("unknown target tree");
  Matrix acc;
  for (int a = 1; a <= m_count; ++a)
    for (int b = 1; b <= m_count; ++b) {
      const auto it = blocks.find({a, b});
      if (it == blocks.end()) {
        std::ostringstream os;
        os << "missing covariance block (" << a << "," << b << ")";
        throw std::invalid_argument(os.str());
      }
      const double w = f.weights[a - 1] * f.weights[b - 1];
      if (a == 1 && b == 1)
        acc = w * it->second;
      else
        acc += w * it->second;
    }
  return acc;
}

}  // namespace mfenkf
