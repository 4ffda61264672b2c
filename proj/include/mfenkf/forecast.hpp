#pragma once

// Window-by-window propagation of every constituent ensemble in a model
// forest. Per tree the recursion advances, for each node,
//
//   principal_{i+1} = M(Z_i)          (the node model driven by the cached
//                                      subtree total variate),
//   control_{i+1}   = M_child(control_i)  for every child, and
//   ancillary_{i+1} = Z^{child}_{i+1}     (the child subtree's freshly
//                                          assembled total variate),
//
// then reassembles this subtree's total-variate ensemble from the advanced
// pieces. Leaves have no corrections, so their total variate is the advanced
// ensemble itself. Forest propagation additionally advances, for every
// ordered pair of trees, the other tree's total variate transferred into this
// tree's space and driven by this tree's root model; those "swap" ensembles
// give valid member pairings for cross-tree covariances.

#include "mfenkf/control_variates.hpp"
#include "mfenkf/ensemble.hpp"
#include "mfenkf/forest.hpp"

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mfenkf {

struct NodeState {
  Ensemble control;    // coupled member-for-member with the parent's principal role
  Ensemble ancillary;  // independent; always holds this subtree's total variate
  std::vector<NodeState> children;
};

struct TreeState {
  Ensemble principal;
  Ensemble total_variate;  // cached Z for the whole tree
  std::vector<NodeState> children;
};

struct ForestState {
  std::vector<TreeState> trees;
  long long time_index = 0;
  // Rebuilt on every propagation: key (owner tree, source tree) maps to the
  // source tree's total variate transferred into the owner's space and
  // advanced by the owner's root model.  Keys are 0-based positions into
  // `trees`; diagnostics print the 1-based tree labels.
  std::map<std::pair<int, int>, Ensemble> swaps;

  const Ensemble& swap_forecast(int owner, int source) const {
    auto it = swaps.find({owner, source});
    if (it == swaps.end())
      throw std::invalid_argument("missing swap forecast (" + std::to_string(owner + 1) + "," +
                                  std::to_string(source + 1) + ")");
    return it->second;
  }
};

// Applies the model to each member in ascending order. Failures are reported
// with the owning node and member index.
inline Ensemble advance_members(const Ensemble& e, const ModelStepFn& model, double dt,
                                const ModelIndex& where) {
  if (!model) throw std::invalid_argument("missing model operator");
  require_nonempty(e);
  Ensemble out;
  out.space = e.space;
  out.members.resize(e.dim(), e.size());
  for (Index j = 0; j < e.size(); ++j) {
    Vector next;
    try {
      next = model(e.members.col(j), dt);
    } catch (const std::exception& ex) {
      throw std::runtime_error(std::string(ex.what()) + " (node " + where.str() + ", member " +
                               std::to_string(j) + ")");
    }
    if (next.size() != e.dim())
      throw std::runtime_error("model changed the state dimension (node " + where.str() +
                               ", member " + std::to_string(j) + ")");
    if (!next.allFinite())
      throw std::runtime_error("propagation produced a non-finite state (node " + where.str() +
                               ", member " + std::to_string(j) + ")");
    out.members.col(j) = next;
  }
  return out;
}

namespace detail {

struct SubtreeResult {
  Ensemble principal;  // the node's principal-role ensemble after one window
  Ensemble z;          // the subtree total variate after one window
};

// Assembles the subtree total variate from an already-advanced principal and
// the node states (controls advanced, ancillaries holding child variates).
inline Ensemble assemble_subtree_variate(const ModelNode& node, const Ensemble& principal,
                                         const std::vector<NodeState>& kids) {
  if (kids.size() != node.children.size()) throw std::logic_error("tree state shape mismatch");
  if (node.children.empty()) return principal;
  std::vector<TotalVariateTerm> mean_terms;
  std::vector<AnomalyControl> anomaly_controls;
  mean_terms.reserve(kids.size());
  anomaly_controls.reserve(kids.size());
  const double scale = anomaly_gain_scale(static_cast<int>(node.children.size()));
  for (std::size_t c = 0; c < node.children.size(); ++c) {
    const ModelNode& child = node.children[c];
    const NodeState& ks = kids[c];
    mean_terms.push_back(
        TotalVariateTerm{VariateTriple{&principal, &ks.control, &ks.ancillary}, child.phi, child.gain});
    anomaly_controls.push_back(AnomalyControl{&ks.control, child.phi, child.gain.scaled(scale)});
  }
  const Vector z_mean = total_variate_mean(mean_terms).values;
  return total_variate_ensemble(principal, anomaly_controls, z_mean);
}

inline SubtreeResult propagate_subtree(const ModelNode& node, const Ensemble& z_prev,
                                       std::vector<NodeState>& kids, double dt) {
  if (kids.size() != node.children.size()) throw std::logic_error("tree state shape mismatch");
  SubtreeResult res;
  res.principal = advance_members(z_prev, node.model, dt, node.index);
  for (std::size_t c = 0; c < node.children.size(); ++c) {
    const ModelNode& child = node.children[c];
    NodeState& ks = kids[c];
    ks.control = advance_members(ks.control, child.model, dt, child.index);
    SubtreeResult sub = propagate_subtree(child, ks.ancillary, ks.children, dt);
    ks.ancillary = std::move(sub.z);
  }
  res.z = assemble_subtree_variate(node, res.principal, kids);
  return res;
}

// Initialization analogue of propagate_subtree: replaces each ancillary with
// its subtree total variate (bottom-up) without touching the dynamics.
inline Ensemble init_subtree_variate(const ModelNode& node, const Ensemble& principal,
                                     std::vector<NodeState>& kids) {
  if (kids.size() != node.children.size()) throw std::logic_error("tree state shape mismatch");
  for (std::size_t c = 0; c < node.children.size(); ++c) {
    NodeState& ks = kids[c];
    Ensemble cz = init_subtree_variate(node.children[c], ks.ancillary, ks.children);
    ks.ancillary = std::move(cz);
  }
  return assemble_subtree_variate(node, principal, kids);
}

}  // namespace detail

// Establishes the total-variate invariant on freshly sampled ensembles:
// every ancillary is replaced by its subtree total variate and the tree-level
// cache is filled.
inline void initialize_tree_state(const ModelNode& root, TreeState& state) {
  state.total_variate = detail::init_subtree_variate(root, state.principal, state.children);
}

// Advances every constituent of one tree by a single window and refreshes the
// cached total variate. Requires initialize_tree_state (or a previous
// propagation/analysis) to have filled the cache.
inline void propagate_tree(const ModelNode& root, TreeState& state, double dt) {
  if (state.total_variate.size() == 0) throw std::logic_error("total variate not initialized");
  detail::SubtreeResult res = detail::propagate_subtree(root, state.total_variate, state.children, dt);
  state.principal = std::move(res.principal);
  state.total_variate = std::move(res.z);
}

inline void propagate_forest(const ModelForest& forest, ForestState& state, double dt) {
  const int m = static_cast<int>(forest.trees.size());
  if (static_cast<int>(state.trees.size()) != m) throw std::logic_error("forest state shape mismatch");
  // Swap propagation pairs against the pre-window total variates, the same
  // ensembles the native root propagation consumes.
  std::vector<Ensemble> z_prev;
  z_prev.reserve(state.trees.size());
  for (const TreeState& t : state.trees) z_prev.push_back(t.total_variate);

  for (int t = 0; t < m; ++t) propagate_tree(forest.trees[static_cast<std::size_t>(t)], state.trees[static_cast<std::size_t>(t)], dt);

  state.swaps.clear();
  for (int owner = 0; owner < m; ++owner) {
    const ModelNode& root = forest.trees[static_cast<std::size_t>(owner)];
    for (int source = 0; source < m; ++source) {
      if (owner == source) continue;
      const Ensemble transferred = detail::mapped(forest.transfer(owner + 1, source + 1),
                                                  z_prev[static_cast<std::size_t>(source)], root.space);
      state.swaps[{owner, source}] = advance_members(transferred, root.model, dt, root.index);
    }
  }
  state.time_index += 1;
}

// Symmetric two-term cross-covariance between the propagated total variates
// of two trees, expressed in the first tree's space. Each term pairs
// ensembles descended from the same members:
//   term 1 pairs M_a(z_a) with tau(M_b(tau(z_a)))   (members of z_a),
//   term 2 pairs M_a(tau(z_b)) with tau(M_b(z_b))   (members of z_b).
inline Matrix cross_cov_swap(const Ensemble& native_a, const Ensemble& native_b,
                             const Ensemble& swapped_a, const Ensemble& swapped_b,
                             const StateMap& transfer_to_a) {
  const Ensemble from_swapped_b = detail::mapped(transfer_to_a, swapped_b, native_a.space);
  const Ensemble from_native_b = detail::mapped(transfer_to_a, native_b, native_a.space);
  const Matrix term1 = cross_cov(native_a, from_swapped_b);
  const Matrix term2 = cross_cov(swapped_a, from_native_b);
  return 0.5 * (term1 + term2);
}

}  // namespace mfenkf
