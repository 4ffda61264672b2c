#pragma once

// Linear control variates: gain operators, total-variate assembly, and the
// five-term covariance expansion the multifidelity analysis step runs on.
//
// A total variate couples a principal ensemble X with surrogate pairs
// (control Û, ancillary U): Z = X - Σ_m S_m [φ(Û_m) - φ(U_m)].  Controls are
// coupled member-for-member with the principal; ancillaries are independent
// draws, which is what makes the five-term covariance shape below valid.

#include "mfenkf/ensemble.hpp"
#include "mfenkf/numerics.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mfenkf {

using StateMap = std::function<Vector(const Vector&)>;

enum class GainMode { Optimal, FixedFraction, ScaledAnomaly };

// A gain operator S in one of three shapes: an explicitly solved matrix, a
// fixed fraction of the identity, or either of those rescaled for anomaly
// transport.
struct GainSpec {
  GainMode mode = GainMode::FixedFraction;
  std::optional<Matrix> matrix;
  std::optional<double> fraction;

  // S a
  Matrix apply(const Matrix& a) const {
    if (matrix) {
      if (matrix->cols() != a.rows()) throw std::invalid_argument("gain dimension mismatch");
      return *matrix * a;
    }
    if (fraction) return *fraction * a;
    throw std::logic_error("gain not resolved");
  }

  Vector apply(const Vector& v) const {
    if (matrix) {
      if (matrix->cols() != v.size()) throw std::invalid_argument("gain dimension mismatch");
      return *matrix * v;
    }
    if (fraction) return *fraction * v;
    throw std::logic_error("gain not resolved");
  }

  // S a S^T
  Matrix sandwich(const Matrix& a) const {
    if (matrix) {
      if (matrix->cols() != a.rows() || a.cols() != matrix->cols())
        throw std::invalid_argument("gain dimension mismatch");
      return *matrix * a * matrix->transpose();
    }
    if (fraction) return (*fraction * *fraction) * a;
    throw std::logic_error("gain not resolved");
  }

  GainSpec scaled(double c) const {
    GainSpec g = *this;
    g.mode = GainMode::ScaledAnomaly;
    if (g.matrix) *g.matrix *= c;
    if (g.fraction) *g.fraction *= c;
    return g;
  }
};

// The fixed heuristic gain for a node with M sibling surrogates: S = 1/(M+1) I.
inline GainSpec fixed_fraction_gain(int surrogates) {
  if (surrogates < 1) throw std::invalid_argument("surrogate count must be positive");
  GainSpec g;
  g.mode = GainMode::FixedFraction;
  g.fraction = 1.0 / static_cast<double>(surrogates + 1);
  return g;
}

// Scalar applied to gains when they act on anomalies instead of means:
// 1 / (1 + sqrt(2/(M+3))).  Approaches 1 as the surrogate count grows.
inline double anomaly_gain_scale(int surrogates) {
  if (surrogates < 1) throw std::invalid_argument("surrogate count must be positive");
  return 1.0 / (1.0 + std::sqrt(2.0 / (static_cast<double>(surrogates) + 3.0)));
}

// Variance-minimizing gain for a single surrogate pair:
// S = Cov(X, g(Û)) (Cov(g(Û)) + Cov(g(U)))^{-1}.
inline GainSpec optimal_gain_single(const Matrix& cov_xg, const Matrix& cov_gg_hat,
                                    const Matrix& cov_gg_anc) {
  if (cov_gg_hat.rows() != cov_gg_hat.cols() || cov_gg_hat.rows() != cov_gg_anc.rows() ||
      cov_gg_anc.rows() != cov_gg_anc.cols() || cov_xg.cols() != cov_gg_hat.rows())
    throw std::invalid_argument("gain block shapes do not align");
  const Matrix denom = cov_gg_hat + cov_gg_anc;
  GainSpec g;
  g.mode = GainMode::Optimal;
  g.matrix = solve_spd(denom, Matrix(cov_xg.transpose())).transpose();
  return g;
}

// Variance-minimizing gains for M sibling surrogates, solved jointly.
// cov_blocks[m][l] = Cov(g(Û_m), g(Û_l)) for m != l; the diagonal additionally
// carries + Cov(g(U_m)).  rhs_blocks[m] = Cov(X, g(Û_m)).
inline std::vector<GainSpec> general_optimal_gain(
    const std::vector<std::vector<Matrix>>& cov_blocks,
    const std::vector<Matrix>& rhs_blocks) {
  const std::size_t m_count = cov_blocks.size();
  if (m_count == 0 || rhs_blocks.size() != m_count)
    throw std::invalid_argument("gain block shapes do not align");
  std::vector<Index> sizes(m_count), offsets(m_count);
  Index total = 0;
  for (std::size_t m = 0; m < m_count; ++m) {
    if (cov_blocks[m].size() != m_count) throw std::invalid_argument("gain block shapes do not align");
    sizes[m] = cov_blocks[m][m].rows();
    offsets[m] = total;
    total += sizes[m];
  }
  const Index n = rhs_blocks[0].rows();
  Matrix big(total, total);
  Matrix rhs(total, n);
  for (std::size_t m = 0; m < m_count; ++m) {
    if (rhs_blocks[m].rows() != n || rhs_blocks[m].cols() != sizes[m])
      throw std::invalid_argument("gain block shapes do not align");
    rhs.block(offsets[m], 0, sizes[m], n) = rhs_blocks[m].transpose();
    for (std::size_t l = 0; l < m_count; ++l) {
      if (cov_blocks[m][l].rows() != sizes[m] || cov_blocks[m][l].cols() != sizes[l])
        throw std::invalid_argument("gain block shapes do not align");
      big.block(offsets[m], offsets[l], sizes[m], sizes[l]) = cov_blocks[m][l];
    }
  }
  Matrix solution;
  try {
    solution = solve_spd(big, rhs);
  } catch (const std::runtime_error&) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(big);
    const double lmax = es.eigenvalues().cwiseAbs().maxCoeff();
    const double lmin = es.eigenvalues().cwiseAbs().minCoeff();
    std::ostringstream msg;
    msg << "singular gain block system (condition estimate ";
    if (lmin > 0.0)
      msg << std::scientific << std::setprecision(2) << lmax / lmin;
    else
      msg << "inf";
    msg << ")";
    throw std::runtime_error(msg.str());
  }
  std::vector<GainSpec> gains(m_count);
  for (std::size_t m = 0; m < m_count; ++m) {
    gains[m].mode = GainMode::Optimal;
    gains[m].matrix = solution.block(offsets[m], 0, sizes[m], n).transpose();
  }
  return gains;
}

// The three coupled ensembles a control-variate term is built from.
struct VariateTriple {
  const Ensemble* principal = nullptr;  // X
  const Ensemble* control = nullptr;    // Û, member-for-member coupled with X
  const Ensemble* ancillary = nullptr;  // U, independent draw in the control's space
};

struct TotalVariateTerm {
  VariateTriple triple;
  StateMap interpolate;  // surrogate space -> principal space; empty means identity
  GainSpec gain;
};

namespace detail {

inline void validate_triple(const VariateTriple& t) {
  if (!t.principal || !t.control || !t.ancillary)
    throw std::invalid_argument("incomplete variate triple");
  if (t.control->dim() != t.ancillary->dim())
    throw std::invalid_argument("variate spaces do not align");
  if (t.principal->size() != t.control->size())
    throw std::invalid_argument("unpaired ensembles");
}

inline Ensemble mapped(const StateMap& fn, const Ensemble& e, const std::string& space) {
  if (!fn) return Ensemble{e.members, space};
  return map_members(e, fn, space);
}

// Cov(Z, Z) for Z = X - S(V̂ - V), with V̂ coupled to X and V independent:
// Cov(X,X) - Cov(X,V̂)S^T - S Cov(V̂,X) + S Cov(V̂,V̂) S^T + S Cov(V,V) S^T.
inline Matrix five_term_cov(const Ensemble& x, const Ensemble& vhat, const Ensemble& v,
                            const GainSpec& s) {
  if (x.dim() != vhat.dim() || x.dim() != v.dim())
    throw std::invalid_argument("variate spaces do not align");
  const Matrix cxv = cross_cov(x, vhat);
  const Matrix left = s.apply(Matrix(cxv.transpose()));  // S Cov(V̂, X)
  return cross_cov(x) - left.transpose() - left + s.sandwich(cross_cov(vhat)) +
         s.sandwich(cross_cov(v));
}

}  // namespace detail

// Mean of the total variate: mean(X) - Σ S_m (mean φ(Û_m) - mean φ(U_m)).
// All terms must share the principal ensemble.
inline StateVector total_variate_mean(const std::vector<TotalVariateTerm>& terms) {
  if (terms.empty()) throw std::invalid_argument("no variate terms");
  const Ensemble* x = terms.front().triple.principal;
  for (const auto& t : terms) {
    detail::validate_triple(t.triple);
    if (t.triple.principal != x)
      throw std::invalid_argument("variate terms disagree on the principal");
  }
  Vector z = ensemble_mean(*x);
  for (const auto& t : terms) {
    const Ensemble vhat = detail::mapped(t.interpolate, *t.triple.control, x->space);
    const Ensemble v = detail::mapped(t.interpolate, *t.triple.ancillary, x->space);
    if (vhat.dim() != x->dim() || v.dim() != x->dim())
      throw std::invalid_argument("dimension mismatch after interpolation");
    z -= t.gain.apply(Vector(ensemble_mean(vhat) - ensemble_mean(v)));
  }
  return StateVector{z, x->space};
}

struct AnomalyControl {
  const Ensemble* control = nullptr;  // Û, coupled with the principal
  StateMap interpolate;               // empty means identity
  GainSpec gain;                      // already rescaled by anomaly_gain_scale
};

// Ensemble representation of the total variate: the supplied mean plus
// anomalies A_X - Σ S̃_m A_{φ(Û_m)}.  With no controls the principal is
// returned unchanged apart from recentering (a bitwise no-op when the mean
// already matches).
inline Ensemble total_variate_ensemble(const Ensemble& principal,
                                       const std::vector<AnomalyControl>& controls,
                                       const Vector& z_mean) {
  require_nonempty(principal);
  if (z_mean.size() != principal.dim())
    throw std::invalid_argument("dimension mismatch after interpolation");
  if (controls.empty()) {
    Ensemble out = principal;
    recenter(out, z_mean);
    return out;
  }
  const Vector xbar = ensemble_mean(principal);
  Matrix dev = principal.members.colwise() - xbar;
  for (const auto& c : controls) {
    if (!c.control) throw std::invalid_argument("incomplete variate triple");
    if (c.control->size() != principal.size()) throw std::invalid_argument("unpaired ensembles");
    const Ensemble vhat = detail::mapped(c.interpolate, *c.control, principal.space);
    if (vhat.dim() != principal.dim())
      throw std::invalid_argument("dimension mismatch after interpolation");
    const Vector vbar = ensemble_mean(vhat);
    dev -= c.gain.apply(Matrix(vhat.members.colwise() - vbar));
  }
  return Ensemble{dev.colwise() + z_mean, principal.space};
}

// Five-term covariance of the total variate in the principal space:
// controls enter through the interpolation φ.
inline Matrix total_variate_cov_full(const VariateTriple& t, const StateMap& phi,
                                     const GainSpec& s = fixed_fraction_gain(1)) {
  detail::validate_triple(t);
  const Ensemble vhat = detail::mapped(phi, *t.control, t.principal->space);
  const Ensemble v = detail::mapped(phi, *t.ancillary, t.principal->space);
  return detail::five_term_cov(*t.principal, vhat, v, s);
}

// Same expansion carried out in the surrogate space: the principal enters
// through the projection θ and the controls stay as they are.
inline Matrix total_variate_cov_reduced(const VariateTriple& t, const StateMap& theta,
                                        const GainSpec& s = fixed_fraction_gain(1)) {
  detail::validate_triple(t);
  const Ensemble x = detail::mapped(theta, *t.principal, t.control->space);
  return detail::five_term_cov(x, *t.control, *t.ancillary, s);
}

}  // namespace mfenkf
