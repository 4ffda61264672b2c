#pragma once

// Ensemble containers and the sample statistics every filter layer is built on.
// Summation runs in ascending member order everywhere so repeated runs are
// bitwise reproducible; we deliberately trade the last bit of accuracy for that.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

namespace mfenkf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// A single state plus the identifier of the model space it inhabits.  Space ids
// are plain strings ("qg:31x63", "pod:r25", ...) used for wiring checks and
// error messages, not for dispatch.
struct StateVector {
  Vector values;
  std::string space;
};

// An ensemble of NN states stored one member per column (n x NN).
struct Ensemble {
  Matrix members;
  std::string space;

  Index dim() const { return members.rows(); }
  Index size() const { return members.cols(); }
};

inline void require_nonempty(const Ensemble& e) {
  if (e.members.cols() == 0 || e.members.rows() == 0)
    throw std::invalid_argument("empty ensemble");
}

// Mean over members, accumulated column by column in ascending order.  The
// final division is spelled out per element; inflate() below reconstructs this
// computation scalar by scalar and needs the exact same operations.
inline Vector ensemble_mean(const Ensemble& e) {
  require_nonempty(e);
  Vector acc = Vector::Zero(e.dim());
  for (Index j = 0; j < e.size(); ++j) acc += e.members.col(j);
  const double dn = static_cast<double>(e.size());
  for (Index i = 0; i < acc.size(); ++i) acc[i] /= dn;
  return acc;
}

// Scaled anomalies A = (E - mean 1^T) / sqrt(NN - 1), so that A_a A_b^T is the
// unbiased sample cross-covariance.
inline Matrix anomalies(const Ensemble& e) {
  require_nonempty(e);
  if (e.size() < 2) throw std::invalid_argument("degenerate ensemble");
  const Vector m = ensemble_mean(e);
  const double scale = 1.0 / std::sqrt(static_cast<double>(e.size()) - 1.0);
  Matrix a(e.dim(), e.size());
  for (Index j = 0; j < e.size(); ++j) a.col(j) = (e.members.col(j) - m) * scale;
  return a;
}

// Sample cross-covariance Cov(a, b) = A_a A_b^T.  Requires pairwise-coupled
// ensembles (same member count, member j of a drawn jointly with member j of b).
inline Matrix cross_cov(const Ensemble& a, const Ensemble& b) {
  if (a.size() != b.size()) throw std::invalid_argument("unpaired ensembles");
  const Matrix aa = anomalies(a);
  if (&a == &b) {
    // Self-covariance: rank-update keeps the result exactly symmetric.
    Matrix c = Matrix::Zero(a.dim(), a.dim());
    c.selfadjointView<Eigen::Lower>().rankUpdate(aa);
    c.triangularView<Eigen::StrictlyUpper>() = c.transpose();
    return c;
  }
  return aa * anomalies(b).transpose();
}

inline Matrix cross_cov(const Ensemble& a) { return cross_cov(a, a); }

// Multiplicative covariance inflation about the current mean.  alpha == 1
// returns the input unchanged; alpha < 1 is refused (deflation hides spread
// collapse instead of fixing it).
//
// After reconstruction, the last member of every row is nudged by ulps so the
// ascending-order sample mean of the result reproduces the input mean bit for
// bit.  That target is not always representable: when the mean sits orders of
// magnitude below the member size, the accumulator of the final add moves on a
// grid coarser than the mean's rounding bucket and no member value lands in
// it.  Such rows keep the closest achievable mean (off by ~1 ulp of the mean).
inline Ensemble inflate(const Ensemble& e, double alpha) {
  require_nonempty(e);
  if (!(alpha >= 1.0)) throw std::invalid_argument("deflation not permitted");
  if (alpha == 1.0) return e;
  const Index last = e.size() - 1;
  const double dn = static_cast<double>(e.size());
  const double inf = std::numeric_limits<double>::infinity();
  const Vector m = ensemble_mean(e);
  Ensemble out{Matrix(e.dim(), e.size()), e.space};
  for (Index j = 0; j < e.size(); ++j)
    out.members.col(j) = m + alpha * (e.members.col(j) - m);
  for (Index i = 0; i < e.dim(); ++i) {
    double s0 = 0.0, p = 0.0;
    for (Index j = 0; j < e.size(); ++j) s0 += e.members(i, j);
    for (Index j = 0; j < last; ++j) p += out.members(i, j);
    const auto defect = [&](double y) { return std::abs((p + y) / dn - m[i]); };
    double best = out.members(i, last);
    double best_d = defect(best);
    if (best_d == 0.0) continue;
    double lo = s0 - p, hi = lo;  // candidate whose accumulator matches the input's
    if (defect(lo) < best_d) { best = lo; best_d = defect(lo); }
    for (int k = 0; k < 48 && best_d != 0.0; ++k) {
      lo = std::nextafter(lo, -inf);
      hi = std::nextafter(hi, inf);
      for (double c : {lo, hi}) {
        const double d = defect(c);
        if (d < best_d) { best = c; best_d = d; }
      }
    }
    out.members(i, last) = best;
  }
  return out;
}

// Apply a per-member map (observation operator, interpolation, model step...).
template <class Fn>
inline Ensemble map_members(const Ensemble& e, Fn&& fn, std::string out_space) {
  require_nonempty(e);
  Vector first = fn(Vector(e.members.col(0)));
  Ensemble out{Matrix(first.size(), e.size()), std::move(out_space)};
  out.members.col(0) = first;
  for (Index j = 1; j < e.size(); ++j) out.members.col(j) = fn(Vector(e.members.col(j)));
  return out;
}

// Shift every member so the ensemble mean lands on `target`; anomalies are kept.
inline void recenter(Ensemble& e, const Vector& target) {
  const Vector delta = target - ensemble_mean(e);
  if ((delta.array() == 0.0).all()) return;  // keep the no-op bitwise exact
  e.members.colwise() += delta;
}

}  // namespace mfenkf
