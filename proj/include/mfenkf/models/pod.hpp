#pragma once

// Proper-orthogonal-decomposition surrogate: an orthonormal basis of leading
// left singular vectors plus Galerkin-projected quadratic dynamics
//
//   du/dt = drift + linear_op u + [u' quad[k] u]_k .
//
// The builder is generic over any model exposing its right-hand side as
// constant() + linear(v) + bilinear(a, b) with bilinear(x, x) reproducing the
// nonlinear term; both the flow solver and the cyclic chaotic model satisfy
// that contract.

#include "mfenkf/control_variates.hpp"
#include "mfenkf/ensemble.hpp"
#include "mfenkf/forest.hpp"
#include "mfenkf/numerics.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

namespace mfenkf {

struct SnapshotSet {
  Matrix data;          // one snapshot per column
  double spacing = 0.0; // model time between consecutive snapshots
};

struct PODBasis {
  Matrix phi;    // full-dim x rank, orthonormal columns
  Vector shift;  // subtracted before projection; zero when centering is off
  bool centered = false;
  Vector drift;              // constant tendency in reduced coordinates
  Matrix linear_op;          // reduced linear operator
  std::vector<Matrix> quad;  // quad[k] gives tendency_k += u' quad[k] u

  Index full_dim() const { return phi.rows(); }
  Index rank() const { return phi.cols(); }
  bool has_dynamics() const { return drift.size() == rank() && rank() > 0; }
};

// Basis-only construction: leading left singular vectors of the (optionally
// centered) snapshot matrix.
inline PODBasis pod_basis(const SnapshotSet& snapshots, Index r, bool centered = false) {
  const Matrix& x = snapshots.data;
  if (x.rows() < 1 || x.cols() < 1) throw std::invalid_argument("empty snapshot set");
  if (r < 1) throw std::invalid_argument("basis rank must be positive");
  if (r > std::min(x.rows(), x.cols())) throw std::invalid_argument("requested rank exceeds data rank");

  PODBasis b;
  b.centered = centered;
  b.shift = centered ? Vector(x.rowwise().mean()) : Vector(Vector::Zero(x.rows()));
  Matrix work = x;
  if (centered) work.colwise() -= b.shift;
  Eigen::BDCSVD<Matrix> svd(work, Eigen::ComputeThinU);
  const Vector& sv = svd.singularValues();
  const double tol =
      static_cast<double>(std::max(x.rows(), x.cols())) * std::numeric_limits<double>::epsilon() * sv[0];
  if (!(sv[r - 1] > tol)) throw std::invalid_argument("requested rank exceeds data rank");
  b.phi = svd.matrixU().leftCols(r);
  return b;
}

// Projects the model right-hand side onto the basis, splitting constant,
// linear, and bilinear contributions. With centering the shift enters the
// constant and linear tensors through the expanded bilinear term.
template <class ModelT>
void attach_galerkin(PODBasis& b, const ModelT& model) {
  if (model.dim() != b.full_dim()) throw std::invalid_argument("model dimension does not match basis");
  const Index r = b.rank();
  const Matrix& phi = b.phi;
  const bool shifted = b.centered && b.shift.cwiseAbs().maxCoeff() != 0.0;

  Vector base = model.constant();
  if (shifted) base += model.linear(b.shift) + model.bilinear(b.shift, b.shift);
  b.drift = phi.transpose() * base;

  b.linear_op.resize(r, r);
  for (Index k = 0; k < r; ++k) {
    Vector col = model.linear(phi.col(k));
    if (shifted) col += model.bilinear(b.shift, phi.col(k)) + model.bilinear(phi.col(k), b.shift);
    b.linear_op.col(k) = phi.transpose() * col;
  }

  b.quad.assign(static_cast<std::size_t>(r), Matrix::Zero(r, r));
  for (Index l = 0; l < r; ++l) {
    for (Index m = 0; m < r; ++m) {
      const Vector proj = phi.transpose() * model.bilinear(phi.col(l), phi.col(m));
      for (Index k = 0; k < r; ++k) b.quad[static_cast<std::size_t>(k)](l, m) = proj[k];
    }
  }
}

template <class ModelT>
PODBasis build_pod(const SnapshotSet& snapshots, Index r, const ModelT& model, bool centered = false) {
  PODBasis b = pod_basis(snapshots, r, centered);
  attach_galerkin(b, model);
  return b;
}

inline Vector pod_rhs(const Vector& u, const PODBasis& b) {
  if (!b.has_dynamics()) throw std::logic_error("basis carries no Galerkin tensors");
  if (u.size() != b.rank()) throw std::invalid_argument("reduced dimension mismatch");
  Vector du = b.drift + b.linear_op * u;
  for (Index k = 0; k < b.rank(); ++k) du[k] += u.dot(b.quad[static_cast<std::size_t>(k)] * u);
  return du;
}

inline StateMap pod_theta(const PODBasis& b) {
  auto phi = std::make_shared<const Matrix>(b.phi);
  if (!b.centered) {
    return [phi](const Vector& x) { return Vector(phi->transpose() * x); };
  }
  auto shift = std::make_shared<const Vector>(b.shift);
  return [phi, shift](const Vector& x) { return Vector(phi->transpose() * (x - *shift)); };
}

inline StateMap pod_phi(const PODBasis& b) {
  auto phi = std::make_shared<const Matrix>(b.phi);
  if (!b.centered) {
    return [phi](const Vector& u) { return Vector(*phi * u); };
  }
  auto shift = std::make_shared<const Vector>(b.shift);
  return [phi, shift](const Vector& u) { return Vector(*phi * u + *shift); };
}

inline ModelStepFn pod_model(const PODBasis& b, double dt_internal) {
  if (!b.has_dynamics()) throw std::logic_error("basis carries no Galerkin tensors");
  if (!(dt_internal > 0.0)) throw std::invalid_argument("internal step must be positive");
  auto basis = std::make_shared<const PODBasis>(b);
  return [basis, dt_internal](const Vector& u, double dt) -> Vector {
    if (dt == 0.0) return u;
    if (!(dt > 0.0)) throw std::invalid_argument("window length must be nonnegative");
    const long long substeps = std::max<long long>(1, std::llround(dt / dt_internal));
    return rk4([&basis](const Vector& s) { return pod_rhs(s, *basis); }, u, dt,
               static_cast<int>(substeps));
  };
}

}  // namespace mfenkf
