#pragma once

// Shared numerical kernels: the guarded SPD solve used for every covariance
// denominator, and the RK4 integrator used by all models.
//
// Solve policy: plain LDLT first; a Tikhonov ridge of 1e-8 * trace/n is added
// only when the factorization fails or the residual shows near-singularity.
// Mixed-precision iterative refinement (long double residual) then polishes the
// solution; on well-conditioned systems this lands on the correctly rounded
// answer, which downstream code relies on for exact structured cases.

#include "mfenkf/ensemble.hpp"

#include <Eigen/Cholesky>

#include <stdexcept>

namespace mfenkf {

struct SpdSolveReport {
  bool used_ridge = false;
  double ridge = 0.0;
  double residual = 0.0;  // relative residual of the returned solution
};

namespace detail {

// B - A*X with long double accumulation, returned in double.
inline Matrix residual_ld(const Matrix& A, const Matrix& X, const Matrix& B) {
  Matrix r(B.rows(), B.cols());
  for (Index c = 0; c < B.cols(); ++c) {
    for (Index i = 0; i < A.rows(); ++i) {
      long double acc = static_cast<long double>(B(i, c));
      for (Index j = 0; j < A.cols(); ++j)
        acc -= static_cast<long double>(A(i, j)) * static_cast<long double>(X(j, c));
      r(i, c) = static_cast<double>(acc);
    }
  }
  return r;
}

inline double relative_residual(const Matrix& A, const Matrix& X, const Matrix& B,
                                const Matrix& r) {
  const double denom = A.cwiseAbs().maxCoeff() * X.cwiseAbs().maxCoeff() +
                       B.cwiseAbs().maxCoeff();
  if (denom == 0.0) return 0.0;
  return r.cwiseAbs().maxCoeff() / denom;
}

}  // namespace detail

// Solve A X = B with A symmetric positive (semi)definite.
inline Matrix solve_spd(const Matrix& A, const Matrix& B,
                        SpdSolveReport* report = nullptr) {
  if (A.rows() != A.cols() || A.rows() != B.rows())
    throw std::invalid_argument("solve_spd: dimension mismatch");
  const Index n = A.rows();

  if (A.cwiseAbs().maxCoeff() == 0.0) {
    // Zero denominator: the zero gain is exact when the numerator vanishes too
    // (uncorrelated or identically-zero surrogates); anything else is unsolvable.
    if (B.cwiseAbs().maxCoeff() == 0.0) {
      if (report) *report = SpdSolveReport{};
      return Matrix::Zero(n, B.cols());
    }
    throw std::runtime_error("rank-deficient surrogate covariance");
  }

  Eigen::LDLT<Matrix> ldlt(A);
  Matrix X = ldlt.solve(B);
  Matrix r = detail::residual_ld(A, X, B);
  double rel = detail::relative_residual(A, X, B, r);

  SpdSolveReport rep;
  if (ldlt.info() != Eigen::Success || !X.allFinite() || rel > 1e-8) {
    // Near-singular denominator: regularize and retry.
    rep.used_ridge = true;
    rep.ridge = 1e-8 * A.trace() / static_cast<double>(n);
    if (!(rep.ridge > 0.0)) throw std::runtime_error("rank-deficient surrogate covariance");
    Matrix Ar = A + rep.ridge * Matrix::Identity(n, n);
    ldlt.compute(Ar);
    X = ldlt.solve(B);
    if (ldlt.info() != Eigen::Success || !X.allFinite())
      throw std::runtime_error("rank-deficient surrogate covariance");
    r = detail::residual_ld(Ar, X, B);
    rel = detail::relative_residual(Ar, X, B, r);
    for (int it = 0; it < 4 && rel > 0.0; ++it) {
      const Matrix dx = ldlt.solve(r);
      if ((dx.array() == 0.0).all()) break;
      X += dx;
      r = detail::residual_ld(Ar, X, B);
      rel = detail::relative_residual(Ar, X, B, r);
    }
    if (!X.allFinite()) throw std::runtime_error("rank-deficient surrogate covariance");
  } else {
    for (int it = 0; it < 4 && rel > 0.0; ++it) {
      const Matrix dx = ldlt.solve(r);
      if ((dx.array() == 0.0).all()) break;
      X += dx;
      r = detail::residual_ld(A, X, B);
      rel = detail::relative_residual(A, X, B, r);
    }
  }
  rep.residual = rel;
  if (report) *report = rep;
  return X;
}

// Classic fixed-step RK4 over `substeps` equal substeps of the window `dt`.
template <class Rhs>
inline Vector rk4(const Rhs& rhs, Vector x, double dt, int substeps) {
  if (substeps < 1) throw std::invalid_argument("rk4: substeps must be >= 1");
  const double h = dt / substeps;
  for (int s = 0; s < substeps; ++s) {
    const Vector k1 = rhs(x);
    const Vector k2 = rhs(x + 0.5 * h * k1);
    const Vector k3 = rhs(x + 0.5 * h * k2);
    const Vector k4 = rhs(x + h * k3);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return x;
}

}  // namespace mfenkf
