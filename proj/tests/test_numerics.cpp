#include "mfenkf/numerics.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace mfenkf;

namespace {

Matrix random_spd(std::mt19937_64& gen, Index n, double shift) {
  std::normal_distribution<double> d;
  Matrix g(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) g(i, j) = d(gen);
  return g * g.transpose() + shift * Matrix::Identity(n, n);
}

}  // namespace

TEST_CASE("solve_spd solves well conditioned systems to refinement accuracy") {
  std::mt19937_64 gen(31);
  std::normal_distribution<double> d;
  for (int rep = 0; rep < 20; ++rep) {
    const Index n = 2 + (rep % 6);
    const Matrix a = random_spd(gen, n, double(n));
    Matrix b(n, n + 1);
    for (Index j = 0; j < b.cols(); ++j)
      for (Index i = 0; i < n; ++i) b(i, j) = d(gen);
    SpdSolveReport rep_out;
    const Matrix x = solve_spd(a, b, &rep_out);
    REQUIRE_FALSE(rep_out.used_ridge);
    const double rel = (a * x - b).cwiseAbs().maxCoeff() /
                       (a.cwiseAbs().maxCoeff() * x.cwiseAbs().maxCoeff() + 1.0);
    REQUIRE(rel <= 1e-13);
  }
}

TEST_CASE("solve_spd identity system returns the right hand side") {
  const Matrix b = Matrix::Random(5, 3);
  const Matrix x = solve_spd(Matrix::Identity(5, 5), b);
  REQUIRE((x - b).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("solve_spd handles a consistent singular denominator without a ridge") {
  // Rank-deficient sample covariances produce consistent systems (the
  // numerator lives in the anomaly span); those must solve cleanly.
  Matrix a = Matrix::Zero(3, 3);
  a(0, 0) = 1.0;
  a(1, 1) = 1.0;  // third direction has no variance at all
  Matrix b(3, 1);
  b << 1.0, 2.0, 0.0;
  SpdSolveReport rep;
  const Matrix x = solve_spd(a, b, &rep);
  REQUIRE_FALSE(rep.used_ridge);
  REQUIRE(std::abs(x(0, 0) - 1.0) <= 1e-12);
  REQUIRE(std::abs(x(1, 0) - 2.0) <= 1e-12);
}

TEST_CASE("solve_spd regularizes an inconsistent singular denominator") {
  Matrix a = Matrix::Zero(3, 3);
  a(0, 0) = 1.0;
  a(1, 1) = 1.0;
  Matrix b(3, 1);
  b << 1.0, 2.0, 5.0;  // demands a response in the dead direction
  SpdSolveReport rep;
  const Matrix x = solve_spd(a, b, &rep);
  REQUIRE(rep.used_ridge);
  REQUIRE(rep.ridge > 0.0);
  REQUIRE(x.allFinite());
}

TEST_CASE("solve_spd zero denominator yields the zero gain or rejects") {
  const Matrix a = Matrix::Zero(2, 2);
  const Matrix x = solve_spd(a, Matrix::Zero(2, 3));
  REQUIRE(x == Matrix::Zero(2, 3));
  Matrix b(2, 1);
  b << 1.0, 1.0;
  REQUIRE_THROWS_WITH(solve_spd(a, b), "rank-deficient surrogate covariance");
}

TEST_CASE("solve_spd handles an ill conditioned Hilbert block") {
  const Index n = 7;
  Matrix a(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) a(i, j) = 1.0 / double(i + j + 1);
  Vector xs(n);
  for (Index i = 0; i < n; ++i) xs[i] = std::pow(-1.0, double(i)) * (1.0 + 0.5 * double(i));
  const Matrix b = a * xs;
  const Matrix x = solve_spd(a, b);
  REQUIRE((a * x - b).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("solve_spd rejects mismatched shapes") {
  REQUIRE_THROWS_AS(solve_spd(Matrix::Identity(3, 3), Matrix::Zero(2, 1)),
                    std::invalid_argument);
}

TEST_CASE("rk4 integrates exponential decay to fourth order accuracy") {
  const double lambda = -1.3;
  const auto rhs = [&](const Vector& x) { return Vector(lambda * x); };
  Vector x0(1);
  x0 << 2.0;
  const double t = 0.5;
  const double exact = 2.0 * std::exp(lambda * t);
  const double e1 = std::abs(rk4(rhs, x0, t, 8)[0] - exact);
  const double e2 = std::abs(rk4(rhs, x0, t, 16)[0] - exact);
  REQUIRE(e1 <= 1e-6);
  REQUIRE(e1 / e2 >= 12.0);  // halving the step cuts the error ~16x
}

TEST_CASE("rk4 keeps harmonic oscillator energy to fifth order per step") {
  const auto rhs = [](const Vector& x) {
    Vector dx(2);
    dx << x[1], -x[0];
    return dx;
  };
  Vector x0(2);
  x0 << 1.0, 0.0;
  const Vector x1 = rk4(rhs, x0, 2.0 * M_PI, 200);
  REQUIRE(std::abs(x1[0] * x1[0] + x1[1] * x1[1] - 1.0) <= 1e-7);
  REQUIRE(std::abs(x1[0] - 1.0) <= 1e-6);
  REQUIRE(std::abs(x1[1]) <= 1e-6);
}

TEST_CASE("rk4 refuses a nonpositive substep count") {
  const auto rhs = [](const Vector& x) { return x; };
  REQUIRE_THROWS_AS(rk4(rhs, Vector::Ones(1), 1.0, 0), std::invalid_argument);
}
