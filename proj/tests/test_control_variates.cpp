#include "mfenkf/control_variates.hpp"

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

Ensemble random_ensemble(std::mt19937_64& gen, Index n, Index nn, std::string space = "x") {
  std::normal_distribution<double> d;
  Ensemble e{Matrix(n, nn), std::move(space)};
  for (Index j = 0; j < nn; ++j)
    for (Index i = 0; i < n; ++i) e.members(i, j) = d(gen);
  return e;
}

Vector oracle_mean(const Ensemble& e) {
  Vector m(e.dim());
  for (Index i = 0; i < e.dim(); ++i) {
    long double acc = 0.0L;
    for (Index j = 0; j < e.size(); ++j) acc += e.members(i, j);
    m[i] = static_cast<double>(acc / e.size());
  }
  return m;
}

Matrix oracle_cov(const Ensemble& a, const Ensemble& b) {
  const Vector ma = oracle_mean(a), mb = oracle_mean(b);
  Matrix c(a.dim(), b.dim());
  for (Index i = 0; i < a.dim(); ++i)
    for (Index k = 0; k < b.dim(); ++k) {
      long double acc = 0.0L;
      for (Index j = 0; j < a.size(); ++j)
        acc += (a.members(i, j) - ma[i]) * static_cast<long double>(b.members(k, j) - mb[k]);
      c(i, k) = static_cast<double>(acc / (a.size() - 1));
    }
  return c;
}

double trace_objective(const Matrix& s, const Matrix& cxx, const Matrix& cxv,
                       const Matrix& cvv, const Matrix& cuu) {
  return (cxx - cxv * s.transpose() - s * cxv.transpose() + s * (cvv + cuu) * s.transpose())
      .trace();
}

}  // namespace

TEST_CASE("fixed_fraction_gain produces one over count plus one") {
  REQUIRE(*fixed_fraction_gain(1).fraction == 0.5);
  REQUIRE(*fixed_fraction_gain(2).fraction == 1.0 / 3.0);
  REQUIRE(*fixed_fraction_gain(4).fraction == 0.2);
  REQUIRE(fixed_fraction_gain(3).mode == GainMode::FixedFraction);
  REQUIRE_THROWS_AS(fixed_fraction_gain(0), std::invalid_argument);
}

TEST_CASE("anomaly_gain_scale matches its closed form") {
  REQUIRE(std::abs(anomaly_gain_scale(1) - 0.58578643762690495) <= 1e-15);
  REQUIRE(anomaly_gain_scale(5) == 1.0 / 1.5);
  REQUIRE(anomaly_gain_scale(1000000) > 0.998);
  REQUIRE(anomaly_gain_scale(1000000) < 1.0);
  REQUIRE_THROWS_AS(anomaly_gain_scale(0), std::invalid_argument);
}

TEST_CASE("optimal_gain_single halves a matched surrogate") {
  std::mt19937_64 gen(21);
  const Matrix c = random_spd(gen, 3, 1.0);
  const GainSpec s = optimal_gain_single(c, c, c);
  REQUIRE(s.mode == GainMode::Optimal);
  REQUIRE((*s.matrix - 0.5 * Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("optimal_gain_single ignores an uncorrelated surrogate") {
  std::mt19937_64 gen(22);
  const Matrix c = random_spd(gen, 4, 1.0);
  const GainSpec s = optimal_gain_single(Matrix::Zero(4, 4), c, c);
  REQUIRE(s.matrix->isZero(0.0));
}

TEST_CASE("optimal_gain_single minimizes the trace objective") {
  std::mt19937_64 gen(23);
  const Matrix joint = random_spd(gen, 6, 1.0);
  const Matrix cxx = joint.topLeftCorner(3, 3);
  const Matrix cxv = joint.topRightCorner(3, 3);
  const Matrix cvv = joint.bottomRightCorner(3, 3);
  const Matrix cuu = random_spd(gen, 3, 1.0);
  const Matrix s = *optimal_gain_single(cxv, cvv, cuu).matrix;
  const double best = trace_objective(s, cxx, cxv, cvv, cuu);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 3; ++j)
      for (double delta : {1e-3, -1e-3, 1e-5, -1e-5}) {
        Matrix probe = s;
        probe(i, j) += delta;
        REQUIRE(trace_objective(probe, cxx, cxv, cvv, cuu) >= best - 1e-12);
      }
}

TEST_CASE("general_optimal_gain with one surrogate equals the single solve") {
  std::mt19937_64 gen(24);
  const Matrix cxv = Matrix::Random(4, 3);
  const Matrix chat = random_spd(gen, 3, 1.0);
  const Matrix canc = random_spd(gen, 3, 1.0);
  const GainSpec single = optimal_gain_single(cxv, chat, canc);
  const auto gains = general_optimal_gain({{Matrix(chat + canc)}}, {cxv});
  REQUIRE(gains.size() == 1);
  REQUIRE(*gains[0].matrix == *single.matrix);
}

TEST_CASE("general_optimal_gain all identity instance gives the fixed fraction exactly") {
  const Index r = 3;
  const Matrix eye = Matrix::Identity(r, r);
  for (int m_count = 1; m_count <= 6; ++m_count) {
    std::vector<std::vector<Matrix>> blocks(m_count, std::vector<Matrix>(m_count, eye));
    for (int m = 0; m < m_count; ++m) blocks[m][m] = 2.0 * eye;  // identity hat + identity anc
    std::vector<Matrix> rhs(m_count, eye);
    const auto gains = general_optimal_gain(blocks, rhs);
    const double expect = *fixed_fraction_gain(m_count).fraction;
    for (const auto& g : gains)
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < r; ++j)
          REQUIRE((*g.matrix)(i, j) == (i == j ? expect : 0.0));
  }
}

TEST_CASE("general_optimal_gain agrees with an independent dense solve") {
  std::mt19937_64 gen(25);
  std::normal_distribution<double> d;
  for (int rep = 0; rep < 10; ++rep) {
    const int m_count = 2 + rep % 2;
    const Index n = 4;
    std::vector<Index> sizes;
    for (int m = 0; m < m_count; ++m) sizes.push_back(2 + (rep + m) % 3);
    // Jointly consistent covariance blocks from one tall factor per surrogate.
    std::vector<Matrix> factors;
    for (int m = 0; m < m_count; ++m) {
      Matrix f(sizes[m], 12);
      for (Index j = 0; j < f.cols(); ++j)
        for (Index i = 0; i < f.rows(); ++i) f(i, j) = d(gen);
      factors.push_back(f);
    }
    std::vector<std::vector<Matrix>> blocks(m_count, std::vector<Matrix>(m_count));
    std::vector<Matrix> rhs;
    for (int m = 0; m < m_count; ++m) {
      for (int l = 0; l < m_count; ++l) blocks[m][l] = factors[m] * factors[l].transpose();
      blocks[m][m] += random_spd(gen, sizes[m], 0.5);
      Matrix r(n, sizes[m]);
      for (Index j = 0; j < r.cols(); ++j)
        for (Index i = 0; i < r.rows(); ++i) r(i, j) = d(gen);
      rhs.push_back(r);
    }
    const auto gains = general_optimal_gain(blocks, rhs);

    Index total = 0;
    for (auto s : sizes) total += s;
    Matrix big(total, total), stacked(total, n);
    Index off_m = 0;
    for (int m = 0; m < m_count; ++m) {
      Index off_l = 0;
      for (int l = 0; l < m_count; ++l) {
        big.block(off_m, off_l, sizes[m], sizes[l]) = blocks[m][l];
        off_l += sizes[l];
      }
      stacked.block(off_m, 0, sizes[m], n) = rhs[m].transpose();
      off_m += sizes[m];
    }
    const Matrix oracle = big.fullPivLu().solve(stacked);
    const double scale = oracle.cwiseAbs().maxCoeff();
    Index off = 0;
    Matrix mine(total, n);
    for (int m = 0; m < m_count; ++m) {
      mine.block(off, 0, sizes[m], n) = gains[m].matrix->transpose();
      off += sizes[m];
    }
    REQUIRE((mine - oracle).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, scale));
    REQUIRE((big * mine - stacked).cwiseAbs().maxCoeff() <=
            1e-10 * stacked.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("general_optimal_gain reports a condition estimate on singular systems") {
  const Matrix zero = Matrix::Zero(2, 2);
  std::vector<std::vector<Matrix>> blocks{{zero}};
  std::vector<Matrix> rhs{Matrix::Ones(3, 2)};
  REQUIRE_THROWS_WITH(general_optimal_gain(blocks, rhs),
                      Catch::Matchers::ContainsSubstring("condition estimate"));
}

TEST_CASE("general_optimal_gain validates block shapes") {
  std::vector<std::vector<Matrix>> blocks{{Matrix::Identity(2, 2)}};
  std::vector<Matrix> rhs{Matrix::Ones(3, 1)};  // wrong column count
  REQUIRE_THROWS_WITH(general_optimal_gain(blocks, rhs), "gain block shapes do not align");
}

TEST_CASE("total_variate_mean is unbiased when control and ancillary agree") {
  std::mt19937_64 gen(26);
  const Ensemble x = random_ensemble(gen, 4, 9);
  const Ensemble u = random_ensemble(gen, 4, 9, "x");
  TotalVariateTerm term{{&x, &u, &u}, StateMap{}, fixed_fraction_gain(1)};
  const StateVector z = total_variate_mean({term});
  REQUIRE(z.values == ensemble_mean(x));
  REQUIRE(z.space == "x");
}

TEST_CASE("total_variate_mean with a zero gain returns the principal mean") {
  std::mt19937_64 gen(27);
  const Ensemble x = random_ensemble(gen, 3, 7);
  const Ensemble uhat = random_ensemble(gen, 3, 7);
  const Ensemble u = random_ensemble(gen, 3, 5);
  GainSpec zero;
  zero.mode = GainMode::Optimal;
  zero.matrix = Matrix::Zero(3, 3);
  const StateVector z = total_variate_mean({{{&x, &uhat, &u}, StateMap{}, zero}});
  REQUIRE(z.values == ensemble_mean(x));
}

TEST_CASE("total_variate_mean matches the member-averaged oracle") {
  std::mt19937_64 gen(28);
  const Index n = 4, r = 2, nn = 11;
  const Ensemble x = random_ensemble(gen, n, nn);
  const Ensemble uhat = random_ensemble(gen, r, nn, "r");
  const Ensemble u = random_ensemble(gen, r, nn, "r");
  const Matrix p = Matrix::Random(n, r);
  const StateMap phi = [p](const Vector& v) { return Vector(p * v); };
  GainSpec half;
  half.mode = GainMode::Optimal;
  half.matrix = 0.5 * Matrix::Identity(n, n);
  const StateVector z = total_variate_mean({{{&x, &uhat, &u}, phi, half}});

  Vector acc = Vector::Zero(n);
  for (Index j = 0; j < nn; ++j)
    acc += x.members.col(j) - 0.5 * (p * uhat.members.col(j) - p * u.members.col(j));
  REQUIRE((z.values - acc / double(nn)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("total_variate_mean rejects bad wiring") {
  std::mt19937_64 gen(29);
  const Ensemble x = random_ensemble(gen, 3, 6);
  const Ensemble y = random_ensemble(gen, 3, 6);
  const Ensemble u5 = random_ensemble(gen, 3, 5);
  REQUIRE_THROWS_WITH(total_variate_mean({}), "no variate terms");
  REQUIRE_THROWS_WITH(
      total_variate_mean({{{&x, &u5, &u5}, StateMap{}, fixed_fraction_gain(1)}}),
      "unpaired ensembles");
  REQUIRE_THROWS_WITH(
      total_variate_mean({{{&x, &y, &y}, StateMap{}, fixed_fraction_gain(1)},
                          {{&y, &x, &x}, StateMap{}, fixed_fraction_gain(1)}}),
      "variate terms disagree on the principal");
  const Ensemble r2 = random_ensemble(gen, 2, 6);
  REQUIRE_THROWS_WITH(
      total_variate_mean({{{&x, &r2, &r2}, StateMap{}, fixed_fraction_gain(1)}}),
      "dimension mismatch after interpolation");
}

TEST_CASE("total_variate_ensemble with no controls returns the principal unchanged") {
  std::mt19937_64 gen(30);
  const Ensemble x = random_ensemble(gen, 4, 8);
  const Ensemble z = total_variate_ensemble(x, {}, ensemble_mean(x));
  REQUIRE(z.members == x.members);
}

TEST_CASE("total_variate_ensemble holds the supplied mean and transformed anomalies") {
  std::mt19937_64 gen(31);
  const Index n = 3, nn = 9;
  const Ensemble x = random_ensemble(gen, n, nn);
  const Ensemble uhat = random_ensemble(gen, 2, nn, "r");
  const Matrix p = Matrix::Random(n, 2);
  const StateMap phi = [p](const Vector& v) { return Vector(p * v); };
  GainSpec s;
  s.mode = GainMode::Optimal;
  s.matrix = 0.3 * Matrix::Identity(n, n);
  const GainSpec stilde = s.scaled(anomaly_gain_scale(1));
  Vector z_mean(n);
  z_mean << 1.0, -2.0, 0.5;
  const Ensemble z = total_variate_ensemble(x, {{&uhat, phi, stilde}}, z_mean);

  REQUIRE((ensemble_mean(z) - z_mean).cwiseAbs().maxCoeff() <= 1e-12);
  const Ensemble vhat = map_members(uhat, [&](const Vector& v) { return Vector(p * v); }, "x");
  const Matrix expect = anomalies(x) - stilde.apply(anomalies(vhat));
  REQUIRE((anomalies(z) - expect).cwiseAbs().maxCoeff() <= 1e-12);

  // Member-level check against the direct formula.
  const Vector xbar = ensemble_mean(x);
  const Vector vbar = ensemble_mean(vhat);
  for (Index j = 0; j < nn; ++j) {
    const Vector direct = z_mean + (x.members.col(j) - xbar) -
                          stilde.apply(Vector(vhat.members.col(j) - vbar));
    REQUIRE((z.members.col(j) - direct).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("total_variate_ensemble passes principal anomalies through a flat control") {
  std::mt19937_64 gen(32);
  const Ensemble x = random_ensemble(gen, 3, 7);
  Ensemble flat{Matrix(3, 7), "x"};
  flat.members.colwise() = Vector::Ones(3);
  Vector z_mean = Vector::Zero(3);
  const Ensemble z = total_variate_ensemble(x, {{&flat, StateMap{}, fixed_fraction_gain(1)}},
                                            z_mean);
  REQUIRE((anomalies(z) - anomalies(x)).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("total_variate_ensemble rejects uncoupled controls") {
  std::mt19937_64 gen(33);
  const Ensemble x = random_ensemble(gen, 3, 7);
  const Ensemble u = random_ensemble(gen, 3, 6);
  REQUIRE_THROWS_WITH(
      total_variate_ensemble(x, {{&u, StateMap{}, fixed_fraction_gain(1)}}, Vector::Zero(3)),
      "unpaired ensembles");
}

TEST_CASE("total_variate_cov_full reduces to the principal covariance for flat controls") {
  std::mt19937_64 gen(34);
  const Ensemble x = random_ensemble(gen, 4, 9);
  Ensemble flat{Matrix(4, 9), "x"};
  flat.members.colwise() = Vector::Constant(4, 2.0);
  Ensemble flat_anc{Matrix(4, 5), "x"};
  flat_anc.members.colwise() = Vector::Constant(4, -1.0);
  const Matrix c = total_variate_cov_full({&x, &flat, &flat_anc}, StateMap{});
  REQUIRE(c == cross_cov(x));
}

TEST_CASE("total_variate_cov_full on a self control halves the covariance") {
  std::mt19937_64 gen(35);
  const Ensemble x = random_ensemble(gen, 4, 12);
  Ensemble copy = x;  // stands in for an independent variate with identical sample covariance
  const Matrix c = total_variate_cov_full({&x, &x, &copy}, StateMap{});
  REQUIRE((c - 0.5 * cross_cov(x)).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("total_variate_cov_full matches term-by-term oracle assembly") {
  std::mt19937_64 gen(36);
  const Index n = 3, r = 2, nn = 10;
  const Ensemble x = random_ensemble(gen, n, nn);
  const Ensemble uhat = random_ensemble(gen, r, nn, "r");
  const Ensemble u = random_ensemble(gen, r, 8, "r");
  const Matrix p = Matrix::Random(n, r);
  const StateMap phi = [p](const Vector& v) { return Vector(p * v); };
  GainSpec s;
  s.mode = GainMode::Optimal;
  s.matrix = Matrix::Random(n, n) * 0.3;
  const Matrix c = total_variate_cov_full({&x, &uhat, &u}, phi, s);

  const Ensemble vhat{p * uhat.members, "x"};
  const Ensemble v{p * u.members, "x"};
  const Matrix sm = *s.matrix;
  const Matrix oracle = oracle_cov(x, x) - oracle_cov(x, vhat) * sm.transpose() -
                        sm * oracle_cov(vhat, x) + sm * oracle_cov(vhat, vhat) * sm.transpose() +
                        sm * oracle_cov(v, v) * sm.transpose();
  REQUIRE((c - oracle).cwiseAbs().maxCoeff() <= 1e-12);
  REQUIRE((c - c.transpose()).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("total_variate_cov_reduced with identity projection equals the full form") {
  std::mt19937_64 gen(37);
  const Ensemble x = random_ensemble(gen, 3, 8);
  const Ensemble uhat = random_ensemble(gen, 3, 8);
  const Ensemble u = random_ensemble(gen, 3, 6);
  const VariateTriple t{&x, &uhat, &u};
  const Matrix full = total_variate_cov_full(t, StateMap{});
  const Matrix reduced = total_variate_cov_reduced(t, StateMap{});
  REQUIRE(full == reduced);
}

TEST_CASE("total_variate_cov_reduced matches the oracle in the surrogate space") {
  std::mt19937_64 gen(38);
  const Index n = 4, r = 2, nn = 9;
  const Ensemble x = random_ensemble(gen, n, nn);
  const Ensemble uhat = random_ensemble(gen, r, nn, "r");
  const Ensemble u = random_ensemble(gen, r, 7, "r");
  const Matrix q = Matrix::Random(r, n);
  const StateMap theta = [q](const Vector& v) { return Vector(q * v); };
  GainSpec s;
  s.mode = GainMode::Optimal;
  s.matrix = Matrix::Random(r, r) * 0.25;
  const Matrix c = total_variate_cov_reduced({&x, &uhat, &u}, theta, s);

  const Ensemble tx{q * x.members, "r"};
  const Matrix sm = *s.matrix;
  const Matrix oracle = oracle_cov(tx, tx) - oracle_cov(tx, uhat) * sm.transpose() -
                        sm * oracle_cov(uhat, tx) + sm * oracle_cov(uhat, uhat) * sm.transpose() +
                        sm * oracle_cov(u, u) * sm.transpose();
  REQUIRE((c - oracle).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("optimal gains shrink the total variate variance with correlation") {
  const Index n = 3;
  const Matrix eye = Matrix::Identity(n, n);
  const double base = eye.trace();
  for (double rho : {0.0, 0.25, 0.5, 0.9}) {
    const Matrix cxv = rho * eye;
    const Matrix s = *optimal_gain_single(cxv, eye, eye).matrix;
    REQUIRE((s - 0.5 * rho * eye).cwiseAbs().maxCoeff() <= 1e-12);
    const double reduced = trace_objective(s, eye, cxv, eye, eye);
    REQUIRE(reduced <= base + 1e-10);
    if (rho == 0.0) {
      REQUIRE(std::abs(reduced - base) <= 1e-10);
    } else {
      REQUIRE(reduced <= base - double(n) * rho * rho / 2.0 + 1e-10);
    }
  }
}

TEST_CASE("sampled optimal gain approaches one half with matched constituents") {
  std::mt19937_64 gen(39);
  const Index n = 4;
  const Matrix c = random_spd(gen, n, 1.0);
  const Matrix chol = Eigen::LLT<Matrix>(c).matrixL();
  Matrix q = Matrix::Random(n, n);
  const Matrix theta = Eigen::HouseholderQR<Matrix>(q).householderQ();  // orthonormal, square
  std::normal_distribution<double> d;

  const auto gain_error = [&](Index nn) {
    Ensemble x{Matrix(n, nn), "x"}, vhat{Matrix(n, nn), "x"}, v{Matrix(n, nn), "x"};
    for (Index j = 0; j < nn; ++j) {
      Vector xi(n), xi2(n);
      for (Index i = 0; i < n; ++i) xi[i] = d(gen);
      for (Index i = 0; i < n; ++i) xi2[i] = d(gen);
      x.members.col(j) = chol * xi;
      vhat.members.col(j) = theta.transpose() * (theta * x.members.col(j));
      v.members.col(j) = theta.transpose() * (theta * (chol * xi2));
    }
    const Matrix s =
        *optimal_gain_single(cross_cov(x, vhat), cross_cov(vhat), cross_cov(v)).matrix;
    return (s - 0.5 * Matrix::Identity(n, n)).norm();
  };

  const double e2 = gain_error(100);
  const double e3 = gain_error(1000);
  const double e4 = gain_error(10000);
  REQUIRE(e2 <= 0.5);
  REQUIRE(e3 <= 0.15);
  REQUIRE(e4 <= 0.05);
  REQUIRE(e4 < e2);
}
