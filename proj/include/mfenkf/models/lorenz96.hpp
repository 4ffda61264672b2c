#pragma once

// Cyclic quadratic chaotic model used for fast tests and CI-scale experiments.
// Exposes its right-hand side split into constant / linear / bilinear parts so
// the reduced-order builder can project it term by term.

#include "mfenkf/ensemble.hpp"
#include "mfenkf/forest.hpp"
#include "mfenkf/numerics.hpp"

#include <stdexcept>

namespace mfenkf {

struct Lorenz96 {
  Index k = 40;
  double forcing = 8.0;

  Index dim() const { return k; }

  Vector constant() const { return Vector::Constant(k, forcing); }

  Vector linear(const Vector& v) const { return -v; }

  // Advection term evaluated as a bilinear form: (a_{i+1} - a_{i-2}) b_{i-1}.
  Vector bilinear(const Vector& a, const Vector& b) const {
    Vector out(k);
    for (Index i = 0; i < k; ++i) {
      const Index ip1 = (i + 1) % k;
      const Index im1 = (i + k - 1) % k;
      const Index im2 = (i + k - 2) % k;
      out[i] = (a[ip1] - a[im2]) * b[im1];
    }
    return out;
  }

  Vector rhs(const Vector& x) const {
    if (x.size() != k) throw std::invalid_argument("state dimension mismatch");
    Vector out = bilinear(x, x);
    out -= x;
    out.array() += forcing;
    return out;
  }
};

inline Vector lorenz96_rhs(const Vector& x, double forcing) {
  if (x.size() < 4) throw std::invalid_argument("cyclic advection needs at least four variables");
  Lorenz96 model{x.size(), forcing};
  return model.rhs(x);
}

inline ModelStepFn lorenz96_model(Index k, double forcing, int substeps) {
  Lorenz96 model{k, forcing};
  return [model, substeps](const Vector& x, double dt) {
    return rk4([&model](const Vector& s) { return model.rhs(s); }, x, dt, substeps);
  };
}

}  // namespace mfenkf
