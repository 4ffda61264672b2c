#pragma once

// Observation operators that sample the flattened state at evenly spread grid
// indices. The index set for `count` samples out of `n` entries is
// j*n/count (integer division) for j = 0..count-1, so the first gridpoint is
// always observed and the spacing is as even as integer arithmetic allows.

#include "mfenkf/control_variates.hpp"
#include "mfenkf/ensemble.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace mfenkf {

inline std::vector<Index> gridpoint_indices(Index n, Index count) {
  if (n < 1) throw std::invalid_argument("state size must be positive");
  if (count < 1 || count > n) throw std::invalid_argument("observation count must lie in [1, state size]");
  std::vector<Index> idx(static_cast<std::size_t>(count));
  for (Index j = 0; j < count; ++j) {
    idx[static_cast<std::size_t>(j)] = j * n / count;
  }
  return idx;
}

inline StateMap observe_gridpoints(Index n, Index count) {
  auto idx = gridpoint_indices(n, count);
  return [n, idx](const Vector& x) {
    if (x.size() != n) throw std::invalid_argument("state dimension mismatch");
    Vector y(static_cast<Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) y[static_cast<Index>(k)] = x[idx[k]];
    return y;
  };
}

// Dense selection matrix equivalent of observe_gridpoints, for small problems
// where the observation operator is needed in matrix form.
inline Matrix gridpoint_selection_matrix(Index n, Index count) {
  auto idx = gridpoint_indices(n, count);
  Matrix h = Matrix::Zero(static_cast<Index>(idx.size()), n);
  for (std::size_t k = 0; k < idx.size(); ++k) h(static_cast<Index>(k), idx[k]) = 1.0;
  return h;
}

// Uniform sub-lattice over a 2-D field stored column-major as nx-by-ny
// (x index fastest): picks count_x * count_y points at
// (i*nx/count_x, j*ny/count_y).
inline std::vector<Index> sublattice_indices(Index nx, Index ny, Index count_x, Index count_y) {
  if (nx < 1 || ny < 1) throw std::invalid_argument("grid sizes must be positive");
  if (count_x < 1 || count_x > nx || count_y < 1 || count_y > ny)
    throw std::invalid_argument("lattice counts must lie in [1, grid size]");
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(count_x * count_y));
  for (Index j = 0; j < count_y; ++j) {
    const Index gj = j * ny / count_y;
    for (Index i = 0; i < count_x; ++i) {
      const Index gi = i * nx / count_x;
      idx.push_back(gi + nx * gj);
    }
  }
  return idx;
}

inline StateMap observe_sublattice(Index nx, Index ny, Index count_x, Index count_y) {
  auto idx = sublattice_indices(nx, ny, count_x, count_y);
  const Index n = nx * ny;
  return [n, idx](const Vector& x) {
    if (x.size() != n) throw std::invalid_argument("state dimension mismatch");
    Vector y(static_cast<Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) y[static_cast<Index>(k)] = x[idx[k]];
    return y;
  };
}

}  // namespace mfenkf
