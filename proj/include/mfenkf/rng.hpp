#pragma once

// Seed derivation and named substreams.  Every experiment run owns independent
// mt19937_64 streams derived from (master seed, ensemble size, inflation, run id)
// so sweep cells can execute concurrently and still reproduce bit for bit.

#include "mfenkf/ensemble.hpp"

#include <bit>
#include <cstdint>
#include <random>

namespace mfenkf {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Stable hash of one sweep cell; the run seed is master_seed XOR this hash.
inline std::uint64_t run_hash(int ensemble_size, double alpha, int run_id) {
  std::uint64_t h = splitmix64(static_cast<std::uint64_t>(ensemble_size));
  h = splitmix64(h ^ std::bit_cast<std::uint64_t>(alpha));
  h = splitmix64(h ^ static_cast<std::uint64_t>(run_id));
  return h;
}

inline std::uint64_t derive_run_seed(std::uint64_t master_seed, int ensemble_size,
                                     double alpha, int run_id) {
  return master_seed ^ run_hash(ensemble_size, alpha, run_id);
}

// Named substream tags.  A stream is seeded with
// splitmix64(splitmix64(run_seed ^ tag) + subindex); subindex separates
// per-tree / per-level streams that must be mutually independent.
enum class Stream : std::uint64_t {
  TruthInit = 0x7472757468ull,     // initial-condition selection for the nature run
  EnsembleInit = 0x656e73ull,      // principal ensemble draws
  AncillaryInit = 0x616e63ull,     // ancillary ensemble draws (per node)
  ObsNoise = 0x6f626e6full,        // observation noise on the truth
  ObsPerturb = 0x70657274ull,      // perturbed-observation ensembles
};

inline std::mt19937_64 make_stream(std::uint64_t run_seed, Stream tag,
                                   std::uint64_t subindex = 0) {
  const std::uint64_t s =
      splitmix64(splitmix64(run_seed ^ static_cast<std::uint64_t>(tag)) + subindex);
  return std::mt19937_64(s);
}

// Standard-normal draws in fixed component-ascending order.
inline Vector normal_vector(std::mt19937_64& gen, Index n) {
  std::normal_distribution<double> dist;
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = dist(gen);
  return v;
}

inline Matrix normal_matrix(std::mt19937_64& gen, Index rows, Index cols) {
  std::normal_distribution<double> dist;
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(gen);
  return m;
}

}  // namespace mfenkf
