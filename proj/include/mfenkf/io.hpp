#pragma once

// Binary containers for snapshot matrices and reduced bases.
//
// Snapshot file: header of three little-endian u64 (magic 0x504F4431, rows,
// cols) followed by the matrix entries as column-major IEEE doubles.
//
// Basis file: header (magic 0x504F4432, full dimension n, rank r) followed by
// doubles in fixed order: centering flag (0/1), shift (n), basis matrix
// (n*r column-major), drift (r), linear operator (r*r column-major), and the
// r quadratic blocks (r*r column-major each).

#include "mfenkf/ensemble.hpp"
#include "mfenkf/models/pod.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

namespace mfenkf {

constexpr std::uint64_t snapshot_magic = 0x504F4431ull;
constexpr std::uint64_t basis_magic = 0x504F4432ull;

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw std::runtime_error("truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void write_doubles(std::ostream& out, const double* data, std::size_t count) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
}

inline void read_doubles(std::istream& in, double* data, std::size_t count) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("truncated file");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file for reading: " + path);
  return in;
}

inline void check_dims(std::uint64_t rows, std::uint64_t cols) {
  constexpr std::uint64_t limit = 1ull << 32;
  if (rows == 0 || cols == 0 || rows > limit || cols > limit || rows * cols > limit)
    throw std::runtime_error("file header dimensions out of range");
}

}  // namespace detail

inline void write_snapshots(const std::string& path, const Matrix& data) {
  if (data.rows() < 1 || data.cols() < 1) throw std::invalid_argument("empty snapshot set");
  auto out = detail::open_out(path);
  detail::write_u64(out, snapshot_magic);
  detail::write_u64(out, static_cast<std::uint64_t>(data.rows()));
  detail::write_u64(out, static_cast<std::uint64_t>(data.cols()));
  detail::write_doubles(out, data.data(), static_cast<std::size_t>(data.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline Matrix read_snapshots(const std::string& path) {
  auto in = detail::open_in(path);
  if (detail::read_u64(in) != snapshot_magic) throw std::runtime_error("unrecognized file magic");
  const std::uint64_t rows = detail::read_u64(in);
  const std::uint64_t cols = detail::read_u64(in);
  detail::check_dims(rows, cols);
  Matrix data(static_cast<Index>(rows), static_cast<Index>(cols));
  detail::read_doubles(in, data.data(), static_cast<std::size_t>(rows * cols));
  return data;
}

inline void write_pod_basis(const std::string& path, const PODBasis& b) {
  if (!b.has_dynamics()) throw std::logic_error("basis carries no Galerkin tensors");
  const Index n = b.full_dim(), r = b.rank();
  auto out = detail::open_out(path);
  detail::write_u64(out, basis_magic);
  detail::write_u64(out, static_cast<std::uint64_t>(n));
  detail::write_u64(out, static_cast<std::uint64_t>(r));
  const double flag = b.centered ? 1.0 : 0.0;
  detail::write_doubles(out, &flag, 1);
  detail::write_doubles(out, b.shift.data(), static_cast<std::size_t>(n));
  detail::write_doubles(out, b.phi.data(), static_cast<std::size_t>(n * r));
  detail::write_doubles(out, b.drift.data(), static_cast<std::size_t>(r));
  detail::write_doubles(out, b.linear_op.data(), static_cast<std::size_t>(r * r));
  for (const Matrix& block : b.quad)
    detail::write_doubles(out, block.data(), static_cast<std::size_t>(r * r));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline PODBasis read_pod_basis(const std::string& path) {
  auto in = detail::open_in(path);
  if (detail::read_u64(in) != basis_magic) throw std::runtime_error("unrecognized file magic");
  const std::uint64_t n64 = detail::read_u64(in);
  const std::uint64_t r64 = detail::read_u64(in);
  detail::check_dims(n64, r64);
  const Index n = static_cast<Index>(n64), r = static_cast<Index>(r64);
  PODBasis b;
  double flag = 0.0;
  detail::read_doubles(in, &flag, 1);
  b.centered = flag != 0.0;
  b.shift.resize(n);
  detail::read_doubles(in, b.shift.data(), static_cast<std::size_t>(n));
  b.phi.resize(n, r);
  detail::read_doubles(in, b.phi.data(), static_cast<std::size_t>(n * r));
  b.drift.resize(r);
  detail::read_doubles(in, b.drift.data(), static_cast<std::size_t>(r));
  b.linear_op.resize(r, r);
  detail::read_doubles(in, b.linear_op.data(), static_cast<std::size_t>(r * r));
  b.quad.assign(static_cast<std::size_t>(r), Matrix(r, r));
  for (Matrix& block : b.quad) detail::read_doubles(in, block.data(), static_cast<std::size_t>(r * r));
  return b;
}

}  // namespace mfenkf
