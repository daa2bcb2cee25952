#pragma once

#include <algorithm>
#include <cmath>
#include <random>

#include "cellgraph/linalg.hpp"

namespace cgtest {

using cellgraph::DenseMatrix;
using cellgraph::Index;
using cellgraph::SparseMatrix;

inline DenseMatrix random_dense(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  DenseMatrix m(rows, cols);
  for (double& v : m.values()) v = n(rng);
  return m;
}

// Each entry is stored with probability `density`, value uniform in [lo, hi].
inline SparseMatrix random_sparse(Index rows, Index cols, double density, std::uint64_t seed, double lo = 0.5,
                                  double hi = 3.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0), w(lo, hi);
  DenseMatrix m(rows, cols);
  for (double& v : m.values())
    if (u(rng) < density) v = w(rng);
  return SparseMatrix::from_dense(m);
}

// Textbook triple loop.
inline DenseMatrix dense_product(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  double d = 0.0;
  for (Index i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.values()[i] - b.values()[i]));
  return d;
}

}  // namespace cgtest
