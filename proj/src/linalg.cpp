#include "cellgraph/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <thread>

#include "cellgraph/error.hpp"

namespace cellgraph {

namespace {

std::string shape(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

void parallel_rows(Index n, const std::function<void(Index, Index)>& body) {
  const unsigned workers = std::min<unsigned>(thread_count(), static_cast<unsigned>(std::max<Index>(n, 1)));
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  const Index chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const Index lo = w * chunk;
    const Index hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back(body, lo, hi);
  }
  for (auto& t : pool) t.join();
}

}  // namespace

unsigned thread_count() {
  static const unsigned count = [] {
    const char* env = std::getenv("CELLGRAPH_THREADS");
    if (env == nullptr) return 1u;
    const long v = std::strtol(env, nullptr, 10);
    return v >= 1 ? static_cast<unsigned>(v) : 1u;
  }();
  return count;
}

// ---------------------------------------------------------------------------
// DenseMatrix

DenseMatrix::DenseMatrix(Index rows, Index cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(Index rows, Index cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  require(values_.size() == rows * cols,
          "dense matrix " + shape(rows, cols) + " given " + std::to_string(values_.size()) + " values");
}

DenseMatrix::DenseMatrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  values_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    require(r.size() == cols_, "ragged initializer for dense matrix");
    values_.insert(values_.end(), r.begin(), r.end());
  }
}

DenseMatrix DenseMatrix::identity(Index n) {
  DenseMatrix m(n, n);
  for (Index i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool DenseMatrix::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void DenseMatrix::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

// ---------------------------------------------------------------------------
// SparseMatrix

SparseMatrix::SparseMatrix(Index rows, Index cols) : rows_(rows), cols_(cols), row_offsets_(rows + 1, 0) {}

SparseMatrix::SparseMatrix(Index rows, Index cols, std::vector<Index> row_offsets,
                           std::vector<Index> col_indices, std::vector<double> values)
    : rows_(rows),
      cols_(cols),
      row_offsets_(std::move(row_offsets)),
      col_indices_(std::move(col_indices)),
      values_(std::move(values)) {
  require(row_offsets_.size() == rows_ + 1, "row_offsets must have n_rows+1 entries");
  require(row_offsets_.front() == 0, "row_offsets must start at 0");
  require(row_offsets_.back() == values_.size(), "row_offsets must end at the value count");
  require(col_indices_.size() == values_.size(), "col_indices and values differ in length");
  for (Index r = 0; r < rows_; ++r) {
    require(row_offsets_[r] <= row_offsets_[r + 1], "row_offsets must be non-decreasing");
    for (Index k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) {
      require(col_indices_[k] < cols_, "column index out of range in row " + std::to_string(r));
      require(k == row_offsets_[r] || col_indices_[k - 1] < col_indices_[k],
              "column indices must strictly increase in row " + std::to_string(r));
      require(std::isfinite(values_[k]), "non-finite value in row " + std::to_string(r));
    }
  }
}

SparseMatrix SparseMatrix::from_triplets(Index rows, Index cols, std::vector<Triplet> triplets) {
  for (const auto& t : triplets) {
    require(t.row < rows && t.col < cols, "triplet (" + std::to_string(t.row) + "," + std::to_string(t.col) +
                                              ") outside " + shape(rows, cols));
    require(std::isfinite(t.value), "non-finite triplet value");
  }
  std::stable_sort(triplets.begin(), triplets.end(), [](const Triplet& a, const Triplet& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  SparseMatrix m(rows, cols);
  m.row_offsets_.assign(rows + 1, 0);
  for (Index k = 0; k < triplets.size();) {
    const Index r = triplets[k].row;
    const Index c = triplets[k].col;
    double sum = 0.0;
    for (; k < triplets.size() && triplets[k].row == r && triplets[k].col == c; ++k) sum += triplets[k].value;
    if (sum == 0.0) continue;
    m.col_indices_.push_back(c);
    m.values_.push_back(sum);
    ++m.row_offsets_[r + 1];
  }
  std::partial_sum(m.row_offsets_.begin(), m.row_offsets_.end(), m.row_offsets_.begin());
  return m;
}

SparseMatrix SparseMatrix::from_dense(const DenseMatrix& d) {
  SparseMatrix m(d.rows(), d.cols());
  for (Index r = 0; r < d.rows(); ++r) {
    for (Index c = 0; c < d.cols(); ++c) {
      const double v = d(r, c);
      require(std::isfinite(v), "non-finite value in dense input");
      if (v != 0.0) {
        m.col_indices_.push_back(c);
        m.values_.push_back(v);
      }
    }
    m.row_offsets_[r + 1] = m.values_.size();
  }
  return m;
}

double SparseMatrix::at(Index r, Index c) const {
  require(r < rows_ && c < cols_, "index out of range");
  const auto cols = row_cols(r);
  const auto it = std::lower_bound(cols.begin(), cols.end(), c);
  if (it == cols.end() || *it != c) return 0.0;
  return values_[row_offsets_[r] + static_cast<Index>(it - cols.begin())];
}

DenseMatrix SparseMatrix::to_dense() const {
  DenseMatrix d(rows_, cols_);
  for (Index r = 0; r < rows_; ++r)
    for (Index k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) d(r, col_indices_[k]) = values_[k];
  return d;
}

SparseMatrix SparseMatrix::transposed() const {
  SparseMatrix t(cols_, rows_);
  t.row_offsets_.assign(cols_ + 1, 0);
  for (Index c : col_indices_) ++t.row_offsets_[c + 1];
  std::partial_sum(t.row_offsets_.begin(), t.row_offsets_.end(), t.row_offsets_.begin());
  t.col_indices_.resize(nnz());
  t.values_.resize(nnz());
  std::vector<Index> cursor(t.row_offsets_.begin(), t.row_offsets_.end() - 1);
  for (Index r = 0; r < rows_; ++r) {
    for (Index k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) {
      const Index dst = cursor[col_indices_[k]]++;
      t.col_indices_[dst] = r;
      t.values_[dst] = values_[k];
    }
  }
  return t;
}

SparseMatrix SparseMatrix::with_values(std::vector<double> values) const {
  require(values.size() == nnz(), "with_values: value count differs from nnz");
  SparseMatrix m = *this;
  m.values_ = std::move(values);
  return m;
}

std::vector<double> SparseMatrix::row_sums() const {
  std::vector<double> s(rows_, 0.0);
  for (Index r = 0; r < rows_; ++r)
    for (Index k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) s[r] += values_[k];
  return s;
}

std::vector<double> SparseMatrix::col_sums() const {
  std::vector<double> s(cols_, 0.0);
  for (Index k = 0; k < nnz(); ++k) s[col_indices_[k]] += values_[k];
  return s;
}

// ---------------------------------------------------------------------------
// Kernels

DenseMatrix spmm(const SparseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows())
    fail("spmm: dimension mismatch " + shape(a.rows(), a.cols()) + " * " + shape(b.rows(), b.cols()));
  DenseMatrix out(a.rows(), b.cols());
  const Index d = b.cols();
  parallel_rows(a.rows(), [&](Index lo, Index hi) {
    for (Index r = lo; r < hi; ++r) {
      double* __restrict dst = out.row(r).data();
      const auto cols = a.row_cols(r);
      const auto vals = a.row_values(r);
      for (Index k = 0; k < cols.size(); ++k) {
        const double w = vals[k];
        const double* __restrict src = b.row(cols[k]).data();
        for (Index j = 0; j < d; ++j) dst[j] += w * src[j];
      }
    }
  });
  return out;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b, bool transpose_a, bool transpose_b) {
  const Index m = transpose_a ? a.cols() : a.rows();
  const Index inner_a = transpose_a ? a.rows() : a.cols();
  const Index inner_b = transpose_b ? b.cols() : b.rows();
  const Index n = transpose_b ? b.rows() : b.cols();
  if (inner_a != inner_b)
    fail("matmul: dimension mismatch " + shape(m, inner_a) + " * " + shape(inner_b, n));
  DenseMatrix out(m, n);
  const Index inner = inner_a;
  if (!transpose_a && !transpose_b) {
    parallel_rows(m, [&](Index lo, Index hi) {
      for (Index i = lo; i < hi; ++i) {
        double* dst = out.row(i).data();
        for (Index k = 0; k < inner; ++k) {
          const double w = a(i, k);
          if (w == 0.0) continue;
          const double* src = b.row(k).data();
          for (Index j = 0; j < n; ++j) dst[j] += w * src[j];
        }
      }
    });
  } else if (!transpose_a && transpose_b) {
    parallel_rows(m, [&](Index lo, Index hi) {
      for (Index i = lo; i < hi; ++i) {
        const double* ai = a.row(i).data();
        for (Index j = 0; j < n; ++j) {
          const double* bj = b.row(j).data();
          double s = 0.0;
          for (Index k = 0; k < inner; ++k) s += ai[k] * bj[k];
          out(i, j) = s;
        }
      }
    });
  } else if (transpose_a && !transpose_b) {
    // Rows of the output are columns of a; accumulate per output row for determinism.
    parallel_rows(m, [&](Index lo, Index hi) {
      for (Index i = lo; i < hi; ++i) {
        double* dst = out.row(i).data();
        for (Index k = 0; k < inner; ++k) {
          const double w = a(k, i);
          if (w == 0.0) continue;
          const double* src = b.row(k).data();
          for (Index j = 0; j < n; ++j) dst[j] += w * src[j];
        }
      }
    });
  } else {
    parallel_rows(m, [&](Index lo, Index hi) {
      for (Index i = lo; i < hi; ++i)
        for (Index j = 0; j < n; ++j) {
          double s = 0.0;
          for (Index k = 0; k < inner; ++k) s += a(k, i) * b(j, k);
          out(i, j) = s;
        }
    });
  }
  return out;
}

DenseMatrix transpose(const DenseMatrix& m) {
  DenseMatrix t(m.cols(), m.rows());
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

SparseMatrix scale_by_degrees(const SparseMatrix& m, std::span<const double> row_degree,
                              std::span<const double> col_degree) {
  require(row_degree.size() == m.rows() && col_degree.size() == m.cols(), "degree vector length mismatch");
  std::vector<double> out(m.nnz());
  for (Index r = 0; r < m.rows(); ++r) {
    const auto cols = m.row_cols(r);
    const auto vals = m.row_values(r);
    for (Index k = 0; k < cols.size(); ++k) {
      const double dr = row_degree[r];
      const double dc = col_degree[cols[k]];
      if (!(dr > 0.0) || !(dc > 0.0))
        fail(ErrorKind::NormalizationUndefined,
             "symmetric edge normalization undefined: non-positive incident weight sum at edge (" +
                 std::to_string(r) + "," + std::to_string(cols[k]) +
                 "); use min-max edge scaling or post-aggregation normalization instead");
      out[m.row_offsets()[r] + k] = vals[k] / (std::sqrt(dr) * std::sqrt(dc));
    }
  }
  return m.with_values(std::move(out));
}

SparseMatrix symmetric_edge_normalize(const SparseMatrix& biadjacency) {
  const auto rs = biadjacency.row_sums();
  const auto cs = biadjacency.col_sums();
  return scale_by_degrees(biadjacency, rs, cs);
}

std::vector<double> min_max_scale(std::span<const double> values) {
  require(!values.empty(), "min_max_scale: empty input");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  std::vector<double> out(values.size(), 0.0);
  if (range > 0.0)
    for (Index i = 0; i < values.size(); ++i) out[i] = (values[i] - lo) / range;
  return out;
}

DenseMatrix standardize_rows(const DenseMatrix& m) {
  require(m.cols() >= 1, "standardize_rows: need at least one column");
  DenseMatrix out(m.rows(), m.cols());
  const double n = static_cast<double>(m.cols());
  for (Index r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= n;
    if (!(var > 0.0)) continue;
    const double sd = std::sqrt(var);
    auto dst = out.row(r);
    for (Index c = 0; c < m.cols(); ++c) dst[c] = (row[c] - mean) / sd;
  }
  return out;
}

DenseMatrix l2_normalize_rows(const DenseMatrix& m) {
  DenseMatrix out = m;
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = out.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    if (ss == 0.0) continue;
    const double inv = 1.0 / std::sqrt(ss);
    for (double& v : row) v *= inv;
  }
  return out;
}

double cosine_similarity_columns(const SparseMatrix& m, Index i, Index j) {
  require(i < m.cols() && j < m.cols(), "cosine_similarity_columns: column index out of range");
  double dot = 0.0, ni = 0.0, nj = 0.0;
  for (Index r = 0; r < m.rows(); ++r) {
    const double a = m.at(r, i);
    const double b = m.at(r, j);
    dot += a * b;
    ni += a * a;
    nj += b * b;
  }
  if (ni == 0.0 || nj == 0.0) return 0.0;
  return dot / (std::sqrt(ni) * std::sqrt(nj));
}

SparseMatrix tfidf(const SparseMatrix& m) {
  for (double v : m.values()) require(v >= 0.0, "tfidf: negative entry in count matrix");
  const double n = static_cast<double>(m.rows());
  std::vector<double> df(m.cols(), 0.0);
  for (Index c : m.col_indices()) df[c] += 1.0;
  const auto rs = m.row_sums();
  std::vector<double> out(m.nnz());
  for (Index r = 0; r < m.rows(); ++r) {
    const auto cols = m.row_cols(r);
    const auto vals = m.row_values(r);
    for (Index k = 0; k < cols.size(); ++k) {
      const double tf = vals[k] / rs[r];
      out[m.row_offsets()[r] + k] = tf * std::log(1.0 + n / (1.0 + df[cols[k]]));
    }
  }
  return m.with_values(std::move(out));
}

// ---------------------------------------------------------------------------
// Truncated SVD

namespace {

// Column-major tall matrix used inside the SVD routines.
struct Columns {
  Index rows = 0;
  std::vector<std::vector<double>> cols;

  static Columns from_dense(const DenseMatrix& m) {
    Columns c{m.rows(), std::vector<std::vector<double>>(m.cols(), std::vector<double>(m.rows()))};
    for (Index r = 0; r < m.rows(); ++r)
      for (Index j = 0; j < m.cols(); ++j) c.cols[j][r] = m(r, j);
    return c;
  }
  DenseMatrix to_dense() const {
    DenseMatrix m(rows, cols.size());
    for (Index j = 0; j < cols.size(); ++j)
      for (Index r = 0; r < rows; ++r) m(r, j) = cols[j][r];
    return m;
  }
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (Index i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Modified Gram-Schmidt with one re-orthogonalization pass. Numerically dependent
// columns are replaced by the unit basis vector with the largest residual.
DenseMatrix orthonormalize(const DenseMatrix& y) {
  Columns q = Columns::from_dense(y);
  const Index n = q.rows;
  for (Index j = 0; j < q.cols.size(); ++j) {
    auto& v = q.cols[j];
    const double before = std::sqrt(dot(v, v));
    for (int pass = 0; pass < 2; ++pass)
      for (Index i = 0; i < j; ++i) {
        const double p = dot(q.cols[i], v);
        for (Index r = 0; r < n; ++r) v[r] -= p * q.cols[i][r];
      }
    double norm = std::sqrt(dot(v, v));
    if (!(norm > 1e-12 * std::max(before, 1e-300))) {
      double best = -1.0;
      std::vector<double> chosen;
      for (Index e = 0; e < n; ++e) {
        std::vector<double> cand(n, 0.0);
        cand[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass)
          for (Index i = 0; i < j; ++i) {
            const double p = dot(q.cols[i], cand);
            for (Index r = 0; r < n; ++r) cand[r] -= p * q.cols[i][r];
          }
        const double cn = dot(cand, cand);
        if (cn > best + 1e-12) {
          best = cn;
          chosen = std::move(cand);
        }
      }
      v = std::move(chosen);
      norm = std::sqrt(dot(v, v));
    }
    for (double& x : v) x /= norm;
  }
  return q.to_dense();
}

struct SmallSvd {
  Columns u;  // p x q, unit columns for nonzero singular values
  std::vector<double> sigma;
  DenseMatrix v;  // q x q orthogonal
};

// One-sided Jacobi on a p x q matrix with p >= q. Output sorted by decreasing sigma.
SmallSvd jacobi_svd(const DenseMatrix& g_in) {
  Columns g = Columns::from_dense(g_in);
  const Index q = g.cols.size();
  DenseMatrix v = DenseMatrix::identity(q);
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (Index i = 0; i + 1 < q; ++i) {
      for (Index j = i + 1; j < q; ++j) {
        auto& gi = g.cols[i];
        auto& gj = g.cols[j];
        const double alpha = dot(gi, gi);
        const double beta = dot(gj, gj);
        const double gamma = dot(gi, gj);
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Index r = 0; r < g.rows; ++r) {
          const double a = gi[r], b = gj[r];
          gi[r] = c * a - s * b;
          gj[r] = s * a + c * b;
        }
        for (Index r = 0; r < q; ++r) {
          const double a = v(r, i), b = v(r, j);
          v(r, i) = c * a - s * b;
          v(r, j) = s * a + c * b;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sigma(q);
  for (Index j = 0; j < q; ++j) sigma[j] = std::sqrt(dot(g.cols[j], g.cols[j]));
  std::vector<Index> order(q);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return sigma[a] > sigma[b]; });
  SmallSvd out{Columns{g.rows, {}}, {}, DenseMatrix(q, q)};
  for (Index k = 0; k < q; ++k) {
    const Index j = order[k];
    out.sigma.push_back(sigma[j]);
    auto col = g.cols[j];
    if (sigma[j] > 0.0)
      for (double& x : col) x /= sigma[j];
    out.u.cols.push_back(std::move(col));
    for (Index r = 0; r < q; ++r) out.v(r, k) = v(r, j);
  }
  return out;
}

template <typename Apply, typename ApplyT>
TruncatedSvd randomized_svd(Index m, Index n, Index rank, std::uint64_t seed, Apply apply, ApplyT apply_t) {
  if (rank == 0 || rank > std::min(m, n))
    fail("truncated_svd: rank " + std::to_string(rank) + " invalid for " + shape(m, n) + " matrix");
  constexpr Index kOversampling = 8;
  constexpr int kMinPowerIterations = 2;
  constexpr int kMaxPowerIterations = 200;
  const Index width = std::min(rank + kOversampling, std::min(m, n));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DenseMatrix omega(n, width);
  for (double& x : omega.values()) x = normal(rng);

  DenseMatrix q = orthonormalize(apply(omega));
  std::vector<double> previous;
  SmallSvd core;
  DenseMatrix z;
  for (int iter = 0;; ++iter) {
    z = apply_t(q);  // n x width, equals B^T with B = Q^T A
    core = jacobi_svd(z);
    std::vector<double> lead(core.sigma.begin(), core.sigma.begin() + static_cast<std::ptrdiff_t>(rank));
    bool settled = false;
    if (!previous.empty()) {
      double change = 0.0;
      for (Index k = 0; k < rank; ++k) change = std::max(change, std::abs(lead[k] - previous[k]));
      settled = change <= 1e-13 * std::max(lead[0], 1e-300);
    }
    previous = std::move(lead);
    if ((iter >= kMinPowerIterations && settled) || iter >= kMaxPowerIterations) break;
    q = orthonormalize(apply(orthonormalize(z)));
  }

  // A ~ Q B, B^T = Z = Uz S Vz^T, so A ~ (Q Vz) S Uz^T.
  DenseMatrix left = matmul(q, core.v);
  TruncatedSvd out{DenseMatrix(m, rank), {}, DenseMatrix(n, rank)};
  for (Index k = 0; k < rank; ++k) {
    out.singular_values.push_back(core.sigma[k]);
    // Sign convention: largest-magnitude entry of each left vector is positive.
    Index arg = 0;
    for (Index r = 1; r < m; ++r)
      if (std::abs(left(r, k)) > std::abs(left(arg, k))) arg = r;
    const double sign = left(arg, k) < 0 ? -1.0 : 1.0;
    for (Index r = 0; r < m; ++r) out.u(r, k) = sign * left(r, k);
    for (Index r = 0; r < n; ++r) out.v(r, k) = sign * core.u.cols[k][r];
  }
  return out;
}

}  // namespace

DenseMatrix TruncatedSvd::embedding() const {
  DenseMatrix e = u;
  for (Index r = 0; r < e.rows(); ++r)
    for (Index k = 0; k < e.cols(); ++k) e(r, k) *= singular_values[k];
  return e;
}

TruncatedSvd truncated_svd(const SparseMatrix& m, Index rank, std::uint64_t seed) {
  const SparseMatrix mt = m.transposed();
  return randomized_svd(
      m.rows(), m.cols(), rank, seed, [&](const DenseMatrix& x) { return spmm(m, x); },
      [&](const DenseMatrix& x) { return spmm(mt, x); });
}

TruncatedSvd truncated_svd(const DenseMatrix& m, Index rank, std::uint64_t seed) {
  return randomized_svd(
      m.rows(), m.cols(), rank, seed, [&](const DenseMatrix& x) { return matmul(m, x); },
      [&](const DenseMatrix& x) { return matmul(m, x, true, false); });
}

}  // namespace cellgraph
