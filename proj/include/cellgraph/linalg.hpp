#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace cellgraph {

using Index = std::size_t;
using Label = std::int64_t;
using LabelArray = std::vector<Label>;

// Label value for masked / unlabeled entries.
inline constexpr Label kUnlabeled = -1;

// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(Index rows, Index cols, double fill = 0.0);
  DenseMatrix(Index rows, Index cols, std::vector<double> values);
  DenseMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static DenseMatrix identity(Index n);

  Index rows() const noexcept { return rows_; }
  Index cols() const noexcept { return cols_; }
  Index size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator()(Index r, Index c) { return values_[r * cols_ + c]; }
  double operator()(Index r, Index c) const { return values_[r * cols_ + c]; }

  std::span<double> row(Index r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(Index r) const { return {values_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  bool all_finite() const noexcept;
  void fill(double v);

  bool operator==(const DenseMatrix&) const = default;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<double> values_;
};

// Compressed sparse row matrix. Column indices strictly increase within a row.
class SparseMatrix {
 public:
  struct Triplet {
    Index row;
    Index col;
    double value;
  };

  SparseMatrix() = default;
  SparseMatrix(Index rows, Index cols);
  // Validates every structural invariant; throws on violation.
  SparseMatrix(Index rows, Index cols, std::vector<Index> row_offsets, std::vector<Index> col_indices,
               std::vector<double> values);

  // Duplicates are summed; entries that end up exactly zero are dropped.
  static SparseMatrix from_triplets(Index rows, Index cols, std::vector<Triplet> triplets);
  static SparseMatrix from_dense(const DenseMatrix& m);

  Index rows() const noexcept { return rows_; }
  Index cols() const noexcept { return cols_; }
  Index nnz() const noexcept { return values_.size(); }

  std::span<const Index> row_offsets() const noexcept { return row_offsets_; }
  std::span<const Index> col_indices() const noexcept { return col_indices_; }
  std::span<const double> values() const noexcept { return values_; }

  std::span<const Index> row_cols(Index r) const {
    return {col_indices_.data() + row_offsets_[r], row_offsets_[r + 1] - row_offsets_[r]};
  }
  std::span<const double> row_values(Index r) const {
    return {values_.data() + row_offsets_[r], row_offsets_[r + 1] - row_offsets_[r]};
  }

  double at(Index r, Index c) const;
  DenseMatrix to_dense() const;
  SparseMatrix transposed() const;
  // Same sparsity pattern, new values (one per stored entry).
  SparseMatrix with_values(std::vector<double> values) const;

  std::vector<double> row_sums() const;
  std::vector<double> col_sums() const;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<Index> row_offsets_{0};
  std::vector<Index> col_indices_;
  std::vector<double> values_;
};

// Worker count from CELLGRAPH_THREADS (default 1). Kernels split work by output row.
unsigned thread_count();

DenseMatrix spmm(const SparseMatrix& a, const DenseMatrix& b);
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b, bool transpose_a = false,
                   bool transpose_b = false);
DenseMatrix transpose(const DenseMatrix& m);

// e_ij / (sqrt(row_degree_i) * sqrt(col_degree_j)). Throws NormalizationUndefined
// when a degree touched by an edge is not positive.
SparseMatrix scale_by_degrees(const SparseMatrix& m, std::span<const double> row_degree,
                              std::span<const double> col_degree);

// Symmetric normalization of a bipartite edge set given as its biadjacency matrix;
// degrees are the incident-weight sums of each endpoint.
SparseMatrix symmetric_edge_normalize(const SparseMatrix& biadjacency);

std::vector<double> min_max_scale(std::span<const double> values);
DenseMatrix standardize_rows(const DenseMatrix& m);
DenseMatrix l2_normalize_rows(const DenseMatrix& m);

double cosine_similarity_columns(const SparseMatrix& m, Index i, Index j);

// tf(i,j) * log(1 + N / (1 + df_j)) with tf row-normalized.
SparseMatrix tfidf(const SparseMatrix& m);

struct TruncatedSvd {
  DenseMatrix u;                       // rows x rank, orthonormal columns
  std::vector<double> singular_values; // non-increasing
  DenseMatrix v;                       // cols x rank

  // Document coordinates U * diag(sigma).
  DenseMatrix embedding() const;
};

// Randomized range finder (oversampling 8) with seeded Gaussian test matrix; subspace
// iteration runs at least two rounds and continues until the leading singular values settle.
TruncatedSvd truncated_svd(const SparseMatrix& m, Index rank, std::uint64_t seed);
TruncatedSvd truncated_svd(const DenseMatrix& m, Index rank, std::uint64_t seed);

}  // namespace cellgraph
