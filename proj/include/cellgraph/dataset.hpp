#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellgraph/graph.hpp"
#include "cellgraph/linalg.hpp"

namespace cellgraph {

// Coordinate text format, 1-indexed triples; duplicates are summed.
SparseMatrix load_sparse_matrix(const std::string& path);
// Values are written with 17 significant digits so they load back bit-for-bit.
void write_sparse_matrix(const std::string& path, const SparseMatrix& m);
void write_dense_matrix(const std::string& path, const DenseMatrix& m);
DenseMatrix load_dense_matrix(const std::string& path);

// One token per line; `NA` is unlabeled. Ids follow first appearance.
struct LabelFile {
  LabelArray labels;
  std::vector<std::string> names;  // names[id]
};
LabelFile load_labels(const std::string& path);
void write_labels(const std::string& path, const LabelArray& labels, const std::vector<std::string>& names);

std::vector<std::string> load_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);
std::vector<double> load_values(const std::string& path);
void write_values(const std::string& path, const std::vector<double>& values);

// `name<TAB>id,id,...` per line, ids resolved against feature_names.
GeneSetCollection load_gene_sets(const std::string& path, const std::vector<std::string>& feature_names);

// Paired two-modality data set. Rows of modality_2 are indexed through `pairing`.
struct Dataset {
  SparseMatrix modality_1;
  SparseMatrix modality_2;
  std::vector<std::string> cell_ids;
  std::vector<std::string> features_1;
  std::vector<std::string> features_2;
  LabelArray batch_labels;
  std::vector<std::string> batch_names;
  LabelArray cell_types;  // kUnlabeled where unknown
  std::vector<std::string> type_names;
  std::vector<char> is_test;   // evaluation cells
  std::vector<Index> pairing;  // modality-2 row of each modality-1 row
  std::vector<double> pseudotime;  // optional ground truth
  std::vector<double> cc_score;    // optional cell-cycle program score

  Index n_cells() const noexcept { return modality_1.rows(); }
  std::vector<Index> rows(bool test) const;
  void validate() const;
};

// Files: mod1.mtx mod2.mtx batches.txt split.txt [types.txt pairing.txt pseudotime.txt
// cc_score.txt cells.txt features1.txt features2.txt].
Dataset load_dataset(const std::string& dir);
void save_dataset(const std::string& dir, const Dataset& d);

struct SynthParams {
  Index n_cells = 300;      // evaluation cells
  Index train_cells = 0;    // training cells; 0 means 4 * n_cells
  Index k1 = 200;
  Index k2 = 100;
  Index n_types = 4;
  Index n_batches = 2;
  Index latent_dim = 8;
  double noise = 0.1;
  double dropout = 0.3;
  double type_separation = 2.0;
  double batch_effect = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Latent z = type centre + N(0, I) + batch offset; modality m = softplus(z A_m + b_m + noise)
// with entries dropped at rate `dropout`. Training cells come first.
Dataset generate_synthetic(const SynthParams& p);

}  // namespace cellgraph
