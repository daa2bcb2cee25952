#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellgraph/linalg.hpp"

namespace cellgraph {

enum class EdgeNormalization {
  SymmetricNormalize,       // e / sqrt(deg_u deg_v)
  MinMaxScale,              // project all weights to [0,1], then symmetric normalization
  NoneWithPostStandardize,  // raw weights; aggregation results are normalized afterwards
};

struct WeightedEdge {
  Index from;
  Index to;
  double weight;
  bool operator==(const WeightedEdge&) const = default;
};

struct GeneSet {
  std::string name;
  std::vector<Index> members;
};
using GeneSetCollection = std::vector<GeneSet>;

// Bipartite cell-feature graph with an optional symmetric feature-feature block.
struct CellFeatureGraph {
  Index n_cells = 0;
  Index n_features = 0;
  SparseMatrix cell_feature;     // n_cells x n_features
  SparseMatrix feature_feature;  // n_features x n_features, symmetric, no diagonal
  EdgeNormalization normalization = EdgeNormalization::SymmetricNormalize;

  bool has_pathways() const noexcept { return feature_feature.nnz() > 0; }
  std::vector<WeightedEdge> cell_feature_edges() const;
  std::vector<WeightedEdge> feature_feature_edges() const;
};

// Aggregation operators implied by a graph and its normalization mode.
struct Propagators {
  SparseMatrix cell_from_feature;     // n_cells x n_features
  SparseMatrix feature_from_cell;     // n_features x n_cells
  SparseMatrix feature_from_feature;  // n_features x n_features (empty without pathways)
  bool post_standardize = false;
};

struct NodeEmbeddings {
  DenseMatrix cell_embed;     // N x 1 zeros
  DenseMatrix feature_embed;  // k x k identity or k x d learned table
  bool feature_trainable = false;
};

enum class FeatureInit { OneHotIdentity, LearnedTable };

// Warns on stderr when m has no stored entries.
CellFeatureGraph build_bipartite(const SparseMatrix& m,
                                 EdgeNormalization mode = EdgeNormalization::SymmetricNormalize);

CellFeatureGraph augment_with_pathways(const CellFeatureGraph& g, const GeneSetCollection& sets,
                                       const SparseMatrix& m);

Propagators make_propagators(const CellFeatureGraph& g);

// learned_dim is used only for LearnedTable.
NodeEmbeddings init_embeddings(const CellFeatureGraph& g, FeatureInit init, Index learned_dim = 0,
                               std::uint64_t seed = 0);

// One-hot up to 2000 features, learned table of width hidden_dim beyond.
FeatureInit default_feature_init(Index n_features);

}  // namespace cellgraph
