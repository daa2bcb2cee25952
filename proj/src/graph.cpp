#include "cellgraph/graph.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <random>
#include <utility>

#include "cellgraph/error.hpp"

namespace cellgraph {

namespace {

std::vector<WeightedEdge> edges_of(const SparseMatrix& m) {
  std::vector<WeightedEdge> out;
  out.reserve(m.nnz());
  for (Index r = 0; r < m.rows(); ++r) {
    const auto cols = m.row_cols(r);
    const auto vals = m.row_values(r);
    for (Index k = 0; k < cols.size(); ++k) out.push_back({r, cols[k], vals[k]});
  }
  return out;
}

// Symmetric normalization over the whole graph: feature degrees include pathway edges.
// Zero-weight edges are dropped first so isolated nodes never enter a degree.
Propagators symmetric(const SparseMatrix& cf, const SparseMatrix& ff) {
  const auto cell_deg = cf.row_sums();
  auto feat_deg = cf.col_sums();
  const auto ff_deg = ff.row_sums();
  for (Index i = 0; i < feat_deg.size(); ++i) feat_deg[i] += ff_deg[i];
  Propagators p;
  p.cell_from_feature = scale_by_degrees(cf, cell_deg, feat_deg);
  p.feature_from_cell = p.cell_from_feature.transposed();
  p.feature_from_feature = scale_by_degrees(ff, feat_deg, feat_deg);
  return p;
}

SparseMatrix rescaled(const SparseMatrix& m, double lo, double range) {
  std::vector<SparseMatrix::Triplet> t;
  for (const auto& e : edges_of(m)) {
    const double v = range > 0.0 ? (e.weight - lo) / range : 0.0;
    t.push_back({e.from, e.to, v});
  }
  return SparseMatrix::from_triplets(m.rows(), m.cols(), std::move(t));
}

}  // namespace

std::vector<WeightedEdge> CellFeatureGraph::cell_feature_edges() const { return edges_of(cell_feature); }
std::vector<WeightedEdge> CellFeatureGraph::feature_feature_edges() const { return edges_of(feature_feature); }

CellFeatureGraph build_bipartite(const SparseMatrix& m, EdgeNormalization mode) {
  require(m.rows() > 0 && m.cols() > 0, "build_bipartite: empty modality matrix");
  if (m.nnz() == 0) std::cerr << "warning: modality matrix has no nonzero entries; graph has no edges\n";
  CellFeatureGraph g;
  g.n_cells = m.rows();
  g.n_features = m.cols();
  g.cell_feature = m;
  g.feature_feature = SparseMatrix(m.cols(), m.cols());
  g.normalization = mode;
  return g;
}

CellFeatureGraph augment_with_pathways(const CellFeatureGraph& g, const GeneSetCollection& sets,
                                       const SparseMatrix& m) {
  require(m.rows() == g.n_cells && m.cols() == g.n_features,
          "augment_with_pathways: matrix does not match the graph");
  // Columns as rows, for pairwise cosine.
  const SparseMatrix cols = m.transposed();
  std::vector<double> norms(cols.rows(), 0.0);
  for (Index c = 0; c < cols.rows(); ++c) {
    for (double v : cols.row_values(c)) norms[c] += v * v;
    norms[c] = std::sqrt(norms[c]);
  }
  auto cosine = [&](Index a, Index b) {
    if (norms[a] == 0.0 || norms[b] == 0.0) return 0.0;
    const auto ca = cols.row_cols(a), cb = cols.row_cols(b);
    const auto va = cols.row_values(a), vb = cols.row_values(b);
    double dot = 0.0;
    for (Index i = 0, j = 0; i < ca.size() && j < cb.size();) {
      if (ca[i] == cb[j]) dot += va[i++] * vb[j++];
      else if (ca[i] < cb[j]) ++i;
      else ++j;
    }
    return dot / (norms[a] * norms[b]);
  };

  std::map<std::pair<Index, Index>, double> pairs;
  for (const auto& e : g.feature_feature_edges()) pairs[{e.from, e.to}] = e.weight;
  for (const auto& set : sets) {
    for (Index idx : set.members)
      require(idx < g.n_features, "gene set '" + set.name + "' member " + std::to_string(idx) +
                                      " out of range (" + std::to_string(g.n_features) + " features)");
    for (Index x = 0; x < set.members.size(); ++x) {
      for (Index y = x + 1; y < set.members.size(); ++y) {
        const Index a = set.members[x], b = set.members[y];
        if (a == b) continue;
        const double w = cosine(a, b);
        if (!(w > 0.0)) continue;
        pairs[{a, b}] = w;
        pairs[{b, a}] = w;
      }
    }
  }
  std::vector<SparseMatrix::Triplet> t;
  t.reserve(pairs.size());
  for (const auto& [key, w] : pairs) t.push_back({key.first, key.second, w});
  CellFeatureGraph out = g;
  out.feature_feature = SparseMatrix::from_triplets(g.n_features, g.n_features, std::move(t));
  return out;
}

Propagators make_propagators(const CellFeatureGraph& g) {
  switch (g.normalization) {
    case EdgeNormalization::SymmetricNormalize:
      return symmetric(g.cell_feature, g.feature_feature);
    case EdgeNormalization::MinMaxScale: {
      double lo = 0.0, hi = 0.0;
      bool any = false;
      for (const SparseMatrix* block : {&g.cell_feature, &g.feature_feature})
        for (double v : block->values()) {
          lo = any ? std::min(lo, v) : v;
          hi = any ? std::max(hi, v) : v;
          any = true;
        }
      return symmetric(rescaled(g.cell_feature, lo, hi - lo), rescaled(g.feature_feature, lo, hi - lo));
    }
    case EdgeNormalization::NoneWithPostStandardize: {
      Propagators p;
      p.cell_from_feature = g.cell_feature;
      p.feature_from_cell = g.cell_feature.transposed();
      p.feature_from_feature = g.feature_feature;
      p.post_standardize = true;
      return p;
    }
  }
  fail("unknown edge normalization mode");
}

NodeEmbeddings init_embeddings(const CellFeatureGraph& g, FeatureInit init, Index learned_dim,
                               std::uint64_t seed) {
  NodeEmbeddings e;
  e.cell_embed = DenseMatrix(g.n_cells, 1, 0.0);
  if (init == FeatureInit::OneHotIdentity) {
    e.feature_embed = DenseMatrix::identity(g.n_features);
    return e;
  }
  require(learned_dim > 0, "init_embeddings: learned table needs a positive dimension");
  const double bound = 1.0 / std::sqrt(static_cast<double>(learned_dim));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-bound, bound);
  e.feature_embed = DenseMatrix(g.n_features, learned_dim);
  for (double& v : e.feature_embed.values()) v = uni(rng);
  e.feature_trainable = true;
  return e;
}

FeatureInit default_feature_init(Index n_features) {
  return n_features > 2000 ? FeatureInit::LearnedTable : FeatureInit::OneHotIdentity;
}

}  // namespace cellgraph
