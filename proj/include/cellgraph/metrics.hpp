#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cellgraph/linalg.hpp"

namespace cellgraph {

inline constexpr Index kDefaultMetricK = 15;

// Exact Euclidean k-nearest neighbours; lists sorted by (distance, index), no self-edges.
struct KnnGraph {
  Index n_nodes = 0;
  Index k = 0;
  std::vector<std::vector<std::pair<Index, double>>> neighbors;
};

KnnGraph knn_graph(const DenseMatrix& points, Index k);

// Undirected weighted adjacency lists; each edge appears in both endpoints' lists.
struct WeightedGraph {
  std::vector<std::vector<std::pair<Index, double>>> adjacency;
  Index size() const noexcept { return adjacency.size(); }
};

// Unit weights, edge present if either endpoint lists the other.
WeightedGraph symmetrize_unit(const KnnGraph& g);
// Distance weights, for shortest paths.
WeightedGraph symmetrize_distances(const KnnGraph& g);

// Multi-level greedy modularity optimization. Labels are renumbered by first appearance.
LabelArray louvain(const WeightedGraph& g, double resolution, std::uint64_t seed);
double modularity(const WeightedGraph& g, std::span<const Label> communities, double resolution);

// Mutual information over the arithmetic mean of the entropies.
double nmi(std::span<const Label> a, std::span<const Label> b);
// Max NMI over Louvain resolutions 0.1, 0.2, ..., 2.0.
double nmi_cluster_label(const DenseMatrix& embedding, std::span<const Label> labels, Index knn_k,
                         std::uint64_t seed);

// Per-point silhouettes with exact pairwise distances; singleton clusters score 0.
std::vector<double> silhouette_samples(const DenseMatrix& points, std::span<const Label> labels);
double silhouette_asw(const DenseMatrix& points, std::span<const Label> labels);
// Maps a silhouette in [-1, 1] to [0, 1].
double unit_asw(double silhouette);
double cell_type_asw(const DenseMatrix& embedding, std::span<const Label> cell_types);
double batch_asw(const DenseMatrix& embedding, std::span<const Label> batch_labels,
                 std::span<const Label> cell_types);

// R^2 of an ordinary least-squares fit (with intercept) of y on the columns of x.
double variance_explained(const DenseMatrix& x, std::span<const double> y);
// Per-batch R^2 of the score on the given coordinates, indexed by batch label.
std::vector<double> variance_explained_per_batch(const DenseMatrix& x, std::span<const double> score,
                                                 std::span<const Label> batch_labels);
// var_before is indexed by batch label.
double cell_cycle_conservation(std::span<const double> score, std::span<const double> var_before,
                               const DenseMatrix& embedding, std::span<const Label> batch_labels);

double spearman(std::span<const double> a, std::span<const double> b);
double trajectory_conservation(std::span<const double> before, std::span<const double> after);
std::vector<double> pseudotime_from_root(const KnnGraph& g, Index root);
double graph_connectivity(const DenseMatrix& embedding, std::span<const Label> cell_types, Index knn_k);

struct MetricReport {
  double nmi = 0.0;
  double cell_type_asw = 0.0;
  double cc_conservation = 0.0;
  double trajectory_conservation = 0.0;
  double batch_asw = 0.0;
  double graph_connectivity = 0.0;
  double s_bio = 0.0;
  double s_batch = 0.0;
  double overall = 0.0;
};

// Equal weights within each class; NaN components (not computed) are left out of their class mean.
MetricReport aggregate(double nmi, double cell_type_asw, double cc_conservation, double trajectory_conservation,
                       double batch_asw, double graph_connectivity);

double rmse(const DenseMatrix& pred, const DenseMatrix& target);

}  // namespace cellgraph
