#pragma once

#include <utility>
#include <vector>

#include "cellgraph/linalg.hpp"

namespace cellgraph {

// Rectangular maximum-profit assignment. Pairs absent from a row's edge list are forbidden.
struct AssignmentProblem {
  struct Edge {
    Index right;
    double profit;
  };
  Index n_left = 0;
  Index n_right = 0;
  std::vector<std::vector<Edge>> edges;  // per left vertex, sorted by right index

  static AssignmentProblem dense(const DenseMatrix& profits);
  Index edge_count() const;
};

struct AssignmentResult {
  std::vector<std::pair<Index, Index>> pairs;  // (left, right), sorted by left
  double total = 0.0;                          // profits summed in left order
  bool complete = false;                       // cardinality == min(n_left, n_right)
};

// Maximum profit among maximum-cardinality matchings over the allowed edges.
// Shortest augmenting path with potentials, O(n^2 m).
AssignmentResult solve_assignment(const AssignmentProblem& problem);

// Keeps entries >= the linearly interpolated percentile of all entries, then re-adds
// each row's and each column's maximum so every row and column keeps an edge.
AssignmentProblem percentile_filter(const DenseMatrix& scores, double percentile);

// Linear-interpolation percentile of the values (percentile in [0, 100]).
double percentile_value(std::vector<double> values, double percentile);

}  // namespace cellgraph
