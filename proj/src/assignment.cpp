#include "cellgraph/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cellgraph/error.hpp"

namespace cellgraph {

AssignmentProblem AssignmentProblem::dense(const DenseMatrix& profits) {
  AssignmentProblem p;
  p.n_left = profits.rows();
  p.n_right = profits.cols();
  p.edges.resize(p.n_left);
  for (Index i = 0; i < p.n_left; ++i) {
    p.edges[i].reserve(p.n_right);
    for (Index j = 0; j < p.n_right; ++j) p.edges[i].push_back({j, profits(i, j)});
  }
  return p;
}

Index AssignmentProblem::edge_count() const {
  Index n = 0;
  for (const auto& row : edges) n += row.size();
  return n;
}

namespace {

// Minimum-cost assignment of every row (n <= m) with potentials; returns the column per row.
std::vector<Index> hungarian_rows(const std::vector<double>& cost, Index n, Index m) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<Index> p(m + 1, 0), way(m + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const Index i0 = p[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> col_of(n, 0);
  for (Index j = 1; j <= m; ++j)
    if (p[j] != 0) col_of[p[j] - 1] = j - 1;
  return col_of;
}

}  // namespace

AssignmentResult solve_assignment(const AssignmentProblem& problem) {
  const Index nl = problem.n_left, nr = problem.n_right;
  require(nl > 0 && nr > 0, "assignment: empty problem");
  require(problem.edges.size() == nl, "assignment: edge lists do not match n_left");

  double hi = -std::numeric_limits<double>::infinity();
  double lo = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < nl; ++i) {
    for (const auto& e : problem.edges[i]) {
      require(e.right < nr, "assignment: edge index out of range");
      require(std::isfinite(e.profit), "assignment: non-finite profit");
      hi = std::max(hi, e.profit);
      lo = std::min(lo, e.profit);
    }
  }
  AssignmentResult result;
  if (problem.edge_count() == 0) return result;

  // Allowed costs lie in [0, range]; a forbidden edge costs more than any full set of
  // allowed ones, so cardinality is maximized first.
  const bool transpose = nl > nr;
  const Index n = transpose ? nr : nl;
  const Index m = transpose ? nl : nr;
  const double range = hi - lo;
  const double forbidden = (static_cast<double>(n) + 1.0) * (range + 1.0);
  std::vector<double> cost(n * m, forbidden);
  std::vector<char> allowed(n * m, 0);
  for (Index i = 0; i < nl; ++i) {
    for (const auto& e : problem.edges[i]) {
      const Index r = transpose ? e.right : i;
      const Index c = transpose ? i : e.right;
      cost[r * m + c] = hi - e.profit;
      allowed[r * m + c] = 1;
    }
  }
  const auto col_of = hungarian_rows(cost, n, m);

  for (Index r = 0; r < n; ++r) {
    const Index c = col_of[r];
    if (!allowed[r * m + c]) continue;
    result.pairs.emplace_back(transpose ? c : r, transpose ? r : c);
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  for (const auto& [i, j] : result.pairs) {
    const auto& row = problem.edges[i];
    auto it = std::find_if(row.begin(), row.end(), [j](const auto& e) { return e.right == j; });
    result.total += it->profit;
  }
  result.complete = result.pairs.size() == std::min(nl, nr);
  return result;
}

double percentile_value(std::vector<double> values, double percentile) {
  require(!values.empty(), "percentile: no values");
  require(percentile >= 0.0 && percentile <= 100.0, "percentile: must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = percentile / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<Index>(std::floor(pos));
  const Index hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

AssignmentProblem percentile_filter(const DenseMatrix& scores, double percentile) {
  require(scores.rows() > 0 && scores.cols() > 0, "percentile_filter: empty score matrix");
  require(scores.all_finite(), "percentile_filter: non-finite score");
  require(percentile >= 0.0 && percentile < 100.0, "percentile_filter: percentile must lie in [0, 100)");
  const auto vals = scores.values();
  const double threshold = percentile_value({vals.begin(), vals.end()}, percentile);
  const Index n = scores.rows(), m = scores.cols();
  std::vector<char> keep(n * m, 0);
  for (Index i = 0; i < n * m; ++i) keep[i] = vals[i] >= threshold;
  for (Index i = 0; i < n; ++i) {
    const auto row = scores.row(i);
    keep[i * m + static_cast<Index>(std::max_element(row.begin(), row.end()) - row.begin())] = 1;
  }
  for (Index j = 0; j < m; ++j) {
    Index best = 0;
    for (Index i = 1; i < n; ++i)
      if (scores(i, j) > scores(best, j)) best = i;
    keep[best * m + j] = 1;
  }
  AssignmentProblem p;
  p.n_left = n;
  p.n_right = m;
  p.edges.resize(n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j)
      if (keep[i * m + j]) p.edges[i].push_back({j, scores(i, j)});
  return p;
}

}  // namespace cellgraph
