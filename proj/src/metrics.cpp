#include "cellgraph/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <random>

#include "cellgraph/error.hpp"

namespace cellgraph {

namespace {

constexpr Index kNone = std::numeric_limits<Index>::max();

double distance(const DenseMatrix& p, Index i, Index j) {
  double s = 0.0;
  const auto a = p.row(i), b = p.row(j);
  for (Index c = 0; c < a.size(); ++c) {
    const double d = a[c] - b[c];
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<double> pairwise_distances(const DenseMatrix& p) {
  const Index n = p.rows();
  std::vector<double> d(n * n, 0.0);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) d[i * n + j] = d[j * n + i] = distance(p, i, j);
  return d;
}

// Dense relabeling to 0..c-1 in order of first appearance.
std::vector<Index> compact(std::span<const Label> labels, Index* n_classes) {
  std::map<Label, Index> ids;
  std::vector<Index> out(labels.size());
  for (Index i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = ids.try_emplace(labels[i], ids.size());
    out[i] = it->second;
  }
  *n_classes = ids.size();
  return out;
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct Level {
  WeightedGraph graph;
  std::vector<double> degree;
  double total = 0.0;  // sum of degrees (2m)
};

Level make_level(WeightedGraph g) {
  Level lv;
  lv.degree.assign(g.size(), 0.0);
  for (Index i = 0; i < g.size(); ++i)
    for (const auto& [j, w] : g.adjacency[i]) lv.degree[i] += w;
  lv.total = std::accumulate(lv.degree.begin(), lv.degree.end(), 0.0);
  lv.graph = std::move(g);
  return lv;
}

// One round of local moves until no node changes community; returns whether anything moved.
bool local_moves(const Level& lv, double resolution, std::mt19937_64& rng, std::vector<Index>& comm) {
  const Index n = lv.graph.size();
  std::vector<double> tot(n, 0.0);
  for (Index i = 0; i < n; ++i) tot[comm[i]] += lv.degree[i];
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<double> link(n, 0.0);
  std::vector<Index> touched;
  bool any = false;
  for (bool moved = true; moved;) {
    moved = false;
    for (const Index i : order) {
      const Index own = comm[i];
      const double ki = lv.degree[i];
      touched.clear();
      for (const auto& [j, w] : lv.graph.adjacency[i]) {
        if (j == i) continue;
        if (link[comm[j]] == 0.0) touched.push_back(comm[j]);
        link[comm[j]] += w;
      }
      tot[own] -= ki;
      Index best = own;
      double best_gain = link[own] - resolution * tot[own] * ki / lv.total;
      for (const Index c : touched) {
        const double gain = link[c] - resolution * tot[c] * ki / lv.total;
        if (gain > best_gain + 1e-12) {
          best = c;
          best_gain = gain;
        }
      }
      tot[best] += ki;
      for (const Index c : touched) link[c] = 0.0;
      link[own] = 0.0;
      if (best != own) {
        comm[i] = best;
        moved = true;
        any = true;
      }
    }
  }
  return any;
}

}  // namespace

KnnGraph knn_graph(const DenseMatrix& points, Index k) {
  require(k >= 1, "knn_graph: k must be >= 1");
  const Index n = points.rows();
  KnnGraph g;
  g.n_nodes = n;
  g.k = n > 0 ? std::min(k, n - 1) : 0;
  g.neighbors.resize(n);
  std::vector<std::pair<double, Index>> cand;
  for (Index i = 0; i < n; ++i) {
    cand.clear();
    for (Index j = 0; j < n; ++j)
      if (j != i) cand.emplace_back(distance(points, i, j), j);
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(g.k), cand.end());
    for (Index t = 0; t < g.k; ++t) g.neighbors[i].emplace_back(cand[t].second, cand[t].first);
  }
  return g;
}

WeightedGraph symmetrize_unit(const KnnGraph& g) {
  std::vector<std::map<Index, double>> adj(g.n_nodes);
  for (Index i = 0; i < g.n_nodes; ++i)
    for (const auto& [j, d] : g.neighbors[i]) adj[i][j] = adj[j][i] = 1.0;
  WeightedGraph w;
  w.adjacency.resize(g.n_nodes);
  for (Index i = 0; i < g.n_nodes; ++i) w.adjacency[i].assign(adj[i].begin(), adj[i].end());
  return w;
}

WeightedGraph symmetrize_distances(const KnnGraph& g) {
  std::vector<std::map<Index, double>> adj(g.n_nodes);
  for (Index i = 0; i < g.n_nodes; ++i)
    for (const auto& [j, d] : g.neighbors[i]) adj[i][j] = adj[j][i] = d;
  WeightedGraph w;
  w.adjacency.resize(g.n_nodes);
  for (Index i = 0; i < g.n_nodes; ++i) w.adjacency[i].assign(adj[i].begin(), adj[i].end());
  return w;
}

LabelArray louvain(const WeightedGraph& g, double resolution, std::uint64_t seed) {
  require(resolution > 0.0, "louvain: resolution must be positive");
  const Index n = g.size();
  std::vector<Index> node_comm(n);
  std::iota(node_comm.begin(), node_comm.end(), Index{0});
  Level lv = make_level(g);
  std::mt19937_64 rng(seed);
  if (lv.total <= 0.0) return LabelArray(node_comm.begin(), node_comm.end());

  for (;;) {
    const Index m = lv.graph.size();
    std::vector<Index> comm(m);
    std::iota(comm.begin(), comm.end(), Index{0});
    if (!local_moves(lv, resolution, rng, comm)) break;

    std::vector<Index> remap(m, kNone);
    Index next = 0;
    for (Index i = 0; i < m; ++i)
      if (remap[comm[i]] == kNone) remap[comm[i]] = next++;
    for (auto& c : node_comm) c = remap[comm[c]];
    if (next == m) break;

    std::vector<std::map<Index, double>> agg(next);
    for (Index i = 0; i < m; ++i)
      for (const auto& [j, w] : lv.graph.adjacency[i]) agg[remap[comm[i]]][remap[comm[j]]] += w;
    WeightedGraph coarse;
    coarse.adjacency.resize(next);
    for (Index c = 0; c < next; ++c) coarse.adjacency[c].assign(agg[c].begin(), agg[c].end());
    lv = make_level(std::move(coarse));
  }

  Index n_classes = 0;
  std::vector<Label> raw(node_comm.begin(), node_comm.end());
  const auto dense = compact(raw, &n_classes);
  return LabelArray(dense.begin(), dense.end());
}

double modularity(const WeightedGraph& g, std::span<const Label> communities, double resolution) {
  require(communities.size() == g.size(), "modularity: label count mismatch");
  Index nc = 0;
  const auto c = compact(communities, &nc);
  std::vector<double> in(nc, 0.0), tot(nc, 0.0);
  double total = 0.0;
  for (Index i = 0; i < g.size(); ++i) {
    for (const auto& [j, w] : g.adjacency[i]) {
      tot[c[i]] += w;
      total += w;
      if (c[i] == c[j]) in[c[i]] += w;
    }
  }
  if (total <= 0.0) return 0.0;
  double q = 0.0;
  for (Index k = 0; k < nc; ++k) q += in[k] / total - resolution * (tot[k] / total) * (tot[k] / total);
  return q;
}

double nmi(std::span<const Label> a, std::span<const Label> b) {
  require(a.size() == b.size(), "nmi: length mismatch");
  require(!a.empty(), "nmi: empty labelings");
  Index na = 0, nb = 0;
  const auto ca = compact(a, &na), cb = compact(b, &nb);
  const double n = static_cast<double>(a.size());
  std::vector<double> joint(na * nb, 0.0), pa(na, 0.0), pb(nb, 0.0);
  for (Index i = 0; i < a.size(); ++i) {
    joint[ca[i] * nb + cb[i]] += 1.0;
    pa[ca[i]] += 1.0;
    pb[cb[i]] += 1.0;
  }
  auto entropy = [n](const std::vector<double>& counts) {
    double h = 0.0;
    for (const double c : counts)
      if (c > 0.0) h -= c / n * std::log(c / n);
    return h;
  };
  const double ha = entropy(pa), hb = entropy(pb);
  if (na == 1 && nb == 1) return 1.0;
  if (na == 1 || nb == 1) return 0.0;
  double mi = 0.0;
  for (Index i = 0; i < na; ++i)
    for (Index j = 0; j < nb; ++j) {
      const double c = joint[i * nb + j];
      if (c > 0.0) mi += c / n * std::log(c * n / (pa[i] * pb[j]));
    }
  return std::clamp(mi / (0.5 * (ha + hb)), 0.0, 1.0);
}

double nmi_cluster_label(const DenseMatrix& embedding, std::span<const Label> labels, Index knn_k,
                         std::uint64_t seed) {
  require(embedding.rows() == labels.size(), "nmi_cluster_label: label count mismatch");
  const auto g = symmetrize_unit(knn_graph(embedding, knn_k));
  double best = 0.0;
  for (int step = 1; step <= 20; ++step) {
    const auto clusters = louvain(g, 0.1 * step, seed);
    best = std::max(best, nmi(clusters, labels));
  }
  return best;
}

std::vector<double> silhouette_samples(const DenseMatrix& points, std::span<const Label> labels) {
  require(points.rows() == labels.size(), "silhouette: label count mismatch");
  Index nc = 0;
  const auto c = compact(labels, &nc);
  require(nc >= 2, "silhouette: at least two labels required");
  const Index n = points.rows();
  const auto d = pairwise_distances(points);
  std::vector<double> size(nc, 0.0);
  for (const Index k : c) size[k] += 1.0;
  std::vector<double> s(n, 0.0), sums(nc);
  for (Index i = 0; i < n; ++i) {
    if (size[c[i]] < 2.0) continue;
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Index j = 0; j < n; ++j) sums[c[j]] += d[i * n + j];
    const double a = sums[c[i]] / (size[c[i]] - 1.0);
    double b = std::numeric_limits<double>::infinity();
    for (Index k = 0; k < nc; ++k)
      if (k != c[i]) b = std::min(b, sums[k] / size[k]);
    const double denom = std::max(a, b);
    s[i] = denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return s;
}

double silhouette_asw(const DenseMatrix& points, std::span<const Label> labels) {
  return mean_of(silhouette_samples(points, labels));
}

double unit_asw(double silhouette) { return (silhouette + 1.0) / 2.0; }

double cell_type_asw(const DenseMatrix& embedding, std::span<const Label> cell_types) {
  return unit_asw(silhouette_asw(embedding, cell_types));
}

double batch_asw(const DenseMatrix& embedding, std::span<const Label> batch_labels,
                 std::span<const Label> cell_types) {
  require(embedding.rows() == batch_labels.size() && embedding.rows() == cell_types.size(),
          "batch_asw: label count mismatch");
  std::map<Label, std::vector<Index>> groups;
  for (Index i = 0; i < cell_types.size(); ++i) groups[cell_types[i]].push_back(i);
  std::vector<double> scores;
  for (const auto& [type, members] : groups) {
    LabelArray b;
    DenseMatrix sub(members.size(), embedding.cols());
    for (Index r = 0; r < members.size(); ++r) {
      b.push_back(batch_labels[members[r]]);
      std::copy_n(embedding.row(members[r]).begin(), embedding.cols(), sub.row(r).begin());
    }
    Index nb = 0;
    compact(b, &nb);
    if (nb < 2) continue;
    double acc = 0.0;
    for (const double s : silhouette_samples(sub, b)) acc += 1.0 - std::abs(s);
    scores.push_back(acc / static_cast<double>(members.size()));
  }
  require(!scores.empty(), "batch_asw: no cell type spans two or more batches");
  return mean_of(scores);
}

double variance_explained(const DenseMatrix& x, std::span<const double> y) {
  require(x.rows() == y.size(), "variance_explained: row count mismatch");
  const Index n = y.size();
  if (n == 0) return 0.0;
  const double ybar = mean_of(y);
  std::vector<double> resid(n);
  double ss_tot = 0.0;
  for (Index i = 0; i < n; ++i) {
    resid[i] = y[i] - ybar;
    ss_tot += resid[i] * resid[i];
  }
  if (ss_tot <= 0.0) return 0.0;
  // Centered columns, orthonormalized by modified Gram-Schmidt; dependent columns are dropped.
  std::vector<std::vector<double>> basis;
  for (Index c = 0; c < x.cols(); ++c) {
    std::vector<double> v(n);
    double mean = 0.0;
    for (Index i = 0; i < n; ++i) mean += x(i, c);
    mean /= static_cast<double>(n);
    double norm0 = 0.0;
    for (Index i = 0; i < n; ++i) {
      v[i] = x(i, c) - mean;
      norm0 += v[i] * v[i];
    }
    norm0 = std::sqrt(norm0);
    if (norm0 == 0.0) continue;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : basis) {
        double dot = 0.0;
        for (Index i = 0; i < n; ++i) dot += q[i] * v[i];
        for (Index i = 0; i < n; ++i) v[i] -= dot * q[i];
      }
    double norm = 0.0;
    for (const double e : v) norm += e * e;
    norm = std::sqrt(norm);
    if (norm <= 1e-10 * norm0) continue;
    for (auto& e : v) e /= norm;
    basis.push_back(std::move(v));
  }
  for (const auto& q : basis) {
    double dot = 0.0;
    for (Index i = 0; i < n; ++i) dot += q[i] * resid[i];
    for (Index i = 0; i < n; ++i) resid[i] -= dot * q[i];
  }
  double ss_res = 0.0;
  for (const double r : resid) ss_res += r * r;
  return std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);
}

std::vector<double> variance_explained_per_batch(const DenseMatrix& x, std::span<const double> score,
                                                 std::span<const Label> batch_labels) {
  require(x.rows() == score.size() && x.rows() == batch_labels.size(),
          "variance_explained_per_batch: length mismatch");
  Label max_batch = -1;
  for (const Label b : batch_labels) {
    require(b >= 0, "variance_explained_per_batch: unlabeled batch");
    max_batch = std::max(max_batch, b);
  }
  std::vector<double> out(static_cast<Index>(max_batch + 1), 0.0);
  for (Label b = 0; b <= max_batch; ++b) {
    std::vector<Index> rows;
    for (Index i = 0; i < batch_labels.size(); ++i)
      if (batch_labels[i] == b) rows.push_back(i);
    if (rows.empty()) continue;
    DenseMatrix sub(rows.size(), x.cols());
    std::vector<double> y(rows.size());
    for (Index r = 0; r < rows.size(); ++r) {
      std::copy_n(x.row(rows[r]).begin(), x.cols(), sub.row(r).begin());
      y[r] = score[rows[r]];
    }
    out[static_cast<Index>(b)] = variance_explained(sub, y);
  }
  return out;
}

double cell_cycle_conservation(std::span<const double> score, std::span<const double> var_before,
                               const DenseMatrix& embedding, std::span<const Label> batch_labels) {
  const auto after = variance_explained_per_batch(embedding, score, batch_labels);
  std::vector<double> per_batch;
  for (Index b = 0; b < after.size(); ++b) {
    if (std::find(batch_labels.begin(), batch_labels.end(), static_cast<Label>(b)) == batch_labels.end()) continue;
    require(b < var_before.size(), "cell_cycle_conservation: missing Var_before for a batch");
    if (!(var_before[b] > 0.0)) {
      std::cerr << "warning: batch " << b << " has non-positive Var_before; skipped\n";
      continue;
    }
    per_batch.push_back(std::clamp(1.0 - std::abs(after[b] - var_before[b]) / var_before[b], 0.0, 1.0));
  }
  require(!per_batch.empty(), "cell_cycle_conservation: no batch with positive Var_before");
  return mean_of(per_batch);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  const Index n = v.size();
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  for (Index i = 0; i < n;) {
    Index j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Index t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "spearman: length mismatch");
  require(a.size() >= 2, "spearman: need at least two values");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double ma = mean_of(ra), mb = mean_of(rb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double trajectory_conservation(std::span<const double> before, std::span<const double> after) {
  const double s = spearman(before, after);
  if (std::isnan(s)) {
    std::cerr << "warning: constant pseudotime; trajectory conservation set to 0.5\n";
    return 0.5;
  }
  return (s + 1.0) / 2.0;
}

std::vector<double> pseudotime_from_root(const KnnGraph& g, Index root) {
  require(root < g.n_nodes, "pseudotime_from_root: root out of range");
  const auto w = symmetrize_distances(g);
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(g.n_nodes, inf);
  using Item = std::pair<double, Index>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[root] = 0.0;
  pq.emplace(0.0, root);
  while (!pq.empty()) {
    const auto [d, u] = pq.top();
    pq.pop();
    if (d > dist[u]) continue;
    for (const auto& [v, len] : w.adjacency[u]) {
      if (d + len < dist[v]) {
        dist[v] = d + len;
        pq.emplace(dist[v], v);
      }
    }
  }
  double max_finite = 0.0;
  for (const double d : dist)
    if (std::isfinite(d)) max_finite = std::max(max_finite, d);
  for (auto& d : dist)
    if (!std::isfinite(d)) d = max_finite + 1.0;
  return dist;
}

double graph_connectivity(const DenseMatrix& embedding, std::span<const Label> cell_types, Index knn_k) {
  require(embedding.rows() == cell_types.size(), "graph_connectivity: label count mismatch");
  require(embedding.rows() > 0, "graph_connectivity: empty embedding");
  const Index n = embedding.rows();
  const auto g = knn_graph(embedding, knn_k);
  // Union-find over edges whose endpoints share a type.
  std::vector<Index> parent(n);
  std::iota(parent.begin(), parent.end(), Index{0});
  auto find = [&](Index x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (Index i = 0; i < n; ++i)
    for (const auto& [j, d] : g.neighbors[i])
      if (cell_types[i] == cell_types[j]) parent[find(i)] = find(j);
  std::map<Label, std::map<Index, Index>> comp_sizes;
  std::map<Label, Index> type_sizes;
  for (Index i = 0; i < n; ++i) {
    ++comp_sizes[cell_types[i]][find(i)];
    ++type_sizes[cell_types[i]];
  }
  std::vector<double> fractions;
  for (const auto& [type, comps] : comp_sizes) {
    Index largest = 0;
    for (const auto& [root, size] : comps) largest = std::max(largest, size);
    fractions.push_back(static_cast<double>(largest) / static_cast<double>(type_sizes[type]));
  }
  return mean_of(fractions);
}

MetricReport aggregate(double nmi_score, double ct_asw, double cc, double traj, double b_asw, double gc) {
  auto class_mean = [](std::initializer_list<double> xs) {
    double s = 0.0;
    int n = 0;
    for (const double x : xs)
      if (!std::isnan(x)) {
        s += x;
        ++n;
      }
    return n > 0 ? s / n : std::numeric_limits<double>::quiet_NaN();
  };
  MetricReport r;
  r.nmi = nmi_score;
  r.cell_type_asw = ct_asw;
  r.cc_conservation = cc;
  r.trajectory_conservation = traj;
  r.batch_asw = b_asw;
  r.graph_connectivity = gc;
  r.s_bio = class_mean({nmi_score, ct_asw, cc, traj});
  r.s_batch = class_mean({b_asw, gc});
  r.overall = 0.6 * r.s_bio + 0.4 * r.s_batch;
  return r;
}

double rmse(const DenseMatrix& pred, const DenseMatrix& target) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), "rmse: shape mismatch");
  require(pred.size() > 0, "rmse: empty matrices");
  double s = 0.0;
  const auto p = pred.values(), t = target.values();
  for (Index i = 0; i < p.size(); ++i) s += (p[i] - t[i]) * (p[i] - t[i]);
  return std::sqrt(s / static_cast<double>(p.size()));
}

}  // namespace cellgraph
