#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "cellgraph/convnet.hpp"
#include "cellgraph/error.hpp"
#include "support.hpp"

using namespace cellgraph;
using namespace cgtest;

namespace {

DenseMatrix relu(DenseMatrix m) {
  for (double& v : m.values()) v = std::max(v, 0.0);
  return m;
}

DenseMatrix plus(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out = a;
  for (Index r = 0; r < a.rows(); ++r)
    for (Index c = 0; c < a.cols(); ++c) out(r, c) += b.rows() == 1 ? b(0, c) : b(r, c);
  return out;
}

ConvConfig plain(Index layers, Index d) {
  ConvConfig c;
  c.n_layers = layers;
  c.hidden_dim = d;
  c.residual = ResidualMode::SkipConnection;
  c.aggregation = AggregationNorm::EdgeSymmetric;
  c.dropout = 0.0;
  return c;
}

// Unit-weight 3-cell / 2-feature graph: cell0-f0, cell1-f0, cell1-f1, cell2-f1.
SparseMatrix toy() { return SparseMatrix::from_dense(DenseMatrix{{1, 0}, {1, 1}, {0, 1}}); }

// Dense D^-1/2 E D^-1/2 for a non-negative biadjacency.
DenseMatrix normalized(const DenseMatrix& e) {
  DenseMatrix out = e;
  for (Index i = 0; i < e.rows(); ++i)
    for (Index j = 0; j < e.cols(); ++j) {
      if (e(i, j) == 0.0) continue;
      double du = 0.0, dv = 0.0;
      for (Index k = 0; k < e.cols(); ++k) du += e(i, k);
      for (Index k = 0; k < e.rows(); ++k) dv += e(k, j);
      out(i, j) = e(i, j) / std::sqrt(du * dv);
    }
  return out;
}

}  // namespace

TEST_CASE("input_transform") {
  const CellFeatureGraph g = build_bipartite(toy());
  SUBCASE("one-hot selection") {
    ParamStore s;
    const GraphConvNet net("n.", plain(1, 3), g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 1);
    s.at("n.input.feat.b").value = DenseMatrix{{0.1, -0.2, 0.3}};
    Tape t(false);
    const auto [hc, hf] = net.input_transform(t, s);
    CHECK(t.value(hf) == relu(plus(s.at("n.input.feat.w").value, s.at("n.input.feat.b").value)));
    // Cells start at zero, so with zero bias they stay zero.
    CHECK(t.value(hc) == DenseMatrix(3, 3, 0.0));
  }
  SUBCASE("learned table composition") {
    ParamStore s;
    NodeEmbeddings e = init_embeddings(g, FeatureInit::LearnedTable, 4, 2);
    const GraphConvNet net("n.", plain(1, 3), g, e, s, 1);
    s.at("n.input.feat.b").value = random_dense(1, 3, 3);
    Tape t(false);
    const auto [hc, hf] = net.input_transform(t, s);
    const DenseMatrix expect =
        relu(plus(dense_product(e.feature_embed, s.at("n.input.feat.w").value), s.at("n.input.feat.b").value));
    CHECK(max_abs_diff(t.value(hf), expect) < 1e-14);
  }
}

TEST_CASE("conv_layer") {
  SUBCASE("empty neighbourhood with zero bias is a pure residual") {
    const SparseMatrix m(2, 2);
    const CellFeatureGraph g = build_bipartite(m, EdgeNormalization::NoneWithPostStandardize);
    ConvConfig c = plain(1, 2);
    c.aggregation = AggregationNorm::PostGroupNorm;
    ParamStore s;
    const GraphConvNet net("n.", c, g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 1);
    // Zero messages pass through group norm to beta = 0, so the update is residual only.
    Tape t(false);
    const Var hc = t.constant(random_dense(2, 2, 4)), hf = t.constant(random_dense(2, 2, 5));
    const auto [c2, f2] = net.conv_layer(t, s, 0, hc, hf, hc, hf, 0);
    CHECK(t.value(c2) == t.value(hc));
    CHECK(t.value(f2) == t.value(hf));
  }
  SUBCASE("toy graph matches hand expansion") {
    const CellFeatureGraph g = build_bipartite(toy());
    ParamStore s;
    const GraphConvNet net("n.", plain(1, 2), g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 7);
    s.at("n.l0.uv.b").value = DenseMatrix{{0.1, -0.1}};
    s.at("n.l0.vu.b").value = DenseMatrix{{-0.05, 0.2}};
    const DenseMatrix hc0 = random_dense(3, 2, 6), hf0 = random_dense(2, 2, 7);
    Tape t(false);
    const Var hc = t.constant(hc0), hf = t.constant(hf0);
    const auto [c2, f2] = net.conv_layer(t, s, 0, hc, hf, hc, hf, 0);
    const DenseMatrix n = normalized(toy().to_dense());
    const DenseMatrix to_feat =
        relu(plus(dense_product(transpose(n), dense_product(hc0, s.at("n.l0.uv.w").value)), s.at("n.l0.uv.b").value));
    const DenseMatrix to_cell =
        relu(plus(dense_product(n, dense_product(hf0, s.at("n.l0.vu.w").value)), s.at("n.l0.vu.b").value));
    CHECK(max_abs_diff(t.value(f2), plus(hf0, to_feat)) < 1e-14);
    CHECK(max_abs_diff(t.value(c2), plus(hc0, to_cell)) < 1e-14);
  }
  SUBCASE("initial residual adds the first-layer state") {
    const CellFeatureGraph g = build_bipartite(toy());
    ConvConfig c = plain(2, 2);
    c.residual = ResidualMode::InitialResidual;
    ParamStore s;
    const GraphConvNet net("n.", c, g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 8);
    Tape t(false);
    const Var h0c = t.constant(random_dense(3, 2, 8)), h0f = t.constant(random_dense(2, 2, 9));
    const Var hc = t.constant(random_dense(3, 2, 10)), hf = t.constant(random_dense(2, 2, 11));
    const auto [c_init, f_init] = net.conv_layer(t, s, 1, hc, hf, h0c, h0f, 0);
    const auto [c_skip, f_skip] = net.conv_layer(t, s, 1, hc, hf, hc, hf, 0);
    // Same messages; only the residual base differs.
    const DenseMatrix msg = plus(t.value(c_skip), DenseMatrix(t.value(hc).rows(), 2, 0.0));
    DenseMatrix diff = t.value(c_init);
    for (Index i = 0; i < diff.size(); ++i)
      diff.values()[i] -= t.value(h0c).values()[i] - t.value(hc).values()[i];
    CHECK(max_abs_diff(diff, msg) < 1e-14);
  }
  SUBCASE("alpha = 1 ignores the cell-feature message") {
    const SparseMatrix m = random_sparse(6, 4, 0.8, 12);
    const GeneSetCollection sets{{"all", {0, 1, 2, 3}}};
    const CellFeatureGraph g = augment_with_pathways(build_bipartite(m), sets, m);
    ConvConfig c = plain(1, 3);
    c.use_pathway_channel = true;
    c.alpha = 1.0;
    ParamStore s;
    const GraphConvNet net("n.", c, g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 13);
    const DenseMatrix hf0 = random_dense(4, 3, 14);
    auto run = [&](const DenseMatrix& hc0) {
      Tape t(false);
      const Var hc = t.constant(hc0), hf = t.constant(hf0);
      return t.value(net.conv_layer(t, s, 0, hc, hf, hc, hf, 0).second);
    };
    CHECK(run(random_dense(6, 3, 15)) == run(random_dense(6, 3, 16)));
  }
  SUBCASE("pathway channel without pathway edges") {
    const CellFeatureGraph g = build_bipartite(toy());
    ConvConfig c = plain(1, 2);
    c.use_pathway_channel = true;
    ParamStore s;
    CHECK_THROWS_AS(GraphConvNet("n.", c, g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 1), Error);
  }
}

TEST_CASE("readout") {
  const CellFeatureGraph g = build_bipartite(toy());
  ParamStore s;
  const GraphConvNet net("n.", plain(2, 2), g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 1);
  CHECK(s.at("n.readout.w").value == DenseMatrix{{0.5, 0.5}});
  const DenseMatrix a = random_dense(3, 2, 17), b = random_dense(3, 2, 18);
  Tape t(false);
  const Var va = t.constant(a), vb = t.constant(b);
  s.at("n.readout.w").value = DenseMatrix{{0, 1}};
  CHECK(t.value(net.readout(t, s, {va, vb})) == b);
  s.at("n.readout.w").value = DenseMatrix{{0.3, -1.7}};
  DenseMatrix expect(3, 2);
  for (Index i = 0; i < 6; ++i) expect.values()[i] = 0.3 * a.values()[i] - 1.7 * b.values()[i];
  CHECK(max_abs_diff(t.value(net.readout(t, s, {va, vb})), expect) < 1e-15);

  ParamStore s1;
  const GraphConvNet one("m.", plain(1, 2), g, init_embeddings(g, FeatureInit::OneHotIdentity), s1, 1);
  Tape t1(false);
  CHECK(t1.value(one.readout(t1, s1, {t1.constant(a)})) == a);
}

TEST_CASE("decoupled_propagate") {
  SUBCASE("disjoint pairs reflect the input") {
    const CellFeatureGraph g = build_bipartite(SparseMatrix::from_dense(DenseMatrix::identity(3)));
    const DenseMatrix x = random_dense(3, 4, 19);
    const auto steps = decoupled_propagate(g, x, 1);
    REQUIRE(steps.size() == 1);
    CHECK(max_abs_diff(steps[0], x) < 1e-15);
  }
  SUBCASE("zero steps") {
    const CellFeatureGraph g = build_bipartite(toy());
    CHECK(decoupled_propagate(g, random_dense(3, 2, 20), 0).empty());
  }
  SUBCASE("one step equals N N^T x") {
    const SparseMatrix m = random_sparse(8, 5, 0.5, 21);
    const CellFeatureGraph g = build_bipartite(m);
    const DenseMatrix x = random_dense(8, 3, 22);
    const DenseMatrix n = normalized(m.to_dense());
    const auto steps = decoupled_propagate(g, x, 2);
    const DenseMatrix one = dense_product(n, dense_product(transpose(n), x));
    CHECK(max_abs_diff(steps[0], one) < 1e-13);
    CHECK(max_abs_diff(steps[1], dense_product(n, dense_product(transpose(n), one))) < 1e-13);
  }
}

TEST_CASE("forward") {
  const SparseMatrix m = random_sparse(6, 4, 0.7, 23);
  const CellFeatureGraph g = build_bipartite(m);

  SUBCASE("coupled two-layer composition") {
    ParamStore s;
    const GraphConvNet net("n.", plain(2, 3), g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 24);
    Tape t(false);
    const Var out = net.forward(t, s, 0);
    Tape u(false);
    const auto [c0, f0] = net.input_transform(u, s);
    const auto [c1, f1] = net.conv_layer(u, s, 0, c0, f0, c0, f0, 0);
    const auto [c2, f2] = net.conv_layer(u, s, 1, c1, f1, c0, f0, 0);
    CHECK(t.value(out) == u.value(net.readout(u, s, {c1, c2})));
    Tape again(false);
    CHECK(t.value(out) == again.value(net.forward(again, s, 0)));
  }
  SUBCASE("zero parameters give zero output without residual input") {
    ParamStore s;
    const GraphConvNet net("n.", plain(2, 3), g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 25);
    for (const auto& name : s.names())
      if (name != "n.readout.w") s.at(name).value.fill(0.0);
    Tape t(false);
    CHECK(t.value(net.forward(t, s, 0)) == DenseMatrix(6, 3, 0.0));
  }
  SUBCASE("cell permutation equivariance") {
    const std::vector<Index> perm{3, 0, 5, 1, 4, 2};
    DenseMatrix pm(6, 4);
    const DenseMatrix dm = m.to_dense();
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 4; ++j) pm(i, j) = dm(perm[i], j);
    const CellFeatureGraph pg = build_bipartite(SparseMatrix::from_dense(pm));
    ConvConfig c = plain(2, 3);
    c.aggregation = AggregationNorm::PostGroupNorm;
    ParamStore s, ps;
    const GraphConvNet net("n.", c, g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 26);
    const GraphConvNet pnet("n.", c, pg, init_embeddings(pg, FeatureInit::OneHotIdentity), ps, 26);
    Tape t(false), pt(false);
    const DenseMatrix h = t.value(net.forward(t, s, 0)), ph = pt.value(pnet.forward(pt, ps, 0));
    double worst = 0.0;
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 3; ++j) worst = std::max(worst, std::abs(ph(i, j) - h(perm[i], j)));
    CHECK(worst < 1e-12);
  }
  SUBCASE("decoupled with no propagation is the perceptron alone") {
    ConvConfig c = plain(0, 4);
    c.decoupled = true;
    ParamStore s;
    const DecoupledNet net("d.", c, 3, s, 27);
    const DenseMatrix x = random_dense(6, 3, 28);
    Tape t(false);
    const Var out = net.forward(t, s, {x}, 0);
    const DenseMatrix h = relu(plus(dense_product(x, s.at("d.step0.fc1.w").value), s.at("d.step0.fc1.b").value));
    const DenseMatrix y = plus(dense_product(h, s.at("d.step0.fc2.w").value), s.at("d.step0.fc2.b").value);
    CHECK(max_abs_diff(t.value(out), y) < 1e-14);
  }
}

TEST_CASE("gradients") {
  SUBCASE("readout weights") {
    const SparseMatrix m = random_sparse(5, 4, 0.7, 29);
    const CellFeatureGraph g = build_bipartite(m);
    ParamStore s;
    const GraphConvNet net("n.", plain(3, 3), g, init_embeddings(g, FeatureInit::OneHotIdentity), s, 30);
    const DenseMatrix target = random_dense(5, 3, 31);
    // Jitter keeps ReLU inputs off the kink at zero.
    std::uint64_t salt = 100;
    for (const auto& name : s.names()) {
      const DenseMatrix& v = s.at(name).value;
      const DenseMatrix j = random_dense(v.rows(), v.cols(), salt++);
      for (Index i = 0; i < v.size(); ++i) s.at(name).value.values()[i] += 0.3 * j.values()[i];
    }
    // Every parameter, readout weights included.
    const auto report =
        gradient_check(s, [&](Tape& t) { return t.mse(net.forward(t, s, 0), t.constant(target)); });
    CHECK(report.checked == s.scalar_count());
    CHECK(report.max_relative_error < 1e-4);
  }
  SUBCASE("full coupled network") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) CHECK(check_network_gradient(6, 4, 2, seed).max_relative_error < 1e-4);
  }
}
