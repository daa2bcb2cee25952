#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cellgraph/autodiff.hpp"
#include "cellgraph/error.hpp"
#include "support.hpp"

using namespace cellgraph;
using namespace cgtest;

TEST_CASE("forward values") {
  Tape t(false);
  CHECK(t.value(t.relu(t.constant(DenseMatrix{{-1, 2}}))) == DenseMatrix{{0, 2}});
  CHECK(t.value(t.softmax_rows(t.constant(DenseMatrix{{0, 0}}))) == DenseMatrix{{0.5, 0.5}});
  const Var gamma = t.constant(DenseMatrix{{1, 1}}), beta = t.constant(DenseMatrix{{0, 0}});
  const DenseMatrix gn = t.value(t.group_norm(t.constant(DenseMatrix{{1, 3}}), gamma, beta, 1, 0.0));
  CHECK(max_abs_diff(gn, DenseMatrix{{-1, 1}}) < 1e-15);
  CHECK(t.scalar(t.mse(t.constant(DenseMatrix{{1, 2}}), t.constant(DenseMatrix{{0, 0}}))) == 2.5);
  CHECK(t.scalar(t.rmse(t.constant(DenseMatrix{{3, 3}}), t.constant(DenseMatrix{{0, 0}}))) == 3.0);
  const Var ce = t.cross_entropy_rows(t.constant(DenseMatrix{{0, 0}, {5, 1}}), {0, kUnlabeled}, true);
  CHECK(t.scalar(ce) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(t.scalar(t.mean_row_norm(t.constant(DenseMatrix{{3, 4}, {0, 0}}))) == 2.5);
}

TEST_CASE("shape mismatch names the op") {
  Tape t;
  try {
    t.matmul(t.constant(DenseMatrix(2, 3)), t.constant(DenseMatrix(2, 3)));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("MatMul") != std::string::npos);
  }
}

TEST_CASE("backward") {
  SUBCASE("sum of W has unit gradient") {
    ParamStore s;
    s.add("W", random_dense(3, 2, 1));
    Tape t;
    t.backward(t.sum(t.param(s, "W")), s);
    CHECK(s.at("W").grad == DenseMatrix(3, 2, 1.0));
  }
  SUBCASE("quadratic closed form") {
    // loss = mean((W x - y)^2) over an n x 1 output gives 2 (W x - y) x^T / n.
    ParamStore s;
    const DenseMatrix w = random_dense(4, 3, 2), x = random_dense(3, 1, 3), y = random_dense(4, 1, 4);
    s.add("W", w);
    Tape t;
    t.backward(t.mse(t.matmul(t.param(s, "W"), t.constant(x)), t.constant(y)), s);
    const DenseMatrix r = dense_product(w, x);
    DenseMatrix expect(4, 3);
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 3; ++j) expect(i, j) = 2.0 * (r(i, 0) - y(i, 0)) * x(j, 0) / 4.0;
    CHECK(max_abs_diff(s.at("W").grad, expect) < 1e-14);
  }
  SUBCASE("non-scalar loss") {
    ParamStore s;
    s.add("W", DenseMatrix(2, 2));
    Tape t;
    CHECK_THROWS_AS(t.backward(t.param(s, "W"), s), Error);
  }
  SUBCASE("tape reuse") {
    ParamStore s;
    s.add("W", DenseMatrix(1, 1, 2.0));
    Tape t;
    const Var loss = t.sum(t.param(s, "W"));
    t.backward(loss, s);
    CHECK_THROWS_AS(t.backward(loss, s), Error);
  }
}

TEST_CASE("every op kind against finite differences") {
  for (const OpKind kind : differentiable_ops()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const GradCheckReport r = check_op_gradient(kind, seed);
      INFO(op_name(kind), " seed ", seed, " worst ", r.worst_param);
      CHECK(r.checked > 0);
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("softmax backward rows are orthogonal to ones") {
  ParamStore s;
  s.add("X", random_dense(5, 4, 7));
  Tape t;
  const Var p = t.softmax_rows(t.param(s, "X"));
  // Weighted sum makes the upstream gradient arbitrary.
  t.backward(t.sum(t.matmul(p, t.constant(random_dense(4, 4, 8)))), s);
  for (Index r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (const double g : s.at("X").grad.row(r)) sum += g;
    CHECK(std::abs(sum) < 1e-10);
  }
}

TEST_CASE("dropout") {
  const DenseMatrix x = random_dense(100, 100, 9);
  Tape t;
  CHECK(t.value(t.dropout(t.constant(x), 0.0, 1)) == x);
  Tape eval(false);
  CHECK(eval.value(eval.dropout(eval.constant(x), 0.5, 1)) == x);
  // Inverted scaling keeps the expectation: average kept-and-scaled ones over 10^4 entries.
  const DenseMatrix ones(100, 100, 1.0);
  const DenseMatrix d = t.value(t.dropout(t.constant(ones), 0.3, 2));
  double mean = 0.0;
  for (const double v : d.values()) mean += v / 1e4;
  CHECK(std::abs(mean - 1.0) < 0.02);
  CHECK(t.value(t.dropout(t.constant(ones), 0.3, 2)) == d);
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient is a fixed point") {
    ParamStore s;
    const DenseMatrix w = random_dense(3, 3, 10);
    s.add("W", w);
    adam_step(s, {});
    CHECK(s.at("W").value == w);
    CHECK(s.step == 1);
  }
  SUBCASE("first step moves each entry by lr against the gradient sign") {
    ParamStore s;
    s.add("W", DenseMatrix{{1, 1, 1}});
    s.at("W").grad = DenseMatrix{{2, -0.5, 0}};
    AdamOptions o;
    o.lr = 0.01;
    adam_step(s, o);
    const auto& v = s.at("W").value;
    CHECK(v(0, 0) == doctest::Approx(0.99).epsilon(1e-7));
    CHECK(v(0, 1) == doctest::Approx(1.01).epsilon(1e-7));
    CHECK(v(0, 2) == 1.0);
    CHECK(s.at("W").grad == DenseMatrix(1, 3, 0.0));
  }
  SUBCASE("scalar quadratic converges") {
    ParamStore s;
    s.add("w", DenseMatrix(1, 1, 1.0));
    AdamOptions o;
    o.lr = 0.05;
    double prev = 1.0;
    for (int i = 0; i < 100; ++i) {
      Tape t;
      const Var w = t.param(s, "w");
      t.backward(t.sum(t.matmul(w, w)), s);
      adam_step(s, o);
      const double now = std::abs(s.at("w").value(0, 0));
      if (i >= 5 && i < 15) CHECK(now < prev);
      prev = now;
    }
    CHECK(prev < 0.2);
  }
  SUBCASE("decoupled weight decay") {
    ParamStore s;
    s.add("W", DenseMatrix(1, 1, 2.0));
    AdamOptions o;
    o.lr = 0.1;
    o.weight_decay = 0.5;
    adam_step(s, o);
    CHECK(s.at("W").value(0, 0) == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-12));
  }
  SUBCASE("non-finite gradient aborts the step") {
    ParamStore s;
    s.add("A", DenseMatrix(1, 1, 1.0));
    s.add("B", DenseMatrix(1, 1, 1.0));
    s.at("A").grad(0, 0) = 1.0;
    s.at("B").grad(0, 0) = NAN;
    try {
      adam_step(s, {});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("B") != std::string::npos);
    }
    CHECK(s.at("A").value(0, 0) == 1.0);
  }
}

TEST_CASE("lr_decay") {
  CHECK(lr_decay(0.1, 0, 0.5, 100) == 0.1);
  CHECK(lr_decay(0.1, 200, 0.5, 100) == 0.025);
  CHECK(lr_decay(0.1, 199, 0.5, 100) == 0.05);
  double prev = 1.0;
  for (std::uint64_t s = 0; s < 1000; s += 7) {
    const double now = lr_decay(1.0, s, 0.9, 50);
    CHECK(now <= prev);
    prev = now;
  }
}

TEST_CASE("checkpoint round trip") {
  ParamStore s;
  s.add("a", random_dense(3, 2, 11));
  s.add("b", random_dense(1, 5, 12));
  s.at("a").adam_m = random_dense(3, 2, 13);
  s.at("b").adam_v = random_dense(1, 5, 14);
  s.step = 42;
  const auto path = (std::filesystem::temp_directory_path() / "cg_test_ckpt.bin").string();
  save_checkpoint(path, s);
  const ParamStore r = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(r.names() == s.names());
  CHECK(r.step == 42);
  for (const auto& n : s.names()) {
    CHECK(r.at(n).value == s.at(n).value);
    CHECK(r.at(n).adam_m == s.at(n).adam_m);
    CHECK(r.at(n).adam_v == s.at(n).adam_v);
  }
  CHECK_THROWS_AS(load_checkpoint(path), Error);
}

TEST_CASE("param store") {
  ParamStore s;
  s.add("x", DenseMatrix(2, 3));
  CHECK_THROWS_AS(s.add("x", DenseMatrix(1, 1)), Error);
  CHECK_THROWS_AS(s.at("y"), Error);
  CHECK(s.scalar_count() == 6);
  CHECK(s.at("x").grad.rows() == 2);
}
