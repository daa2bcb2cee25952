#include <algorithm>
#include <cmath>
#include <random>

#include "cellgraph/autodiff.hpp"
#include "cellgraph/error.hpp"

namespace cellgraph {

GradCheckReport gradient_check(ParamStore& store, const std::function<Var(Tape&)>& build_loss, double eps,
                               double floor) {
  store.zero_grad();
  {
    Tape tape(true);
    const Var loss = build_loss(tape);
    tape.backward(loss, store);
  }
  auto evaluate = [&] {
    Tape tape(true);
    return tape.scalar(build_loss(tape));
  };

  GradCheckReport report;
  for (const auto& name : store.names()) {
    auto& entry = store.at(name);
    const DenseMatrix analytic = entry.grad;
    auto values = entry.value.values();
    for (Index i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate();
      values[i] = saved - eps;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic.values()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > report.max_relative_error || report.checked == 0) {
        report.max_relative_error = rel;
        report.worst_param = name;
      }
      ++report.checked;
    }
  }
  store.zero_grad();
  return report;
}

std::vector<OpKind> differentiable_ops() {
  return {OpKind::MatMul,         OpKind::SpMMConst,  OpKind::Add,          OpKind::Sub,
          OpKind::ReLU,           OpKind::Sigmoid,    OpKind::SoftmaxRows,  OpKind::GroupNorm,
          OpKind::L2NormalizeRows, OpKind::Dropout,   OpKind::ScalarMix,    OpKind::Lerp,
          OpKind::Concat,         OpKind::GatherRows, OpKind::SliceCols,    OpKind::Transpose,
          OpKind::Scale,          OpKind::Sum,        OpKind::MSE,          OpKind::RMSE,
          OpKind::CrossEntropyRows, OpKind::L2Penalty, OpKind::MeanRowNorm};
}

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  Index dim(Index lo = 2, Index hi = 6) { return std::uniform_int_distribution<Index>(lo, hi)(rng_); }

  DenseMatrix normal(Index r, Index c) {
    std::normal_distribution<double> nd(0.0, 1.0);
    DenseMatrix m(r, c);
    for (double& v : m.values()) v = nd(rng_);
    return m;
  }

  // Magnitudes in [0.1, 1.1] with random sign: keeps ReLU inputs off the kink.
  DenseMatrix away_from_zero(Index r, Index c) {
    std::uniform_real_distribution<double> mag(0.1, 1.1);
    std::bernoulli_distribution sign(0.5);
    DenseMatrix m(r, c);
    for (double& v : m.values()) v = sign(rng_) ? mag(rng_) : -mag(rng_);
    return m;
  }

  SparseMatrix sparse(Index r, Index c, double density) {
    std::bernoulli_distribution keep(density);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<SparseMatrix::Triplet> t;
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j)
        if (keep(rng_)) t.push_back({i, j, nd(rng_)});
    return SparseMatrix::from_triplets(r, c, std::move(t));
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

GradCheckReport check_op_gradient(OpKind kind, std::uint64_t seed) {
  Sampler s(seed);
  ParamStore store;
  const Index r = s.dim(), c = s.dim();
  std::function<Var(Tape&)> build;

  // Non-scalar outputs are reduced through an MSE against a fixed random target.
  const DenseMatrix target_rc = s.normal(r, c);
  auto reduce = [](Tape& t, Var out, const DenseMatrix& target) { return t.mse(out, t.constant(target)); };

  switch (kind) {
    case OpKind::MatMul: {
      const Index k = s.dim();
      store.add("a", s.normal(r, k));
      store.add("b", s.normal(k, c));
      store.add("bt", s.normal(c, k));
      build = [=, &store](Tape& t) {
        const Var a = t.param(store, "a");
        const Var x = t.add(t.matmul(a, t.param(store, "b")), t.matmul(a, t.param(store, "bt"), true));
        return reduce(t, x, target_rc);
      };
      break;
    }
    case OpKind::SpMMConst: {
      const Index k = s.dim();
      auto op = std::make_shared<const SparseOperator>(s.sparse(r, k, 0.5));
      store.add("x", s.normal(k, c));
      build = [=, &store](Tape& t) { return reduce(t, t.spmm(op, t.param(store, "x")), target_rc); };
      break;
    }
    case OpKind::Add: {
      store.add("a", s.normal(r, c));
      store.add("b", s.normal(r, c));
      store.add("bias", s.normal(1, c));
      build = [=, &store](Tape& t) {
        const Var x = t.add(t.add(t.param(store, "a"), t.param(store, "b")), t.param(store, "bias"));
        return reduce(t, x, target_rc);
      };
      break;
    }
    case OpKind::Sub: {
      store.add("a", s.normal(r, c));
      store.add("b", s.normal(r, c));
      build = [=, &store](Tape& t) {
        return reduce(t, t.sub(t.param(store, "a"), t.param(store, "b")), target_rc);
      };
      break;
    }
    case OpKind::ReLU:
      store.add("x", s.away_from_zero(r, c));
      build = [=, &store](Tape& t) { return reduce(t, t.relu(t.param(store, "x")), target_rc); };
      break;
    case OpKind::Sigmoid:
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return reduce(t, t.sigmoid(t.param(store, "x")), target_rc); };
      break;
    case OpKind::SoftmaxRows:
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return reduce(t, t.softmax_rows(t.param(store, "x")), target_rc); };
      break;
    case OpKind::GroupNorm: {
      const Index width = s.dim(2, 3);
      const DenseMatrix target = s.normal(r, 2 * width);
      store.add("x", s.normal(r, 2 * width));
      store.add("gamma", s.normal(1, 2 * width));
      store.add("beta", s.normal(1, 2 * width));
      build = [=, &store](Tape& t) {
        const Var y = t.group_norm(t.param(store, "x"), t.param(store, "gamma"), t.param(store, "beta"), 2);
        return reduce(t, y, target);
      };
      break;
    }
    case OpKind::L2NormalizeRows:
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return reduce(t, t.l2_normalize_rows(t.param(store, "x")), target_rc); };
      break;
    case OpKind::Dropout: {
      const std::uint64_t mask_seed = s.rng()();
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) {
        return reduce(t, t.dropout(t.param(store, "x"), 0.3, mask_seed), target_rc);
      };
      break;
    }
    case OpKind::ScalarMix: {
      store.add("w", s.normal(1, 3));
      for (const char* name : {"x0", "x1", "x2"}) store.add(name, s.normal(r, c));
      build = [=, &store](Tape& t) {
        const Var y = t.scalar_mix(t.param(store, "w"),
                                   {t.param(store, "x0"), t.param(store, "x1"), t.param(store, "x2")});
        return reduce(t, y, target_rc);
      };
      break;
    }
    case OpKind::Lerp: {
      store.add("alpha", DenseMatrix(1, 1, std::uniform_real_distribution<double>(0.1, 0.9)(s.rng())));
      store.add("a", s.normal(r, c));
      store.add("b", s.normal(r, c));
      build = [=, &store](Tape& t) {
        const Var y = t.lerp(t.param(store, "alpha"), t.param(store, "a"), t.param(store, "b"));
        return reduce(t, y, target_rc);
      };
      break;
    }
    case OpKind::Concat: {
      const Index c2 = s.dim(1, 3);
      const DenseMatrix target = s.normal(r, c + c2);
      store.add("a", s.normal(r, c));
      store.add("b", s.normal(r, c2));
      build = [=, &store](Tape& t) {
        return reduce(t, t.concat({t.param(store, "a"), t.param(store, "b")}), target);
      };
      break;
    }
    case OpKind::GatherRows: {
      const std::vector<Index> rows = {0, r - 1, 0, 1};
      const DenseMatrix target = s.normal(rows.size(), c);
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return reduce(t, t.gather_rows(t.param(store, "x"), rows), target); };
      break;
    }
    case OpKind::SliceCols: {
      const DenseMatrix target = s.normal(r, c - 1);
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return reduce(t, t.slice_cols(t.param(store, "x"), 1, c), target); };
      break;
    }
    case OpKind::Transpose: {
      const DenseMatrix target = s.normal(c, r);
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return reduce(t, t.transpose(t.param(store, "x")), target); };
      break;
    }
    case OpKind::Scale:
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return reduce(t, t.scale(t.param(store, "x"), -2.5), target_rc); };
      break;
    case OpKind::Sum:
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) {
        const Var total = t.sum(t.param(store, "x"));
        return t.mse(total, t.constant(DenseMatrix(1, 1, 0.7)));
      };
      break;
    case OpKind::MSE:
    case OpKind::RMSE:
      store.add("pred", s.normal(r, c));
      store.add("target", s.normal(r, c));
      build = [=, &store](Tape& t) {
        const Var p = t.param(store, "pred"), y = t.param(store, "target");
        return kind == OpKind::MSE ? t.mse(p, y) : t.rmse(p, y);
      };
      break;
    case OpKind::CrossEntropyRows: {
      std::vector<std::int64_t> labels(r);
      for (auto& l : labels) l = std::uniform_int_distribution<std::int64_t>(0, static_cast<std::int64_t>(c) - 1)(s.rng());
      labels[0] = kUnlabeled;
      store.add("logits", s.normal(r, c));
      build = [=, &store](Tape& t) {
        const Var z = t.param(store, "logits");
        return t.add(t.cross_entropy_rows(z, labels, true), t.cross_entropy_rows(z, labels, false));
      };
      break;
    }
    case OpKind::L2Penalty:
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return t.l2_penalty(t.param(store, "x")); };
      break;
    case OpKind::MeanRowNorm:
      store.add("x", s.normal(r, c));
      build = [=, &store](Tape& t) { return t.mean_row_norm(t.param(store, "x")); };
      break;
    case OpKind::Constant:
    case OpKind::Param:
      fail("check_op_gradient: " + std::string(op_name(kind)) + " is not a differentiable op");
  }
  return gradient_check(store, build);
}

}  // namespace cellgraph
