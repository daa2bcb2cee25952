#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cellgraph/linalg.hpp"

namespace cellgraph {

// Named trainable parameters with gradients and Adam moments. Iteration order is
// insertion order, which fixes checkpoint layout and update order.
class ParamStore {
 public:
  struct Entry {
    DenseMatrix value;
    DenseMatrix grad;
    DenseMatrix adam_m;
    DenseMatrix adam_v;
  };

  Entry& add(const std::string& name, DenseMatrix init);
  bool contains(std::string_view name) const;
  Entry& at(std::string_view name);
  const Entry& at(std::string_view name) const;
  const std::vector<std::string>& names() const noexcept { return names_; }
  Index size() const noexcept { return names_.size(); }
  Index scalar_count() const;

  void zero_grad();

  std::uint64_t step = 0;

 private:
  std::vector<std::string> names_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, Index> index_;
};

enum class OpKind {
  Constant,
  Param,
  MatMul,
  SpMMConst,
  Add,
  Sub,
  ReLU,
  Sigmoid,
  SoftmaxRows,
  GroupNorm,
  L2NormalizeRows,
  Dropout,
  ScalarMix,
  Lerp,
  Concat,
  GatherRows,
  SliceCols,
  Transpose,
  Scale,
  Sum,
  MSE,
  RMSE,
  CrossEntropyRows,
  L2Penalty,
  MeanRowNorm,
};

std::string_view op_name(OpKind kind);

// Handle to a recorded node.
struct Var {
  static constexpr Index npos = std::numeric_limits<Index>::max();
  Index id = npos;
  bool valid() const noexcept { return id != npos; }
};

// Constant sparse operand for SpMMConst, with its transpose for the backward pass.
struct SparseOperator {
  SparseMatrix matrix;
  SparseMatrix transposed;
  explicit SparseOperator(SparseMatrix m) : matrix(std::move(m)), transposed(matrix.transposed()) {}
};
using SparseOperatorPtr = std::shared_ptr<const SparseOperator>;

// Append-only record of a forward computation. One backward pass per tape.
class Tape {
 public:
  explicit Tape(bool training = true) : training_(training) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool training() const noexcept { return training_; }

  Var constant(DenseMatrix value);
  Var param(ParamStore& store, const std::string& name);

  const DenseMatrix& value(Var v) const;
  double scalar(Var v) const;
  Index size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b, bool transpose_b = false);
  Var spmm(SparseOperatorPtr a, Var x);
  Var add(Var a, Var b);  // b may be a single row broadcast over a's rows
  Var sub(Var a, Var b);
  Var relu(Var x);
  Var sigmoid(Var x);
  Var softmax_rows(Var x);
  // Per-row normalization over `groups` equal column groups, then affine with 1 x d gamma/beta.
  Var group_norm(Var x, Var gamma, Var beta, Index groups, double eps = 1e-5);
  Var l2_normalize_rows(Var x);
  // Inverted dropout; identity outside training or at rate 0.
  Var dropout(Var x, double rate, std::uint64_t seed);
  // sum_i weights[0,i] * inputs[i]
  Var scalar_mix(Var weights, const std::vector<Var>& inputs);
  // alpha * a + (1 - alpha) * b with 1x1 alpha
  Var lerp(Var alpha, Var a, Var b);
  Var concat(const std::vector<Var>& inputs);
  Var gather_rows(Var x, std::vector<Index> rows);
  Var slice_cols(Var x, Index begin, Index end);
  Var transpose(Var x);
  Var scale(Var x, double factor);
  Var sum(Var x);
  Var mse(Var pred, Var target);
  Var rmse(Var pred, Var target);
  // Softmax cross-entropy per row against integer labels; kUnlabeled rows are skipped.
  // mean=true averages over labeled rows, otherwise sums.
  Var cross_entropy_rows(Var logits, std::vector<std::int64_t> labels, bool mean);
  Var l2_penalty(Var x);
  Var mean_row_norm(Var x);

  // Accumulates d(loss)/d(param) into store gradients. Loss must be 1x1.
  void backward(Var loss, ParamStore& store);

 private:
  struct Node {
    OpKind kind = OpKind::Constant;
    std::vector<Index> inputs;
    DenseMatrix value;
    DenseMatrix grad;
    bool requires_grad = false;
    std::string param_name;
    SparseOperatorPtr sparse;
    std::vector<Index> indices;
    std::vector<std::int64_t> labels;
    DenseMatrix saved;
    std::vector<double> saved_vec;
    double scalar = 0.0;
    Index lo = 0;
    Index hi = 0;
    bool flag = false;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void backprop_node(Index id);
  void accumulate(Index target, const DenseMatrix& g);
  DenseMatrix& grad_of(Index target);

  bool training_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Bias-corrected Adam with decoupled weight decay; increments store.step and zeroes
// gradients. Leaves every parameter untouched if any gradient is non-finite.
void adam_step(ParamStore& store, const AdamOptions& opt);

double lr_decay(double initial_lr, std::uint64_t step, double decay_rate, std::uint64_t decay_every);

// Glorot-uniform initial values for a fan_in x fan_out weight.
DenseMatrix glorot_uniform(Index fan_in, Index fan_out, std::uint64_t seed);

// Central-difference check of every parameter entry. Returns the worst relative error
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_param;
  Index checked = 0;
};
GradCheckReport gradient_check(ParamStore& store, const std::function<Var(Tape&)>& build_loss,
                               double eps = 1e-5, double floor = 1e-6);

// Differentiable op kinds covered by the per-op finite-difference suite.
std::vector<OpKind> differentiable_ops();
// Builds a small random instance of `kind` (shapes <= 6x6) and checks its gradient.
GradCheckReport check_op_gradient(OpKind kind, std::uint64_t seed);

// Binary checkpoint: magic, version, step, then per parameter name/shape/value/moments.
void save_checkpoint(const std::string& path, const ParamStore& store);
ParamStore load_checkpoint(const std::string& path);

}  // namespace cellgraph
