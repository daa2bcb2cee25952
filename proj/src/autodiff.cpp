#include "cellgraph/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "cellgraph/error.hpp"

namespace cellgraph {

namespace {

std::string shape_of(const DenseMatrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

[[noreturn]] void shape_error(OpKind kind, const DenseMatrix& a, const DenseMatrix& b) {
  fail(std::string(op_name(kind)) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
}

void add_into(DenseMatrix& dst, const DenseMatrix& src, double factor = 1.0) {
  auto d = dst.values();
  auto s = src.values();
  for (Index i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

double frobenius_dot(const DenseMatrix& a, const DenseMatrix& b) {
  double s = 0.0;
  auto x = a.values();
  auto y = b.values();
  for (Index i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

DenseMatrix scalar_matrix(double v) { return DenseMatrix(1, 1, v); }

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "Constant";
    case OpKind::Param: return "Param";
    case OpKind::MatMul: return "MatMul";
    case OpKind::SpMMConst: return "SpMMConst";
    case OpKind::Add: return "Add";
    case OpKind::Sub: return "Sub";
    case OpKind::ReLU: return "ReLU";
    case OpKind::Sigmoid: return "Sigmoid";
    case OpKind::SoftmaxRows: return "SoftmaxRows";
    case OpKind::GroupNorm: return "GroupNorm";
    case OpKind::L2NormalizeRows: return "L2NormalizeRows";
    case OpKind::Dropout: return "Dropout";
    case OpKind::ScalarMix: return "ScalarMix";
    case OpKind::Lerp: return "Lerp";
    case OpKind::Concat: return "Concat";
    case OpKind::GatherRows: return "GatherRows";
    case OpKind::SliceCols: return "SliceCols";
    case OpKind::Transpose: return "Transpose";
    case OpKind::Scale: return "Scale";
    case OpKind::Sum: return "Sum";
    case OpKind::MSE: return "MSE";
    case OpKind::RMSE: return "RMSE";
    case OpKind::CrossEntropyRows: return "CrossEntropyRows";
    case OpKind::L2Penalty: return "L2Penalty";
    case OpKind::MeanRowNorm: return "MeanRowNorm";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// ParamStore

ParamStore::Entry& ParamStore::add(const std::string& name, DenseMatrix init) {
  require(!contains(name), "parameter '" + name + "' already registered");
  require(init.all_finite(), "parameter '" + name + "' initialized with non-finite values");
  const Index r = init.rows(), c = init.cols();
  index_.emplace(name, entries_.size());
  names_.push_back(name);
  entries_.push_back(Entry{std::move(init), DenseMatrix(r, c), DenseMatrix(r, c), DenseMatrix(r, c)});
  return entries_.back();
}

bool ParamStore::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

ParamStore::Entry& ParamStore::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  require(it != index_.end(), "unknown parameter '" + std::string(name) + "'");
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  require(it != index_.end(), "unknown parameter '" + std::string(name) + "'");
  return entries_[it->second];
}

Index ParamStore::scalar_count() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// Tape: forward

Var Tape::push(Node n) {
  require(!consumed_, "tape already used for a backward pass; record on a fresh tape");
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  require(v.id < nodes_.size(), "invalid tape handle");
  return nodes_[v.id];
}

const DenseMatrix& Tape::value(Var v) const { return node(v).value; }

double Tape::scalar(Var v) const {
  const auto& m = value(v);
  require(m.rows() == 1 && m.cols() == 1, "value is not a scalar");
  return m(0, 0);
}

Var Tape::constant(DenseMatrix value) {
  Node n;
  n.kind = OpKind::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(ParamStore& store, const std::string& name) {
  Node n;
  n.kind = OpKind::Param;
  n.value = store.at(name).value;
  n.param_name = name;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b, bool transpose_b) {
  const auto& x = value(a);
  const auto& y = value(b);
  if (x.cols() != (transpose_b ? y.cols() : y.rows())) shape_error(OpKind::MatMul, x, y);
  Node n;
  n.kind = OpKind::MatMul;
  n.inputs = {a.id, b.id};
  n.flag = transpose_b;
  n.value = cellgraph::matmul(x, y, false, transpose_b);
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(n));
}

Var Tape::spmm(SparseOperatorPtr a, Var x) {
  const auto& v = value(x);
  require(a != nullptr, "SpMMConst: null sparse operand");
  if (a->matrix.cols() != v.rows())
    fail("SpMMConst: shape mismatch " + std::to_string(a->matrix.rows()) + "x" + std::to_string(a->matrix.cols()) +
         " vs " + shape_of(v));
  Node n;
  n.kind = OpKind::SpMMConst;
  n.inputs = {x.id};
  n.value = cellgraph::spmm(a->matrix, v);
  n.sparse = std::move(a);
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  const auto& x = value(a);
  const auto& y = value(b);
  const bool broadcast = y.rows() == 1 && x.rows() != 1;
  if (x.cols() != y.cols() || (!broadcast && x.rows() != y.rows())) shape_error(OpKind::Add, x, y);
  Node n;
  n.kind = OpKind::Add;
  n.inputs = {a.id, b.id};
  n.flag = broadcast;
  n.value = x;
  for (Index r = 0; r < x.rows(); ++r) {
    auto dst = n.value.row(r);
    auto src = y.row(broadcast ? 0 : r);
    for (Index c = 0; c < x.cols(); ++c) dst[c] += src[c];
  }
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  const auto& x = value(a);
  const auto& y = value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) shape_error(OpKind::Sub, x, y);
  Node n;
  n.kind = OpKind::Sub;
  n.inputs = {a.id, b.id};
  n.value = x;
  add_into(n.value, y, -1.0);
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(n));
}

Var Tape::relu(Var x) {
  Node n;
  n.kind = OpKind::ReLU;
  n.inputs = {x.id};
  n.value = value(x);
  for (double& v : n.value.values()) v = v > 0.0 ? v : 0.0;
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::sigmoid(Var x) {
  Node n;
  n.kind = OpKind::Sigmoid;
  n.inputs = {x.id};
  n.value = value(x);
  for (double& v : n.value.values()) v = 1.0 / (1.0 + std::exp(-v));
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::softmax_rows(Var x) {
  Node n;
  n.kind = OpKind::SoftmaxRows;
  n.inputs = {x.id};
  n.value = value(x);
  for (Index r = 0; r < n.value.rows(); ++r) {
    auto row = n.value.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) z += (v = std::exp(v - mx));
    for (double& v : row) v /= z;
  }
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::group_norm(Var x, Var gamma, Var beta, Index groups, double eps) {
  const auto& in = value(x);
  const auto& g = value(gamma);
  const auto& b = value(beta);
  if (g.rows() != 1 || g.cols() != in.cols()) shape_error(OpKind::GroupNorm, in, g);
  if (b.rows() != 1 || b.cols() != in.cols()) shape_error(OpKind::GroupNorm, in, b);
  require(groups >= 1 && in.cols() % groups == 0,
          "GroupNorm: " + std::to_string(in.cols()) + " columns not divisible into " + std::to_string(groups) +
              " groups");
  const Index width = in.cols() / groups;
  Node n;
  n.kind = OpKind::GroupNorm;
  n.inputs = {x.id, gamma.id, beta.id};
  n.lo = groups;
  n.scalar = eps;
  n.saved = DenseMatrix(in.rows(), in.cols());
  n.saved_vec.assign(in.rows() * groups, 0.0);
  n.value = DenseMatrix(in.rows(), in.cols());
  for (Index r = 0; r < in.rows(); ++r) {
    for (Index gi = 0; gi < groups; ++gi) {
      const Index c0 = gi * width;
      double mean = 0.0;
      for (Index c = c0; c < c0 + width; ++c) mean += in(r, c);
      mean /= static_cast<double>(width);
      double var = 0.0;
      for (Index c = c0; c < c0 + width; ++c) var += (in(r, c) - mean) * (in(r, c) - mean);
      var /= static_cast<double>(width);
      const double inv = 1.0 / std::sqrt(var + eps);
      n.saved_vec[r * groups + gi] = inv;
      for (Index c = c0; c < c0 + width; ++c) {
        const double xh = (in(r, c) - mean) * inv;
        n.saved(r, c) = xh;
        n.value(r, c) = xh * g(0, c) + b(0, c);
      }
    }
  }
  n.requires_grad = node(x).requires_grad || node(gamma).requires_grad || node(beta).requires_grad;
  return push(std::move(n));
}

Var Tape::l2_normalize_rows(Var x) {
  const auto& in = value(x);
  Node n;
  n.kind = OpKind::L2NormalizeRows;
  n.inputs = {x.id};
  n.value = in;
  n.saved_vec.assign(in.rows(), 0.0);
  for (Index r = 0; r < in.rows(); ++r) {
    auto row = n.value.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double norm = std::sqrt(ss);
    n.saved_vec[r] = norm;
    if (norm > 0.0)
      for (double& v : row) v /= norm;
  }
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::dropout(Var x, double rate, std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0, "Dropout: rate must lie in [0,1)");
  const auto& in = value(x);
  Node n;
  n.kind = OpKind::Dropout;
  n.inputs = {x.id};
  n.scalar = rate;
  n.flag = training_ && rate > 0.0;
  n.value = in;
  if (n.flag) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    n.saved = DenseMatrix(in.rows(), in.cols());
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = n.saved.values();
    auto out = n.value.values();
    for (Index i = 0; i < mask.size(); ++i) {
      mask[i] = uni(rng) < rate ? 0.0 : keep_scale;
      out[i] *= mask[i];
    }
  }
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::scalar_mix(Var weights, const std::vector<Var>& inputs) {
  const auto& w = value(weights);
  require(!inputs.empty(), "ScalarMix: no inputs");
  require(w.rows() == 1 && w.cols() == inputs.size(),
          "ScalarMix: weights " + shape_of(w) + " for " + std::to_string(inputs.size()) + " inputs");
  const auto& first = value(inputs.front());
  Node n;
  n.kind = OpKind::ScalarMix;
  n.inputs = {weights.id};
  n.value = DenseMatrix(first.rows(), first.cols());
  n.requires_grad = node(weights).requires_grad;
  for (Index i = 0; i < inputs.size(); ++i) {
    const auto& m = value(inputs[i]);
    if (m.rows() != first.rows() || m.cols() != first.cols()) shape_error(OpKind::ScalarMix, first, m);
    add_into(n.value, m, w(0, i));
    n.inputs.push_back(inputs[i].id);
    n.requires_grad = n.requires_grad || node(inputs[i]).requires_grad;
  }
  return push(std::move(n));
}

Var Tape::lerp(Var alpha, Var a, Var b) {
  const auto& al = value(alpha);
  const auto& x = value(a);
  const auto& y = value(b);
  require(al.rows() == 1 && al.cols() == 1, "Lerp: alpha must be 1x1, got " + shape_of(al));
  if (x.rows() != y.rows() || x.cols() != y.cols()) shape_error(OpKind::Lerp, x, y);
  const double t = al(0, 0);
  Node n;
  n.kind = OpKind::Lerp;
  n.inputs = {alpha.id, a.id, b.id};
  n.value = DenseMatrix(x.rows(), x.cols());
  add_into(n.value, x, t);
  add_into(n.value, y, 1.0 - t);
  n.requires_grad = node(alpha).requires_grad || node(a).requires_grad || node(b).requires_grad;
  return push(std::move(n));
}

Var Tape::concat(const std::vector<Var>& inputs) {
  require(!inputs.empty(), "Concat: no inputs");
  const Index rows = value(inputs.front()).rows();
  Index cols = 0;
  Node n;
  n.kind = OpKind::Concat;
  for (Var v : inputs) {
    const auto& m = value(v);
    if (m.rows() != rows) shape_error(OpKind::Concat, value(inputs.front()), m);
    cols += m.cols();
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || node(v).requires_grad;
  }
  n.value = DenseMatrix(rows, cols);
  Index offset = 0;
  for (Var v : inputs) {
    const auto& m = value(v);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < m.cols(); ++c) n.value(r, offset + c) = m(r, c);
    offset += m.cols();
  }
  return push(std::move(n));
}

Var Tape::gather_rows(Var x, std::vector<Index> rows) {
  const auto& in = value(x);
  Node n;
  n.kind = OpKind::GatherRows;
  n.inputs = {x.id};
  n.value = DenseMatrix(rows.size(), in.cols());
  for (Index i = 0; i < rows.size(); ++i) {
    require(rows[i] < in.rows(), "GatherRows: row " + std::to_string(rows[i]) + " outside " + shape_of(in));
    std::copy(in.row(rows[i]).begin(), in.row(rows[i]).end(), n.value.row(i).begin());
  }
  n.indices = std::move(rows);
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::slice_cols(Var x, Index begin, Index end) {
  const auto& in = value(x);
  require(begin <= end && end <= in.cols(), "SliceCols: range outside " + shape_of(in));
  Node n;
  n.kind = OpKind::SliceCols;
  n.inputs = {x.id};
  n.lo = begin;
  n.hi = end;
  n.value = DenseMatrix(in.rows(), end - begin);
  for (Index r = 0; r < in.rows(); ++r)
    for (Index c = begin; c < end; ++c) n.value(r, c - begin) = in(r, c);
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::transpose(Var x) {
  Node n;
  n.kind = OpKind::Transpose;
  n.inputs = {x.id};
  n.value = cellgraph::transpose(value(x));
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::scale(Var x, double factor) {
  Node n;
  n.kind = OpKind::Scale;
  n.inputs = {x.id};
  n.scalar = factor;
  n.value = value(x);
  for (double& v : n.value.values()) v *= factor;
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::sum(Var x) {
  double s = 0.0;
  for (double v : value(x).values()) s += v;
  Node n;
  n.kind = OpKind::Sum;
  n.inputs = {x.id};
  n.value = scalar_matrix(s);
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::mse(Var pred, Var target) {
  const auto& p = value(pred);
  const auto& t = value(target);
  if (p.rows() != t.rows() || p.cols() != t.cols()) shape_error(OpKind::MSE, p, t);
  require(p.size() > 0, "MSE: empty input");
  double s = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const double d = p.values()[i] - t.values()[i];
    s += d * d;
  }
  Node n;
  n.kind = OpKind::MSE;
  n.inputs = {pred.id, target.id};
  n.value = scalar_matrix(s / static_cast<double>(p.size()));
  n.requires_grad = node(pred).requires_grad || node(target).requires_grad;
  return push(std::move(n));
}

Var Tape::rmse(Var pred, Var target) {
  const auto& p = value(pred);
  const auto& t = value(target);
  if (p.rows() != t.rows() || p.cols() != t.cols()) shape_error(OpKind::RMSE, p, t);
  require(p.size() > 0, "RMSE: empty input");
  double s = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const double d = p.values()[i] - t.values()[i];
    s += d * d;
  }
  Node n;
  n.kind = OpKind::RMSE;
  n.inputs = {pred.id, target.id};
  n.value = scalar_matrix(std::sqrt(s / static_cast<double>(p.size())));
  n.requires_grad = node(pred).requires_grad || node(target).requires_grad;
  return push(std::move(n));
}

Var Tape::cross_entropy_rows(Var logits, std::vector<std::int64_t> labels, bool mean) {
  const auto& z = value(logits);
  require(labels.size() == z.rows(), "CrossEntropyRows: " + std::to_string(labels.size()) + " labels for " +
                                         shape_of(z) + " logits");
  Node n;
  n.kind = OpKind::CrossEntropyRows;
  n.inputs = {logits.id};
  n.flag = mean;
  n.saved = DenseMatrix(z.rows(), z.cols());  // row softmax
  double total = 0.0;
  Index count = 0;
  for (Index r = 0; r < z.rows(); ++r) {
    const auto row = z.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double zsum = 0.0;
    for (double v : row) zsum += std::exp(v - mx);
    const double log_z = mx + std::log(zsum);
    for (Index c = 0; c < z.cols(); ++c) n.saved(r, c) = std::exp(row[c] - log_z);
    if (labels[r] == kUnlabeled) continue;
    require(labels[r] >= 0 && static_cast<Index>(labels[r]) < z.cols(),
            "CrossEntropyRows: label " + std::to_string(labels[r]) + " out of range for " +
                std::to_string(z.cols()) + " classes");
    total += log_z - row[static_cast<Index>(labels[r])];
    ++count;
  }
  n.scalar = mean && count > 0 ? 1.0 / static_cast<double>(count) : 1.0;
  n.value = scalar_matrix(count == 0 ? 0.0 : total * n.scalar);
  n.labels = std::move(labels);
  n.requires_grad = node(logits).requires_grad;
  return push(std::move(n));
}

Var Tape::l2_penalty(Var x) {
  double s = 0.0;
  for (double v : value(x).values()) s += v * v;
  Node n;
  n.kind = OpKind::L2Penalty;
  n.inputs = {x.id};
  n.value = scalar_matrix(s);
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

Var Tape::mean_row_norm(Var x) {
  const auto& in = value(x);
  Node n;
  n.kind = OpKind::MeanRowNorm;
  n.inputs = {x.id};
  n.saved_vec.assign(in.rows(), 0.0);
  double total = 0.0;
  for (Index r = 0; r < in.rows(); ++r) {
    double ss = 0.0;
    for (double v : in.row(r)) ss += v * v;
    n.saved_vec[r] = std::sqrt(ss);
    total += n.saved_vec[r];
  }
  n.value = scalar_matrix(in.rows() == 0 ? 0.0 : total / static_cast<double>(in.rows()));
  n.requires_grad = node(x).requires_grad;
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape: backward

DenseMatrix& Tape::grad_of(Index target) {
  auto& n = nodes_[target];
  if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols() || n.grad.empty())
    n.grad = DenseMatrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(Index target, const DenseMatrix& g) {
  if (!nodes_[target].requires_grad) return;
  add_into(grad_of(target), g);
}

void Tape::backward(Var loss, ParamStore& store) {
  require(!consumed_, "tape already used for a backward pass");
  const auto& lv = value(loss);
  require(lv.rows() == 1 && lv.cols() == 1, "backward: loss must be scalar, got " + shape_of(lv));
  consumed_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = scalar_matrix(1.0);
  for (Index id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.kind == OpKind::Param) {
      auto& entry = store.at(n.param_name);
      if (entry.grad.rows() != n.grad.rows() || entry.grad.cols() != n.grad.cols())
        fail("parameter '" + n.param_name + "' changed shape during recording");
      add_into(entry.grad, n.grad);
    } else if (n.kind != OpKind::Constant) {
      backprop_node(id);
    }
    n.grad = DenseMatrix();
  }
}

void Tape::backprop_node(Index id) {
  // Inputs precede the node, so accumulate() never touches n.grad.
  const Node& n = nodes_[id];
  const DenseMatrix& g = n.grad;
  auto in_value = [&](Index k) -> const DenseMatrix& { return nodes_[n.inputs[k]].value; };
  auto needs = [&](Index k) { return nodes_[n.inputs[k]].requires_grad; };

  switch (n.kind) {
    case OpKind::Constant:
    case OpKind::Param:
      return;
    case OpKind::MatMul: {
      const auto& a = in_value(0);
      const auto& b = in_value(1);
      if (needs(0)) accumulate(n.inputs[0], cellgraph::matmul(g, b, false, !n.flag));
      if (needs(1)) {
        if (n.flag) accumulate(n.inputs[1], cellgraph::matmul(g, a, true, false));
        else accumulate(n.inputs[1], cellgraph::matmul(a, g, true, false));
      }
      return;
    }
    case OpKind::SpMMConst:
      accumulate(n.inputs[0], cellgraph::spmm(n.sparse->transposed, g));
      return;
    case OpKind::Add: {
      accumulate(n.inputs[0], g);
      if (!needs(1)) return;
      if (!n.flag) {
        accumulate(n.inputs[1], g);
      } else {
        DenseMatrix colsum(1, g.cols());
        for (Index r = 0; r < g.rows(); ++r)
          for (Index c = 0; c < g.cols(); ++c) colsum(0, c) += g(r, c);
        accumulate(n.inputs[1], colsum);
      }
      return;
    }
    case OpKind::Sub: {
      accumulate(n.inputs[0], g);
      if (needs(1)) {
        DenseMatrix neg = g;
        for (double& v : neg.values()) v = -v;
        accumulate(n.inputs[1], neg);
      }
      return;
    }
    case OpKind::ReLU: {
      DenseMatrix d = g;
      const auto x = in_value(0).values();
      auto dv = d.values();
      for (Index i = 0; i < dv.size(); ++i)
        if (!(x[i] > 0.0)) dv[i] = 0.0;
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::Sigmoid: {
      DenseMatrix d = g;
      const auto y = n.value.values();
      auto dv = d.values();
      for (Index i = 0; i < dv.size(); ++i) dv[i] *= y[i] * (1.0 - y[i]);
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::SoftmaxRows: {
      DenseMatrix d(g.rows(), g.cols());
      for (Index r = 0; r < g.rows(); ++r) {
        double inner = 0.0;
        for (Index c = 0; c < g.cols(); ++c) inner += g(r, c) * n.value(r, c);
        for (Index c = 0; c < g.cols(); ++c) d(r, c) = n.value(r, c) * (g(r, c) - inner);
      }
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::GroupNorm: {
      const auto& gamma = in_value(1);
      const Index groups = n.lo;
      const Index width = g.cols() / groups;
      if (needs(1) || needs(2)) {
        DenseMatrix dgamma(1, g.cols()), dbeta(1, g.cols());
        for (Index r = 0; r < g.rows(); ++r)
          for (Index c = 0; c < g.cols(); ++c) {
            dgamma(0, c) += g(r, c) * n.saved(r, c);
            dbeta(0, c) += g(r, c);
          }
        accumulate(n.inputs[1], dgamma);
        accumulate(n.inputs[2], dbeta);
      }
      if (needs(0)) {
        DenseMatrix dx(g.rows(), g.cols());
        const double w = static_cast<double>(width);
        for (Index r = 0; r < g.rows(); ++r) {
          for (Index gi = 0; gi < groups; ++gi) {
            const Index c0 = gi * width;
            const double inv = n.saved_vec[r * groups + gi];
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (Index c = c0; c < c0 + width; ++c) {
              const double dxh = g(r, c) * gamma(0, c);
              mean_dxh += dxh;
              mean_dxh_xh += dxh * n.saved(r, c);
            }
            mean_dxh /= w;
            mean_dxh_xh /= w;
            for (Index c = c0; c < c0 + width; ++c) {
              const double dxh = g(r, c) * gamma(0, c);
              dx(r, c) = inv * (dxh - mean_dxh - n.saved(r, c) * mean_dxh_xh);
            }
          }
        }
        accumulate(n.inputs[0], dx);
      }
      return;
    }
    case OpKind::L2NormalizeRows: {
      DenseMatrix dx(g.rows(), g.cols());
      for (Index r = 0; r < g.rows(); ++r) {
        const double norm = n.saved_vec[r];
        if (!(norm > 0.0)) continue;
        double inner = 0.0;
        for (Index c = 0; c < g.cols(); ++c) inner += g(r, c) * n.value(r, c);
        for (Index c = 0; c < g.cols(); ++c) dx(r, c) = (g(r, c) - n.value(r, c) * inner) / norm;
      }
      accumulate(n.inputs[0], dx);
      return;
    }
    case OpKind::Dropout: {
      if (!n.flag) {
        accumulate(n.inputs[0], g);
        return;
      }
      DenseMatrix d = g;
      auto dv = d.values();
      const auto mask = n.saved.values();
      for (Index i = 0; i < dv.size(); ++i) dv[i] *= mask[i];
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::ScalarMix: {
      const auto& w = in_value(0);
      if (needs(0)) {
        DenseMatrix dw(1, w.cols());
        for (Index i = 0; i < w.cols(); ++i) dw(0, i) = frobenius_dot(g, in_value(i + 1));
        accumulate(n.inputs[0], dw);
      }
      for (Index i = 0; i < w.cols(); ++i) {
        if (!needs(i + 1)) continue;
        DenseMatrix d = g;
        for (double& v : d.values()) v *= w(0, i);
        accumulate(n.inputs[i + 1], d);
      }
      return;
    }
    case OpKind::Lerp: {
      const double t = in_value(0)(0, 0);
      if (needs(0)) {
        double s = 0.0;
        const auto a = in_value(1).values();
        const auto b = in_value(2).values();
        const auto gv = g.values();
        for (Index i = 0; i < gv.size(); ++i) s += gv[i] * (a[i] - b[i]);
        accumulate(n.inputs[0], scalar_matrix(s));
      }
      if (needs(1)) {
        DenseMatrix d = g;
        for (double& v : d.values()) v *= t;
        accumulate(n.inputs[1], d);
      }
      if (needs(2)) {
        DenseMatrix d = g;
        for (double& v : d.values()) v *= 1.0 - t;
        accumulate(n.inputs[2], d);
      }
      return;
    }
    case OpKind::Concat: {
      Index offset = 0;
      for (Index k = 0; k < n.inputs.size(); ++k) {
        const Index w = in_value(k).cols();
        if (needs(k)) {
          DenseMatrix d(g.rows(), w);
          for (Index r = 0; r < g.rows(); ++r)
            for (Index c = 0; c < w; ++c) d(r, c) = g(r, offset + c);
          accumulate(n.inputs[k], d);
        }
        offset += w;
      }
      return;
    }
    case OpKind::GatherRows: {
      const auto& x = in_value(0);
      DenseMatrix d(x.rows(), x.cols());
      for (Index i = 0; i < n.indices.size(); ++i) {
        auto dst = d.row(n.indices[i]);
        auto src = g.row(i);
        for (Index c = 0; c < x.cols(); ++c) dst[c] += src[c];
      }
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::SliceCols: {
      const auto& x = in_value(0);
      DenseMatrix d(x.rows(), x.cols());
      for (Index r = 0; r < x.rows(); ++r)
        for (Index c = n.lo; c < n.hi; ++c) d(r, c) = g(r, c - n.lo);
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::Transpose:
      accumulate(n.inputs[0], cellgraph::transpose(g));
      return;
    case OpKind::Scale: {
      DenseMatrix d = g;
      for (double& v : d.values()) v *= n.scalar;
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::Sum: {
      const auto& x = in_value(0);
      accumulate(n.inputs[0], DenseMatrix(x.rows(), x.cols(), g(0, 0)));
      return;
    }
    case OpKind::MSE:
    case OpKind::RMSE: {
      const auto& p = in_value(0);
      const auto& t = in_value(1);
      const double count = static_cast<double>(p.size());
      double factor;
      if (n.kind == OpKind::MSE) {
        factor = 2.0 * g(0, 0) / count;
      } else {
        const double r = n.value(0, 0);
        factor = r > 0.0 ? g(0, 0) / (count * r) : 0.0;
      }
      DenseMatrix d(p.rows(), p.cols());
      auto dv = d.values();
      for (Index i = 0; i < dv.size(); ++i) dv[i] = factor * (p.values()[i] - t.values()[i]);
      accumulate(n.inputs[0], d);
      if (needs(1)) {
        for (double& v : dv) v = -v;
        accumulate(n.inputs[1], d);
      }
      return;
    }
    case OpKind::CrossEntropyRows: {
      const double factor = g(0, 0) * n.scalar;
      DenseMatrix d(n.saved.rows(), n.saved.cols());
      for (Index r = 0; r < d.rows(); ++r) {
        if (n.labels[r] == kUnlabeled) continue;
        for (Index c = 0; c < d.cols(); ++c) d(r, c) = factor * n.saved(r, c);
        d(r, static_cast<Index>(n.labels[r])) -= factor;
      }
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::L2Penalty: {
      DenseMatrix d = in_value(0);
      for (double& v : d.values()) v *= 2.0 * g(0, 0);
      accumulate(n.inputs[0], d);
      return;
    }
    case OpKind::MeanRowNorm: {
      const auto& x = in_value(0);
      DenseMatrix d(x.rows(), x.cols());
      const double factor = x.rows() == 0 ? 0.0 : g(0, 0) / static_cast<double>(x.rows());
      for (Index r = 0; r < x.rows(); ++r) {
        const double norm = n.saved_vec[r];
        if (!(norm > 0.0)) continue;
        for (Index c = 0; c < x.cols(); ++c) d(r, c) = factor * x(r, c) / norm;
      }
      accumulate(n.inputs[0], d);
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

void adam_step(ParamStore& store, const AdamOptions& opt) {
  for (const auto& name : store.names()) {
    if (!store.at(name).grad.all_finite())
      fail(ErrorKind::Runtime, "adam_step: non-finite gradient in parameter '" + name + "'");
  }
  const std::uint64_t t = store.step + 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (const auto& name : store.names()) {
    auto& e = store.at(name);
    auto w = e.value.values();
    auto g = e.grad.values();
    auto m = e.adam_m.values();
    auto v = e.adam_v.values();
    for (Index i = 0; i < w.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= opt.lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * w[i]);
      g[i] = 0.0;
    }
  }
  store.step = t;
}

double lr_decay(double initial_lr, std::uint64_t step, double decay_rate, std::uint64_t decay_every) {
  require(decay_every >= 1, "lr_decay: decay_every must be at least 1");
  return initial_lr * std::pow(decay_rate, static_cast<double>(step / decay_every));
}

DenseMatrix glorot_uniform(Index fan_in, Index fan_out, std::uint64_t seed) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-bound, bound);
  DenseMatrix w(fan_in, fan_out);
  for (double& v : w.values()) v = uni(rng);
  return w;
}

}  // namespace cellgraph
