#include "cellgraph/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>

#include "cellgraph/error.hpp"
#include "cellgraph/metrics.hpp"
#include "cellgraph/seed.hpp"

namespace cellgraph {

namespace {

DenseMatrix gather(const DenseMatrix& m, std::span<const Index> rows) {
  DenseMatrix out(rows.size(), m.cols());
  for (Index r = 0; r < rows.size(); ++r) std::copy_n(m.row(rows[r]).begin(), m.cols(), out.row(r).begin());
  return out;
}

std::vector<Index> all_rows(Index n) {
  std::vector<Index> rows(n);
  std::iota(rows.begin(), rows.end(), Index{0});
  return rows;
}

AdamOptions adam_for(const TrainProtocol& p, Index epoch) {
  AdamOptions opt;
  opt.lr = lr_decay(p.lr, epoch - 1, p.lr_decay_rate, p.lr_decay_every);
  opt.weight_decay = p.weight_decay;
  return opt;
}

void check_finite_loss(double loss, Index epoch) {
  if (!std::isfinite(loss)) fail(ErrorKind::Runtime, "non-finite training loss at epoch " + std::to_string(epoch));
}

Index clamp_rank(Index rank, Index rows, Index cols) { return std::max<Index>(1, std::min({rank, rows, cols})); }

// x followed by its propagated copies.
std::vector<DenseMatrix> propagation_inputs(const DenseMatrix& x, const ConvConfig& cfg) {
  const CellFeatureGraph g = build_bipartite(SparseMatrix::from_dense(x), edge_normalization_for(cfg.aggregation));
  std::vector<DenseMatrix> steps{x};
  for (auto& p : decoupled_propagate(g, x, cfg.n_layers)) steps.push_back(std::move(p));
  return steps;
}

DenseMatrix lsi(const SparseMatrix& m, Index rank, std::uint64_t seed) {
  return truncated_svd(tfidf(m), clamp_rank(rank, m.rows(), m.cols()), seed).embedding();
}

// Centres columns and divides everything by one global standard deviation, so the
// relative weight of the leading components survives.
DenseMatrix standardize_columns(const DenseMatrix& m) {
  DenseMatrix out = m;
  double ss = 0.0;
  for (Index c = 0; c < m.cols(); ++c) {
    double mean = 0.0;
    for (Index r = 0; r < m.rows(); ++r) mean += m(r, c);
    mean /= static_cast<double>(m.rows());
    for (Index r = 0; r < m.rows(); ++r) {
      out(r, c) -= mean;
      ss += out(r, c) * out(r, c);
    }
  }
  const double sd = std::sqrt(ss / static_cast<double>(std::max<Index>(1, m.size())));
  if (sd > 0.0)
    for (double& v : out.values()) v /= sd;
  return out;
}

}  // namespace

void TrainProtocol::validate() const {
  require(split_fraction > 0.0 && split_fraction < 1.0, "protocol: split_fraction must lie in (0,1)");
  require(patience >= 1, "protocol: patience must be at least 1");
  require(max_epochs >= 1, "protocol: max_epochs must be at least 1");
  require(lr > 0.0, "protocol: lr must be positive");
  require(lr_decay_rate > 0.0 && lr_decay_rate <= 1.0, "protocol: lr_decay_rate must lie in (0,1]");
  require(lr_decay_every >= 1, "protocol: lr_decay_every must be at least 1");
  require(weight_decay >= 0.0, "protocol: weight_decay must be non-negative");
}

void write_epoch_log(std::ostream& out, std::span<const EpochRecord> history) {
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "epoch=%zu train_loss=%.6f val_metric=%.6f lr=%.6g\n", r.epoch, r.train_loss,
                  r.val_metric, r.lr);
    out << buf;
  }
}

TrainSplit split_rows(std::span<const Index> rows, double fraction, std::uint64_t seed) {
  require(rows.size() >= 2, "split: need at least two rows");
  require(fraction > 0.0 && fraction < 1.0, "split: fraction must lie in (0,1)");
  std::vector<Index> order(rows.begin(), rows.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<Index>(std::llround(fraction * static_cast<double>(rows.size())));
  n_train = std::clamp<Index>(n_train, 1, rows.size() - 1);
  TrainSplit s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  return s;
}

EarlyStopping::EarlyStopping(Index patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  require(patience >= 1, "early stopping: patience must be at least 1");
}

bool EarlyStopping::update(Index epoch, double metric) {
  if (metric < best_) {
    best_ = metric;
    best_epoch_ = epoch;
    return true;
  }
  return false;
}

double rmse_loss(const DenseMatrix& pred, const DenseMatrix& target) { return rmse(pred, target); }

// ---------------------------------------------------------------------------
// Prediction

namespace {

CellFeatureGraph restrict_cells(const CellFeatureGraph& g, std::span<const Index> keep_rows) {
  std::vector<char> keep(g.n_cells, 0);
  for (const Index r : keep_rows) keep[r] = 1;
  std::vector<SparseMatrix::Triplet> t;
  for (Index r = 0; r < g.n_cells; ++r) {
    if (!keep[r]) continue;
    const auto cols = g.cell_feature.row_cols(r);
    const auto vals = g.cell_feature.row_values(r);
    for (Index e = 0; e < cols.size(); ++e) t.push_back({r, cols[e], vals[e]});
  }
  CellFeatureGraph out = g;
  out.cell_feature = SparseMatrix::from_triplets(g.n_cells, g.n_features, std::move(t));
  return out;
}

DenseMatrix predict_all(const GraphConvNet& net, ParamStore& store) {
  Tape tape(false);
  const Var h = net.forward(tape, store, 0);
  return tape.value(linear(tape, store, "head", h));
}

}  // namespace

PredictionResult train_prediction(const CellFeatureGraph& g, const DenseMatrix& target, const ConvConfig& cfg,
                                  const TrainProtocol& protocol, std::span<const Index> labeled_rows) {
  protocol.validate();
  cfg.validate();
  require(!cfg.decoupled, "prediction uses the coupled network");
  require(target.rows() == g.n_cells, "prediction: target rows must equal the cell count");
  require(target.cols() >= 1, "prediction: target has no columns");
  const std::vector<Index> rows =
      labeled_rows.empty() ? all_rows(g.n_cells) : std::vector<Index>(labeled_rows.begin(), labeled_rows.end());

  PredictionResult res;
  res.split = split_rows(rows, protocol.split_fraction, mix_seed(protocol.seed, 1));
  const NodeEmbeddings inputs =
      init_embeddings(g, default_feature_init(g.n_features), cfg.hidden_dim, mix_seed(protocol.seed, 2));

  ParamStore store;
  const GraphConvNet eval_net("gnn.", cfg, g, inputs, store, mix_seed(protocol.seed, 3));
  const GraphConvNet train_net = protocol.transductive
                                     ? eval_net
                                     : GraphConvNet("gnn.", cfg, restrict_cells(g, res.split.train), inputs, store,
                                                    mix_seed(protocol.seed, 3));
  register_linear(store, "head", cfg.hidden_dim, target.cols(), mix_seed(protocol.seed, 4));

  const DenseMatrix train_target = gather(target, res.split.train);
  const DenseMatrix val_target = gather(target, res.split.validation);
  EarlyStopping stop(protocol.patience);
  ParamStore best = store;
  for (Index epoch = 1; epoch <= protocol.max_epochs; ++epoch) {
    const AdamOptions opt = adam_for(protocol, epoch);
    Tape tape(true);
    const Var pred = linear(tape, store, "head", train_net.forward(tape, store, mix_seed(protocol.seed, 1000 + epoch)));
    const Var loss = tape.rmse(tape.gather_rows(pred, res.split.train), tape.constant(train_target));
    const double loss_value = tape.scalar(loss);
    check_finite_loss(loss_value, epoch);
    tape.backward(loss, store);
    adam_step(store, opt);

    const double val = rmse(gather(predict_all(eval_net, store), res.split.validation), val_target);
    res.history.push_back({epoch, loss_value, val, opt.lr});
    res.epochs_run = epoch;
    if (stop.update(epoch, val)) best = store;
    if (stop.should_stop(epoch)) break;
  }
  res.best_epoch = stop.best_epoch();
  res.validation_rmse = stop.best();
  res.params = std::move(best);
  res.prediction = predict_all(eval_net, res.params);
  return res;
}

DenseMatrix least_squares(const DenseMatrix& x, const DenseMatrix& y, double ridge) {
  require(x.rows() == y.rows(), "least_squares: row count mismatch");
  const Index n = x.rows(), p = x.cols() + 1;
  DenseMatrix a(n, p, 1.0);  // last column stays 1 for the intercept
  for (Index i = 0; i < n; ++i) std::copy_n(x.row(i).begin(), x.cols(), a.row(i).begin());
  DenseMatrix gram = matmul(a, a, true, false);
  DenseMatrix rhs = matmul(a, y, true, false);
  double scale = 0.0;
  for (Index i = 0; i < p; ++i) scale = std::max(scale, gram(i, i));
  for (Index i = 0; i < p; ++i) gram(i, i) += ridge * std::max(scale, 1.0);
  // Cholesky factor in place (lower triangle).
  for (Index j = 0; j < p; ++j) {
    double d = gram(j, j);
    for (Index k = 0; k < j; ++k) d -= gram(j, k) * gram(j, k);
    if (!(d > 0.0)) fail(ErrorKind::Runtime, "least_squares: normal equations are not positive definite");
    gram(j, j) = std::sqrt(d);
    for (Index i = j + 1; i < p; ++i) {
      double s = gram(i, j);
      for (Index k = 0; k < j; ++k) s -= gram(i, k) * gram(j, k);
      gram(i, j) = s / gram(j, j);
    }
  }
  for (Index c = 0; c < rhs.cols(); ++c) {
    for (Index i = 0; i < p; ++i) {
      double s = rhs(i, c);
      for (Index k = 0; k < i; ++k) s -= gram(i, k) * rhs(k, c);
      rhs(i, c) = s / gram(i, i);
    }
    for (Index i = p; i-- > 0;) {
      double s = rhs(i, c);
      for (Index k = i + 1; k < p; ++k) s -= gram(k, i) * rhs(k, c);
      rhs(i, c) = s / gram(i, i);
    }
  }
  return rhs;
}

DenseMatrix tsvd_regression_baseline(const SparseMatrix& source, const DenseMatrix& target,
                                     std::span<const Index> train_rows, Index rank, std::uint64_t seed) {
  require(source.rows() == target.rows(), "baseline: row count mismatch");
  const DenseMatrix z = truncated_svd(source, clamp_rank(rank, source.rows(), source.cols()), seed).embedding();
  const DenseMatrix coef = least_squares(gather(z, train_rows), gather(target, train_rows));
  DenseMatrix pred(z.rows(), target.cols());
  for (Index i = 0; i < z.rows(); ++i)
    for (Index c = 0; c < target.cols(); ++c) {
      double s = coef(z.cols(), c);
      for (Index k = 0; k < z.cols(); ++k) s += z(i, k) * coef(k, c);
      pred(i, c) = s;
    }
  return pred;
}

// ---------------------------------------------------------------------------
// Matching

namespace {

void require_bijection(std::span<const Index> truth, Index n_right) {
  std::vector<char> seen(n_right, 0);
  for (const Index j : truth) {
    require(j < n_right && !seen[j], "matching: truth pairing is not a bijection");
    seen[j] = 1;
  }
}

}  // namespace

Var match_loss(Tape& tape, Var h1, Var h2, std::span<const Index> truth, double temperature) {
  const Index n = tape.value(h1).rows();
  require(truth.size() == n && tape.value(h2).rows() == n, "match_loss: truth must pair every row");
  require(temperature > 0.0, "match_loss: temperature must be positive");
  require_bijection(truth, n);
  const Var a = tape.l2_normalize_rows(h1);
  const Var b = tape.l2_normalize_rows(tape.gather_rows(h2, {truth.begin(), truth.end()}));
  const Var s = tape.scale(tape.matmul(a, b, true), 1.0 / temperature);
  std::vector<std::int64_t> diag(n);
  std::iota(diag.begin(), diag.end(), std::int64_t{0});
  return tape.add(tape.cross_entropy_rows(s, diag, false), tape.cross_entropy_rows(tape.transpose(s), diag, false));
}

MatchLossParts matching_losses(Tape& tape, ParamStore& store, Var h1, Var h2, std::span<const Index> truth, Var x1,
                               Var x2, const AuxHeads& heads, double aux_weight, double temperature) {
  MatchLossParts parts;
  parts.match = match_loss(tape, h1, h2, truth, temperature);
  const std::vector<Index> perm(truth.begin(), truth.end());
  const Var h2p = tape.gather_rows(h2, perm);
  const Var x2p = tape.gather_rows(x2, perm);
  // (1/N) sum_i ||x_i - f(h_i)||^2, i.e. entrywise MSE times the feature count.
  const auto k1 = static_cast<double>(tape.value(x1).cols());
  const auto k2 = static_cast<double>(tape.value(x2).cols());
  auto err = [&](const Mlp& f, Var h, Var x, double k) { return tape.scale(tape.mse(f.forward(tape, store, h), x), k); };
  const Var cross = tape.add(err(heads.to_m2, h1, x2p, k2), err(heads.to_m1, h2p, x1, k1));
  const Var self = tape.add(err(heads.to_m1, h1, x1, k1), err(heads.to_m2, h2p, x2p, k2));
  parts.aux = tape.add(cross, self);
  parts.total = tape.add(parts.match, tape.scale(parts.aux, aux_weight));
  return parts;
}

std::pair<DenseMatrix, DenseMatrix> row_col_probabilities(const DenseMatrix& s) {
  const Index n = s.rows(), m = s.cols();
  DenseMatrix pr(n, m), pc(n, m);
  for (Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < m; ++j) mx = std::max(mx, s(i, j));
    double z = 0.0;
    for (Index j = 0; j < m; ++j) z += (pr(i, j) = std::exp(s(i, j) - mx));
    for (Index j = 0; j < m; ++j) pr(i, j) /= z;
  }
  for (Index j = 0; j < m; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) mx = std::max(mx, s(i, j));
    double z = 0.0;
    for (Index i = 0; i < n; ++i) z += (pc(i, j) = std::exp(s(i, j) - mx));
    for (Index i = 0; i < n; ++i) pc(i, j) /= z;
  }
  return {std::move(pr), std::move(pc)};
}

DenseMatrix cosine_scores(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.cols() == b.cols(), "cosine_scores: embedding widths differ");
  return matmul(l2_normalize_rows(a), l2_normalize_rows(b), false, true);
}

MatchOutput match_inference(const DenseMatrix& h1, const DenseMatrix& h2, std::span<const Label> batch1,
                            std::span<const Label> batch2, double percentile, double temperature) {
  require(batch1.size() == h1.rows() && batch2.size() == h2.rows(), "match_inference: batch labels misaligned");
  require(percentile >= 0.0 && percentile < 100.0, "match_inference: percentile must lie in [0,100)");
  require(temperature > 0.0, "match_inference: temperature must be positive");
  MatchOutput out;
  out.score = cosine_scores(h1, h2);
  const Index n1 = h1.rows(), n2 = h2.rows();
  out.row_prob = DenseMatrix(n1, n2);
  out.col_prob = DenseMatrix(n1, n2);

  std::map<Label, std::pair<std::vector<Index>, std::vector<Index>>> batches;
  for (Index i = 0; i < n1; ++i) batches[batch1[i]].first.push_back(i);
  for (Index j = 0; j < n2; ++j) batches[batch2[j]].second.push_back(j);

  std::vector<char> row_done(n1, 0), col_done(n2, 0);
  for (const auto& [label, sides] : batches) {
    const auto& [left, right] = sides;
    if (left.empty() || right.empty()) {
      out.unmatched_left.insert(out.unmatched_left.end(), left.begin(), left.end());
      out.unmatched_right.insert(out.unmatched_right.end(), right.begin(), right.end());
      continue;
    }
    DenseMatrix sub(left.size(), right.size());
    for (Index a = 0; a < left.size(); ++a)
      for (Index b = 0; b < right.size(); ++b) sub(a, b) = out.score(left[a], right[b]);
    DenseMatrix scaled = sub;
    for (double& v : scaled.values()) v /= temperature;
    const auto [pr, pc] = row_col_probabilities(scaled);
    for (Index a = 0; a < left.size(); ++a)
      for (Index b = 0; b < right.size(); ++b) {
        out.row_prob(left[a], right[b]) = pr(a, b);
        out.col_prob(left[a], right[b]) = pc(a, b);
      }
    for (const Index i : left) row_done[i] = 1;
    for (const Index j : right) col_done[j] = 1;

    const AssignmentResult ar = solve_assignment(percentile_filter(sub, percentile));
    std::vector<char> lm(left.size(), 0), rm(right.size(), 0);
    for (const auto& [a, b] : ar.pairs) {
      out.assignment.emplace_back(left[a], right[b]);
      lm[a] = rm[b] = 1;
    }
    for (Index a = 0; a < left.size(); ++a)
      if (!lm[a]) out.unmatched_left.push_back(left[a]);
    for (Index b = 0; b < right.size(); ++b)
      if (!rm[b]) out.unmatched_right.push_back(right[b]);
  }

  // Cells whose batch is absent on the other side fall back to a softmax over everything.
  if (std::find(row_done.begin(), row_done.end(), 0) != row_done.end() ||
      std::find(col_done.begin(), col_done.end(), 0) != col_done.end()) {
    DenseMatrix scaled = out.score;
    for (double& v : scaled.values()) v /= temperature;
    const auto [pr, pc] = row_col_probabilities(scaled);
    for (Index i = 0; i < n1; ++i)
      if (!row_done[i])
        for (Index j = 0; j < n2; ++j) out.row_prob(i, j) = pr(i, j);
    for (Index j = 0; j < n2; ++j)
      if (!col_done[j])
        for (Index i = 0; i < n1; ++i) out.col_prob(i, j) = pc(i, j);
  }
  std::sort(out.assignment.begin(), out.assignment.end());
  std::sort(out.unmatched_left.begin(), out.unmatched_left.end());
  std::sort(out.unmatched_right.begin(), out.unmatched_right.end());
  return out;
}

double competition_match_score(const DenseMatrix& prob, std::span<const Index> truth) {
  require(truth.size() == prob.rows(), "competition score: truth length must equal the row count");
  double s = 0.0;
  for (Index i = 0; i < truth.size(); ++i) {
    require(truth[i] < prob.cols(), "competition score: truth index out of range");
    s += prob(i, truth[i]);
  }
  return s;
}

MatchScores score_matching(const MatchOutput& out, std::span<const Index> truth) {
  require(truth.size() == out.row_prob.rows(), "score_matching: truth length must equal the row count");
  MatchScores s;
  for (Index i = 0; i < truth.size(); ++i)
    s.softmax_score += 0.5 * (out.row_prob(i, truth[i]) + out.col_prob(i, truth[i]));
  for (const auto& [i, j] : out.assignment)
    if (truth[i] == j) s.assignment_score += 1.0;
  s.accuracy = truth.empty() ? 0.0 : s.assignment_score / static_cast<double>(truth.size());
  return s;
}

MatchConfig::MatchConfig() {
  conv.n_layers = kMatchLayers;
  conv.decoupled = true;
}

void MatchConfig::validate() const {
  conv.validate();
  require(conv.decoupled, "match: the encoder runs in decoupled mode");
  require(lsi_rank >= 1, "match: lsi_rank must be positive");
  require(aux_weight >= 0.0, "match: aux_weight must be non-negative");
  require(percentile >= 0.0 && percentile < 100.0, "match: percentile must lie in [0,100)");
  require(temperature > 0.0, "match: temperature must be positive");
  require(batch_size >= 2, "match: batch_size must be at least 2");
}

MatchTrainResult train_matching(const SparseMatrix& m1, const SparseMatrix& m2, std::span<const Index> train_rows,
                                const MatchConfig& cfg, const TrainProtocol& protocol) {
  cfg.validate();
  protocol.validate();
  require(m1.rows() == m2.rows(), "match: modalities must list the same cells");
  const DenseMatrix x1 = standardize_columns(lsi(m1, cfg.lsi_rank, mix_seed(protocol.seed, 11)));
  const DenseMatrix x2 = standardize_columns(lsi(m2, cfg.lsi_rank, mix_seed(protocol.seed, 12)));
  const auto steps1 = propagation_inputs(x1, cfg.conv);
  const auto steps2 = propagation_inputs(x2, cfg.conv);

  ParamStore store;
  const DecoupledNet enc1("enc1.", cfg.conv, x1.cols(), store, mix_seed(protocol.seed, 13));
  const DecoupledNet enc2("enc2.", cfg.conv, x2.cols(), store, mix_seed(protocol.seed, 14));
  const Index d = cfg.conv.hidden_dim;
  AuxHeads heads;
  if (cfg.use_aux) {
    heads.to_m1 = Mlp("aux1.", d, d, x1.cols(), store, mix_seed(protocol.seed, 15));
    heads.to_m2 = Mlp("aux2.", d, d, x2.cols(), store, mix_seed(protocol.seed, 16));
  }

  const TrainSplit split = split_rows(train_rows, protocol.split_fraction, mix_seed(protocol.seed, 1));
  auto gather_steps = [](const std::vector<DenseMatrix>& steps, std::span<const Index> rows) {
    std::vector<DenseMatrix> out;
    for (const auto& s : steps) out.push_back(gather(s, rows));
    return out;
  };
  const auto val1 = gather_steps(steps1, split.validation);
  const auto val2 = gather_steps(steps2, split.validation);
  const std::vector<Index> val_truth = all_rows(split.validation.size());

  MatchTrainResult res;
  EarlyStopping stop(protocol.patience);
  ParamStore best = store;
  std::mt19937_64 order_rng(mix_seed(protocol.seed, 17));
  std::vector<Index> order = split.train;
  for (Index epoch = 1; epoch <= protocol.max_epochs; ++epoch) {
    const AdamOptions opt = adam_for(protocol, epoch);
    std::shuffle(order.begin(), order.end(), order_rng);
    // Mini-batches over the precomputed propagation inputs; a short tail joins the previous batch.
    const Index n_batches = std::max<Index>(1, order.size() / cfg.batch_size);
    double epoch_loss = 0.0;
    for (Index b = 0; b < n_batches; ++b) {
      const Index lo = b * order.size() / n_batches, hi = (b + 1) * order.size() / n_batches;
      const std::span<const Index> rows(order.data() + lo, hi - lo);
      const std::vector<Index> truth = all_rows(rows.size());
      const std::uint64_t seed = mix_seed(protocol.seed, 1000 + epoch * 7919 + b);
      Tape tape(true);
      const Var h1 = enc1.forward(tape, store, gather_steps(steps1, rows), mix_seed(seed, 1));
      const Var h2 = enc2.forward(tape, store, gather_steps(steps2, rows), mix_seed(seed, 2));
      Var loss;
      if (cfg.use_aux) {
        loss = matching_losses(tape, store, h1, h2, truth, tape.constant(gather(x1, rows)),
                               tape.constant(gather(x2, rows)), heads, cfg.aux_weight, cfg.temperature)
                   .total;
      } else {
        loss = match_loss(tape, h1, h2, truth, cfg.temperature);
      }
      const double loss_value = tape.scalar(loss);
      check_finite_loss(loss_value, epoch);
      epoch_loss += loss_value / static_cast<double>(rows.size());
      tape.backward(loss, store);
      adam_step(store, opt);
    }

    Tape ev(false);
    const Var v = match_loss(ev, enc1.forward(ev, store, val1, 0), enc2.forward(ev, store, val2, 0), val_truth,
                             cfg.temperature);
    const double val = ev.scalar(v) / static_cast<double>(split.validation.size());
    res.history.push_back({epoch, epoch_loss / static_cast<double>(n_batches), val, opt.lr});
    res.epochs_run = epoch;
    if (stop.update(epoch, val)) best = store;
    if (stop.should_stop(epoch)) break;
  }
  res.best_epoch = stop.best_epoch();
  res.params = std::move(best);
  Tape ev(false);
  res.h1 = ev.value(enc1.forward(ev, res.params, steps1, 0));
  res.h2 = ev.value(enc2.forward(ev, res.params, steps2, 0));
  return res;
}

// ---------------------------------------------------------------------------
// Joint embedding

JointLossParts joint_embedding_loss(Tape& tape, ParamStore& store, Var h, Index cell_type_dims, Var x_lsi,
                                    std::span<const Label> cell_types, const Mlp& decoder, double beta) {
  const DenseMatrix& hv = tape.value(h);
  require(cell_type_dims < hv.cols(), "joint embedding: cell-type dims must be fewer than the embedding width");
  require(cell_types.size() == hv.rows(), "joint embedding: one label per cell required");
  for (const Label l : cell_types)
    require(l == kUnlabeled || (l >= 0 && static_cast<Index>(l) < cell_type_dims),
            "joint embedding: label index exceeds the cell-type dims");
  JointLossParts parts;
  // (1/N) sum_i ||x_i - f(h_i)||^2
  parts.recon = tape.scale(tape.mse(decoder.forward(tape, store, h), x_lsi),
                           static_cast<double>(tape.value(x_lsi).cols()));
  const bool any_label = std::any_of(cell_types.begin(), cell_types.end(), [](Label l) { return l != kUnlabeled; });
  if (cell_type_dims > 0 && any_label) {
    parts.celltype = tape.cross_entropy_rows(tape.slice_cols(h, 0, cell_type_dims),
                                             {cell_types.begin(), cell_types.end()}, false);
  } else {
    parts.celltype = tape.constant(DenseMatrix(1, 1));
  }
  parts.regular = tape.scale(tape.mean_row_norm(tape.slice_cols(h, cell_type_dims, hv.cols())), beta);
  parts.total = tape.add(tape.add(parts.recon, parts.celltype), parts.regular);
  return parts;
}

EmbedConfig::EmbedConfig() {
  conv.n_layers = kEmbedLayers;
  conv.decoupled = true;
}

void EmbedConfig::validate() const {
  conv.validate();
  require(conv.decoupled, "embed: the encoder runs in decoupled mode");
  require(lsi_rank >= 1, "embed: lsi_rank must be positive");
  require(beta >= 0.0, "embed: beta must be non-negative");
}

DenseMatrix lsi_features(const SparseMatrix& m1, const SparseMatrix& m2, Index rank, std::uint64_t seed) {
  require(m1.rows() == m2.rows(), "lsi_features: modalities must list the same cells");
  const DenseMatrix a = lsi(m1, rank, mix_seed(seed, 1));
  const DenseMatrix b = lsi(m2, rank, mix_seed(seed, 2));
  DenseMatrix out(a.rows(), a.cols() + b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    std::copy_n(a.row(i).begin(), a.cols(), out.row(i).begin());
    std::copy_n(b.row(i).begin(), b.cols(), out.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

EmbedTrainResult train_joint_embedding(const SparseMatrix& m1, const SparseMatrix& m2,
                                       std::span<const Label> cell_types, const EmbedConfig& cfg,
                                       const TrainProtocol& protocol) {
  cfg.validate();
  protocol.validate();
  require(m1.rows() == m2.rows(), "embed: modalities must list the same cells");
  require(cell_types.size() == m1.rows(), "embed: one cell-type label per cell required");
  Label max_label = kUnlabeled;
  std::vector<Index> labeled;
  for (Index i = 0; i < cell_types.size(); ++i) {
    require(cell_types[i] >= kUnlabeled, "embed: invalid cell-type label");
    max_label = std::max(max_label, cell_types[i]);
    if (cell_types[i] != kUnlabeled) labeled.push_back(i);
  }
  const auto n_types = static_cast<Index>(max_label + 1);
  require(n_types < cfg.conv.hidden_dim, "embed: hidden_dim must exceed the number of cell types");

  const DenseMatrix x = standardize_columns(lsi_features(m1, m2, cfg.lsi_rank, mix_seed(protocol.seed, 11)));
  const auto steps = propagation_inputs(x, cfg.conv);
  ParamStore store;
  const DecoupledNet enc("embed.", cfg.conv, x.cols(), store, mix_seed(protocol.seed, 13));
  const Mlp decoder("decoder.", cfg.conv.hidden_dim, cfg.conv.hidden_dim, x.cols(), store,
                    mix_seed(protocol.seed, 14));

  // Labels of validation cells are hidden from the training loss.
  LabelArray fit_labels(cell_types.begin(), cell_types.end());
  LabelArray val_labels(cell_types.size(), kUnlabeled);
  const bool has_validation = labeled.size() >= 2;
  if (has_validation) {
    const TrainSplit split = split_rows(labeled, protocol.split_fraction, mix_seed(protocol.seed, 1));
    for (const Index i : split.validation) {
      val_labels[i] = fit_labels[i];
      fit_labels[i] = kUnlabeled;
    }
  }

  EmbedTrainResult res;
  EarlyStopping stop(protocol.patience);
  ParamStore best = store;
  for (Index epoch = 1; epoch <= protocol.max_epochs; ++epoch) {
    const AdamOptions opt = adam_for(protocol, epoch);
    Tape tape(true);
    const Var h = enc.forward(tape, store, steps, mix_seed(protocol.seed, 1000 + epoch));
    const Var loss =
        joint_embedding_loss(tape, store, h, n_types, tape.constant(x), fit_labels, decoder, cfg.beta).total;
    const double loss_value = tape.scalar(loss);
    check_finite_loss(loss_value, epoch);
    tape.backward(loss, store);
    adam_step(store, opt);

    Tape ev(false);
    const Var eh = enc.forward(ev, store, steps, 0);
    const double val = ev.scalar(
        joint_embedding_loss(ev, store, eh, n_types, ev.constant(x), has_validation ? val_labels : fit_labels,
                             decoder, cfg.beta)
            .total);
    res.history.push_back({epoch, loss_value, val, opt.lr});
    res.epochs_run = epoch;
    if (stop.update(epoch, val)) best = store;
    if (stop.should_stop(epoch)) break;
  }
  res.best_epoch = stop.best_epoch();
  res.params = std::move(best);
  Tape ev(false);
  res.embedding.embedding = ev.value(enc.forward(ev, res.params, steps, 0));
  res.embedding.cell_type_dims = n_types;
  res.embedding.beta = cfg.beta;
  return res;
}

DenseMatrix pca_concat_baseline(const SparseMatrix& m1, const SparseMatrix& m2, Index rank, std::uint64_t seed) {
  require(m1.rows() == m2.rows(), "pca baseline: modalities must list the same cells");
  auto pca = [&](const SparseMatrix& m, std::uint64_t s) {
    DenseMatrix d = m.to_dense();
    for (Index c = 0; c < d.cols(); ++c) {
      double mean = 0.0;
      for (Index r = 0; r < d.rows(); ++r) mean += d(r, c);
      mean /= static_cast<double>(d.rows());
      for (Index r = 0; r < d.rows(); ++r) d(r, c) -= mean;
    }
    return truncated_svd(d, clamp_rank(rank, d.rows(), d.cols()), s).embedding();
  };
  const DenseMatrix a = pca(m1, mix_seed(seed, 1)), b = pca(m2, mix_seed(seed, 2));
  DenseMatrix out(a.rows(), a.cols() + b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    std::copy_n(a.row(i).begin(), a.cols(), out.row(i).begin());
    std::copy_n(b.row(i).begin(), b.cols(), out.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

DenseMatrix cell_type_probabilities(const JointEmbedding& e) {
  const Index t = e.cell_type_dims;
  DenseMatrix logits(e.embedding.rows(), t);
  for (Index i = 0; i < logits.rows(); ++i) std::copy_n(e.embedding.row(i).begin(), t, logits.row(i).begin());
  return row_col_probabilities(logits).first;
}

}  // namespace cellgraph
