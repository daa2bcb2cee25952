#include "cellgraph/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "cellgraph/autodiff.hpp"
#include "cellgraph/error.hpp"
#include "cellgraph/graph.hpp"
#include "cellgraph/seed.hpp"

namespace cellgraph {

namespace {

DenseMatrix gather_dense(const DenseMatrix& m, std::span<const Index> rows) {
  DenseMatrix out(rows.size(), m.cols());
  for (Index i = 0; i < rows.size(); ++i) std::copy_n(m.row(rows[i]).begin(), m.cols(), out.row(i).begin());
  return out;
}

template <class T>
std::vector<T> gather_values(const std::vector<T>& v, std::span<const Index> rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (const Index r : rows) out.push_back(v[r]);
  return out;
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

void prepare_out_dir(const RunConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create output directory " + cfg.out_dir);
}

void write_log(const RunConfig& cfg, std::span<const EpochRecord> history) {
  std::ofstream out(out_path(cfg, "train.log"));
  if (!out) fail(ErrorKind::Io, "cannot write " + out_path(cfg, "train.log"));
  write_epoch_log(out, history);
}

// Modality-2 rows reordered to follow the modality-1 rows.
SparseMatrix aligned_modality_2(const Dataset& d) { return gather_rows(d.modality_2, d.pairing); }

}  // namespace

double Report::get(const std::string& key) const {
  for (const auto& [k, v] : entries)
    if (k == key) return v;
  fail("report has no key '" + key + "'");
}

std::string format_report(const Report& r) {
  std::string out;
  char buf[64];
  for (const auto& [k, v] : r.entries) {
    if (std::isfinite(v)) std::snprintf(buf, sizeof buf, "%.6f", v);
    else std::snprintf(buf, sizeof buf, "nan");
    out += k + "=" + buf + "\n";
  }
  return out;
}

void write_report(const std::string& path, const Report& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  out << format_report(r);
}

SparseMatrix gather_rows(const SparseMatrix& m, std::span<const Index> rows) {
  std::vector<SparseMatrix::Triplet> t;
  for (Index i = 0; i < rows.size(); ++i) {
    require(rows[i] < m.rows(), "gather_rows: row index out of range");
    const auto cols = m.row_cols(rows[i]);
    const auto vals = m.row_values(rows[i]);
    for (Index e = 0; e < cols.size(); ++e) t.push_back({i, cols[e], vals[e]});
  }
  return SparseMatrix::from_triplets(rows.size(), m.cols(), std::move(t));
}

// ---------------------------------------------------------------------------

PredictOutcome run_predict(const Dataset& d, const RunConfig& cfg) {
  d.validate();
  const ConvConfig conv = cfg.conv_for(Task::Predict);
  const SparseMatrix m2 = aligned_modality_2(d);
  const SparseMatrix& source = cfg.predict_source == 1 ? d.modality_1 : m2;
  const SparseMatrix& target_sparse = cfg.predict_source == 1 ? m2 : d.modality_1;
  const DenseMatrix target = target_sparse.to_dense();

  CellFeatureGraph g = build_bipartite(source, edge_normalization_for(conv.aggregation));
  if (!cfg.gene_sets.empty()) {
    const auto& names = cfg.predict_source == 1 ? d.features_1 : d.features_2;
    g = augment_with_pathways(g, load_gene_sets(cfg.gene_sets, names), source);
  }
  require(!conv.use_pathway_channel || !cfg.gene_sets.empty(), "predict: the pathway channel needs gene sets");

  const std::vector<Index> train = d.rows(false), test = d.rows(true);
  PredictOutcome o;
  o.result = train_prediction(g, target, conv, cfg.protocol(), train);
  const DenseMatrix base = tsvd_regression_baseline(source, target, o.result.split.train, cfg.baseline_rank,
                                                    mix_seed(cfg.seed, 5));
  const auto& val = o.result.split.validation;
  o.baseline_validation_rmse = rmse(gather_dense(base, val), gather_dense(target, val));
  const bool has_test = !test.empty();
  o.test_rmse = has_test ? rmse(gather_dense(o.result.prediction, test), gather_dense(target, test)) : NAN;
  o.baseline_test_rmse = has_test ? rmse(gather_dense(base, test), gather_dense(target, test)) : NAN;

  Report& r = o.report;
  r.add("validation_rmse", o.result.validation_rmse);
  r.add("test_rmse", o.test_rmse);
  r.add("baseline_validation_rmse", o.baseline_validation_rmse);
  r.add("baseline_test_rmse", o.baseline_test_rmse);
  r.add("best_epoch", static_cast<double>(o.result.best_epoch));
  r.add("epochs_run", static_cast<double>(o.result.epochs_run));
  return o;
}

MatchOutcome run_match(const Dataset& d, const RunConfig& cfg) {
  d.validate();
  const MatchConfig mc = cfg.match_config();
  const SparseMatrix m2 = aligned_modality_2(d);
  const std::vector<Index> train = d.rows(false), test = d.rows(true);
  require(!test.empty(), "match: the data set has no test cells");

  MatchOutcome o;
  o.result = train_matching(d.modality_1, m2, train, mc, cfg.protocol());

  // Modality-2 test rows are shuffled so that row order carries no pairing information.
  std::vector<Index> perm(test.size());
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(mix_seed(cfg.seed, 23));
  std::shuffle(perm.begin(), perm.end(), rng);
  o.truth.assign(test.size(), 0);
  for (Index j = 0; j < perm.size(); ++j) {
    o.order2.push_back(test[perm[j]]);
    o.truth[perm[j]] = j;
  }
  const DenseMatrix h1 = gather_dense(o.result.h1, test);
  const DenseMatrix h2 = gather_dense(o.result.h2, o.order2);
  const LabelArray b1 = gather_values(d.batch_labels, test);
  const LabelArray b2 = gather_values(d.batch_labels, o.order2);
  o.output = match_inference(h1, h2, b1, b2, mc.percentile, mc.temperature);
  o.scores = score_matching(o.output, o.truth);

  Report& r = o.report;
  r.add("competition_score", o.scores.softmax_score);
  r.add("assignment_score", o.scores.assignment_score);
  r.add("accuracy", o.scores.accuracy);
  r.add("uniform_score", 1.0);
  r.add("test_cells", static_cast<double>(test.size()));
  r.add("best_epoch", static_cast<double>(o.result.best_epoch));
  r.add("epochs_run", static_cast<double>(o.result.epochs_run));
  return o;
}

MetricReport evaluate_embedding(const EvalInputs& in, Index knn_k, std::uint64_t seed) {
  const Index n = in.embedding.rows();
  require(in.cell_types.size() == n, "eval: one cell-type label per embedding row required");
  require(in.batches.size() == n, "eval: one batch label per embedding row required");
  require(in.cc_scores.empty() || in.cc_scores.size() == n, "eval: one cell-cycle score per row required");
  require(in.pseudotime.empty() || in.pseudotime.size() == n, "eval: one pseudotime per row required");
  require(in.pre_embedding.empty() || in.pre_embedding.rows() == n,
          "eval: pre-integration embedding must have one row per cell");

  // Unlabeled cells take no part in the label-based metrics.
  std::vector<Index> keep;
  for (Index i = 0; i < n; ++i)
    if (in.cell_types[i] != kUnlabeled) keep.push_back(i);
  require(keep.size() >= 2, "eval: at least two labeled cells required");
  const DenseMatrix emb = gather_dense(in.embedding, keep);
  const LabelArray types = gather_values(in.cell_types, keep);
  const LabelArray batches = gather_values(in.batches, keep);
  const Index k = std::min(knn_k, keep.size() - 1);

  const double nmi_v = nmi_cluster_label(emb, types, k, seed);
  const double asw = cell_type_asw(emb, types);
  double cc = NAN;
  if (!in.cc_scores.empty() && !in.pre_embedding.empty()) {
    const std::vector<double> score = gather_values(in.cc_scores, keep);
    const DenseMatrix pre = gather_dense(in.pre_embedding, keep);
    cc = cell_cycle_conservation(score, variance_explained_per_batch(pre, score, batches), emb, batches);
  }
  double traj = NAN;
  if (!in.pseudotime.empty()) {
    const std::vector<double> before = gather_values(in.pseudotime, keep);
    const Index root = static_cast<Index>(std::min_element(before.begin(), before.end()) - before.begin());
    traj = trajectory_conservation(before, pseudotime_from_root(knn_graph(emb, k), root));
  }
  double basw = NAN;
  try {
    basw = batch_asw(emb, batches, types);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Validation) throw;
    std::fprintf(stderr, "warning: batch_asw skipped: %s\n", e.what());
  }
  const double conn = graph_connectivity(emb, types, k);
  return aggregate(nmi_v, asw, cc, traj, basw, conn);
}

Report metric_report(const MetricReport& m, const std::string& prefix) {
  Report r;
  r.add(prefix + "nmi", m.nmi);
  r.add(prefix + "cell_type_asw", m.cell_type_asw);
  r.add(prefix + "cc_conservation", m.cc_conservation);
  r.add(prefix + "trajectory_conservation", m.trajectory_conservation);
  r.add(prefix + "batch_asw", m.batch_asw);
  r.add(prefix + "graph_connectivity", m.graph_connectivity);
  r.add(prefix + "s_bio", m.s_bio);
  r.add(prefix + "s_batch", m.s_batch);
  r.add(prefix + "overall", m.overall);
  return r;
}

EmbedOutcome run_embed(const Dataset& d, const RunConfig& cfg) {
  d.validate();
  require(d.cell_types.size() == d.n_cells(), "embed: the data set has no cell types");
  const EmbedConfig ec = cfg.embed_config();
  const SparseMatrix m2 = aligned_modality_2(d);
  const std::vector<Index> test = d.rows(true);
  require(!test.empty(), "embed: the data set has no test cells");

  LabelArray visible = d.cell_types;
  for (const Index i : test) visible[i] = kUnlabeled;
  EmbedOutcome o;
  o.result = train_joint_embedding(d.modality_1, m2, visible, ec, cfg.protocol());

  // Pre-integration reference for cell-cycle variance: LSI of both modalities.
  const DenseMatrix pre = lsi_features(d.modality_1, m2, ec.lsi_rank, mix_seed(cfg.seed, 11));
  auto inputs_for = [&](const DenseMatrix& all) {
    EvalInputs in;
    in.embedding = gather_dense(all, test);
    in.cell_types = gather_values(d.cell_types, test);
    in.batches = gather_values(d.batch_labels, test);
    if (!d.cc_score.empty()) {
      in.cc_scores = gather_values(d.cc_score, test);
      in.pre_embedding = gather_dense(pre, test);
    }
    if (!d.pseudotime.empty()) in.pseudotime = gather_values(d.pseudotime, test);
    return in;
  };
  o.metrics = evaluate_embedding(inputs_for(o.result.embedding.embedding), cfg.metric_k, cfg.seed);
  const DenseMatrix base = pca_concat_baseline(d.modality_1, m2, cfg.embed_baseline_rank, mix_seed(cfg.seed, 7));
  o.baseline = evaluate_embedding(inputs_for(base), cfg.metric_k, cfg.seed);

  o.report = metric_report(o.metrics);
  for (const auto& e : metric_report(o.baseline, "baseline_").entries) o.report.entries.push_back(e);
  o.report.add("best_epoch", static_cast<double>(o.result.best_epoch));
  o.report.add("epochs_run", static_cast<double>(o.result.epochs_run));
  return o;
}

// ---------------------------------------------------------------------------

namespace {

int run_gradcheck(const RunConfig& cfg) {
  constexpr double kTolerance = 1e-4;
  Report r;
  bool ok = true;
  for (const OpKind kind : differentiable_ops()) {
    const GradCheckReport g = check_op_gradient(kind, cfg.seed);
    ok = ok && g.max_relative_error < kTolerance;
    r.add("op." + std::string(op_name(kind)), g.max_relative_error);
  }
  const GradCheckReport net = check_network_gradient(6, 4, 2, cfg.seed);
  ok = ok && net.max_relative_error < kTolerance;
  r.add("network", net.max_relative_error);
  r.add("passed", ok ? 1.0 : 0.0);
  write_report(out_path(cfg, "gradcheck.kv"), r);
  std::fputs(format_report(r).c_str(), stdout);
  return ok ? 0 : 1;
}

EvalInputs load_eval_inputs(const RunConfig& cfg) {
  EvalInputs in;
  in.embedding = load_dense_matrix(cfg.embedding);
  in.cell_types = load_labels(cfg.labels).labels;
  in.batches = load_labels(cfg.batches).labels;
  for (const Label b : in.batches) require(b != kUnlabeled, "eval: batch labels may not be NA");
  if (!cfg.cc_scores.empty()) {
    require(!cfg.pre_embedding.empty(), "eval: cell-cycle scores need a pre-integration embedding");
    in.cc_scores = load_values(cfg.cc_scores);
    in.pre_embedding = load_dense_matrix(cfg.pre_embedding);
  }
  if (!cfg.pseudotime.empty()) in.pseudotime = load_values(cfg.pseudotime);
  return in;
}

}  // namespace

int run_task(const RunConfig& cfg) {
  cfg.validate();
  prepare_out_dir(cfg);
  switch (cfg.task) {
    case Task::Synth: {
      SynthParams p = cfg.synth;
      p.seed = cfg.seed;
      save_dataset(cfg.out_dir, generate_synthetic(p));
      return 0;
    }
    case Task::GradCheck:
      return run_gradcheck(cfg);
    case Task::Eval: {
      const MetricReport m = evaluate_embedding(load_eval_inputs(cfg), cfg.metric_k, cfg.seed);
      write_report(out_path(cfg, "report.kv"), metric_report(m));
      return 0;
    }
    case Task::Predict: {
      const PredictOutcome o = run_predict(load_dataset(cfg.data_dir), cfg);
      write_report(out_path(cfg, "report.kv"), o.report);
      write_log(cfg, o.result.history);
      save_checkpoint(out_path(cfg, "model.ckpt"), o.result.params);
      write_dense_matrix(out_path(cfg, "prediction.mtx"), o.result.prediction);
      return 0;
    }
    case Task::Match: {
      const Dataset d = load_dataset(cfg.data_dir);
      const MatchOutcome o = run_match(d, cfg);
      write_report(out_path(cfg, "report.kv"), o.report);
      write_log(cfg, o.result.history);
      save_checkpoint(out_path(cfg, "model.ckpt"), o.result.params);
      // Assigned pairs as dataset rows of modality 1 and modality 2.
      const std::vector<Index> test = d.rows(true);
      std::vector<std::string> lines;
      for (const auto& [i, j] : o.output.assignment)
        lines.push_back(std::to_string(test[i]) + "\t" + std::to_string(d.pairing[o.order2[j]]));
      write_lines(out_path(cfg, "assignment.txt"), lines);
      return 0;
    }
    case Task::Embed: {
      const EmbedOutcome o = run_embed(load_dataset(cfg.data_dir), cfg);
      write_report(out_path(cfg, "report.kv"), o.report);
      write_log(cfg, o.result.history);
      save_checkpoint(out_path(cfg, "model.ckpt"), o.result.params);
      write_dense_matrix(out_path(cfg, "embedding.mtx"), o.result.embedding.embedding);
      return 0;
    }
  }
  return 0;
}

}  // namespace cellgraph
