#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cellgraph/config.hpp"
#include "cellgraph/dataset.hpp"
#include "cellgraph/metrics.hpp"
#include "cellgraph/tasks.hpp"

namespace cellgraph {

// Ordered key/value pairs written one per line as `key=value` with 6 decimals.
struct Report {
  std::vector<std::pair<std::string, double>> entries;

  void add(std::string key, double value) { entries.emplace_back(std::move(key), value); }
  double get(const std::string& key) const;
};
std::string format_report(const Report& r);
void write_report(const std::string& path, const Report& r);

SparseMatrix gather_rows(const SparseMatrix& m, std::span<const Index> rows);

struct PredictOutcome {
  PredictionResult result;
  double test_rmse = 0.0;
  double baseline_validation_rmse = 0.0;
  double baseline_test_rmse = 0.0;
  Report report;
};
// Trains on the training cells (targets of test cells stay hidden) and scores both the
// network and the truncated-SVD regression baseline.
PredictOutcome run_predict(const Dataset& d, const RunConfig& cfg);

struct MatchOutcome {
  MatchTrainResult result;
  MatchOutput output;         // test cells; modality-2 rows in shuffled order
  std::vector<Index> order2;  // dataset cell of each shuffled modality-2 row
  std::vector<Index> truth;   // shuffled modality-2 row of each test cell
  MatchScores scores;
  Report report;
};
// Trains on the paired training cells, then matches the test cells of the two modalities
// after a seeded shuffle of the modality-2 rows.
MatchOutcome run_match(const Dataset& d, const RunConfig& cfg);

struct EmbedOutcome {
  EmbedTrainResult result;
  MetricReport metrics;   // test cells
  MetricReport baseline;  // PCA concatenation, test cells
  Report report;
};
// Trains with the cell types of training cells only and scores the test cells.
EmbedOutcome run_embed(const Dataset& d, const RunConfig& cfg);

// Inputs of the metric suite. Empty optional inputs leave their metric at NaN.
struct EvalInputs {
  DenseMatrix embedding;
  LabelArray cell_types;
  LabelArray batches;
  std::vector<double> cc_scores;  // cell-cycle program score per cell
  DenseMatrix pre_embedding;      // embedding before integration, for cell-cycle variance
  std::vector<double> pseudotime; // ground-truth pseudotime per cell
};
MetricReport evaluate_embedding(const EvalInputs& in, Index knn_k, std::uint64_t seed);
Report metric_report(const MetricReport& m, const std::string& prefix = "");

// Runs the task named in cfg and writes its outputs under cfg.out_dir. Returns 0 on success
// and 1 when a check (gradcheck) fails. Errors propagate as exceptions.
int run_task(const RunConfig& cfg);

}  // namespace cellgraph
