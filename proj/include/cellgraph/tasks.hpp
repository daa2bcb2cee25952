#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "cellgraph/assignment.hpp"
#include "cellgraph/autodiff.hpp"
#include "cellgraph/convnet.hpp"
#include "cellgraph/graph.hpp"

namespace cellgraph {

struct TrainProtocol {
  double split_fraction = 0.85;
  Index patience = 300;
  Index max_epochs = 500;
  std::uint64_t seed = 0;
  double lr = 1e-2;
  double lr_decay_rate = 1.0;
  Index lr_decay_every = 100;
  double weight_decay = 0.0;
  bool transductive = true;

  void validate() const;
};

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;
};

// One line per epoch: "epoch=3 train_loss=... val_metric=... lr=...".
void write_epoch_log(std::ostream& out, std::span<const EpochRecord> history);

struct TrainSplit {
  std::vector<Index> train;
  std::vector<Index> validation;
};

// Seeded shuffle of `rows`; the first round(fraction * n) go to training (at least one each side).
TrainSplit split_rows(std::span<const Index> rows, double fraction, std::uint64_t seed);

// Tracks the best (lowest) validation metric; a metric counts as an improvement only if strictly lower.
class EarlyStopping {
 public:
  explicit EarlyStopping(Index patience);
  // Returns true if `metric` is a new best.
  bool update(Index epoch, double metric);
  bool should_stop(Index epoch) const { return epoch >= best_epoch_ + patience_; }
  Index best_epoch() const noexcept { return best_epoch_; }
  double best() const noexcept { return best_; }

 private:
  Index patience_;
  Index best_epoch_ = 0;
  double best_;
};

// Entrywise root mean squared error.
double rmse_loss(const DenseMatrix& pred, const DenseMatrix& target);

// ---------------------------------------------------------------------------
// Modality prediction

struct PredictionResult {
  ParamStore params;  // best-validation parameters
  double validation_rmse = 0.0;
  Index best_epoch = 0;
  Index epochs_run = 0;
  std::vector<EpochRecord> history;
  DenseMatrix prediction;  // all N cells, from the best parameters
  TrainSplit split;
};

// Trains the coupled network plus a linear head on `target` rows listed in labeled_rows
// (all rows when empty). Throws a Runtime error naming the epoch on a non-finite loss.
PredictionResult train_prediction(const CellFeatureGraph& g, const DenseMatrix& target, const ConvConfig& cfg,
                                  const TrainProtocol& protocol, std::span<const Index> labeled_rows = {});

// Truncated SVD of the source counts followed by least-squares linear regression fitted on train_rows.
DenseMatrix tsvd_regression_baseline(const SparseMatrix& source, const DenseMatrix& target,
                                     std::span<const Index> train_rows, Index rank, std::uint64_t seed);

// Least-squares coefficients (with intercept as the last row) of y on x.
DenseMatrix least_squares(const DenseMatrix& x, const DenseMatrix& y, double ridge = 1e-8);

// ---------------------------------------------------------------------------
// Modality matching

// truth[i] is the row of the second modality paired with row i of the first.
using Pairing = std::vector<Index>;

// -sum_i [log P^r(i, truth_i) + log P^c(i, truth_i)] with S = cosine similarities / temperature.
Var match_loss(Tape& tape, Var h1, Var h2, std::span<const Index> truth, double temperature = 1.0);

struct MatchLossParts {
  Var total;
  Var match;
  Var aux;
};

struct AuxHeads {
  Mlp to_m1;  // f_theta1
  Mlp to_m2;  // f_theta2
};

MatchLossParts matching_losses(Tape& tape, ParamStore& store, Var h1, Var h2, std::span<const Index> truth, Var x1,
                               Var x2, const AuxHeads& heads, double aux_weight, double temperature = 1.0);

// Row softmax (P^r) and column softmax (P^c) of a score matrix.
std::pair<DenseMatrix, DenseMatrix> row_col_probabilities(const DenseMatrix& s);

// Cosine similarity of the rows of a and b.
DenseMatrix cosine_scores(const DenseMatrix& a, const DenseMatrix& b);

struct MatchOutput {
  DenseMatrix score;     // N1 x N2 cosine similarities (cross-batch entries are computed but unused)
  DenseMatrix row_prob;  // within-batch row softmax
  DenseMatrix col_prob;  // within-batch column softmax
  std::vector<std::pair<Index, Index>> assignment;
  std::vector<Index> unmatched_left;
  std::vector<Index> unmatched_right;
};

MatchOutput match_inference(const DenseMatrix& h1, const DenseMatrix& h2, std::span<const Label> batch1,
                            std::span<const Label> batch2, double percentile, double temperature = 1.0);

// sum_i prob(i, truth_i)
double competition_match_score(const DenseMatrix& prob, std::span<const Index> truth);

struct MatchScores {
  double softmax_score = 0.0;     // sum_i (P^r + P^c)(i, truth_i) / 2
  double assignment_score = 0.0;  // number of assignment pairs that agree with truth
  double accuracy = 0.0;          // assignment_score / rows
};
MatchScores score_matching(const MatchOutput& out, std::span<const Index> truth);

struct MatchConfig {
  ConvConfig conv;
  Index lsi_rank = 16;
  double aux_weight = 1.0;
  bool use_aux = true;
  double percentile = 95.0;
  double temperature = 0.1;
  Index batch_size = 256;

  MatchConfig();
  void validate() const;
};

struct MatchTrainResult {
  ParamStore params;
  DenseMatrix h1;  // all cells of modality 1
  DenseMatrix h2;  // all cells of modality 2
  Index best_epoch = 0;
  Index epochs_run = 0;
  std::vector<EpochRecord> history;
};

// Trains one decoupled encoder per modality on the paired train rows (train_rows index both
// modalities, paired row-to-row). The graph covers every cell (transductive).
MatchTrainResult train_matching(const SparseMatrix& m1, const SparseMatrix& m2, std::span<const Index> train_rows,
                                const MatchConfig& cfg, const TrainProtocol& protocol);

// ---------------------------------------------------------------------------
// Joint embedding

struct JointEmbedding {
  DenseMatrix embedding;  // N x d
  Index cell_type_dims = 0;
  double beta = 0.0;
};

struct JointLossParts {
  Var total;
  Var recon;
  Var celltype;
  Var regular;
};

// recon = mean over cells of ||x_lsi - f(H)||^2; celltype = CE of softmax(H[:, :T]) summed over
// labeled rows; regular = beta * mean row norm of H[:, T:].
JointLossParts joint_embedding_loss(Tape& tape, ParamStore& store, Var h, Index cell_type_dims, Var x_lsi,
                                    std::span<const Label> cell_types, const Mlp& decoder, double beta);

struct EmbedConfig {
  ConvConfig conv;
  Index lsi_rank = 32;
  double beta = 1e-3;

  EmbedConfig();
  void validate() const;
};

struct EmbedTrainResult {
  JointEmbedding embedding;
  ParamStore params;
  Index best_epoch = 0;
  Index epochs_run = 0;
  std::vector<EpochRecord> history;
};

// tf-idf + truncated SVD per modality, concatenated.
DenseMatrix lsi_features(const SparseMatrix& m1, const SparseMatrix& m2, Index rank, std::uint64_t seed);

EmbedTrainResult train_joint_embedding(const SparseMatrix& m1, const SparseMatrix& m2,
                                       std::span<const Label> cell_types, const EmbedConfig& cfg,
                                       const TrainProtocol& protocol);

// Centered PCA of each modality, concatenated.
DenseMatrix pca_concat_baseline(const SparseMatrix& m1, const SparseMatrix& m2, Index rank, std::uint64_t seed);

// Softmax over the first T columns of each row.
DenseMatrix cell_type_probabilities(const JointEmbedding& e);

}  // namespace cellgraph
