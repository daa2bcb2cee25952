#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cellgraph/autodiff.hpp"
#include "cellgraph/graph.hpp"

namespace cellgraph {

enum class ResidualMode { SkipConnection, InitialResidual };
enum class AggregationNorm { EdgeSymmetric, PostGroupNorm, MinMaxEdges };

struct ConvConfig {
  Index n_layers = 2;
  Index hidden_dim = 48;
  ResidualMode residual = ResidualMode::InitialResidual;
  AggregationNorm aggregation = AggregationNorm::PostGroupNorm;
  double alpha = 0.5;
  bool learnable_alpha = false;
  bool use_pathway_channel = false;
  double dropout = 0.2;
  Index group_norm_groups = 1;
  bool decoupled = false;

  void validate() const;
};

EdgeNormalization edge_normalization_for(AggregationNorm norm);

// Task-specific layer counts.
inline constexpr Index kPredictLayers = 4;
inline constexpr Index kMatchLayers = 3;
inline constexpr Index kEmbedLayers = 2;

struct LayerTrace {
  std::vector<Var> cell_states;     // H^1_U .. H^L_U, each N x d
  std::vector<Var> feature_states;  // H^1_V .. H^L_V, each k x d
};

// Coupled cell-feature graph convolution. Parameters are registered under `prefix`.
class GraphConvNet {
 public:
  GraphConvNet(std::string prefix, ConvConfig cfg, const CellFeatureGraph& graph, NodeEmbeddings inputs,
               ParamStore& store, std::uint64_t seed);

  const ConvConfig& config() const noexcept { return cfg_; }
  const std::string& prefix() const noexcept { return prefix_; }

  // H^1 = ReLU(X W + b) per node type.
  std::pair<Var, Var> input_transform(Tape& tape, ParamStore& store) const;

  std::pair<Var, Var> conv_layer(Tape& tape, ParamStore& store, Index layer, Var h_cell, Var h_feat, Var h0_cell,
                                 Var h0_feat, std::uint64_t dropout_seed) const;

  // sum_i w_i H^i_U
  Var readout(Tape& tape, ParamStore& store, const std::vector<Var>& cell_states) const;

  LayerTrace trace(Tape& tape, ParamStore& store, std::uint64_t dropout_seed) const;
  Var forward(Tape& tape, ParamStore& store, std::uint64_t dropout_seed) const;

  std::string param_name(const std::string& local) const { return prefix_ + local; }

 private:
  Var message(Tape& tape, ParamStore& store, const SparseOperatorPtr& op, Var source, const std::string& key,
              std::uint64_t dropout_seed) const;

  std::string prefix_;
  ConvConfig cfg_;
  NodeEmbeddings inputs_;
  SparseOperatorPtr cell_from_feature_;
  SparseOperatorPtr feature_from_cell_;
  SparseOperatorPtr feature_from_feature_;
};

// Two-layer perceptron registered under `prefix`: Linear(in, hidden) ReLU Linear(hidden, out).
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, Index in, Index hidden, Index out, ParamStore& store, std::uint64_t seed);
  Var forward(Tape& tape, ParamStore& store, Var x, double dropout = 0.0, std::uint64_t dropout_seed = 0) const;

 private:
  std::string prefix_;
};

// Parameter-free alternating propagation. Returns [P^1 x, ..., P^n x] with
// P x = C (C^T x) for the normalized cell-feature operator C.
std::vector<DenseMatrix> decoupled_propagate(const CellFeatureGraph& graph, const DenseMatrix& x_cell,
                                             Index n_steps);

// Per-step two-layer perceptron on [x, P^1 x, ..., P^L x] followed by a learned
// weighted sum of the step outputs.
class DecoupledNet {
 public:
  DecoupledNet(std::string prefix, ConvConfig cfg, Index input_dim, ParamStore& store, std::uint64_t seed);

  const ConvConfig& config() const noexcept { return cfg_; }

  // `steps` holds x followed by its propagated copies (n_layers + 1 matrices).
  Var forward(Tape& tape, ParamStore& store, const std::vector<DenseMatrix>& steps,
              std::uint64_t dropout_seed) const;

  std::string param_name(const std::string& local) const { return prefix_ + local; }

 private:
  std::string prefix_;
  ConvConfig cfg_;
  Index input_dim_;
  std::vector<Mlp> steps_;
};

// Linear(in, out) with bias.
Var linear(Tape& tape, ParamStore& store, const std::string& prefix, Var x);
void register_linear(ParamStore& store, const std::string& prefix, Index in, Index out, std::uint64_t seed);

// Finite-difference check of the full coupled network on a toy graph.
GradCheckReport check_network_gradient(Index n_cells, Index n_features, Index n_layers, std::uint64_t seed);

}  // namespace cellgraph
