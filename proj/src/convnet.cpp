#include "cellgraph/convnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <tuple>

#include "cellgraph/error.hpp"
#include "cellgraph/seed.hpp"

namespace cellgraph {

namespace {

// Registration is skipped when the parameter exists, so a second network over a
// different graph can share the weights of the first.
void add_param(ParamStore& store, const std::string& name, DenseMatrix init) {
  if (!store.contains(name)) store.add(name, std::move(init));
}

std::string layer_key(Index layer, const char* channel) {
  return "l" + std::to_string(layer) + "." + channel;
}

}  // namespace

void ConvConfig::validate() const {
  require(hidden_dim >= 1, "conv: hidden_dim must be positive");
  require(alpha >= 0.0 && alpha <= 1.0, "conv: alpha must lie in [0,1]");
  require(dropout >= 0.0 && dropout < 1.0, "conv: dropout must lie in [0,1)");
  require(group_norm_groups >= 1 && hidden_dim % group_norm_groups == 0,
          "conv: hidden_dim must be divisible by group_norm_groups");
  require(decoupled || n_layers >= 1, "conv: coupled mode needs at least one layer");
}

EdgeNormalization edge_normalization_for(AggregationNorm norm) {
  switch (norm) {
    case AggregationNorm::EdgeSymmetric: return EdgeNormalization::SymmetricNormalize;
    case AggregationNorm::MinMaxEdges: return EdgeNormalization::MinMaxScale;
    case AggregationNorm::PostGroupNorm: return EdgeNormalization::NoneWithPostStandardize;
  }
  fail("unknown aggregation normalization");
}

// ---------------------------------------------------------------------------
// Linear layers

void register_linear(ParamStore& store, const std::string& prefix, Index in, Index out, std::uint64_t seed) {
  store.add(prefix + ".w", glorot_uniform(in, out, seed));
  store.add(prefix + ".b", DenseMatrix(1, out));
}

Var linear(Tape& tape, ParamStore& store, const std::string& prefix, Var x) {
  return tape.add(tape.matmul(x, tape.param(store, prefix + ".w")), tape.param(store, prefix + ".b"));
}

Mlp::Mlp(std::string prefix, Index in, Index hidden, Index out, ParamStore& store, std::uint64_t seed)
    : prefix_(std::move(prefix)) {
  register_linear(store, prefix_ + "fc1", in, hidden, mix_seed(seed, 1));
  register_linear(store, prefix_ + "fc2", hidden, out, mix_seed(seed, 2));
}

Var Mlp::forward(Tape& tape, ParamStore& store, Var x, double dropout, std::uint64_t dropout_seed) const {
  Var h = tape.relu(linear(tape, store, prefix_ + "fc1", x));
  h = tape.dropout(h, dropout, dropout_seed);
  return linear(tape, store, prefix_ + "fc2", h);
}

// ---------------------------------------------------------------------------
// GraphConvNet

GraphConvNet::GraphConvNet(std::string prefix, ConvConfig cfg, const CellFeatureGraph& graph, NodeEmbeddings inputs,
                           ParamStore& store, std::uint64_t seed)
    : prefix_(std::move(prefix)), cfg_(cfg), inputs_(std::move(inputs)) {
  cfg_.validate();
  require(!cfg_.decoupled, "GraphConvNet is the coupled network; use DecoupledNet for decoupled mode");
  require(inputs_.cell_embed.rows() == graph.n_cells && inputs_.feature_embed.rows() == graph.n_features,
          "conv: node embeddings do not match the graph");
  if (cfg_.use_pathway_channel && !graph.has_pathways())
    fail("conv: pathway channel requested but the graph has no feature-feature edges");

  const Propagators p = make_propagators(graph);
  cell_from_feature_ = std::make_shared<const SparseOperator>(p.cell_from_feature);
  feature_from_cell_ = std::make_shared<const SparseOperator>(p.feature_from_cell);
  feature_from_feature_ = std::make_shared<const SparseOperator>(p.feature_from_feature);

  const Index d = cfg_.hidden_dim;
  std::uint64_t salt = 0;
  add_param(store, param_name("input.cell.w"), glorot_uniform(inputs_.cell_embed.cols(), d, mix_seed(seed, salt++)));
  add_param(store, param_name("input.cell.b"), DenseMatrix(1, d));
  add_param(store, param_name("input.feat.w"), glorot_uniform(inputs_.feature_embed.cols(), d, mix_seed(seed, salt++)));
  add_param(store, param_name("input.feat.b"), DenseMatrix(1, d));
  if (inputs_.feature_trainable) add_param(store, param_name("input.feat.table"), inputs_.feature_embed);

  std::vector<const char*> channels = {"uv", "vu"};
  if (cfg_.use_pathway_channel) channels.push_back("vv");
  for (Index l = 0; l < cfg_.n_layers; ++l) {
    for (const char* ch : channels) {
      const std::string key = param_name(layer_key(l, ch));
      add_param(store, key + ".w", glorot_uniform(d, d, mix_seed(seed, salt++)));
      add_param(store, key + ".b", DenseMatrix(1, d));
      if (cfg_.aggregation == AggregationNorm::PostGroupNorm) {
        add_param(store, key + ".gn.gamma", DenseMatrix(1, d, 1.0));
        add_param(store, key + ".gn.beta", DenseMatrix(1, d));
      }
    }
  }
  add_param(store, param_name("readout.w"), DenseMatrix(1, cfg_.n_layers, 1.0 / static_cast<double>(cfg_.n_layers)));
  if (cfg_.use_pathway_channel && cfg_.learnable_alpha) {
    const double a = std::min(std::max(cfg_.alpha, 1e-4), 1.0 - 1e-4);
    add_param(store, param_name("alpha.logit"), DenseMatrix(1, 1, std::log(a / (1.0 - a))));
  }
}

std::pair<Var, Var> GraphConvNet::input_transform(Tape& tape, ParamStore& store) const {
  const Var x_cell = tape.constant(inputs_.cell_embed);
  const Var x_feat = inputs_.feature_trainable ? tape.param(store, param_name("input.feat.table"))
                                               : tape.constant(inputs_.feature_embed);
  const Var h_cell = tape.relu(linear(tape, store, prefix_ + "input.cell", x_cell));
  const Var h_feat = tape.relu(linear(tape, store, prefix_ + "input.feat", x_feat));
  return {h_cell, h_feat};
}

Var GraphConvNet::message(Tape& tape, ParamStore& store, const SparseOperatorPtr& op, Var source,
                          const std::string& key, std::uint64_t dropout_seed) const {
  const std::string name = param_name(key);
  const Var src = tape.dropout(source, cfg_.dropout, dropout_seed);
  Var z = tape.spmm(op, tape.matmul(src, tape.param(store, name + ".w")));
  z = tape.add(z, tape.param(store, name + ".b"));
  if (cfg_.aggregation == AggregationNorm::PostGroupNorm)
    z = tape.group_norm(z, tape.param(store, name + ".gn.gamma"), tape.param(store, name + ".gn.beta"),
                        cfg_.group_norm_groups);
  return tape.relu(z);
}

std::pair<Var, Var> GraphConvNet::conv_layer(Tape& tape, ParamStore& store, Index layer, Var h_cell, Var h_feat,
                                             Var h0_cell, Var h0_feat, std::uint64_t dropout_seed) const {
  require(layer < cfg_.n_layers, "conv_layer: layer index out of range");
  const auto& hc = tape.value(h_cell);
  const auto& hf = tape.value(h_feat);
  require(hc.rows() == cell_from_feature_->matrix.rows() && hc.cols() == cfg_.hidden_dim,
          "conv_layer: cell states must be N x d");
  require(hf.rows() == feature_from_cell_->matrix.rows() && hf.cols() == cfg_.hidden_dim,
          "conv_layer: feature states must be k x d");

  const Var to_cell = message(tape, store, cell_from_feature_, h_feat, layer_key(layer, "vu"),
                              mix_seed(dropout_seed, 3 * layer));
  Var to_feat = message(tape, store, feature_from_cell_, h_cell, layer_key(layer, "uv"),
                        mix_seed(dropout_seed, 3 * layer + 1));
  if (cfg_.use_pathway_channel) {
    const Var from_feat = message(tape, store, feature_from_feature_, h_feat, layer_key(layer, "vv"),
                                  mix_seed(dropout_seed, 3 * layer + 2));
    const Var alpha = cfg_.learnable_alpha ? tape.sigmoid(tape.param(store, param_name("alpha.logit")))
                                           : tape.constant(DenseMatrix(1, 1, cfg_.alpha));
    to_feat = tape.lerp(alpha, from_feat, to_feat);
  }
  const bool initial = cfg_.residual == ResidualMode::InitialResidual;
  const Var cell_base = initial ? h0_cell : h_cell;
  const Var feat_base = initial ? h0_feat : h_feat;
  return {tape.add(cell_base, to_cell), tape.add(feat_base, to_feat)};
}

Var GraphConvNet::readout(Tape& tape, ParamStore& store, const std::vector<Var>& cell_states) const {
  require(!cell_states.empty(), "readout: empty layer trace");
  return tape.scalar_mix(tape.param(store, param_name("readout.w")), cell_states);
}

LayerTrace GraphConvNet::trace(Tape& tape, ParamStore& store, std::uint64_t dropout_seed) const {
  const auto [h0_cell, h0_feat] = input_transform(tape, store);
  LayerTrace t;
  Var hc = h0_cell, hf = h0_feat;
  for (Index l = 0; l < cfg_.n_layers; ++l) {
    std::tie(hc, hf) = conv_layer(tape, store, l, hc, hf, h0_cell, h0_feat, dropout_seed);
    t.cell_states.push_back(hc);
    t.feature_states.push_back(hf);
  }
  return t;
}

Var GraphConvNet::forward(Tape& tape, ParamStore& store, std::uint64_t dropout_seed) const {
  return readout(tape, store, trace(tape, store, dropout_seed).cell_states);
}

// ---------------------------------------------------------------------------
// Decoupled propagation

std::vector<DenseMatrix> decoupled_propagate(const CellFeatureGraph& graph, const DenseMatrix& x_cell,
                                             Index n_steps) {
  require(x_cell.rows() == graph.n_cells, "decoupled_propagate: x_cell rows must equal the cell count");
  std::vector<DenseMatrix> out;
  if (n_steps == 0) return out;
  const Propagators p = make_propagators(graph);
  DenseMatrix x = x_cell;
  for (Index t = 0; t < n_steps; ++t) {
    DenseMatrix f = spmm(p.feature_from_cell, x);
    if (p.post_standardize) f = standardize_rows(f);
    x = spmm(p.cell_from_feature, f);
    if (p.post_standardize) x = standardize_rows(x);
    out.push_back(x);
  }
  return out;
}

DecoupledNet::DecoupledNet(std::string prefix, ConvConfig cfg, Index input_dim, ParamStore& store,
                           std::uint64_t seed)
    : prefix_(std::move(prefix)), cfg_(cfg), input_dim_(input_dim) {
  cfg_.validate();
  require(input_dim_ >= 1, "decoupled net: input dimension must be positive");
  const Index steps = cfg_.n_layers + 1;
  for (Index i = 0; i < steps; ++i)
    steps_.emplace_back(param_name("step" + std::to_string(i) + "."), input_dim_, cfg_.hidden_dim, cfg_.hidden_dim,
                        store, mix_seed(seed, i));
  store.add(param_name("readout.w"), DenseMatrix(1, steps, 1.0 / static_cast<double>(steps)));
}

Var DecoupledNet::forward(Tape& tape, ParamStore& store, const std::vector<DenseMatrix>& steps,
                          std::uint64_t dropout_seed) const {
  require(steps.size() == cfg_.n_layers + 1, "decoupled net: expected " + std::to_string(cfg_.n_layers + 1) +
                                                 " propagated inputs, got " + std::to_string(steps.size()));
  std::vector<Var> outs;
  for (Index i = 0; i < steps.size(); ++i) {
    require(steps[i].cols() == input_dim_, "decoupled net: input width mismatch");
    outs.push_back(steps_[i].forward(tape, store, tape.constant(steps[i]), cfg_.dropout, mix_seed(dropout_seed, i)));
  }
  return tape.scalar_mix(tape.param(store, param_name("readout.w")), outs);
}

// ---------------------------------------------------------------------------

GradCheckReport check_network_gradient(Index n_cells, Index n_features, Index n_layers, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> weight(0.2, 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<SparseMatrix::Triplet> t;
  for (Index c = 0; c < n_cells; ++c) {
    t.push_back({c, c % n_features, weight(rng)});
    for (Index f = 0; f < n_features; ++f)
      if (f != c % n_features && std::bernoulli_distribution(0.5)(rng)) t.push_back({c, f, weight(rng)});
  }
  const SparseMatrix m = SparseMatrix::from_triplets(n_cells, n_features, std::move(t));

  ConvConfig cfg;
  cfg.n_layers = n_layers;
  cfg.hidden_dim = 4;
  cfg.dropout = 0.2;
  cfg.use_pathway_channel = n_features >= 3;
  cfg.learnable_alpha = true;
  cfg.aggregation = AggregationNorm::PostGroupNorm;
  CellFeatureGraph g = build_bipartite(m, edge_normalization_for(cfg.aggregation));
  if (cfg.use_pathway_channel) {
    GeneSetCollection sets = {{"toy", {}}};
    for (Index f = 0; f < n_features; ++f) sets[0].members.push_back(f);
    g = augment_with_pathways(g, sets, m);
    cfg.use_pathway_channel = g.has_pathways();
  }

  ParamStore store;
  const GraphConvNet net("net.", cfg, g, init_embeddings(g, FeatureInit::OneHotIdentity), store, seed);
  register_linear(store, "head", cfg.hidden_dim, 3, seed + 1);
  // Random biases keep ReLU inputs away from the kink at zero.
  for (const auto& name : store.names())
    for (double& v : store.at(name).value.values()) v += 0.3 * normal(rng);
  DenseMatrix target(n_cells, 3);
  for (double& v : target.values()) v = normal(rng);
  const std::uint64_t dropout_seed = rng();

  return gradient_check(store, [&](Tape& tape) {
    const Var h = net.forward(tape, store, dropout_seed);
    return tape.rmse(linear(tape, store, "head", h), tape.constant(target));
  });
}

}  // namespace cellgraph
