#include "cellgraph/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>

#include "cellgraph/error.hpp"

namespace cellgraph {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) fail("config: " + key + " expects a number, got '" + value + "'");
  return out;
}

Index parse_count(const std::string& key, const std::string& value) {
  const auto v = parse_number<long long>(key, value);
  if (v < 0) fail("config: " + key + " must be non-negative");
  return static_cast<Index>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail("config: " + key + " expects true or false, got '" + value + "'");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <class T>
Setter real(T RunConfig::*section, double T::*field) {
  return [=](RunConfig& c, const std::string& k, const std::string& v) { c.*section.*field = parse_number<double>(k, v); };
}
template <class T>
Setter count(T RunConfig::*section, Index T::*field) {
  return [=](RunConfig& c, const std::string& k, const std::string& v) { c.*section.*field = parse_count(k, v); };
}
template <class T>
Setter flag(T RunConfig::*section, bool T::*field) {
  return [=](RunConfig& c, const std::string& k, const std::string& v) { c.*section.*field = parse_bool(k, v); };
}
Setter text(std::string RunConfig::*field) {
  return [=](RunConfig& c, const std::string&, const std::string& v) { c.*field = v; };
}
Setter top_count(Index RunConfig::*field) {
  return [=](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_count(k, v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["task"] = [](RunConfig& c, const std::string&, const std::string& v) { c.task = parse_task(v); };
    t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.seed = parse_number<std::uint64_t>(k, v);
    };
    t["data"] = text(&RunConfig::data_dir);
    t["out"] = text(&RunConfig::out_dir);

    t["conv.n_layers"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.n_layers = parse_count(k, v);
    };
    t["conv.hidden_dim"] = count(&RunConfig::conv, &ConvConfig::hidden_dim);
    t["conv.residual"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v == "initial") c.conv.residual = ResidualMode::InitialResidual;
      else if (v == "skip") c.conv.residual = ResidualMode::SkipConnection;
      else fail("config: " + k + " expects initial or skip");
    };
    t["conv.aggregation"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v == "group_norm") c.conv.aggregation = AggregationNorm::PostGroupNorm;
      else if (v == "symmetric") c.conv.aggregation = AggregationNorm::EdgeSymmetric;
      else if (v == "min_max") c.conv.aggregation = AggregationNorm::MinMaxEdges;
      else fail("config: " + k + " expects group_norm, symmetric or min_max");
    };
    t["conv.alpha"] = real(&RunConfig::conv, &ConvConfig::alpha);
    t["conv.learnable_alpha"] = flag(&RunConfig::conv, &ConvConfig::learnable_alpha);
    t["conv.pathway"] = flag(&RunConfig::conv, &ConvConfig::use_pathway_channel);
    t["conv.dropout"] = real(&RunConfig::conv, &ConvConfig::dropout);
    t["conv.groups"] = count(&RunConfig::conv, &ConvConfig::group_norm_groups);

    t["train.split"] = real(&RunConfig::train, &TrainProtocol::split_fraction);
    t["train.patience"] = count(&RunConfig::train, &TrainProtocol::patience);
    t["train.max_epochs"] = count(&RunConfig::train, &TrainProtocol::max_epochs);
    t["train.lr"] = real(&RunConfig::train, &TrainProtocol::lr);
    t["train.lr_decay_rate"] = real(&RunConfig::train, &TrainProtocol::lr_decay_rate);
    t["train.lr_decay_every"] = count(&RunConfig::train, &TrainProtocol::lr_decay_every);
    t["train.weight_decay"] = real(&RunConfig::train, &TrainProtocol::weight_decay);
    t["train.transductive"] = flag(&RunConfig::train, &TrainProtocol::transductive);

    t["predict.source"] = top_count(&RunConfig::predict_source);
    t["predict.baseline_rank"] = top_count(&RunConfig::baseline_rank);
    t["predict.gene_sets"] = text(&RunConfig::gene_sets);

    t["match.lsi_rank"] = count(&RunConfig::match, &MatchConfig::lsi_rank);
    t["match.aux_weight"] = real(&RunConfig::match, &MatchConfig::aux_weight);
    t["match.use_aux"] = flag(&RunConfig::match, &MatchConfig::use_aux);
    t["match.percentile"] = real(&RunConfig::match, &MatchConfig::percentile);
    t["match.temperature"] = real(&RunConfig::match, &MatchConfig::temperature);
    t["match.batch_size"] = count(&RunConfig::match, &MatchConfig::batch_size);

    t["embed.lsi_rank"] = count(&RunConfig::embed, &EmbedConfig::lsi_rank);
    t["embed.beta"] = real(&RunConfig::embed, &EmbedConfig::beta);
    t["embed.baseline_rank"] = top_count(&RunConfig::embed_baseline_rank);

    t["metric.k"] = top_count(&RunConfig::metric_k);

    t["synth.cells"] = count(&RunConfig::synth, &SynthParams::n_cells);
    t["synth.train_cells"] = count(&RunConfig::synth, &SynthParams::train_cells);
    t["synth.k1"] = count(&RunConfig::synth, &SynthParams::k1);
    t["synth.k2"] = count(&RunConfig::synth, &SynthParams::k2);
    t["synth.types"] = count(&RunConfig::synth, &SynthParams::n_types);
    t["synth.batches"] = count(&RunConfig::synth, &SynthParams::n_batches);
    t["synth.latent_dim"] = count(&RunConfig::synth, &SynthParams::latent_dim);
    t["synth.noise"] = real(&RunConfig::synth, &SynthParams::noise);
    t["synth.dropout"] = real(&RunConfig::synth, &SynthParams::dropout);
    t["synth.type_separation"] = real(&RunConfig::synth, &SynthParams::type_separation);
    t["synth.batch_effect"] = real(&RunConfig::synth, &SynthParams::batch_effect);

    t["eval.embedding"] = text(&RunConfig::embedding);
    t["eval.labels"] = text(&RunConfig::labels);
    t["eval.batches"] = text(&RunConfig::batches);
    t["eval.cc_scores"] = text(&RunConfig::cc_scores);
    t["eval.pre_embedding"] = text(&RunConfig::pre_embedding);
    t["eval.pseudotime"] = text(&RunConfig::pseudotime);
    return t;
  }();
  return table;
}

}  // namespace

Task parse_task(const std::string& name) {
  if (name == "predict") return Task::Predict;
  if (name == "match") return Task::Match;
  if (name == "embed") return Task::Embed;
  if (name == "eval") return Task::Eval;
  if (name == "synth") return Task::Synth;
  if (name == "gradcheck") return Task::GradCheck;
  fail("unknown task '" + name + "'");
}

std::string task_name(Task task) {
  switch (task) {
    case Task::Predict: return "predict";
    case Task::Match: return "match";
    case Task::Embed: return "embed";
    case Task::Eval: return "eval";
    case Task::Synth: return "synth";
    case Task::GradCheck: return "gradcheck";
  }
  return "unknown";
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) fail("config: unknown key '" + key + "'");
  it->second(*this, key, trim(value));
}

void RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config " + path);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(path + ":" + std::to_string(n) + ": expected key = value");
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const Error& e) {
      fail(e.kind(), path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

ConvConfig RunConfig::conv_for(Task t) const {
  ConvConfig c = conv;
  c.decoupled = t == Task::Match || t == Task::Embed;
  const Index fallback = t == Task::Match ? kMatchLayers : t == Task::Embed ? kEmbedLayers : kPredictLayers;
  c.n_layers = n_layers.value_or(fallback);
  return c;
}

TrainProtocol RunConfig::protocol() const {
  TrainProtocol p = train;
  p.seed = seed;
  return p;
}

MatchConfig RunConfig::match_config() const {
  MatchConfig m = match;
  m.conv = conv_for(Task::Match);
  return m;
}

EmbedConfig RunConfig::embed_config() const {
  EmbedConfig e = embed;
  e.conv = conv_for(Task::Embed);
  return e;
}

void RunConfig::validate() const {
  protocol().validate();
  require(metric_k >= 1, "config: metric.k must be positive");
  switch (task) {
    case Task::Predict:
      conv_for(task).validate();
      require(predict_source == 1 || predict_source == 2, "config: predict.source must be 1 or 2");
      require(baseline_rank >= 1, "config: predict.baseline_rank must be positive");
      require(!data_dir.empty(), "config: predict needs a data directory");
      break;
    case Task::Match:
      match_config().validate();
      require(!data_dir.empty(), "config: match needs a data directory");
      break;
    case Task::Embed:
      embed_config().validate();
      require(embed_baseline_rank >= 1, "config: embed.baseline_rank must be positive");
      require(!data_dir.empty(), "config: embed needs a data directory");
      break;
    case Task::Eval:
      require(!embedding.empty() && !labels.empty() && !batches.empty(),
              "config: eval needs an embedding, labels and batches");
      break;
    case Task::Synth: {
      SynthParams p = synth;
      p.seed = seed;
      p.validate();
      break;
    }
    case Task::GradCheck:
      break;
  }
  // Checked for every task so a bad value never lingers in a shared config file.
  conv.validate();
  require(match.percentile >= 0.0 && match.percentile < 100.0, "config: match.percentile must lie in [0,100)");
}

}  // namespace cellgraph
