#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cellgraph/convnet.hpp"
#include "cellgraph/dataset.hpp"
#include "cellgraph/metrics.hpp"
#include "cellgraph/tasks.hpp"

namespace cellgraph {

enum class Task { Predict, Match, Embed, Eval, Synth, GradCheck };

Task parse_task(const std::string& name);
std::string task_name(Task task);

// Flat `key = value` settings; module settings use dotted keys such as `conv.n_layers`.
struct RunConfig {
  Task task = Task::Synth;
  std::uint64_t seed = 0;
  std::string data_dir;
  std::string out_dir = ".";

  ConvConfig conv;                    // n_layers and decoupled are set per task
  std::optional<Index> n_layers;      // task default when unset
  TrainProtocol train;
  Index predict_source = 1;           // modality used as input; the other is the target
  Index baseline_rank = 16;
  std::string gene_sets;              // pathway file for the source modality
  MatchConfig match;
  EmbedConfig embed;
  Index embed_baseline_rank = 16;
  Index metric_k = kDefaultMetricK;
  SynthParams synth;

  std::string embedding;              // eval inputs
  std::string labels;
  std::string batches;
  std::string cc_scores;
  std::string pre_embedding;
  std::string pseudotime;

  // Throws a Validation error on an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  // Reads `key = value` lines; `#` starts a comment.
  void load(const std::string& path);
  void validate() const;

  ConvConfig conv_for(Task t) const;
  MatchConfig match_config() const;
  EmbedConfig embed_config() const;
  TrainProtocol protocol() const;
};

// Every key accepted by RunConfig::set.
std::vector<std::string> config_keys();

}  // namespace cellgraph
