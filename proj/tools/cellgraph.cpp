// Command-line front end. Everything goes through the C API.
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "cellgraph/cellgraph.h"

namespace {

struct Flag {
  std::string key;
  std::string value;
};

// Settings named by flags, applied after the config file so they take precedence.
struct Overrides {
  std::string config_file;
  std::vector<std::string> sets;  // key=value
  std::vector<Flag> flags;
};

void add_flag(CLI::App* app, Overrides& o, const std::string& name, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(
      name, [&o, key](const std::string& v) { o.flags.push_back({key, v}); }, help);
}

cg_status apply(cg_config* cfg, const std::string& task, const Overrides& o) {
  cg_status s = cg_config_set(cfg, "task", task.c_str());
  if (s == CG_OK && !o.config_file.empty()) s = cg_config_load(cfg, o.config_file.c_str());
  for (const auto& kv : o.sets) {
    if (s != CG_OK) break;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      return CG_ERR_VALIDATION;
    }
    s = cg_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
  }
  for (const auto& f : o.flags) {
    if (s != CG_OK) break;
    s = cg_config_set(cfg, f.key.c_str(), f.value.c_str());
  }
  return s;
}

std::string key_list() {
  std::string out = "config keys:";
  for (size_t i = 0; i < cg_config_key_count(); ++i) out += std::string(i % 4 == 0 ? "\n  " : "  ") + cg_config_key(i);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell-feature graph networks for multimodal single-cell data"};
  app.footer(key_list());
  app.require_subcommand(1);
  Overrides o;

  auto common = [&](CLI::App* sub, bool data) {
    sub->add_option("--config", o.config_file, "config file of key = value lines");
    sub->add_option("--set", o.sets, "key=value setting (repeatable)");
    add_flag(sub, o, "--seed", "seed", "random seed");
    add_flag(sub, o, "--out", "out", "output directory");
    if (data) add_flag(sub, o, "--data", "data", "data set directory");
  };

  CLI::App* predict = app.add_subcommand("predict", "predict one modality from the other");
  common(predict, true);
  add_flag(predict, o, "--source", "predict.source", "input modality, 1 or 2");
  add_flag(predict, o, "--gene-sets", "predict.gene_sets", "pathway file for the source modality");
  add_flag(predict, o, "--layers", "conv.n_layers", "graph convolution layers");

  CLI::App* match = app.add_subcommand("match", "match cells across two modalities");
  common(match, true);
  add_flag(match, o, "--layers", "conv.n_layers", "propagation steps");
  add_flag(match, o, "--percentile", "match.percentile", "score filter percentile");

  CLI::App* embed = app.add_subcommand("embed", "joint embedding of two modalities");
  common(embed, true);
  add_flag(embed, o, "--layers", "conv.n_layers", "propagation steps");

  CLI::App* eval = app.add_subcommand("eval", "score an embedding with the metric suite");
  common(eval, false);
  add_flag(eval, o, "--embedding", "eval.embedding", "embedding matrix (.mtx)");
  add_flag(eval, o, "--labels", "eval.labels", "cell-type labels");
  add_flag(eval, o, "--batches", "eval.batches", "batch labels");
  add_flag(eval, o, "--cc-scores", "eval.cc_scores", "cell-cycle score per cell");
  add_flag(eval, o, "--pre-embedding", "eval.pre_embedding", "embedding before integration (.mtx)");
  add_flag(eval, o, "--pseudotime", "eval.pseudotime", "ground-truth pseudotime per cell");
  add_flag(eval, o, "--k", "metric.k", "neighbours in metric graphs");

  CLI::App* synth = app.add_subcommand("synth", "write a synthetic paired data set");
  common(synth, false);
  add_flag(synth, o, "--cells", "synth.cells", "test cells");
  add_flag(synth, o, "--train-cells", "synth.train_cells", "training cells (default 4x test cells)");
  add_flag(synth, o, "--types", "synth.types", "cell types");
  add_flag(synth, o, "--noise", "synth.noise", "noise level");
  add_flag(synth, o, "--dropout", "synth.dropout", "dropout rate");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  common(gradcheck, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n\n%s", e.what(), app.help().c_str());
    return CG_ERR_VALIDATION;
  }

  const std::string task = app.get_subcommands().front()->get_name();
  cg_config* cfg = nullptr;
  if (cg_config_create(&cfg) != CG_OK) {
    std::fprintf(stderr, "error: %s\n", cg_last_error());
    return CG_ERR_RUNTIME;
  }
  cg_status s = apply(cfg, task, o);
  if (s == CG_OK) s = cg_run(cfg);
  if (s != CG_OK) std::fprintf(stderr, "error: %s\n", cg_last_error());
  cg_config_destroy(cfg);
  return s;
}
