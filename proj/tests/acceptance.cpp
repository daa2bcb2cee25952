// Acceptance suite: one PASS/FAIL line per criterion. argv[1] is the CLI binary.
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cellgraph/assignment.hpp"
#include "cellgraph/autodiff.hpp"
#include "cellgraph/convnet.hpp"
#include "cellgraph/graph.hpp"
#include "cellgraph/metrics.hpp"
#include "cellgraph/pipeline.hpp"
#include "cellgraph/tasks.hpp"

using namespace cellgraph;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

DenseMatrix uniform(Index r, Index c, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  DenseMatrix m(r, c);
  for (double& v : m.values()) v = u(rng);
  return m;
}

// Best total over injective maps of the rows (rows <= cols), summed in row order.
double brute_force(const DenseMatrix& p) {
  std::vector<Index> perm(p.cols());
  std::iota(perm.begin(), perm.end(), 0);
  double best = -INFINITY;
  do {
    double total = 0.0;
    for (Index i = 0; i < p.rows(); ++i) total += p(i, perm[i]);
    best = std::max(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Verdict gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string where;
  Index ops = 0;
  for (const OpKind op : differentiable_ops()) {
    ++ops;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const GradCheckReport r = check_op_gradient(op, seed);
      if (r.max_relative_error > worst) worst = r.max_relative_error, where = std::string(op_name(op));
    }
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const GradCheckReport r = check_network_gradient(6, 4, 2, seed);
    if (r.max_relative_error > worst) worst = r.max_relative_error, where = "network:" + r.worst_param;
  }
  const double t = seconds_since(t0);
  return {worst < 1e-4 && t < 10.0,
          fmt("%lld ops and the 2-layer network, max relative error %.2e (%s), %.2f s", static_cast<long long>(ops),
              worst, where.c_str(), t)};
}

Verdict assignment_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  Index mismatches = 0;
  for (int i = 0; i < 1200; ++i) {
    const DenseMatrix p = i < 1000 ? uniform(5, 5, -1.0, 1.0, rng) : uniform(4, 7, -1.0, 1.0, rng);
    if (solve_assignment(AssignmentProblem::dense(p)).total != brute_force(p)) ++mismatches;
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t < 5.0,
          fmt("%lld of 1200 instances differ from brute force, %.2f s", static_cast<long long>(mismatches), t)};
}

Verdict probability_normalization() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<Index> size(1, 200);
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const Index r = trial == 0 ? 200 : size(rng), c = trial == 0 ? 200 : size(rng);
    const auto [pr, pc] = row_col_probabilities(uniform(r, c, -20.0, 20.0, rng));
    for (Index i = 0; i < r; ++i) {
      double s = 0.0;
      for (Index j = 0; j < c; ++j) s += pr(i, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
    for (Index j = 0; j < c; ++j) {
      double s = 0.0;
      for (Index i = 0; i < r; ++i) s += pc(i, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  return {worst < 1e-6, fmt("30 matrices up to 200x200, max |sum - 1| = %.2e", worst)};
}

Verdict dual_symmetry() {
  double worst = 0.0;
  Index bad = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Index n = 30;
    const DenseMatrix h1 = uniform(n, 6, -1.0, 1.0, rng), h2 = uniform(n, 6, -1.0, 1.0, rng);
    LabelArray b(n);
    for (Index i = 0; i < n; ++i) b[i] = i % 3;
    std::vector<Index> truth(n);
    std::iota(truth.begin(), truth.end(), 0);
    // Shuffle within batches so the truth respects batch membership.
    for (Label g = 0; g < 3; ++g) {
      std::vector<Index> idx;
      for (Index i = 0; i < n; ++i)
        if (b[i] == g) idx.push_back(i);
      std::vector<Index> shuffled = idx;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      for (size_t k = 0; k < idx.size(); ++k) truth[idx[k]] = shuffled[k];
    }
    std::vector<Index> inverse(n);
    for (Index i = 0; i < n; ++i) inverse[truth[i]] = i;
    const MatchOutput a = match_inference(h1, h2, b, b, 80.0, 0.1);
    const MatchOutput d = match_inference(h2, h1, b, b, 80.0, 0.1);
    std::vector<std::pair<Index, Index>> flipped;
    for (const auto& [l, r] : d.assignment) flipped.push_back({r, l});
    std::sort(flipped.begin(), flipped.end());
    if (flipped != a.assignment) ++bad;
    const MatchScores sa = score_matching(a, truth), sd = score_matching(d, inverse);
    worst = std::max({worst, std::abs(sa.softmax_score - sd.softmax_score),
                      std::abs(sa.assignment_score - sd.assignment_score)});
  }
  return {bad == 0 && worst < 1e-9,
          fmt("%lld of 20 assignments not transposed, max score difference %.2e", static_cast<long long>(bad), worst)};
}

// Fixture shared by the matching criteria.
const Dataset& matching_fixture() {
  static const Dataset d = [] {
    SynthParams p;
    p.n_cells = 500;
    p.noise = 0.1;
    p.dropout = 0.3;
    p.seed = 7;
    return generate_synthetic(p);
  }();
  return d;
}

struct MatchRun {
  double score = 0.0;
  double accuracy = 0.0;
  double uniform = 0.0;
  double seconds = 0.0;
};

MatchRun run_matching(std::uint64_t seed, const std::function<void(RunConfig&)>& tweak = {}) {
  RunConfig cfg;
  cfg.task = Task::Match;
  cfg.seed = seed;
  cfg.data_dir = "(in memory)";
  if (tweak) tweak(cfg);
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const MatchOutcome o = run_match(matching_fixture(), cfg);
  return {o.report.get("competition_score"), o.report.get("accuracy"), o.report.get("uniform_score"),
          seconds_since(t0)};
}

MatchRun& full_run(std::uint64_t seed) {
  static std::vector<MatchRun> runs(4);
  static std::vector<bool> done(4, false);
  if (!done[seed]) runs[seed] = run_matching(seed), done[seed] = true;
  return runs[seed];
}

Verdict matching_skill() {
  const MatchRun& r = full_run(1);
  return {r.accuracy >= 0.30 && r.score >= 50.0 * r.uniform && r.seconds < 300.0,
          fmt("accuracy %.3f (need 0.30), competition score %.2f vs uniform %.2f (need 50x), %.0f s", r.accuracy,
              r.score, r.uniform, r.seconds)};
}

Verdict ablation_direction() {
  int prop_wins = 0, aux_wins = 0;
  std::string rows;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const double full = full_run(seed).score;
    const double no_prop = run_matching(seed, [](RunConfig& c) { c.set("conv.n_layers", "0"); }).score;
    const double no_aux = run_matching(seed, [](RunConfig& c) { c.set("match.use_aux", "false"); }).score;
    prop_wins += full > no_prop;
    aux_wins += full > no_aux;
    rows += fmt(" seed %d: full %.2f, no-propagation %.2f, no-aux %.2f;", static_cast<int>(seed), full, no_prop,
                no_aux);
  }
  return {prop_wins >= 2 && aux_wins >= 2,
          fmt("full beats no-propagation on %d/3 and no-aux on %d/3 seeds;", prop_wins, aux_wins) + rows};
}

Verdict prediction_skill() {
  const auto t0 = std::chrono::steady_clock::now();
  int passed = 0;
  std::string rows;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    SynthParams p;
    p.n_cells = 400;
    p.seed = seed;
    RunConfig cfg;
    cfg.task = Task::Predict;
    cfg.seed = seed;
    cfg.set("train.max_epochs", "150");
    cfg.data_dir = "(in memory)";
    cfg.validate();
    const PredictOutcome o = run_predict(generate_synthetic(p), cfg);
    const double gnn = o.report.get("validation_rmse"), base = o.report.get("baseline_validation_rmse");
    passed += gnn <= 1.05 * base;
    rows += fmt(" seed %d: %.4f vs %.4f;", static_cast<int>(seed), gnn, base);
  }
  const double t = seconds_since(t0);
  return {passed == 3 && t < 300.0,
          fmt("GNN vs baseline validation RMSE within 5%% on %d/3 seeds, %.0f s;", passed, t) + rows};
}

Verdict embedding_skill() {
  int passed = 0;
  std::string rows;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    SynthParams p;
    p.n_cells = 400;
    p.n_types = 3;
    p.type_separation = 1.5;
    p.batch_effect = 2.0;
    p.seed = seed;
    RunConfig cfg;
    cfg.task = Task::Embed;
    cfg.seed = seed;
    cfg.data_dir = "(in memory)";
    cfg.validate();
    const EmbedOutcome o = run_embed(generate_synthetic(p), cfg);
    const double gain = o.metrics.nmi - o.baseline.nmi;
    passed += gain >= 0.05;
    rows += fmt(" seed %d: NMI %.3f vs PCA %.3f;", static_cast<int>(seed), o.metrics.nmi, o.baseline.nmi);
  }
  return {passed == 3, fmt("NMI gain >= 0.05 on %d/3 seeds;", passed) + rows};
}

Verdict metric_identities() {
  std::vector<std::string> failed;
  auto expect = [&](const char* name, double got, double want) {
    if (!(std::abs(got - want) <= 1e-9)) failed.push_back(fmt("%s=%.12g", name, got));
  };
  const LabelArray labels{0, 0, 1, 1, 2, 2, 2, 0};
  expect("nmi", nmi(labels, labels), 1.0);
  expect("asw(-1)", unit_asw(-1.0), 0.0);
  expect("asw(+1)", unit_asw(1.0), 1.0);
  const std::vector<double> t{0.1, 0.5, 0.9, 1.7, 2.0, 3.5};
  std::vector<double> reversed(t.rbegin(), t.rend());
  expect("trajectory(reversed)", trajectory_conservation(t, reversed), 0.0);
  // Two tight, distant groups: each type's kNN subgraph is connected.
  DenseMatrix pts(20, 2);
  LabelArray types(20);
  for (Index i = 0; i < 20; ++i) {
    types[i] = i < 10 ? 0 : 1;
    pts(i, 0) = (i < 10 ? 0.0 : 100.0) + 0.01 * static_cast<double>(i % 10);
    pts(i, 1) = 0.02 * static_cast<double>(i % 3);
  }
  expect("graph_connectivity", graph_connectivity(pts, types, 5), 1.0);
  expect("aggregate(ones)", aggregate(1, 1, 1, 1, 1, 1).overall, 1.0);
  expect("aggregate(bio=1,batch=0)", aggregate(1, 1, 1, 1, 0, 0).overall, 0.6);
  std::string detail = failed.empty() ? "all 8 identities hold" : "failed:";
  for (const auto& f : failed) detail += " " + f;
  return {failed.empty(), detail};
}

Verdict early_stopping() {
  // Unimprovable metric stream.
  EarlyStopping stop(5);
  Index halted = -1;
  for (Index epoch = 0; epoch < 100; ++epoch) {
    stop.update(epoch, 1.0);
    if (stop.should_stop(epoch)) {
      halted = epoch;
      break;
    }
  }
  const bool stream_ok = halted >= 0 && halted <= stop.best_epoch() + 6;
  // Constant target: validation error bottoms out quickly.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.5, 3.0), coin(0.0, 1.0);
  std::vector<SparseMatrix::Triplet> trips;
  for (Index i = 0; i < 120; ++i)
    for (Index j = 0; j < 15; ++j)
      if (coin(rng) < 0.4) trips.push_back({i, j, u(rng)});
  const SparseMatrix src = SparseMatrix::from_triplets(120, 15, trips);
  ConvConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_dim = 8;
  cfg.dropout = 0.0;
  TrainProtocol p;
  p.patience = 5;
  p.max_epochs = 1000;
  p.seed = 2;
  const PredictionResult r =
      train_prediction(build_bipartite(src, edge_normalization_for(cfg.aggregation)), DenseMatrix(120, 1, 1.0), cfg, p);
  const bool train_ok = r.epochs_run < p.max_epochs && r.epochs_run <= r.best_epoch + p.patience + 1;
  return {stream_ok && train_ok,
          fmt("constant stream halts at epoch %lld (best %lld); constant-target training ran %lld epochs, best %lld",
              static_cast<long long>(halted), static_cast<long long>(stop.best_epoch()),
              static_cast<long long>(r.epochs_run), static_cast<long long>(r.best_epoch))};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every file written under two output directories must match byte for byte.
bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a)) files.push_back(e.path().filename());
  if (files.empty()) return why = "no output in " + a.string(), false;
  for (const auto& f : files)
    if (!fs::exists(b / f) || slurp(a / f) != slurp(b / f)) return why = f.string() + " differs", false;
  return std::distance(fs::directory_iterator(b), fs::directory_iterator{}) == static_cast<long>(files.size());
}

Verdict reproducibility(const std::string& cli) {
  const fs::path root = fs::temp_directory_path() / fmt("cellgraph_acceptance_%d", static_cast<int>(getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  auto run = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  const std::string r = root.string() + "/";
  const std::string data = r + "data";
  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "synth --cells 60 --types 3 --seed 4"},
      {"predict", "predict --data " + data + " --seed 2 --set train.max_epochs=15"},
      {"match", "match --data " + data + " --seed 2 --set train.max_epochs=15"},
      {"embed", "embed --data " + data + " --seed 2 --set train.max_epochs=15"},
      {"eval", "eval --embedding " + r + "embed_a/embedding.mtx --labels " + data + "/types.txt --batches " + data +
                   "/batches.txt --pseudotime " + data + "/pseudotime.txt --seed 2"},
      {"gradcheck", "gradcheck --seed 2"},
  };
  std::string detail;
  int ok = 0;
  for (const auto& [name, args] : commands) {
    const std::string a = r + name + "_a", b = r + name + "_b";
    const int ra = run(args + " --out " + a), rb = run(args + " --out " + b);
    if (name == "synth") fs::copy(a, data, fs::copy_options::recursive);
    std::string why;
    if (ra != 0 || rb != 0)
      why = fmt("exit %d/%d", ra, rb);
    else if (same_tree(a, b, why))
      ++ok;
    if (!why.empty()) detail += " " + name + ": " + why + ";";
  }
  fs::remove_all(root);
  return {ok == static_cast<int>(commands.size()),
          fmt("%d/%d subcommands byte-identical across two runs", ok, static_cast<int>(commands.size())) + detail};
}

Verdict edge_normalization() {
  // Star: one cell joined to five features, plus a second cell on one of them.
  std::vector<SparseMatrix::Triplet> trips;
  for (Index j = 0; j < 5; ++j) trips.push_back({0, j, 1.0});
  trips.push_back({1, 2, 1.0});
  const SparseMatrix e = SparseMatrix::from_triplets(2, 5, trips);
  const SparseMatrix n = symmetric_edge_normalize(e);
  const std::vector<double> cell_deg{5, 1}, feat_deg{1, 1, 2, 1, 1};
  Index bad = 0, checked = 0;
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 5; ++j) {
      const double want = e.at(i, j) == 0.0 ? 0.0 : 1.0 / std::sqrt(cell_deg[i] * feat_deg[j]);
      checked += e.at(i, j) != 0.0;
      bad += n.at(i, j) != want;
    }
  return {bad == 0, fmt("%lld of %lld edges differ from 1/sqrt(deg_u deg_v)", static_cast<long long>(bad),
                        static_cast<long long>(checked))};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <cellgraph binary>\n");
    return 2;
  }
  const std::string cli = argv[1];
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient integrity", gradient_integrity},
      {"assignment exactness", assignment_exactness},
      {"probability normalization", probability_normalization},
      {"dual symmetry", dual_symmetry},
      {"synthetic matching skill", matching_skill},
      {"ablation direction", ablation_direction},
      {"prediction skill", prediction_skill},
      {"joint-embedding skill", embedding_skill},
      {"metric identities", metric_identities},
      {"early stopping", early_stopping},
      {"reproducibility", [&] { return reproducibility(cli); }},
      {"edge normalization closed form", edge_normalization},
  };
  int failures = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s %2zu %s: %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
