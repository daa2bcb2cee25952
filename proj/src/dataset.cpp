#include "cellgraph/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

#include "cellgraph/error.hpp"
#include "cellgraph/seed.hpp"

namespace cellgraph {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path);
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  return out;
}

[[noreturn]] void parse_error(const std::string& path, Index line, const std::string& what) {
  fail(path + ":" + std::to_string(line) + ": " + what);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
bool parse_number(const std::string& token, T& out) {
  const char* b = token.data();
  const char* e = b + token.size();
  if (b != e && *b == '+') ++b;
  const auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  for (std::string t; ss >> t;) out.push_back(t);
  return out;
}

struct MtxHeader {
  bool coordinate = true;
};

MtxHeader read_header(const std::string& path, const std::string& line) {
  auto tok = split_ws(line);
  for (auto& t : tok) std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (tok.size() != 5 || tok[0] != "%%matrixmarket" || tok[1] != "matrix")
    parse_error(path, 1, "malformed header (expected %%MatrixMarket matrix coordinate real general)");
  if (tok[2] != "coordinate" && tok[2] != "array") parse_error(path, 1, "unsupported storage '" + tok[2] + "'");
  if (tok[3] != "real" && tok[3] != "integer") parse_error(path, 1, "unsupported field '" + tok[3] + "'");
  if (tok[4] != "general") parse_error(path, 1, "unsupported symmetry '" + tok[4] + "'");
  return {tok[2] == "coordinate"};
}

struct MtxData {
  Index rows = 0, cols = 0;
  std::vector<SparseMatrix::Triplet> triplets;
};

MtxData read_mtx(const std::string& path) {
  std::ifstream in = open_in(path);
  std::string line;
  Index lineno = 0;
  if (!std::getline(in, line)) parse_error(path, 1, "empty file");
  ++lineno;
  const MtxHeader header = read_header(path, line);
  MtxData d;
  bool have_size = false;
  Index expected = 0, seen = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '%') continue;
    const auto tok = split_ws(t);
    if (!have_size) {
      const Index want = header.coordinate ? 3 : 2;
      if (tok.size() != want) parse_error(path, lineno, "malformed size line");
      if (!parse_number(tok[0], d.rows) || !parse_number(tok[1], d.cols))
        parse_error(path, lineno, "non-numeric size");
      if (header.coordinate) {
        if (!parse_number(tok[2], expected)) parse_error(path, lineno, "non-numeric entry count");
      } else {
        expected = d.rows * d.cols;
      }
      have_size = true;
      continue;
    }
    if (seen == expected) parse_error(path, lineno, "more entries than declared");
    if (header.coordinate) {
      Index r = 0, c = 0;
      double v = 0.0;
      if (tok.size() != 3) parse_error(path, lineno, "expected 'row col value'");
      if (!parse_number(tok[0], r) || !parse_number(tok[1], c)) parse_error(path, lineno, "non-numeric index");
      if (!parse_number(tok[2], v)) parse_error(path, lineno, "non-numeric value '" + tok[2] + "'");
      if (r < 1 || r > d.rows || c < 1 || c > d.cols) parse_error(path, lineno, "index out of range");
      d.triplets.push_back({r - 1, c - 1, v});
    } else {
      double v = 0.0;
      if (tok.size() != 1 || !parse_number(tok[0], v)) parse_error(path, lineno, "non-numeric value");
      // Array storage is column-major.
      d.triplets.push_back({seen % d.rows, seen / d.rows, v});
    }
    ++seen;
  }
  if (!have_size) parse_error(path, lineno, "missing size line");
  if (seen != expected)
    parse_error(path, lineno, "declared " + std::to_string(expected) + " entries, found " + std::to_string(seen));
  return d;
}

}  // namespace

SparseMatrix load_sparse_matrix(const std::string& path) {
  MtxData d = read_mtx(path);
  return SparseMatrix::from_triplets(d.rows, d.cols, std::move(d.triplets));
}

void write_sparse_matrix(const std::string& path, const SparseMatrix& m) {
  std::ofstream out = open_out(path);
  out << "%%MatrixMarket matrix coordinate real general\n";
  out << m.rows() << ' ' << m.cols() << ' ' << m.nnz() << '\n';
  for (Index r = 0; r < m.rows(); ++r) {
    const auto cols = m.row_cols(r);
    const auto vals = m.row_values(r);
    for (Index e = 0; e < cols.size(); ++e) out << r + 1 << ' ' << cols[e] + 1 << ' ' << format_double(vals[e]) << '\n';
  }
}

void write_dense_matrix(const std::string& path, const DenseMatrix& m) {
  std::ofstream out = open_out(path);
  out << "%%MatrixMarket matrix array real general\n";
  out << m.rows() << ' ' << m.cols() << '\n';
  for (Index c = 0; c < m.cols(); ++c)
    for (Index r = 0; r < m.rows(); ++r) out << format_double(m(r, c)) << '\n';
}

DenseMatrix load_dense_matrix(const std::string& path) {
  const MtxData d = read_mtx(path);
  DenseMatrix m(d.rows, d.cols);
  for (const auto& t : d.triplets) m(t.row, t.col) += t.value;
  return m;
}

std::vector<std::string> load_lines(const std::string& path) {
  std::ifstream in = open_in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(trim(line));
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out = open_out(path);
  for (const auto& l : lines) out << l << '\n';
}

LabelFile load_labels(const std::string& path) {
  const auto lines = load_lines(path);
  if (lines.empty()) fail(path + ": empty label file");
  LabelFile f;
  std::unordered_map<std::string, Label> ids;
  for (Index i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) parse_error(path, i + 1, "empty label");
    if (lines[i] == "NA") {
      f.labels.push_back(kUnlabeled);
      continue;
    }
    auto [it, fresh] = ids.try_emplace(lines[i], static_cast<Label>(f.names.size()));
    if (fresh) f.names.push_back(lines[i]);
    f.labels.push_back(it->second);
  }
  return f;
}

void write_labels(const std::string& path, const LabelArray& labels, const std::vector<std::string>& names) {
  std::vector<std::string> lines;
  for (const Label l : labels) {
    if (l == kUnlabeled) {
      lines.emplace_back("NA");
      continue;
    }
    require(l >= 0 && static_cast<Index>(l) < names.size(), "write_labels: label without a name");
    lines.push_back(names[static_cast<Index>(l)]);
  }
  write_lines(path, lines);
}

std::vector<double> load_values(const std::string& path) {
  const auto lines = load_lines(path);
  std::vector<double> v;
  for (Index i = 0; i < lines.size(); ++i) {
    double x = 0.0;
    if (!parse_number(lines[i], x)) parse_error(path, i + 1, "non-numeric value '" + lines[i] + "'");
    v.push_back(x);
  }
  return v;
}

void write_values(const std::string& path, const std::vector<double>& values) {
  std::vector<std::string> lines;
  for (const double v : values) lines.push_back(format_double(v));
  write_lines(path, lines);
}

GeneSetCollection load_gene_sets(const std::string& path, const std::vector<std::string>& feature_names) {
  std::unordered_map<std::string, Index> index;
  for (Index i = 0; i < feature_names.size(); ++i) index.emplace(feature_names[i], i);
  const auto lines = load_lines(path);
  GeneSetCollection sets;
  for (Index i = 0; i < lines.size(); ++i) {
    if (lines[i].empty() || lines[i][0] == '#') continue;
    const auto tab = lines[i].find('\t');
    if (tab == std::string::npos) parse_error(path, i + 1, "expected name<TAB>members");
    GeneSet set;
    set.name = trim(lines[i].substr(0, tab));
    std::istringstream members(lines[i].substr(tab + 1));
    for (std::string id; std::getline(members, id, ',');) {
      id = trim(id);
      if (id.empty()) continue;
      const auto it = index.find(id);
      if (it == index.end()) parse_error(path, i + 1, "unknown feature '" + id + "'");
      set.members.push_back(it->second);
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

// ---------------------------------------------------------------------------

std::vector<Index> Dataset::rows(bool test) const {
  std::vector<Index> out;
  for (Index i = 0; i < is_test.size(); ++i)
    if (static_cast<bool>(is_test[i]) == test) out.push_back(i);
  return out;
}

void Dataset::validate() const {
  const Index n = n_cells();
  require(n > 0, "dataset: no cells");
  require(modality_2.rows() == n, "dataset: modalities have different cell counts");
  require(batch_labels.size() == n, "dataset: batch labels do not cover every cell");
  require(is_test.size() == n, "dataset: split does not cover every cell");
  require(cell_types.empty() || cell_types.size() == n, "dataset: cell types do not cover every cell");
  require(cell_ids.empty() || cell_ids.size() == n, "dataset: cell id count mismatch");
  require(features_1.empty() || features_1.size() == modality_1.cols(), "dataset: feature name count mismatch (1)");
  require(features_2.empty() || features_2.size() == modality_2.cols(), "dataset: feature name count mismatch (2)");
  require(pseudotime.empty() || pseudotime.size() == n, "dataset: pseudotime length mismatch");
  require(cc_score.empty() || cc_score.size() == n, "dataset: cell-cycle score length mismatch");
  require(pairing.size() == n, "dataset: pairing does not cover every cell");
  std::vector<char> seen(n, 0);
  for (const Index j : pairing) {
    require(j < n && !seen[j], "dataset: pairing is not a bijection");
    seen[j] = 1;
  }
  for (const Label b : batch_labels) require(b >= 0, "dataset: every cell needs a batch label");
}

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  auto path = [&](const char* name) { return (root / name).string(); };
  auto exists = [&](const char* name) { return fs::exists(root / name); };
  Dataset d;
  d.modality_1 = load_sparse_matrix(path("mod1.mtx"));
  d.modality_2 = load_sparse_matrix(path("mod2.mtx"));
  const Index n = d.modality_1.rows();
  {
    auto f = load_labels(path("batches.txt"));
    d.batch_labels = std::move(f.labels);
    d.batch_names = std::move(f.names);
  }
  if (exists("types.txt")) {
    auto f = load_labels(path("types.txt"));
    d.cell_types = std::move(f.labels);
    d.type_names = std::move(f.names);
  }
  {
    const auto lines = load_lines(path("split.txt"));
    for (Index i = 0; i < lines.size(); ++i) {
      if (lines[i] != "train" && lines[i] != "test") parse_error(path("split.txt"), i + 1, "expected train or test");
      d.is_test.push_back(lines[i] == "test");
    }
  }
  if (exists("pairing.txt")) {
    const auto lines = load_lines(path("pairing.txt"));
    for (Index i = 0; i < lines.size(); ++i) {
      Index j = 0;
      if (!parse_number(lines[i], j)) parse_error(path("pairing.txt"), i + 1, "non-numeric row index");
      d.pairing.push_back(j);
    }
  } else {
    for (Index i = 0; i < n; ++i) d.pairing.push_back(i);
  }
  if (exists("pseudotime.txt")) d.pseudotime = load_values(path("pseudotime.txt"));
  if (exists("cc_score.txt")) d.cc_score = load_values(path("cc_score.txt"));
  if (exists("cells.txt")) d.cell_ids = load_lines(path("cells.txt"));
  if (exists("features1.txt")) d.features_1 = load_lines(path("features1.txt"));
  if (exists("features2.txt")) d.features_2 = load_lines(path("features2.txt"));
  d.validate();
  return d;
}

void save_dataset(const std::string& dir, const Dataset& d) {
  d.validate();
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) fail(ErrorKind::Io, "cannot create directory " + dir);
  auto path = [&](const char* name) { return (root / name).string(); };
  write_sparse_matrix(path("mod1.mtx"), d.modality_1);
  write_sparse_matrix(path("mod2.mtx"), d.modality_2);
  write_labels(path("batches.txt"), d.batch_labels, d.batch_names);
  if (!d.cell_types.empty()) write_labels(path("types.txt"), d.cell_types, d.type_names);
  std::vector<std::string> split, pairing;
  for (const char t : d.is_test) split.emplace_back(t ? "test" : "train");
  for (const Index j : d.pairing) pairing.push_back(std::to_string(j));
  write_lines(path("split.txt"), split);
  write_lines(path("pairing.txt"), pairing);
  if (!d.pseudotime.empty()) write_values(path("pseudotime.txt"), d.pseudotime);
  if (!d.cc_score.empty()) write_values(path("cc_score.txt"), d.cc_score);
  if (!d.cell_ids.empty()) write_lines(path("cells.txt"), d.cell_ids);
  if (!d.features_1.empty()) write_lines(path("features1.txt"), d.features_1);
  if (!d.features_2.empty()) write_lines(path("features2.txt"), d.features_2);
}

// ---------------------------------------------------------------------------

void SynthParams::validate() const {
  require(n_cells >= 1, "synth: n_cells must be positive");
  require(n_types >= 2, "synth: n_types must be at least 2");
  require(n_batches >= 1, "synth: n_batches must be positive");
  require(k1 >= 1 && k2 >= 1, "synth: feature counts must be positive");
  require(latent_dim >= 1, "synth: latent_dim must be positive");
  require(noise >= 0.0, "synth: noise must be non-negative");
  require(dropout >= 0.0 && dropout < 1.0, "synth: dropout must lie in [0,1)");
}

Dataset generate_synthetic(const SynthParams& p) {
  p.validate();
  const Index q = p.latent_dim;
  const Index n_train = p.train_cells == 0 ? 4 * p.n_cells : p.train_cells;
  const Index n = n_train + p.n_cells;
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> centers(p.n_types * q), offsets(p.n_batches * q);
  for (double& c : centers) c = p.type_separation * normal(rng);
  for (double& o : offsets) o = p.batch_effect * normal(rng);
  auto loading = [&](Index k, std::vector<double>& a, std::vector<double>& bias) {
    a.resize(q * k);
    bias.resize(k);
    for (double& v : a) v = normal(rng) / std::sqrt(static_cast<double>(q));
    for (double& v : bias) v = 1.0 + 0.5 * normal(rng);
  };
  std::vector<double> a1, b1, a2, b2;
  loading(p.k1, a1, b1);
  loading(p.k2, a2, b2);

  Dataset d;
  std::vector<double> z_bio(n * q), z(n * q);
  std::uniform_int_distribution<Index> pick_type(0, p.n_types - 1), pick_batch(0, p.n_batches - 1);
  for (Index i = 0; i < n; ++i) {
    const Index t = pick_type(rng), b = pick_batch(rng);
    d.cell_types.push_back(static_cast<Label>(t));
    d.batch_labels.push_back(static_cast<Label>(b));
    d.is_test.push_back(i >= n_train);
    double dist2 = 0.0;
    for (Index c = 0; c < q; ++c) {
      z_bio[i * q + c] = centers[t * q + c] + normal(rng);
      z[i * q + c] = z_bio[i * q + c] + offsets[b * q + c];
      const double dc = z_bio[i * q + c] - centers[c];
      dist2 += dc * dc;
    }
    d.pseudotime.push_back(std::sqrt(dist2));
    d.cc_score.push_back(z_bio[i * q + q - 1]);
  }

  std::bernoulli_distribution keep(1.0 - p.dropout);
  auto modality = [&](Index k, const std::vector<double>& a, const std::vector<double>& bias) {
    std::vector<SparseMatrix::Triplet> t;
    for (Index i = 0; i < n; ++i)
      for (Index f = 0; f < k; ++f) {
        double pre = bias[f] + p.noise * normal(rng);
        for (Index c = 0; c < q; ++c) pre += z[i * q + c] * a[c * k + f];
        const double v = pre > 30.0 ? pre : std::log1p(std::exp(pre));
        if (keep(rng)) t.push_back({i, f, v});
      }
    return SparseMatrix::from_triplets(n, k, std::move(t));
  };
  d.modality_1 = modality(p.k1, a1, b1);
  d.modality_2 = modality(p.k2, a2, b2);

  for (Index i = 0; i < n; ++i) {
    d.cell_ids.push_back("cell" + std::to_string(i));
    d.pairing.push_back(i);
  }
  for (Index f = 0; f < p.k1; ++f) d.features_1.push_back("m1f" + std::to_string(f));
  for (Index f = 0; f < p.k2; ++f) d.features_2.push_back("m2f" + std::to_string(f));
  for (Index b = 0; b < p.n_batches; ++b) d.batch_names.push_back("batch" + std::to_string(b));
  for (Index t = 0; t < p.n_types; ++t) d.type_names.push_back("type" + std::to_string(t));
  return d;
}

}  // namespace cellgraph
