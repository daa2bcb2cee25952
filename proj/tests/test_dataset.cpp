#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>

#include "cellgraph/dataset.hpp"
#include "cellgraph/error.hpp"
#include "cellgraph/tasks.hpp"
#include "support.hpp"

using namespace cellgraph;
using namespace cgtest;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cg_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name, const std::string& body = "") const {
    const std::string p = (path / name).string();
    if (!body.empty()) std::ofstream(p) << body;
    return p;
  }
};

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

const std::string kHeader = "%%MatrixMarket matrix coordinate real general\n";

}  // namespace

TEST_CASE("load_sparse_matrix") {
  TempDir dir;
  SUBCASE("single entry") {
    const SparseMatrix m = load_sparse_matrix(dir.file("a.mtx", kHeader + "2 2 1\n1 1 3.5\n"));
    CHECK(m.rows() == 2);
    CHECK(m.nnz() == 1);
    CHECK(m.at(0, 0) == 3.5);
  }
  SUBCASE("duplicates are summed") {
    CHECK(load_sparse_matrix(dir.file("a.mtx", kHeader + "1 1 2\n1 1 1\n1 1 1\n")).at(0, 0) == 2.0);
  }
  SUBCASE("comments after the header") {
    CHECK(load_sparse_matrix(dir.file("a.mtx", kHeader + "% note\n1 2 1\n1 2 4\n")).at(0, 1) == 4.0);
  }
  SUBCASE("round trip is bitwise") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1e3);
    DenseMatrix d(9, 7);
    for (double& v : d.values())
      if (rng() % 3 == 0) v = n(rng);
    const SparseMatrix m = SparseMatrix::from_dense(d);
    const std::string p = dir.file("r.mtx");
    write_sparse_matrix(p, m);
    const SparseMatrix back = load_sparse_matrix(p);
    CHECK(back.to_dense() == m.to_dense());
    const std::string q = dir.file("d.mtx");
    write_dense_matrix(q, d);
    CHECK(load_dense_matrix(q) == d);
  }
  SUBCASE("errors carry line numbers") {
    CHECK(error_of([&] { load_sparse_matrix(dir.file("a.mtx", "%%MatrixMarket matrix array real\n1 1\n")); })
              .find(":1") != std::string::npos);
    CHECK(error_of([&] { load_sparse_matrix(dir.file("b.mtx", kHeader + "2 2 2\n1 1 1\n3 1 1\n")); })
              .find(":4") != std::string::npos);
    CHECK(error_of([&] { load_sparse_matrix(dir.file("c.mtx", kHeader + "2 2 1\n1 1 abc\n")); })
              .find(":3") != std::string::npos);
    CHECK(error_of([&] { load_sparse_matrix(dir.file("d.mtx", kHeader + "2 2 2\n1 1 1\n")); }) != "");
    CHECK_THROWS_AS(load_sparse_matrix((dir.path / "missing.mtx").string()), Error);
  }
}

TEST_CASE("load_labels") {
  TempDir dir;
  SUBCASE("interning") {
    const LabelFile f = load_labels(dir.file("l.txt", "a\nb\na\n"));
    CHECK(f.labels == LabelArray{0, 1, 0});
    CHECK(f.names == std::vector<std::string>{"a", "b"});
  }
  SUBCASE("NA is unlabeled") {
    CHECK(load_labels(dir.file("l.txt", "a\nNA\n")).labels == LabelArray{0, kUnlabeled});
  }
  SUBCASE("empty file") {
    std::ofstream(dir.file("e.txt")).close();
    CHECK_THROWS_AS(load_labels(dir.file("e.txt")), Error);
  }
  SUBCASE("round trip") {
    std::mt19937_64 rng(2);
    LabelArray l(1000);
    for (auto& x : l) x = static_cast<Label>(rng() % 7) - 1;  // includes kUnlabeled
    const std::vector<std::string> names{"t0", "t1", "t2", "t3", "t4", "t5"};
    const std::string p = dir.file("r.txt");
    write_labels(p, l, names);
    const LabelFile f = load_labels(p);
    REQUIRE(f.labels.size() == 1000);
    for (Index i = 0; i < 1000; ++i) {
      CHECK((f.labels[i] == kUnlabeled) == (l[i] == kUnlabeled));
      if (l[i] != kUnlabeled) CHECK(f.names[f.labels[i]] == names[l[i]]);
    }
  }
}

TEST_CASE("load_gene_sets") {
  TempDir dir;
  const std::vector<std::string> features{"g0", "g1", "g2", "g3"};
  const auto sets = load_gene_sets(dir.file("s.tsv", "alpha\tg0,g2\nbeta\tg3,g1,g2\n"), features);
  REQUIRE(sets.size() == 2);
  CHECK(sets[0].name == "alpha");
  CHECK(sets[0].members == std::vector<Index>{0, 2});
  CHECK(sets[1].members == std::vector<Index>{3, 1, 2});
  CHECK(error_of([&] { load_gene_sets(dir.file("t.tsv", "a\tg0\nb\tg9\n"), features); }).find(":2") !=
        std::string::npos);
}

TEST_CASE("generate_synthetic") {
  SynthParams p;
  p.n_cells = 100;
  p.seed = 3;
  SUBCASE("structure") {
    const Dataset d = generate_synthetic(p);
    d.validate();
    CHECK(d.n_cells() == 500);
    CHECK(d.modality_1.cols() == 200);
    CHECK(d.modality_2.cols() == 100);
    CHECK(d.rows(true).size() == 100);
    CHECK(d.rows(false).size() == 400);
    CHECK(d.rows(false).back() == 399);  // training cells first
    CHECK(d.pseudotime.size() == 500);
    CHECK(d.cc_score.size() == 500);
  }
  SUBCASE("noise-free modalities predict each other linearly") {
    p.noise = 0.0;
    p.dropout = 0.0;
    const Dataset d = generate_synthetic(p);
    const DenseMatrix x = d.modality_1.to_dense();
    DenseMatrix y(d.n_cells(), d.modality_2.cols());
    const DenseMatrix m2 = d.modality_2.to_dense();
    for (Index i = 0; i < d.n_cells(); ++i)
      for (Index j = 0; j < y.cols(); ++j) y(i, j) = m2(d.pairing[i], j);
    const DenseMatrix coef = least_squares(x, y);
    double ss_res = 0.0, ss_tot = 0.0;
    for (Index j = 0; j < y.cols(); ++j) {
      double mean = 0.0;
      for (Index i = 0; i < y.rows(); ++i) mean += y(i, j) / static_cast<double>(y.rows());
      for (Index i = 0; i < y.rows(); ++i) {
        double pred = coef(x.cols(), j);
        for (Index k = 0; k < x.cols(); ++k) pred += x(i, k) * coef(k, j);
        ss_res += (y(i, j) - pred) * (y(i, j) - pred);
        ss_tot += (y(i, j) - mean) * (y(i, j) - mean);
      }
    }
    CHECK(1.0 - ss_res / ss_tot > 0.99);
  }
  SUBCASE("sparsity grows with dropout") {
    double prev = -1.0;
    for (const double rate : {0.0, 0.5, 0.9}) {
      p.dropout = rate;
      const Dataset d = generate_synthetic(p);
      const double zeros = 1.0 - static_cast<double>(d.modality_1.nnz()) / (500.0 * 200.0);
      CHECK(zeros > prev);
      prev = zeros;
    }
  }
  SUBCASE("deterministic per seed") {
    const Dataset a = generate_synthetic(p), b = generate_synthetic(p);
    CHECK(a.modality_1.to_dense() == b.modality_1.to_dense());
    CHECK(a.modality_2.to_dense() == b.modality_2.to_dense());
    CHECK(a.cell_types == b.cell_types);
    p.seed = 4;
    CHECK_FALSE(generate_synthetic(p).modality_1.to_dense() == a.modality_1.to_dense());
  }
  SUBCASE("needs two types") {
    p.n_types = 1;
    CHECK_THROWS_AS(generate_synthetic(p), Error);
  }
}

TEST_CASE("dataset round trip") {
  TempDir dir;
  SynthParams p;
  p.n_cells = 20;
  p.seed = 5;
  const Dataset d = generate_synthetic(p);
  save_dataset(dir.path.string(), d);
  const Dataset r = load_dataset(dir.path.string());
  CHECK(r.modality_1.to_dense() == d.modality_1.to_dense());
  CHECK(r.modality_2.to_dense() == d.modality_2.to_dense());
  // Label ids are re-interned on load; names must agree.
  for (Index i = 0; i < d.n_cells(); ++i) {
    CHECK(r.type_names[r.cell_types[i]] == d.type_names[d.cell_types[i]]);
    CHECK(r.batch_names[r.batch_labels[i]] == d.batch_names[d.batch_labels[i]]);
  }
  CHECK(r.is_test == d.is_test);
  CHECK(r.pairing == d.pairing);
  CHECK(r.pseudotime == d.pseudotime);
  CHECK(r.cc_score == d.cc_score);
  CHECK(r.cell_ids == d.cell_ids);
}
