#include "cellgraph/cellgraph.h"

#include <algorithm>
#include <exception>
#include <new>
#include <string>
#include <vector>

#include "cellgraph/assignment.hpp"
#include "cellgraph/config.hpp"
#include "cellgraph/error.hpp"
#include "cellgraph/metrics.hpp"
#include "cellgraph/pipeline.hpp"
#include "cellgraph/tasks.hpp"

struct cg_config {
  cellgraph::RunConfig run;
};

namespace {

thread_local std::string last_error;

cg_status record(cg_status s, const std::string& what) {
  last_error = what;
  return s;
}

// Runs `body`, mapping exceptions to status codes.
template <class F>
cg_status guarded(F&& body) {
  try {
    last_error.clear();
    return body();
  } catch (const cellgraph::Error& e) {
    const bool validation = e.kind() == cellgraph::ErrorKind::Validation;
    return record(validation ? CG_ERR_VALIDATION : CG_ERR_RUNTIME, e.what());
  } catch (const std::bad_alloc&) {
    return record(CG_ERR_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return record(CG_ERR_RUNTIME, e.what());
  }
}

cg_status null_arg(const char* what) { return record(CG_ERR_VALIDATION, std::string(what) + " is null"); }

}  // namespace

extern "C" {

const char* cg_last_error(void) { return last_error.c_str(); }

const char* cg_version(void) { return "0.1.0"; }

cg_status cg_config_create(cg_config** out) {
  if (!out) return null_arg("out");
  return guarded([&] {
    *out = new cg_config();
    return CG_OK;
  });
}

void cg_config_destroy(cg_config* cfg) { delete cfg; }

cg_status cg_config_set(cg_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return null_arg("config, key or value");
  return guarded([&] {
    cfg->run.set(key, value);
    return CG_OK;
  });
}

cg_status cg_config_load(cg_config* cfg, const char* path) {
  if (!cfg || !path) return null_arg("config or path");
  return guarded([&] {
    cfg->run.load(path);
    return CG_OK;
  });
}

cg_status cg_config_validate(const cg_config* cfg) {
  if (!cfg) return null_arg("config");
  return guarded([&] {
    cfg->run.validate();
    return CG_OK;
  });
}

size_t cg_config_key_count(void) {
  static const std::vector<std::string> keys = cellgraph::config_keys();
  return keys.size();
}

const char* cg_config_key(size_t i) {
  static const std::vector<std::string> keys = cellgraph::config_keys();
  return i < keys.size() ? keys[i].c_str() : nullptr;
}

cg_status cg_run(const cg_config* cfg) {
  if (!cfg) return null_arg("config");
  return guarded([&] {
    if (cellgraph::run_task(cfg->run) != 0) return record(CG_ERR_RUNTIME, "check failed");
    return CG_OK;
  });
}

cg_status cg_solve_assignment(const double* profit, size_t n_left, size_t n_right, int64_t* match_out,
                              double* total_out) {
  if (!profit || !match_out || !total_out) return null_arg("profit, match_out or total_out");
  return guarded([&] {
    cellgraph::DenseMatrix m(n_left, n_right, std::vector<double>(profit, profit + n_left * n_right));
    const auto res = cellgraph::solve_assignment(cellgraph::AssignmentProblem::dense(m));
    std::fill(match_out, match_out + n_left, int64_t{-1});
    for (const auto& [l, r] : res.pairs) match_out[l] = static_cast<int64_t>(r);
    *total_out = res.total;
    return CG_OK;
  });
}

cg_status cg_nmi(const int64_t* a, const int64_t* b, size_t n, double* out) {
  if (!a || !b || !out) return null_arg("a, b or out");
  return guarded([&] {
    *out = cellgraph::nmi({a, n}, {b, n});
    return CG_OK;
  });
}

cg_status cg_row_col_softmax(const double* scores, size_t rows, size_t cols, double* row_prob, double* col_prob) {
  if (!scores || !row_prob || !col_prob) return null_arg("scores, row_prob or col_prob");
  return guarded([&] {
    cellgraph::DenseMatrix s(rows, cols, std::vector<double>(scores, scores + rows * cols));
    const auto [pr, pc] = cellgraph::row_col_probabilities(s);
    std::copy(pr.values().begin(), pr.values().end(), row_prob);
    std::copy(pc.values().begin(), pc.values().end(), col_prob);
    return CG_OK;
  });
}

}  // extern "C"
