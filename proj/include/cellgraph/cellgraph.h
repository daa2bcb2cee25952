#ifndef CELLGRAPH_H
#define CELLGRAPH_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define CG_API __declspec(dllexport)
#else
#define CG_API __attribute__((visibility("default")))
#endif

/* Status codes; also the CLI exit codes. */
typedef enum cg_status {
  CG_OK = 0,
  CG_ERR_VALIDATION = 1, /* bad input, config or arguments */
  CG_ERR_RUNTIME = 2     /* numerical, I/O or check failure during a run */
} cg_status;

typedef struct cg_config cg_config;

/* Message of the last failed call on this thread; empty after a success. */
CG_API const char* cg_last_error(void);
CG_API const char* cg_version(void);

CG_API cg_status cg_config_create(cg_config** out);
CG_API void cg_config_destroy(cg_config* cfg);
/* `key = value` setting; unknown keys are rejected. */
CG_API cg_status cg_config_set(cg_config* cfg, const char* key, const char* value);
/* Reads a config file of `key = value` lines. */
CG_API cg_status cg_config_load(cg_config* cfg, const char* path);
CG_API cg_status cg_config_validate(const cg_config* cfg);
/* Number of accepted keys and the i-th key name (NULL when out of range). */
CG_API size_t cg_config_key_count(void);
CG_API const char* cg_config_key(size_t i);

/* Runs the task named by the `task` key (predict, match, embed, eval, synth, gradcheck) and
   writes its outputs under `out`. */
CG_API cg_status cg_run(const cg_config* cfg);

/* Maximum-weight assignment on a dense row-major n_left x n_right profit matrix.
   match_out[i] receives the matched column of row i or -1. */
CG_API cg_status cg_solve_assignment(const double* profit, size_t n_left, size_t n_right, int64_t* match_out,
                                     double* total_out);

/* Normalized mutual information of two label arrays of length n. */
CG_API cg_status cg_nmi(const int64_t* a, const int64_t* b, size_t n, double* out);

/* Row softmax and column softmax of a dense row-major rows x cols score matrix. */
CG_API cg_status cg_row_col_softmax(const double* scores, size_t rows, size_t cols, double* row_prob,
                                    double* col_prob);

#ifdef __cplusplus
}
#endif

#endif
