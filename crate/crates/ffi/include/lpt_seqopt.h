#ifndef LPT_SEQOPT_H
#define LPT_SEQOPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdint.h>
#include <stddef.h>

// Result codes.
typedef enum {
  LPT_STATUS_OK = 0,
  LPT_STATUS_NULL_POINTER = 1,
  LPT_STATUS_INVALID_UTF8 = 2,
  // A buffer argument is too small; the required length was written.
  LPT_STATUS_BUFFER_TOO_SMALL = 3,
  LPT_STATUS_INVALID_SEQUENCE = 4,
  LPT_STATUS_DIMENSION_MISMATCH = 5,
  LPT_STATUS_CONFIG = 6,
  LPT_STATUS_IO = 7,
  LPT_STATUS_PARSE = 8,
  LPT_STATUS_BUDGET_EXHAUSTED = 9,
  LPT_STATUS_NUMERICAL = 10,
  LPT_STATUS_OTHER = 11,
  // A panic was caught at the boundary.
  LPT_STATUS_PANIC = 12,
} LptStatus;

typedef struct LptModel LptModel;

typedef struct LptOracle LptOracle;

typedef struct LptRun LptRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until
// the next failing call on the same thread; do not free.
const char *lpt_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void lpt_string_free(char *s);

// Library version as a static string.
const char *lpt_version(void);

// Builds an oracle from its JSON definition.
//
// # Safety
// `def_json` must be a NUL-terminated string; `out` must be writable.
LptStatus lpt_oracle_new(const char *def_json, LptOracle **out);

// Releases an oracle. Null is ignored.
//
// # Safety
// `o` must come from `lpt_oracle_new` and not be used afterwards.
void lpt_oracle_free(LptOracle *o);

// Scores one sequence (glyph string). Repeated sequences are served from
// the memo and not counted again.
//
// # Safety
// `out` must hold `cap` doubles; `len` must be writable.
LptStatus lpt_oracle_query(const LptOracle *o,
                           const char *sequence,
                           double *out,
                           size_t cap,
                           size_t *len);

// Number of metered (non-memoized) queries so far.
//
// # Safety
// `out` must be writable.
LptStatus lpt_oracle_queries(const LptOracle *o, uint64_t *out);

// Number of objectives each query returns.
//
// # Safety
// `out` must be writable.
LptStatus lpt_oracle_n_objectives(const LptOracle *o, size_t *out);

// Loads a model checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
LptStatus lpt_model_load(const char *path, LptModel **out);

// Writes the model to `path` in single precision.
//
// # Safety
// `path` must be a NUL-terminated string.
LptStatus lpt_model_save(const LptModel *m, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `m` must come from this library and not be used afterwards.
void lpt_model_free(LptModel *m);

// Dimension of the latent `z0`.
//
// # Safety
// `out` must be writable.
LptStatus lpt_model_latent_dim(const LptModel *m, size_t *out);

// Samples a sequence from `z0` (length `d`) at the given temperature.
// The result is a glyph string to release with `lpt_string_free`.
//
// # Safety
// `z0` must hold `d` doubles; `out` must be writable.
LptStatus lpt_model_generate(const LptModel *m,
                             const double *z0,
                             size_t d,
                             uint64_t seed,
                             double temperature,
                             char **out);

// Predictor outputs at `z0`: means for regression heads, probabilities
// for binary heads.
//
// # Safety
// `z0` must hold `d` doubles; `out` must hold `cap` doubles; `len` must be writable.
LptStatus lpt_model_predict(const LptModel *m,
                            const double *z0,
                            size_t d,
                            double *out,
                            size_t cap,
                            size_t *len);

// Prepares an optimization run from a run-configuration JSON string:
// builds the oracle and offline data, pretrains and finetunes, and fits
// the initial buffer. Nothing is queried until the first step.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
LptStatus lpt_run_new(const char *config_json, uint64_t seed, LptRun **out);

// Runs one propose/relabel/select/improve round. `finished` becomes 1
// when a stop condition was reached.
//
// # Safety
// `finished` must be writable.
LptStatus lpt_run_step(LptRun *r, int32_t *finished);

// Runs until a stop condition.
//
// # Safety
// `r` must be a live run handle.
LptStatus lpt_run_to_end(LptRun *r);

// Oracle queries charged so far.
//
// # Safety
// `out` must be writable.
LptStatus lpt_run_queries_used(LptRun *r, uint64_t *out);

// Best ranking score seen so far (NaN before any labeled data).
//
// # Safety
// `out` must be writable.
LptStatus lpt_run_best(LptRun *r, double *out);

// The run report as JSON; release with `lpt_string_free`.
//
// # Safety
// `out` must be writable.
LptStatus lpt_run_report_json(LptRun *r, char **out);

// Copies the current model into a new handle.
//
// # Safety
// `out` must be writable.
LptStatus lpt_run_model(LptRun *r, LptModel **out);

// Releases a run and its oracle. Null is ignored.
//
// # Safety
// `r` must come from `lpt_run_new` and not be used afterwards.
void lpt_run_free(LptRun *r);

// Whether the run stopped because the budget ran out.
//
// # Safety
// `out` must be writable.
LptStatus lpt_run_budget_exhausted(LptRun *r, int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPT_SEQOPT_H */
