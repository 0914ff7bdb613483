/* C interface to the suin CTR pipeline. Generated; do not edit. */

#ifndef SUIN_H
#define SUIN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function.
typedef enum SuinStatus {
  // The call succeeded.
  SUIN_STATUS_OK = 0,
  // A required pointer argument was null.
  SUIN_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  SUIN_STATUS_INVALID_UTF8 = 2,
  // The configuration or a request parameter is invalid.
  SUIN_STATUS_INVALID_CONFIG = 3,
  // Input data violated a structural rule (format, leakage, empty history).
  SUIN_STATUS_INVALID_DATA = 4,
  // A numeric computation failed (shape mismatch, divergence, undefined
  // metric).
  SUIN_STATUS_NUMERIC = 5,
  // A required artifact is missing; run the earlier pipeline stages first.
  SUIN_STATUS_MISSING_ARTIFACT = 6,
  // An operating-system I/O error.
  SUIN_STATUS_IO = 7,
  // An internal invariant was violated.
  SUIN_STATUS_INTERNAL = 8,
} SuinStatus;

// Opaque run configuration. Create with `suin_config_new` or
// `suin_config_load`, destroy with `suin_config_free`.
typedef struct SuinConfig SuinConfig;

// Opaque handle to a trained model loaded for scoring. Read-only after
// opening, so a single session may be shared across threads. Destroy with
// `suin_session_free`.
typedef struct SuinSession SuinSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *suin_version(void);

// Copy the calling thread's last error message into `buf` as a
// NUL-terminated string, truncating if `cap` is too small. Returns the
// byte length the full message needs including the terminator, or 0 if no
// error has been recorded on this thread. `buf` may be null to query the
// required capacity.
size_t suin_last_error(char *buf, size_t cap);

// New configuration with default settings. Never returns null.
struct SuinConfig *suin_config_new(void);

// Load and validate a TOML configuration file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be a valid location
// to store the new handle.
enum SuinStatus suin_config_load(const char *path, struct SuinConfig **out);

// Set the master seed every pipeline stage derives from.
//
// # Safety
// `cfg` must be a live handle from this library.
enum SuinStatus suin_config_set_seed(struct SuinConfig *cfg, uint64_t seed);

// Set the worker-thread count (at least 1). Thread count never changes
// computed results, only wall time.
//
// # Safety
// `cfg` must be a live handle from this library.
enum SuinStatus suin_config_set_threads(struct SuinConfig *cfg, size_t threads);

// Check the configuration for internal consistency.
//
// # Safety
// `cfg` must be a live handle from this library.
enum SuinStatus suin_config_validate(const struct SuinConfig *cfg);

// Destroy a configuration handle. Null is a no-op.
//
// # Safety
// `cfg` must be null or a live handle from this library; it must not be
// used afterwards.
void suin_config_free(struct SuinConfig *cfg);

// Run one pipeline stage into the run directory. Stage names match the
// CLI subcommands: "generate", "split", "pretrain", "build-pool",
// "retrieve", "train". Pass a null `out_dir` to use the configuration's
// own output-directory rules.
//
// # Safety
// `cfg` must be a live handle; `stage` a NUL-terminated string; `out_dir`
// null or a NUL-terminated string.
enum SuinStatus suin_run_stage(const struct SuinConfig *cfg,
                               const char *out_dir,
                               const char *stage);

// Run every stage in order: generate, split, pretrain, build-pool,
// retrieve, train. Pass a null `out_dir` to use the configuration's own
// output-directory rules.
//
// # Safety
// `cfg` must be a live handle; `out_dir` null or a NUL-terminated string.
enum SuinStatus suin_run_all(const struct SuinConfig *cfg, const char *out_dir);

// Evaluate the trained model on one split ("train", "val", or "test"),
// writing the report under the run directory and returning the overall
// ranking quality (AUC) and log loss through the out-pointers, either of
// which may be null.
//
// # Safety
// `cfg` must be a live handle; `split` a NUL-terminated string; `out_dir`
// null or a NUL-terminated string; `out_auc`/`out_logloss` null or valid
// locations for a double.
enum SuinStatus suin_evaluate(const struct SuinConfig *cfg,
                              const char *out_dir,
                              const char *split,
                              double *out_auc,
                              double *out_logloss);

// Open a scoring session over a run directory whose train stage has
// completed, storing the handle in `*out`.
//
// # Safety
// `cfg` must be a live handle; `out_dir` null or a NUL-terminated string;
// `out` a valid location to store the new handle.
enum SuinStatus suin_session_open(const struct SuinConfig *cfg,
                                  const char *out_dir,
                                  struct SuinSession **out);

// Predicted click probability for a (user, candidate item) pair, written
// to `*out_prob`. The user must exist in the run's dataset; the item must
// be a valid non-pad item ID.
//
// # Safety
// `session` must be a live handle; `out_prob` a valid location for a
// double.
enum SuinStatus suin_session_score(const struct SuinSession *session,
                                   uint64_t user_id,
                                   uint64_t item_id,
                                   double *out_prob);

// Destroy a scoring session. Null is a no-op.
//
// # Safety
// `session` must be null or a live handle from this library; it must not
// be used afterwards.
void suin_session_free(struct SuinSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUIN_H */
