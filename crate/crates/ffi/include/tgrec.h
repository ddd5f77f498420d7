#ifndef TGREC_H
#define TGREC_H

/* Generated by cbindgen from tgrec-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Mirrors the CLI exit codes for the
 * first four values.
 */
typedef enum TgrecStatus {
  TGREC_STATUS_OK = 0,
  /**
   * Bad usage or invalid configuration.
   */
  TGREC_STATUS_CONFIG_ERROR = 1,
  /**
   * Unreadable, malformed, or insufficient data.
   */
  TGREC_STATUS_DATA_ERROR = 2,
  /**
   * A non-finite value surfaced during training or scoring.
   */
  TGREC_STATUS_NUMERIC_ERROR = 3,
  /**
   * A required pointer argument was null or not valid UTF-8.
   */
  TGREC_STATUS_NULL_POINTER = 4,
  /**
   * The implementation panicked; state may be inconsistent.
   */
  TGREC_STATUS_PANIC = 5,
} TgrecStatus;

/**
 * Opaque run configuration handle.
 */
typedef struct TgrecConfig TgrecConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the message for the most recent failure on this thread, or an
 * empty string. The pointer stays valid until the next failing call on
 * the same thread; do not free it.
 */
const char *tgrec_last_error(void);

/**
 * Creates a config populated with the documented defaults. Returns null
 * only if allocation fails catastrophically.
 */
struct TgrecConfig *tgrec_config_new(void);

/**
 * Loads a config file (flat `key = value` lines). Returns null on
 * failure; consult `tgrec_last_error`.
 *
 * # Safety
 * `path` must be a valid nul-terminated string or null.
 */
struct TgrecConfig *tgrec_config_load(const char *path);

/**
 * Assigns one config key, e.g. `tgrec_config_set(cfg, "epochs", "3")`.
 *
 * # Safety
 * `cfg` must come from `tgrec_config_new`/`tgrec_config_load` and not yet
 * be freed; `key` and `value` must be valid nul-terminated strings.
 */
enum TgrecStatus tgrec_config_set(struct TgrecConfig *cfg, const char *key, const char *value);

/**
 * Renders the canonical text form of the config. Free the result with
 * `tgrec_string_free`. Returns null if `cfg` is null.
 *
 * # Safety
 * `cfg` must be a live handle or null.
 */
char *tgrec_config_to_text(const struct TgrecConfig *cfg);

/**
 * Releases a config handle. Null is ignored.
 *
 * # Safety
 * `cfg` must be a handle returned by this library, freed at most once.
 */
void tgrec_config_free(struct TgrecConfig *cfg);

/**
 * Releases a string returned by `tgrec_config_to_text`. Null is ignored.
 *
 * # Safety
 * `s` must be a string returned by this library, freed at most once.
 */
void tgrec_string_free(char *s);

/**
 * Trains per the config and writes `checkpoint.bin` and `stats.jsonl`
 * under the configured output directory.
 *
 * # Safety
 * `cfg` must be a live handle or null.
 */
enum TgrecStatus tgrec_train(const struct TgrecConfig *cfg);

/**
 * Scores a checkpoint and writes `report.json`. `split` is `"val"`,
 * `"test"`, or null for test; `report_path` overrides the destination
 * when non-null.
 *
 * # Safety
 * All pointer arguments must be valid nul-terminated strings or null;
 * `checkpoint` must be non-null.
 */
enum TgrecStatus tgrec_evaluate(const char *checkpoint, const char *split, const char *report_path);

/**
 * Generates the synthetic dataset as CSV. `out_path` overrides the
 * destination when non-null; the default is `<output_dir>/synthetic.csv`.
 *
 * # Safety
 * `cfg` must be a live handle or null; `out_path` must be a valid
 * nul-terminated string or null.
 */
enum TgrecStatus tgrec_synthetic(const struct TgrecConfig *cfg, const char *out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TGREC_H */
