#ifndef PSM_H
#define PSM_H

/* Generated by cbindgen; edit src/capi.rs instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * ABI revision reported by [`psm_version`]; bumped on breaking changes.
 */
#define PSM_API_VERSION 1

/**
 * Outcome of a C API call.
 */
typedef enum PsmStatus {
  /**
   * Call succeeded.
   */
  PSM_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  PSM_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PSM_STATUS_INVALID_UTF8 = 2,
  /**
   * An option name or value was rejected.
   */
  PSM_STATUS_INVALID_ARGUMENT = 3,
  /**
   * File or directory access failed.
   */
  PSM_STATUS_IO = 4,
  /**
   * An input file exists but could not be decoded.
   */
  PSM_STATUS_BAD_DATA = 5,
  /**
   * A numeric contract was violated while running.
   */
  PSM_STATUS_NUMERIC = 6,
  /**
   * The library caught an internal panic; state may be inconsistent.
   */
  PSM_STATUS_PANIC = 7,
} PsmStatus;

/**
 * Opaque pipeline configuration handle. Create with [`psm_config_new`],
 * release with [`psm_config_free`].
 */
typedef struct PsmConfig PsmConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the ABI revision of this library.
 */
uint32_t psm_version(void);

/**
 * Message from the most recent failing call on this thread, or NULL if
 * that call succeeded. The pointer stays valid until the next psm call
 * on the same thread.
 */
const char *psm_last_error(void);

/**
 * Allocates a configuration with default options (segmentation task).
 * Never fails; free with [`psm_config_free`].
 */
struct PsmConfig *psm_config_new(void);

/**
 * Releases a configuration. NULL is a no-op.
 *
 * # Safety
 * `cfg` must come from [`psm_config_new`] and not be freed twice.
 */
void psm_config_free(struct PsmConfig *cfg);

/**
 * Sets one option, e.g. `psm_config_set(cfg, "task", "det")`. Keys and
 * values follow the CLI `--set key=value` grammar.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` must be NUL-terminated.
 */
enum PsmStatus psm_config_set(struct PsmConfig *cfg, const char *key, const char *value);

/**
 * Applies a flat `key = value` config file on top of the current options
 * (`#` starts a comment).
 *
 * # Safety
 * `cfg` must be a live handle; `path` must be NUL-terminated.
 */
enum PsmStatus psm_config_load(struct PsmConfig *cfg, const char *path);

/**
 * Renders the configuration as `key = value` lines. Returns NULL only on
 * a NULL handle. Free the string with [`psm_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle or NULL.
 */
char *psm_config_to_string(const struct PsmConfig *cfg);

/**
 * Frees a string returned by this library. NULL is a no-op.
 *
 * # Safety
 * `s` must come from a psm call and not be freed twice.
 */
void psm_string_free(char *s);

/**
 * Runs the full pipeline on `data_dir`, writing checkpoints, pseudo
 * labels, predictions, and reports under `out_dir`. Blocks until done.
 *
 * # Safety
 * `cfg` must be a live handle; both paths must be NUL-terminated.
 */
enum PsmStatus psm_run(const struct PsmConfig *cfg, const char *data_dir, const char *out_dir);

/**
 * Generates a synthetic dataset of `n_images` stained-tissue images
 * (side `size`, two cell classes mixed by `class_mix`) under `out_dir`.
 * Byte-identical across runs for one seed.
 *
 * # Safety
 * `out_dir` must be NUL-terminated.
 */
enum PsmStatus psm_synth(const char *out_dir,
                         uint32_t n_images,
                         uint32_t size,
                         uint64_t seed,
                         double class_mix);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PSM_H */
