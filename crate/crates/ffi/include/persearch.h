#ifndef PERSEARCH_H
#define PERSEARCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome. The error categories share their values with the CLI exit codes.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or an otherwise unusable argument.
   */
  PS_STATUS_INVALID_ARGUMENT = 1,
  PS_STATUS_CONFIG = 2,
  PS_STATUS_DATA = 3,
  PS_STATUS_SHAPE = 4,
  PS_STATUS_NUMERIC = 5,
  PS_STATUS_LOOKUP = 6,
  PS_STATUS_ATTENTION = 7,
  PS_STATUS_FORMAT = 8,
  PS_STATUS_IO = 9,
  /**
   * The output buffer is shorter than the result; the required length was written.
   */
  PS_STATUS_BUFFER_TOO_SMALL = 10,
  /**
   * An internal panic was caught at the boundary.
   */
  PS_STATUS_INTERNAL = 11,
} PsStatus;

/**
 * Opaque handle to a trained system.
 */
typedef struct PsSystem PsSystem;

/**
 * One ranked result.
 */
typedef struct PsHit {
  uint32_t video_id;
  double score;
} PsHit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ps_version(void);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ps_last_error(void);

/**
 * Generates a world, simulates its logs and trains every model.
 *
 * `config` holds `key = value` lines and may be null for the defaults.
 *
 * # Safety
 * `config` must be null or a valid NUL-terminated string, and `out` a
 * valid pointer to writable storage.
 */
enum PsStatus ps_system_build(const char *config, uint64_t seed, struct PsSystem **out);

/**
 * Loads a system saved by [`ps_system_save`] or the CLI's `build-tables` step.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum PsStatus ps_system_load(const char *dir, struct PsSystem **out);

/**
 * Writes every artifact of the system into `dir`.
 *
 * # Safety
 * `sys` must come from this library and `dir` be a valid NUL-terminated string.
 */
enum PsStatus ps_system_save(const struct PsSystem *sys, const char *dir);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `sys` must be null or a handle from this library that was not freed yet.
 */
void ps_system_free(struct PsSystem *sys);

/**
 * Entity counts and the first timestamp after the logged history.
 *
 * # Safety
 * `sys` must come from this library; each output pointer may be null.
 */
enum PsStatus ps_system_info(const struct PsSystem *sys,
                             uint32_t *users,
                             uint32_t *videos,
                             uint32_t *queries,
                             uint64_t *log_end);

/**
 * Serves the first page for `(user, query)` at `timestamp` with a named
 * preset (`base`, `qrcf_pdr`, `qin` or `pr2`). The page length goes to
 * `out_len`; if it exceeds `capacity` nothing else is written and
 * `PS_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `sys` must come from this library, `preset` be a valid NUL-terminated
 * string, `hits` point to `capacity` writable entries (or be null when
 * `capacity` is 0) and `out_len` be valid.
 */
enum PsStatus ps_system_search(const struct PsSystem *sys,
                               const char *preset,
                               uint32_t user_id,
                               uint32_t query_id,
                               uint64_t timestamp,
                               struct PsHit *hits,
                               size_t capacity,
                               size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERSEARCH_H */
