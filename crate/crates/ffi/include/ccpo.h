#ifndef CCPO_H
#define CCPO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of an observation feature vector.
 */
#define CCPO_OBS_DIM 6

/**
 * Number of actions: guide answer, base answer, next round.
 */
#define CCPO_NUM_ACTIONS 3

/**
 * Outcome of an FFI call.
 */
typedef enum CcpoStatus {
  CCPO_STATUS_OK = 0,
  CCPO_STATUS_NULL_POINTER = 1,
  CCPO_STATUS_INVALID_UTF8 = 2,
  CCPO_STATUS_IO = 3,
  CCPO_STATUS_PARSE = 4,
  CCPO_STATUS_VALIDATION = 5,
  CCPO_STATUS_NUMERIC = 6,
  CCPO_STATUS_USAGE = 7,
  CCPO_STATUS_CONFIG = 8,
  CCPO_STATUS_HTTP = 9,
  CCPO_STATUS_PANIC = 10,
} CcpoStatus;

/**
 * A trained policy or fitted rule.
 */
typedef struct CcpoCheckpoint CcpoCheckpoint;

/**
 * A loaded or generated trace corpus.
 */
typedef struct CcpoTraces CcpoTraces;

/**
 * Evaluation summary over a trace set.
 */
typedef struct CcpoMetrics {
  /**
   * Total cost over the evaluated traces, in cents.
   */
  double cost_cents;
  double coverage;
  double avg_len;
  double set_size;
  size_t n_episodes;
} CcpoMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 *
 * The pointer stays valid until the next ccpo call on the same thread.
 */
const char *ccpo_last_error_message(void);

/**
 * Reads a trace file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum CcpoStatus ccpo_traces_load(const char *path, struct CcpoTraces **out);

/**
 * Generates a synthetic corpus from generator settings in TOML.
 *
 * `config_toml` may be null or empty for the defaults.
 *
 * # Safety
 * `config_toml` must be null or a valid NUL-terminated string; `out` must be valid.
 */
enum CcpoStatus ccpo_traces_generate(const char *config_toml, struct CcpoTraces **out);

/**
 * Writes a corpus in the trace file format.
 *
 * # Safety
 * `traces` must come from this library; `path` must be a valid NUL-terminated string.
 */
enum CcpoStatus ccpo_traces_save(const struct CcpoTraces *traces, const char *path);

/**
 * Number of traces, or 0 for a null handle.
 *
 * # Safety
 * `traces` must be null or come from this library.
 */
size_t ccpo_traces_len(const struct CcpoTraces *traces);

/**
 * Horizon declared by the corpus, or 0 for a null handle.
 *
 * # Safety
 * `traces` must be null or come from this library.
 */
size_t ccpo_traces_horizon(const struct CcpoTraces *traces);

/**
 * # Safety
 * `traces` must be null or come from this library and not be used afterwards.
 */
void ccpo_traces_free(struct CcpoTraces *traces);

/**
 * Reads a checkpoint written by `ccpo train` or [`ccpo_checkpoint_save`].
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum CcpoStatus ccpo_checkpoint_load(const char *path, struct CcpoCheckpoint **out);

/**
 * # Safety
 * `checkpoint` must come from this library; `path` must be a valid NUL-terminated string.
 */
enum CcpoStatus ccpo_checkpoint_save(const struct CcpoCheckpoint *checkpoint, const char *path);

/**
 * # Safety
 * `checkpoint` must be null or come from this library and not be used afterwards.
 */
void ccpo_checkpoint_free(struct CcpoCheckpoint *checkpoint);

/**
 * Deployment threshold of the checkpoint.
 *
 * # Safety
 * `checkpoint` must come from this library; `out` must be valid.
 */
enum CcpoStatus ccpo_checkpoint_kappa(const struct CcpoCheckpoint *checkpoint, double *out);

/**
 * Score-network probabilities for one observation.
 *
 * `features` points to `CCPO_OBS_DIM` values; `round` is 1-based;
 * `out_probs` receives `CCPO_NUM_ACTIONS` values ordered guide answer,
 * base answer, next round.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum CcpoStatus ccpo_checkpoint_score(const struct CcpoCheckpoint *checkpoint,
                                      const double *features,
                                      size_t round,
                                      double *out_probs);

/**
 * Conformal action set at the checkpoint threshold, as a bit mask
 * (bit 0 guide answer, bit 1 base answer, bit 2 next round).
 *
 * # Safety
 * `features` must point to `CCPO_OBS_DIM` values; the other pointers must be valid.
 */
enum CcpoStatus ccpo_checkpoint_conformal_set(const struct CcpoCheckpoint *checkpoint,
                                              const double *features,
                                              size_t round,
                                              uint8_t *out_mask);

/**
 * Evaluates a checkpoint on a corpus with the checkpoint's prices and accounting.
 *
 * # Safety
 * Handles must come from this library; `out` must be valid.
 */
enum CcpoStatus ccpo_evaluate(const struct CcpoCheckpoint *checkpoint,
                              const struct CcpoTraces *traces,
                              struct CcpoMetrics *out);

/**
 * Trains (or fits) the method named in a run config given as TOML.
 *
 * On success `*out` holds the final checkpoint. When `out_metrics` is not
 * null it receives the test-split metrics, or all zeros when the config has
 * no test split.
 *
 * # Safety
 * `config_toml` must be a valid NUL-terminated string; `out` must be valid;
 * `out_metrics` must be null or valid.
 */
enum CcpoStatus ccpo_train(const char *config_toml,
                           struct CcpoCheckpoint **out,
                           struct CcpoMetrics *out_metrics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCPO_H */
