#ifndef EVE_H
#define EVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EveStatus {
  EVE_STATUS_OK = 0,
  EVE_STATUS_NULL_POINTER = 1,
  EVE_STATUS_INVALID_ARGUMENT = 2,
  EVE_STATUS_IO = 3,
  EVE_STATUS_FORMAT = 4,
  EVE_STATUS_MODEL = 5,
  EVE_STATUS_PANIC = 6,
} EveStatus;

typedef enum EveAction {
  EVE_ACTION_ANSWER = 0,
  EVE_ACTION_DELIBERATE_MORE = 1,
  EVE_ACTION_RETRIEVE_OR_RESAMPLE = 2,
  EVE_ACTION_ABSTAIN_OR_ESCALATE = 3,
} EveAction;

/**
 * Opaque handle: score settings plus routing thresholds.
 */
typedef struct EveController EveController;

/**
 * Opaque handle: a checkpointed backbone with its embedding table.
 */
typedef struct EveModel EveModel;

/**
 * Per-example uncertainty readout of a Monte Carlo prediction.
 */
typedef struct EveReadout {
  double predictive_entropy;
  double conditional_entropy;
  double mutual_information;
  double epi;
  double flip_rate;
  double confidence;
  /**
   * Top-1 token of the predictive mean.
   */
  uint32_t predicted;
} EveReadout;

typedef struct EveThresholds {
  double uq_green;
  double uq_orange;
  double uq_red;
} EveThresholds;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * success. Valid until the next eve call on the same thread.
 */
const char *eve_last_error_message(void);

/**
 * Loads a checkpoint and the embedding table it was trained with.
 *
 * # Safety
 * Paths must be nul-terminated strings; `out` must be writable.
 */
enum EveStatus eve_model_load(const char *checkpoint_path,
                              const char *embedding_path,
                              struct EveModel **out);

/**
 * # Safety
 * `model` must come from `eve_model_load` and not be freed twice.
 */
void eve_model_free(struct EveModel *model);

/**
 * Writes the vocabulary size and required context length.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum EveStatus eve_model_shape(const struct EveModel *model,
                               size_t *vocab_size,
                               size_t *context_len);

/**
 * Runs `mc_samples` passes on one context and writes the readout and,
 * when `probs` is non-null, the predictive mean (`probs_len` must equal
 * the vocabulary size).
 *
 * # Safety
 * `tokens` must point to `n_tokens` values; `probs` to `probs_len` doubles.
 */
enum EveStatus eve_model_predict(const struct EveModel *model,
                                 const uint32_t *tokens,
                                 size_t n_tokens,
                                 uint64_t key,
                                 uint32_t mc_samples,
                                 uint64_t seed,
                                 struct EveReadout *readout,
                                 double *probs,
                                 size_t probs_len);

/**
 * Controller with the default score settings.
 *
 * # Safety
 * `out` must be writable.
 */
enum EveStatus eve_controller_new(struct EveThresholds thresholds, struct EveController **out);

/**
 * Loads a controller sidecar written by the calibrate stage.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum EveStatus eve_controller_load(const char *path, struct EveController **out);

/**
 * # Safety
 * `ctl` must come from `eve_controller_new`/`_load` and not be freed twice.
 */
void eve_controller_free(struct EveController *ctl);

/**
 * # Safety
 * `ctl` must be a live handle; `out` must be writable.
 */
enum EveStatus eve_controller_thresholds(const struct EveController *ctl,
                                         struct EveThresholds *out);

/**
 * Unified uncertainty score in `[0, 1]`.
 *
 * # Safety
 * `ctl` must be a live handle; `readout` readable, `score` writable.
 */
enum EveStatus eve_controller_score(const struct EveController *ctl,
                                    const struct EveReadout *readout,
                                    double *score);

/**
 * Maps a score to an action.
 *
 * # Safety
 * `ctl` must be a live handle; `action` must be writable.
 */
enum EveStatus eve_controller_route(const struct EveController *ctl,
                                    double score,
                                    enum EveAction *action);

/**
 * Quantile thresholds over calibration scores.
 *
 * # Safety
 * `scores` must point to `n` doubles; `out` must be writable.
 */
enum EveStatus eve_calibrate_basic(const double *scores,
                                   size_t n,
                                   double q_green,
                                   double q_orange,
                                   double q_red,
                                   struct EveThresholds *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVE_H */
