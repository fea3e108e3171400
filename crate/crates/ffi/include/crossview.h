#ifndef CROSSVIEW_H
#define CROSSVIEW_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum XvStatus {
  XV_STATUS_OK = 0,
  XV_STATUS_NULL_POINTER = 1,
  XV_STATUS_INVALID_ARGUMENT = 2,
  XV_STATUS_IO = 3,
  XV_STATUS_NUMERIC = 4,
  XV_STATUS_EPISODE_DONE = 5,
  XV_STATUS_PANIC = 6,
} XvStatus;

typedef enum XvView {
  XV_VIEW_GROUND = 0,
  XV_VIEW_AERIAL = 1,
  XV_VIEW_BOTH = 2,
} XvView;

/**
 * Generated or loaded street graph.
 */
typedef struct XvCity XvCity;

/**
 * Courier environment bound to one city.
 */
typedef struct XvEnv XvEnv;

/**
 * Agent parameters loaded from a checkpoint.
 */
typedef struct XvParams XvParams;

typedef struct XvObservationShape {
  uintptr_t ground_len;
  uintptr_t aerial_len;
} XvObservationShape;

typedef struct XvStep {
  double reward;
  bool episode_done;
  bool goal_reached;
  bool wasted_action;
  uint32_t goals_completed;
  double distance_to_goal;
} XvStep;

typedef struct XvEvalSummary {
  double reward_mean;
  double reward_stderr;
  double success_rate;
  uintptr_t episodes;
} XvEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null after a successful call.
 * The pointer stays valid until the next call on the same thread.
 */
const char *xv_last_error(void);

/**
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum XvStatus xv_city_generate(uint64_t seed,
                               uintptr_t region_cells,
                               uintptr_t train_regions,
                               struct XvCity **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` as for [`xv_city_generate`].
 */
enum XvStatus xv_city_load(const char *path, struct XvCity **out);

/**
 * # Safety
 * `city` must be a live handle; `path` a NUL-terminated string.
 */
enum XvStatus xv_city_save(const struct XvCity *city, const char *path);

/**
 * # Safety
 * `city` must be a live handle and `nodes`, `edges` writable.
 */
enum XvStatus xv_city_size(const struct XvCity *city, uintptr_t *nodes, uintptr_t *edges);

/**
 * # Safety
 * `city` must be null or a handle not yet freed.
 */
void xv_city_free(struct XvCity *city);

/**
 * Creates an environment with default settings over a copy of `city`.
 *
 * # Safety
 * `city` must be a live handle; `out` writable.
 */
enum XvStatus xv_env_new(const struct XvCity *city, uint64_t seed, struct XvEnv **out);

/**
 * # Safety
 * `env` must be a live handle and `shape` writable.
 */
enum XvStatus xv_env_observation_shape(const struct XvEnv *env, struct XvObservationShape *shape);

/**
 * Starts an episode in `region` with goals at most `max_goal_distance` away
 * (pass infinity for no limit).
 *
 * # Safety
 * `env` must be a live handle; `region` a NUL-terminated string.
 */
enum XvStatus xv_env_reset(struct XvEnv *env, const char *region, double max_goal_distance);

/**
 * Applies action 0..=4 (forward, left small, right small, left large, right large).
 *
 * # Safety
 * `env` must be a live handle; `out` null or writable.
 */
enum XvStatus xv_env_step(struct XvEnv *env, uint32_t action, struct XvStep *out);

/**
 * Copies the current observation. Buffer lengths must match
 * [`xv_env_observation_shape`]; any buffer may be null to skip it.
 *
 * # Safety
 * Non-null buffers must hold the given number of elements.
 */
enum XvStatus xv_env_observation(const struct XvEnv *env,
                                 float *ground,
                                 uintptr_t ground_len,
                                 float *aerial,
                                 uintptr_t aerial_len,
                                 float *goal);

/**
 * # Safety
 * `env` must be null or a handle not yet freed.
 */
void xv_env_free(struct XvEnv *env);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum XvStatus xv_params_load(const char *path, struct XvParams **out);

/**
 * # Safety
 * `params` must be a live handle; `path` a NUL-terminated string.
 */
enum XvStatus xv_params_save(const struct XvParams *params, const char *path);

/**
 * # Safety
 * `params` must be null or a handle not yet freed.
 */
void xv_params_free(struct XvParams *params);

/**
 * Zero-shot evaluation with sampled actions over `seed_count` consecutive
 * seeds starting at `first_seed`. Parameters are never modified.
 *
 * # Safety
 * Handles must be live; `region` a NUL-terminated string; `out` writable.
 */
enum XvStatus xv_evaluate(const struct XvParams *params,
                          const struct XvCity *city,
                          const char *region,
                          enum XvView view,
                          uintptr_t episodes,
                          uint64_t first_seed,
                          uintptr_t seed_count,
                          struct XvEvalSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROSSVIEW_H */
