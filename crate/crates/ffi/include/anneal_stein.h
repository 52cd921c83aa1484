#ifndef ANNEAL_STEIN_H
#define ANNEAL_STEIN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AsSchedule {
  AS_SCHEDULE_RECTIFIED_LINEAR = 0,
  AS_SCHEDULE_VARIANCE_PRESERVING = 1,
} AsSchedule;

/*
 Status codes. The nonzero values other than `NULL_ARGUMENT` and `PANIC`
 equal the command-line exit codes.
 */
typedef enum AsStatus {
  AS_STATUS_OK = 0,
  AS_STATUS_OTHER = 1,
  AS_STATUS_USAGE = 2,
  AS_STATUS_RUNTIME = 3,
  AS_STATUS_PROTOCOL = 4,
  AS_STATUS_NULL_ARGUMENT = 5,
  AS_STATUS_PANIC = 6,
} AsStatus;

/*
 Parsed and validated run configuration.
 */
typedef struct AsConfig AsConfig;

/*
 A list of equally shaped lattice fields.
 */
typedef struct AsEnsemble AsEnsemble;

/*
 Called once per annealing level. `segment` is 0 for plain sampling.
 */
typedef void (*AsStepCallback)(void *user,
                               uint32_t segment,
                               uint32_t t,
                               double tau,
                               double bandwidth,
                               double mean_pairwise_distance);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or NULL. Valid until the
 next call into this library from the same thread.
 */
const char *as_last_error(void);

/*
 Library version as a static string.
 */
const char *as_version(void);

/*
 Parses a TOML run configuration. Relative file references resolve against
 `base_dir`, which may be NULL for the current directory.

 # Safety
 `toml` and `base_dir` must be NUL-terminated strings or NULL; `out` must be
 writable.
 */
enum AsStatus as_config_parse(const char *toml, const char *base_dir, struct AsConfig **out);

/*
 Applies a `dotted.key=value` override and re-validates. On failure the
 configuration is unchanged.

 # Safety
 `cfg` must come from [`as_config_parse`]; `assignment` must be a
 NUL-terminated string.
 */
enum AsStatus as_config_set(struct AsConfig *cfg, const char *assignment);

/*
 # Safety
 `cfg` must come from [`as_config_parse`] or be NULL; it must not be used afterwards.
 */
void as_config_free(struct AsConfig *cfg);

/*
 Runs the annealed sampler; `out` receives `particles` fields.

 # Safety
 `cfg` must come from [`as_config_parse`]; `out` must be writable;
 `callback`, if set, is called on this thread with `user`.
 */
enum AsStatus as_sample(const struct AsConfig *cfg,
                        AsStepCallback callback,
                        void *user,
                        struct AsEnsemble **out);

/*
 Runs segment extension; `out` receives one field, the concatenated sequence.

 # Safety
 As [`as_sample`].
 */
enum AsStatus as_extend(const struct AsConfig *cfg,
                        AsStepCallback callback,
                        void *user,
                        struct AsEnsemble **out);

/*
 Number of fields; 0 for NULL.

 # Safety
 `e` must come from this library or be NULL.
 */
size_t as_ensemble_len(const struct AsEnsemble *e);

/*
 Writes `(h, w, n, c)` of the fields into `dims`.

 # Safety
 `e` must come from this library; `dims` must hold 4 values.
 */
enum AsStatus as_ensemble_dims(const struct AsEnsemble *e, uint32_t *dims);

/*
 Copies field `index` (row-major `h, w, n, c`) into `buf`, which must hold
 exactly `len` doubles, the element count.

 # Safety
 `e` must come from this library; `buf` must be writable for `len` doubles.
 */
enum AsStatus as_ensemble_copy(const struct AsEnsemble *e, size_t index, double *buf, size_t len);

/*
 # Safety
 `e` must come from this library or be NULL; it must not be used afterwards.
 */
void as_ensemble_free(struct AsEnsemble *e);

/*
 Probability-flow velocity from a score, elementwise over `len` values.

 # Safety
 `x`, `score` and `out` must each hold `len` doubles; `out` may alias neither input.
 */
enum AsStatus as_velocity_from_score(enum AsSchedule kind,
                                     double eps,
                                     double tau,
                                     const double *x,
                                     const double *score,
                                     size_t len,
                                     double *out);

/*
 Clean prediction from a velocity, elementwise over `len` values.

 # Safety
 As [`as_velocity_from_score`].
 */
enum AsStatus as_clean_prediction(enum AsSchedule kind,
                                  double eps,
                                  double tau,
                                  const double *x,
                                  const double *velocity,
                                  size_t len,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANNEAL_STEIN_H */
