/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef OMICSURV_H
#define OMICSURV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OmsStatus {
  OMS_STATUS_OK = 0,
  OMS_STATUS_CONFIG_ERROR = 2,
  OMS_STATUS_DATA_ERROR = 3,
  OMS_STATUS_RUNTIME_ERROR = 4,
  OMS_STATUS_NULL_POINTER = 5,
  OMS_STATUS_INVALID_UTF8 = 6,
  OMS_STATUS_PANIC = 7,
} OmsStatus;

/**
 * Loaded or normalized expression matrix.
 */
typedef struct OmsExpression OmsExpression;

/**
 * Kaplan-Meier curve over all records of a clinical file.
 */
typedef struct OmsKmCurve OmsKmCurve;

/**
 * Fitted model or ensemble loaded from a model JSON file.
 */
typedef struct OmsModel OmsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *omicsurv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *omicsurv_version(void);

/**
 * Mann-Whitney AUC of `scores` against 0/1 `labels`.
 *
 * # Safety
 * `scores` and `labels` must point to `n` readable elements; `out` must be writable.
 */
enum OmsStatus omicsurv_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Horizon label for one patient: 1 survived past `horizon`, 0 died by it,
 * -1 lost to follow-up before it.
 *
 * # Safety
 * `out` must be writable.
 */
enum OmsStatus omicsurv_make_label(double time_months,
                                   bool event,
                                   double horizon_months,
                                   int32_t *out);

/**
 * Exact t-SNE of a row-major `n × m` matrix into `out` (row-major `n × dims`).
 * Rows are keyed by their index for initialization.
 *
 * # Safety
 * `x` must hold `n*m` values and `out` room for `n*dims`.
 */
enum OmsStatus omicsurv_tsne(const double *x,
                             size_t n,
                             size_t m,
                             size_t dims,
                             double perplexity,
                             size_t iterations,
                             uint64_t seed,
                             double *out);

/**
 * Load a patients-as-rows expression CSV.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OmsStatus omicsurv_expression_load(const char *path, struct OmsExpression **out);

/**
 * # Safety
 * `m` must be a live handle; the outputs must be writable.
 */
enum OmsStatus omicsurv_expression_shape(const struct OmsExpression *m,
                                         size_t *n_patients,
                                         size_t *n_genes);

/**
 * Quantile-normalize `target` onto `reference` over their shared genes.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum OmsStatus omicsurv_expression_fsqn(const struct OmsExpression *target,
                                        const struct OmsExpression *reference,
                                        struct OmsExpression **out);

/**
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum OmsStatus omicsurv_expression_write(const struct OmsExpression *m, const char *path);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void omicsurv_expression_free(struct OmsExpression *m);

/**
 * Kaplan-Meier curve over every record of a clinical CSV.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OmsStatus omicsurv_km_load(const char *path, struct OmsKmCurve **out);

/**
 * Number of distinct event times on the curve.
 *
 * # Safety
 * `c` must be null or a live handle.
 */
size_t omicsurv_km_len(const struct OmsKmCurve *c);

/**
 * # Safety
 * `c` must be a live handle; the outputs must be writable.
 */
enum OmsStatus omicsurv_km_point(const struct OmsKmCurve *c,
                                 size_t index,
                                 double *time,
                                 double *survival);

/**
 * S(t), right-continuous; 1 before the first event.
 *
 * # Safety
 * `c` must be a live handle; `out` must be writable.
 */
enum OmsStatus omicsurv_km_survival_at(const struct OmsKmCurve *c, double t, double *out);

/**
 * # Safety
 * `c` must be null or a handle not yet freed.
 */
void omicsurv_km_free(struct OmsKmCurve *c);

/**
 * Load a model file written by the `train` or `rptrain` commands.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OmsStatus omicsurv_model_load(const char *path, struct OmsModel **out);

/**
 * Feature count the model expects, or 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t omicsurv_model_n_features(const struct OmsModel *m);

/**
 * Scores for a row-major `n × m` matrix; larger means more likely to survive.
 *
 * # Safety
 * `x` must hold `n*m` values and `out` room for `n`.
 */
enum OmsStatus omicsurv_model_predict(const struct OmsModel *model,
                                      const double *x,
                                      size_t n,
                                      size_t m,
                                      double *out);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void omicsurv_model_free(struct OmsModel *m);

/**
 * Run the experiment described by a TOML config file. `workers` of 0 uses
 * the environment variable or the config value.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
enum OmsStatus omicsurv_run_experiment(const char *config_path, size_t workers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OMICSURV_H */
