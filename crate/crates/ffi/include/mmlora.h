#ifndef MMLORA_H
#define MMLORA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmloraStatus {
  MMLORA_STATUS_OK = 0,
  MMLORA_STATUS_NULL_POINTER = 1,
  MMLORA_STATUS_INVALID_UTF8 = 2,
  MMLORA_STATUS_INVALID_ARGUMENT = 3,
  MMLORA_STATUS_CONFIG = 4,
  MMLORA_STATUS_IO = 5,
  MMLORA_STATUS_CORRUPT = 6,
  MMLORA_STATUS_STAGE = 7,
  MMLORA_STATUS_TRAINING = 8,
  MMLORA_STATUS_PANIC = 9,
} MmloraStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct MmloraBundle MmloraBundle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *mmlora_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MmloraStatus mmlora_bundle_load(const char *path, struct MmloraBundle **out);

/**
 * # Safety
 * `bundle` must be null or a handle from [`mmlora_bundle_load`] not yet freed.
 */
void mmlora_bundle_free(struct MmloraBundle *bundle);

/**
 * # Safety
 * `bundle` must be a live handle; the out pointers must be writable.
 */
enum MmloraStatus mmlora_bundle_shape(const struct MmloraBundle *bundle,
                                      uintptr_t *modalities,
                                      uintptr_t *input_dim,
                                      uintptr_t *classes);

/**
 * Class probabilities for `rows` samples. `inputs` holds one pointer per
 * modality, each to `rows * input_dim` row-major values; `out` receives
 * `rows * classes` values. Bundles with a fusion head predict through it,
 * all others average the per-modality distributions.
 *
 * # Safety
 * Every pointer must be valid for the lengths described above.
 */
enum MmloraStatus mmlora_bundle_predict(const struct MmloraBundle *bundle,
                                        const double *const *inputs,
                                        uintptr_t rows,
                                        double *out,
                                        uintptr_t out_len);

/**
 * # Safety
 * `bundle` must be a live handle and `path` a NUL-terminated string.
 */
enum MmloraStatus mmlora_bundle_export_merged(const struct MmloraBundle *bundle, const char *path);

/**
 * Runs an experiment from a JSON config document and hands back the
 * results CSV, to be released with [`mmlora_string_free`].
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out_csv` writable.
 */
enum MmloraStatus mmlora_run_experiment(const char *config_json, char **out_csv);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void mmlora_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMLORA_H */
