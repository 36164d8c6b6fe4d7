#ifndef TURBSTOCH_H
#define TURBSTOCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum TsStatus {
  TS_STATUS_OK = 0,
  // A required pointer was null.
  TS_STATUS_NULL_POINTER = 1,
  // An argument is out of range or malformed (including non-UTF-8 paths).
  TS_STATUS_INVALID_ARGUMENT = 2,
  // Array lengths or field lengths are incompatible.
  TS_STATUS_SHAPE = 3,
  // The file could not be read.
  TS_STATUS_IO = 4,
  // The file is not a valid checkpoint or field file.
  TS_STATUS_FORMAT = 5,
  // The model is not usable for the request (e.g. untrained statistics).
  TS_STATUS_STATE = 6,
  // A statistic is undefined for the given data.
  TS_STATUS_NUMERIC = 7,
  // An internal error; the call was aborted.
  TS_STATUS_INTERNAL = 8,
} TsStatus;

// A loaded or generated field ensemble.
typedef struct TsEnsemble TsEnsemble;

// A loaded model.
typedef struct TsModel TsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ts_version(void);

// Copy the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `cap`). Returns the buffer size needed for the full message.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t ts_last_error(char *buf, size_t cap);

// Load a checkpoint into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string; `model` must be writable.
enum TsStatus ts_model_load(const char *path, struct TsModel **model);

// Release a model handle. Null is ignored.
//
// # Safety
// `model` must come from [`ts_model_load`] and not be used afterwards.
void ts_model_free(struct TsModel *model);

// Number of scalar parameters of the model.
//
// # Safety
// `model` must be a live handle; `count` must be writable.
enum TsStatus ts_model_param_count(const struct TsModel *model, size_t *count);

// Generate one field of length `n` from `seed` into `field` (`n` doubles).
//
// # Safety
// `model` must be a live handle; `field` must hold `n` doubles.
enum TsStatus ts_generate_field(const struct TsModel *model,
                                uint64_t seed,
                                size_t n,
                                double *field);

// Generate `count` realizations of length `n` into a new ensemble handle.
// Realization `i` is seeded from `(base_seed, i)`.
//
// # Safety
// `model` must be a live handle; `ensemble` must be writable.
enum TsStatus ts_generate_ensemble(const struct TsModel *model,
                                   uint64_t base_seed,
                                   size_t count,
                                   size_t n,
                                   struct TsEnsemble **ensemble);

// Read a field file into a new ensemble handle.
//
// # Safety
// `path` must be a NUL-terminated string; `ensemble` must be writable.
enum TsStatus ts_fields_read(const char *path, struct TsEnsemble **ensemble);

// Number of realizations and their common length.
//
// # Safety
// `ensemble` must be a live handle; `count` and `n` must be writable.
enum TsStatus ts_fields_shape(const struct TsEnsemble *ensemble, size_t *count, size_t *n);

// Copy realization `index` into `field` (`n` doubles).
//
// # Safety
// `ensemble` must be a live handle; `field` must hold `n` doubles.
enum TsStatus ts_fields_copy(const struct TsEnsemble *ensemble, size_t index, double *field);

// Release an ensemble handle. Null is ignored.
//
// # Safety
// `ensemble` must come from this library and not be used afterwards.
void ts_fields_free(struct TsEnsemble *ensemble);

// `S_order(lag)` of one field of length `len`.
//
// # Safety
// `field` must hold `len` doubles; `value` must be writable.
enum TsStatus ts_structure_function(const double *field,
                                    size_t len,
                                    size_t lag,
                                    int32_t order,
                                    double *value);

// ln S₂, skewness and flatness of one field at `nlags` integer lags.
// Each output array holds `nlags` doubles.
//
// # Safety
// `field` must hold `len` doubles, `lags` `nlags` values, and each output `nlags` doubles.
enum TsStatus ts_field_statistics(const double *field,
                                  size_t len,
                                  const size_t *lags,
                                  size_t nlags,
                                  double *log_s2,
                                  double *skewness,
                                  double *flatness);

// Default reference curves (ln S₂, skewness, ln(ℱ/3)) at `count` positive,
// strictly increasing scales. Each output array holds `count` doubles.
//
// # Safety
// `scales` must hold `count` doubles and each output `count` doubles.
enum TsStatus ts_reference_curves(const double *scales,
                                  size_t count,
                                  double *log_s2,
                                  double *skewness,
                                  double *log_f3);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TURBSTOCH_H */
