#ifndef MREM_H
#define MREM_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MremMethod {
  MREM_METHOD_REM = 0,
  MREM_METHOD_MREM_S = 1,
  MREM_METHOD_MREM_P_LOCKSTEP = 2,
  MREM_METHOD_MREM_P_THREADS = 3,
} MremMethod;

typedef enum MremStatus {
  MREM_STATUS_OK = 0,
  MREM_STATUS_NULL_POINTER = 1,
  MREM_STATUS_INVALID_ARGUMENT = 2,
  MREM_STATUS_IO = 3,
  MREM_STATUS_FORMAT = 4,
  MREM_STATUS_TRAINING = 5,
  MREM_STATUS_RUNTIME = 6,
  MREM_STATUS_PANIC = 7,
} MremStatus;

/**
 * A full-precision or quantized model.
 */
typedef struct MremModel MremModel;

typedef struct MremModelConfig {
  size_t layers;
  size_t d_model;
  size_t heads;
  size_t d_ff;
  size_t vocab;
  size_t max_seq_len;
  size_t num_classes;
} MremModelConfig;

/**
 * Bit-widths; 0 leaves that class of sites in full precision.
 */
typedef struct MremBits {
  uint32_t weight;
  uint32_t embedding;
  uint32_t activation;
  bool per_channel;
} MremBits;

typedef struct MremQuantizeOptions {
  enum MremMethod method;
  struct MremBits bits;
  size_t steps;
  size_t modules;
  size_t queue_capacity;
  size_t batch_size;
  double lr;
  double teacher_fraction;
  uint64_t seed;
} MremQuantizeOptions;

typedef struct MremSpeedupReport {
  double mrem_p_ticks;
  double sequential_ticks;
  double gpipe_ticks;
  double bubble;
  double speedup;
} MremSpeedupReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mrem_version(void);

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *mrem_last_error(void);

/**
 * Default toy-task model dimensions.
 */
struct MremModelConfig mrem_default_config(void);

/**
 * Default quantization options: MREM-P lockstep at 2-2-8.
 */
struct MremQuantizeOptions mrem_default_quantize_options(void);

/**
 * Randomly initialized full-precision model.
 *
 * # Safety
 * `config` must point to a valid config and `out` to writable storage.
 */
enum MremStatus mrem_model_new_random(const struct MremModelConfig *config,
                                      uint64_t seed,
                                      struct MremModel **out);

/**
 * Load an MRMQ checkpoint, full-precision or quantized.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum MremStatus mrem_model_load(const char *path, struct MremModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MremStatus mrem_model_save(const struct MremModel *model, const char *path);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mrem_model_free(struct MremModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MremStatus mrem_model_config(const struct MremModel *model, struct MremModelConfig *out);

/**
 * Bit-widths of a quantized model; all zero for a full-precision one.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MremStatus mrem_model_bits(const struct MremModel *model, struct MremBits *out);

/**
 * Classify `batch × seq` row-major token ids, writing `batch × num_classes`
 * logits.
 *
 * # Safety
 * `ids` must hold `batch * seq` values and `logits` have room for
 * `logits_len` floats.
 */
enum MremStatus mrem_model_forward(const struct MremModel *model,
                                   const uint32_t *ids,
                                   size_t batch,
                                   size_t seq,
                                   float *logits,
                                   size_t logits_len);

/**
 * Post-training quantization of a full-precision model against
 * `rows × seq` calibration token ids.
 *
 * # Safety
 * `fp` must be a live full-precision handle, `calib_ids` must hold
 * `rows * seq` values, `options` must be valid and `out` writable.
 */
enum MremStatus mrem_quantize(const struct MremModel *fp,
                              const uint32_t *calib_ids,
                              size_t rows,
                              size_t seq,
                              const struct MremQuantizeOptions *options,
                              struct MremModel **out);

/**
 * Teacher-forcing weight `max(1 - t/t0, 0)`; 0 when `t0` is 0.
 */
double mrem_lambda_schedule(size_t t, size_t t0);

/**
 * GPipe bubble fraction `(N-1)/(N+M-1)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum MremStatus mrem_gpipe_bubble(size_t stages, size_t micro_batches, double *out);

/**
 * Closed-form tick counts for MREM-P, sequential MREM and GPipe.
 *
 * # Safety
 * `out` must be writable.
 */
enum MremStatus mrem_simulate_speedup(size_t modules,
                                      size_t steps,
                                      size_t queue_capacity,
                                      size_t micro_batches,
                                      struct MremSpeedupReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MREM_H */
