#ifndef SLIMNET_H
#define SLIMNET_H

/* Generated from the slimnet-capi crate by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum SnStatus {
  SN_OK = 0,
  /**
   * A pointer was null or an argument value was out of range.
   */
  SN_ERR_INVALID_ARGUMENT = 1,
  /**
   * Malformed manifest or weights blob.
   */
  SN_ERR_PARSE = 2,
  /**
   * The model violates a structural invariant.
   */
  SN_ERR_VALIDATION = 3,
  /**
   * A decomposition failed numerically.
   */
  SN_ERR_NUMERIC = 4,
  /**
   * Filesystem error surfaced by the core library.
   */
  SN_ERR_IO = 5,
  /**
   * A panic was caught at the boundary; state is unchanged.
   */
  SN_ERR_PANIC = 6,
} SnStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct SnModel SnModel;

/**
 * A byte buffer allocated by this library. Free with [`sn_buffer_free`].
 */
typedef struct SnBuffer {
  uint8_t *data;
  size_t len;
} SnBuffer;

/**
 * Options for [`sn_optimize`]. Obtain defaults from
 * [`sn_optimize_options_default`] and override fields as needed.
 */
typedef struct SnOptimizeOptions {
  /**
   * Accuracy-vs-speed knob in [0, 1]; 1 admits only exact rewrites.
   */
  double p;
  /**
   * Accuracy threshold applied at the first representation layer; the
   * threshold decays linearly to `p` at the last.
   */
  double start_threshold;
  /**
   * 0 = cpu, 1 = gpu (restricts intermediate widths to powers of two).
   */
  int32_t target;
  /**
   * Maximum factorization chain depth (>= 1).
   */
  uint32_t max_chain;
  /**
   * When nonzero, `seed` is recorded in the report configuration.
   */
  int32_t has_seed;
  uint64_t seed;
} SnOptimizeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread. Never null.
 */
const char *sn_last_error_message(void);

/**
 * Parses a model from a JSON manifest and a weights blob. Batch-norm
 * layers without an explicit epsilon use 1e-5.
 *
 * # Safety
 * `manifest`/`weights` must point to readable regions of the given
 * lengths; `out` must be a valid pointer.
 */
enum SnStatus sn_model_load(const uint8_t *manifest,
                            size_t manifest_len,
                            const uint8_t *weights,
                            size_t weights_len,
                            struct SnModel **out);

/**
 * As [`sn_model_load`] with an explicit default batch-norm epsilon.
 *
 * # Safety
 * Same contract as [`sn_model_load`].
 */
enum SnStatus sn_model_load_with_eps(const uint8_t *manifest,
                                     size_t manifest_len,
                                     const uint8_t *weights,
                                     size_t weights_len,
                                     double default_bn_eps,
                                     struct SnModel **out);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `m` must be null or a pointer returned by this library that has not
 * been freed.
 */
void sn_model_free(struct SnModel *m);

/**
 * Releases a buffer returned by this library. Zeroed buffers are a no-op.
 *
 * # Safety
 * `buf` must be null or point to an `SnBuffer` previously filled by this
 * library whose `data` has not been freed.
 */
void sn_buffer_free(struct SnBuffer *buf);

/**
 * Serializes a model to a manifest + weights pair.
 *
 * # Safety
 * `m` must be a live model handle; `manifest`/`weights` must be valid
 * pointers to receive the buffers.
 */
enum SnStatus sn_model_save(const struct SnModel *m,
                            struct SnBuffer *manifest,
                            struct SnBuffer *weights);

/**
 * Re-runs structural validation on a model.
 *
 * # Safety
 * `m` must be a live model handle.
 */
enum SnStatus sn_model_validate(const struct SnModel *m);

/**
 * Number of nodes in the model graph (including the input node).
 *
 * # Safety
 * `m` must be a live model handle; `out` must be a valid pointer.
 */
enum SnStatus sn_model_node_count(const struct SnModel *m, size_t *out);

/**
 * Total multiply count of one inference pass.
 *
 * # Safety
 * `m` must be a live model handle; `out` must be a valid pointer.
 */
enum SnStatus sn_model_flops(const struct SnModel *m, uint64_t *out);

/**
 * Applies the lossless fusion pass, producing a new model handle.
 *
 * # Safety
 * `m` must be a live model handle; `out` must be a valid pointer.
 */
enum SnStatus sn_fuse(const struct SnModel *m, struct SnModel **out);

/**
 * Default optimization options: p = 0.5, start threshold 0.99, cpu
 * target, chains up to depth 2, no seed.
 */
struct SnOptimizeOptions sn_optimize_options_default(void);

/**
 * Runs the full optimization pass (fusion, then approximation). On
 * success `out_model` receives the optimized model and, when
 * `out_report_json` is non-null, it receives the audit report as UTF-8
 * JSON.
 *
 * # Safety
 * `m` must be a live model handle; `opts` may be null (defaults);
 * `out_model` must be valid; `out_report_json` may be null.
 */
enum SnStatus sn_optimize(const struct SnModel *m,
                          const struct SnOptimizeOptions *opts,
                          struct SnModel **out_model,
                          struct SnBuffer *out_report_json);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SLIMNET_H */
