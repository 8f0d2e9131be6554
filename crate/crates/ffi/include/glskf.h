#ifndef GLSKF_H
#define GLSKF_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum GlskfStatus {
  GLSKF_STATUS_OK = 0,
  GLSKF_STATUS_NULL_POINTER = 1,
  GLSKF_STATUS_INVALID_ARGUMENT = 2,
  GLSKF_STATUS_DIMENSION_MISMATCH = 3,
  GLSKF_STATUS_CONFIG = 4,
  GLSKF_STATUS_FORMAT = 5,
  GLSKF_STATUS_IO = 6,
  GLSKF_STATUS_NUMERICAL = 7,
  GLSKF_STATUS_PANIC = 8,
} GlskfStatus;

typedef struct GlskfConfig GlskfConfig;

typedef struct GlskfMask GlskfMask;

typedef struct GlskfResult GlskfResult;

typedef struct GlskfTensor GlskfTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. Owned by the library.
const char *glskf_last_error(void);

// Library version as a static NUL-terminated string.
const char *glskf_version(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must come from this library and not be freed twice.
void glskf_string_free(char *s);

// Creates a column-major tensor; `data` may be NULL for zeros.
//
// # Safety
// `shape` must hold `ndim` values and `data`, if non-NULL, their product.
enum GlskfStatus glskf_tensor_new(const size_t *shape,
                                  size_t ndim,
                                  const double *data,
                                  struct GlskfTensor **out);

// # Safety
// `path` must be a NUL-terminated string.
enum GlskfStatus glskf_tensor_read(const char *path, struct GlskfTensor **out);

// Reads an 8-bit grayscale or RGB image as a `width × height × channels` tensor in [0, 1].
//
// # Safety
// `path` must be a NUL-terminated string.
enum GlskfStatus glskf_tensor_read_image(const char *path, struct GlskfTensor **out);

// # Safety
// `t` must be a live handle and `path` a NUL-terminated string.
enum GlskfStatus glskf_tensor_write(const struct GlskfTensor *t, const char *path);

// # Safety
// `t` must be a live handle or NULL.
size_t glskf_tensor_ndim(const struct GlskfTensor *t);

// # Safety
// `t` must be a live handle or NULL.
size_t glskf_tensor_len(const struct GlskfTensor *t);

// Copies the extents into `out`, which must have room for `cap` values.
//
// # Safety
// `t` must be a live handle; `out` must hold `cap` values.
enum GlskfStatus glskf_tensor_shape(const struct GlskfTensor *t, size_t *out, size_t cap);

// Borrowed column-major data, valid while the handle lives.
//
// # Safety
// `t` must be a live handle or NULL.
const double *glskf_tensor_data(const struct GlskfTensor *t);

// # Safety
// `t` must come from this library and not be freed twice.
void glskf_tensor_free(struct GlskfTensor *t);

// Mask from one byte per entry (non-zero = observed), column-major.
//
// # Safety
// `shape` must hold `ndim` values and `observed` their product.
enum GlskfStatus glskf_mask_new(const size_t *shape,
                                size_t ndim,
                                const uint8_t *observed,
                                struct GlskfMask **out);

// Uniformly random mask observing `round(sr · N)` entries.
//
// # Safety
// `shape` must hold `ndim` values.
enum GlskfStatus glskf_mask_random(const size_t *shape,
                                   size_t ndim,
                                   double sr,
                                   uint64_t seed,
                                   struct GlskfMask **out);

// # Safety
// `path` must be a NUL-terminated string.
enum GlskfStatus glskf_mask_read(const char *path, struct GlskfMask **out);

// # Safety
// `m` must be a live handle and `path` a NUL-terminated string.
enum GlskfStatus glskf_mask_write(const struct GlskfMask *m, const char *path);

// # Safety
// `m` must be a live handle or NULL.
size_t glskf_mask_observed_count(const struct GlskfMask *m);

// # Safety
// `m` must come from this library and not be freed twice.
void glskf_mask_free(struct GlskfMask *m);

// Default configuration.
//
// # Safety
// `out` must be writable.
enum GlskfStatus glskf_config_new(struct GlskfConfig **out);

// Configuration from a JSON object; absent fields keep their defaults.
//
// # Safety
// `json` must be a NUL-terminated string.
enum GlskfStatus glskf_config_from_json(const char *json, struct GlskfConfig **out);

// JSON text of the configuration; release with [`glskf_string_free`].
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_to_json(const struct GlskfConfig *cfg, char **out);

// CP rank.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_rank(struct GlskfConfig *cfg, size_t value);

// Weight of the factor prior.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_rho(struct GlskfConfig *cfg, double value);

// Weight of the local component.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_gamma(struct GlskfConfig *cfg, double value);

// Outer iterations that update only the factors.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_warmup(struct GlskfConfig *cfg, size_t value);

// Outer-iteration cap.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_max_outer(struct GlskfConfig *cfg, size_t value);

// Relative change threshold for stopping.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_stop_eps(struct GlskfConfig *cfg, double value);

// Conjugate-gradient tolerance.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_cg_tol(struct GlskfConfig *cfg, double value);

// Conjugate-gradient iteration cap.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_cg_max_iter(struct GlskfConfig *cfg, size_t value);

// Seed for the factor initialization.
//
// # Safety
// `cfg` must be a live handle.
enum GlskfStatus glskf_config_set_seed(struct GlskfConfig *cfg, uint64_t value);

// One of `glskf`, `lskf`, `lstf`, `glslocal`.
//
// # Safety
// `cfg` must be a live handle and `mode` a NUL-terminated string.
enum GlskfStatus glskf_config_set_mode(struct GlskfConfig *cfg, const char *mode);

// Factor kernels, one spec string per mode (e.g. `"matern32(l=30)"`).
//
// # Safety
// `cfg` must be a live handle; `specs` must hold `n` NUL-terminated strings.
enum GlskfStatus glskf_config_set_factor_kernels(struct GlskfConfig *cfg,
                                                 const char *const *specs,
                                                 size_t n);

// Local kernels, one spec string per mode (e.g. `"matern32(l=5)*bohman(30)"`).
//
// # Safety
// `cfg` must be a live handle; `specs` must hold `n` NUL-terminated strings.
enum GlskfStatus glskf_config_set_local_kernels(struct GlskfConfig *cfg,
                                                const char *const *specs,
                                                size_t n);

// # Safety
// `cfg` must come from this library and not be freed twice.
void glskf_config_free(struct GlskfConfig *cfg);

// Completes `y` from the entries marked in `mask`.
//
// # Safety
// All handles must be live; `out` must be writable.
enum GlskfStatus glskf_fit(const struct GlskfConfig *cfg,
                           const struct GlskfTensor *y,
                           const struct GlskfMask *mask,
                           struct GlskfResult **out);

// Completed tensor, borrowed from the result.
//
// # Safety
// `r` must be a live handle or NULL.
const struct GlskfTensor *glskf_result_completed(const struct GlskfResult *r);

// Global (low-rank) component, borrowed from the result.
//
// # Safety
// `r` must be a live handle or NULL.
const struct GlskfTensor *glskf_result_global(const struct GlskfResult *r);

// Local component, borrowed from the result.
//
// # Safety
// `r` must be a live handle or NULL.
const struct GlskfTensor *glskf_result_local(const struct GlskfResult *r);

// # Safety
// `r` must be a live handle or NULL.
size_t glskf_result_iterations(const struct GlskfResult *r);

// # Safety
// `r` must be a live handle or NULL.
bool glskf_result_converged(const struct GlskfResult *r);

// Objective after the last update, or NaN.
//
// # Safety
// `r` must be a live handle or NULL.
double glskf_result_objective(const struct GlskfResult *r);

// # Safety
// `r` must come from this library and not be freed twice.
void glskf_result_free(struct GlskfResult *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLSKF_H */
