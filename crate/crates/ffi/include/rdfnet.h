#ifndef RDFNET_H
#define RDFNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  RDF_STATUS_OK = 0,
  RDF_STATUS_NULL_ARGUMENT = 1,
  RDF_STATUS_INVALID_ARGUMENT = 2,
  RDF_STATUS_DIMENSION = 3,
  RDF_STATUS_DOMAIN = 4,
  RDF_STATUS_FORMAT = 5,
  RDF_STATUS_IO = 6,
  RDF_STATUS_NON_FINITE = 7,
  RDF_STATUS_INTERNAL = 8,
  RDF_STATUS_PANIC = 9,
  RDF_STATUS_BUFFER_TOO_SMALL = 10,
} RdfStatus;

/**
 * A spectral cube, `n_lambda` bands of `nx x ny`, band-major.
 */
typedef struct RdfCube RdfCube;

/**
 * A coded aperture with its dispersion and band count.
 */
typedef struct RdfMaskStack RdfMaskStack;

/**
 * A detector frame, `nx x ny_ext`.
 */
typedef struct RdfMeasurement RdfMeasurement;

/**
 * Trained network parameters.
 */
typedef struct RdfModel RdfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next `rdf_*` call on this thread.
 */
const char *rdf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rdf_version(void);

/**
 * Copies `nx * ny * n_lambda` band-major values into a new cube. Non-finite
 * values are rejected.
 *
 * # Safety
 * `data` must point to that many readable doubles; `out` must be writable.
 */
RdfStatus rdf_cube_new(size_t nx, size_t ny, size_t n_lambda, const double *data, RdfCube **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
RdfStatus rdf_cube_read(const char *path, RdfCube **out);

/**
 * # Safety
 * `cube` must be a live handle; `path` a NUL-terminated string.
 */
RdfStatus rdf_cube_write(const RdfCube *cube, const char *path);

/**
 * # Safety
 * `cube` must be a live handle; the out-pointers must be writable or null.
 */
RdfStatus rdf_cube_dims(const RdfCube *cube, size_t *nx, size_t *ny, size_t *n_lambda);

/**
 * Copies the cube values into `buffer`, which must hold at least `capacity` doubles.
 *
 * # Safety
 * `cube` must be a live handle; `buffer` must be writable for `capacity` doubles.
 */
RdfStatus rdf_cube_copy_data(const RdfCube *cube, double *buffer, size_t capacity);

/**
 * # Safety
 * `cube` must be null or a handle not yet freed.
 */
void rdf_cube_free(RdfCube *cube);

/**
 * Builds a mask stack from an `nx x ny` transmission pattern in `[0, 1]`.
 *
 * # Safety
 * `mask` must point to `nx * ny` readable doubles; `out` must be writable.
 */
RdfStatus rdf_mask_stack_new(size_t nx,
                             size_t ny,
                             const double *mask,
                             size_t n_lambda,
                             size_t step_px,
                             RdfMaskStack **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
RdfStatus rdf_mask_stack_read(const char *path,
                              size_t n_lambda,
                              size_t step_px,
                              RdfMaskStack **out);

/**
 * # Safety
 * `masks` must be a live handle; the out-pointers must be writable or null.
 */
RdfStatus rdf_mask_stack_dims(const RdfMaskStack *masks,
                              size_t *nx,
                              size_t *ny,
                              size_t *n_lambda,
                              size_t *ny_ext);

/**
 * # Safety
 * `masks` must be null or a handle not yet freed.
 */
void rdf_mask_stack_free(RdfMaskStack *masks);

/**
 * # Safety
 * `data` must point to `nx * ny_ext` readable doubles; `out` must be writable.
 */
RdfStatus rdf_measurement_new(size_t nx, size_t ny_ext, const double *data, RdfMeasurement **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
RdfStatus rdf_measurement_read(const char *path, RdfMeasurement **out);

/**
 * # Safety
 * `meas` must be a live handle; the out-pointers must be writable or null.
 */
RdfStatus rdf_measurement_dims(const RdfMeasurement *meas, size_t *nx, size_t *ny_ext);

/**
 * # Safety
 * `meas` must be a live handle; `buffer` must be writable for `capacity` doubles.
 */
RdfStatus rdf_measurement_copy_data(const RdfMeasurement *meas, double *buffer, size_t capacity);

/**
 * # Safety
 * `meas` must be null or a handle not yet freed.
 */
void rdf_measurement_free(RdfMeasurement *meas);

/**
 * Noiseless snapshot of `cube` through `masks`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
RdfStatus rdf_forward(const RdfMaskStack *masks, const RdfCube *cube, RdfMeasurement **out);

/**
 * Transpose of [`rdf_forward`].
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
RdfStatus rdf_adjoint(const RdfMaskStack *masks, const RdfMeasurement *meas, RdfCube **out);

/**
 * DCT-sparse FISTA reconstruction. A non-positive `rho` selects the safe
 * step `1 / lambda_max`; `accelerated = 0` runs plain ISTA.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
RdfStatus rdf_fista(const RdfMaskStack *masks,
                    const RdfMeasurement *meas,
                    double lambda,
                    double rho,
                    size_t iterations,
                    int32_t accelerated,
                    RdfCube **out);

/**
 * Loads an `RDFCK1` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
RdfStatus rdf_model_load(const char *path, RdfModel **out);

/**
 * Band count the model reconstructs.
 *
 * # Safety
 * `model` must be a live handle; `n_lambda` must be writable.
 */
RdfStatus rdf_model_bands(const RdfModel *model, size_t *n_lambda);

/**
 * # Safety
 * Handles must be live; `out` must be writable.
 */
RdfStatus rdf_model_reconstruct(const RdfModel *model,
                                const RdfMaskStack *masks,
                                const RdfMeasurement *meas,
                                RdfCube **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void rdf_model_free(RdfModel *model);

/**
 * Whole-cube PSNR in dB; identical inputs give `+inf`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
RdfStatus rdf_psnr(const RdfCube *x, const RdfCube *reference, double data_range, double *out);

/**
 * Band-averaged SSIM (11x11 Gaussian window, data range 1).
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
RdfStatus rdf_ssim(const RdfCube *x, const RdfCube *reference, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RDFNET_H */
