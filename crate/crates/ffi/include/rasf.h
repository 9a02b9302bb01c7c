#ifndef RASF_H
#define RASF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible entry point.
 */
typedef enum RasfStatus {
  RASF_STATUS_OK = 0,
  RASF_STATUS_NULL_POINTER = 1,
  RASF_STATUS_INVALID_ARGUMENT = 2,
  RASF_STATUS_OUT_OF_DOMAIN = 3,
  RASF_STATUS_INVALID_STATE = 4,
  RASF_STATUS_PARSE = 5,
  RASF_STATUS_FORMAT = 6,
  RASF_STATUS_IO = 7,
  /**
   * The output buffer length does not match the result size.
   */
  RASF_STATUS_BUFFER_SIZE = 8,
  /**
   * A Rust panic was caught at the boundary; the handle may be unusable.
   */
  RASF_STATUS_INTERNAL = 9,
} RasfStatus;

/**
 * Opaque feature grid.
 */
typedef struct RasfGrid RasfGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *rasf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rasf_version(void);

/**
 * Creates a `resolution³ × channels` grid with values uniform in
 * `[-init_scale, init_scale]`, drawn from `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum RasfStatus rasf_grid_new(size_t resolution,
                              size_t channels,
                              double init_scale,
                              uint64_t seed,
                              struct RasfGrid **out);

/**
 * Reads a grid file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RasfStatus rasf_grid_read(const char *path, struct RasfGrid **out);

/**
 * Writes a grid file with 4- (f32) or 8-byte (f64) values.
 *
 * # Safety
 * `grid` must be a live handle and `path` a NUL-terminated string.
 */
enum RasfStatus rasf_grid_write(const struct RasfGrid *grid,
                                const char *path,
                                uint8_t precision_bytes);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `grid` must be null or a handle not yet freed.
 */
void rasf_grid_free(struct RasfGrid *grid);

/**
 * Grid resolution, or 0 for a null handle.
 *
 * # Safety
 * `grid` must be null or a live handle.
 */
size_t rasf_grid_resolution(const struct RasfGrid *grid);

/**
 * Channel count, or 0 for a null handle.
 *
 * # Safety
 * `grid` must be null or a live handle.
 */
size_t rasf_grid_channels(const struct RasfGrid *grid);

/**
 * Trilinear sample at `xyz` into `out[channels]`.
 *
 * # Safety
 * `xyz` must point to 3 doubles, `out` to `out_len` writable doubles.
 */
enum RasfStatus rasf_grid_sample(const struct RasfGrid *grid,
                                 const double *xyz,
                                 double *out,
                                 size_t out_len);

/**
 * Embeds every point of a cloud given as `n_points` xyz triples. `k` is
 * the neighbor count including the point itself; 0 picks it from the
 * cloud size. `out` receives `n_points × channels` values, row-major.
 *
 * # Safety
 * `points` must point to `3 * n_points` doubles and `out` to `out_len`
 * writable doubles.
 */
enum RasfStatus rasf_embed_cloud(const struct RasfGrid *grid,
                                 const double *points,
                                 size_t n_points,
                                 size_t k,
                                 double *out,
                                 size_t out_len);

/**
 * Embeds every voxel of a `size³` volume. `occupancy` holds one byte per
 * voxel in `[ix][iy][iz]` order (`iz` fastest), nonzero meaning occupied.
 * `out` receives `size³ × channels` values in the same voxel order.
 *
 * # Safety
 * `occupancy` must point to `size³` bytes and `out` to `out_len` writable
 * doubles.
 */
enum RasfStatus rasf_embed_voxels(const struct RasfGrid *grid,
                                  const uint8_t *occupancy,
                                  size_t size,
                                  size_t radius_voxels,
                                  double *out,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RASF_H */
