#ifndef DIK_H
#define DIK_H

#pragma once

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DikStatus {
  DIK_STATUS_OK = 0,
  DIK_STATUS_NULL_ARGUMENT = 1,
  DIK_STATUS_INVALID_UTF8 = 2,
  DIK_STATUS_PARSE = 3,
  DIK_STATUS_VALIDATION = 4,
  DIK_STATUS_DIMENSION_MISMATCH = 5,
  DIK_STATUS_OUT_OF_BOUNDS = 6,
  DIK_STATUS_CHECKSUM_MISMATCH = 7,
  DIK_STATUS_INFEASIBLE = 8,
  DIK_STATUS_IO = 9,
  DIK_STATUS_INTERNAL = 10,
  DIK_STATUS_PANIC = 11,
} DikStatus;

/**
 * Denoiser handle.
 */
typedef struct DikDenoiser DikDenoiser;

/**
 * Token grid handle.
 */
typedef struct DikGrid DikGrid;

/**
 * Grounding mask handle.
 */
typedef struct DikMask DikMask;

/**
 * Residual stack handle.
 */
typedef struct DikStack DikStack;

/**
 * Numeric parameters of inversion and editing.
 */
typedef struct DikParams {
  size_t timesteps;
  double mask_temperature;
  double lambda;
  double lai_margin;
  double temperature;
} DikParams;

/**
 * Region metrics.
 */
typedef struct DikMetrics {
  double mse;
  double psnr;
  double ssim;
} DikMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next library call on the same thread.
 */
const char *dik_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void dik_string_free(char *s);

/**
 * Library defaults: 64 steps, deterministic masking, λ 0.2, margin 1, τ 1.
 */
struct DikParams dik_params_default(void);

/**
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum DikStatus dik_grid_from_json(const char *json, struct DikGrid **out);

/**
 * # Safety
 * `grid` must be a live handle; `out` must be writable.
 */
enum DikStatus dik_grid_to_json(const struct DikGrid *grid, char **out);

/**
 * # Safety
 * `grid` must be a live handle; `height` and `width` must be writable.
 */
enum DikStatus dik_grid_shape(const struct DikGrid *grid, size_t *height, size_t *width);

/**
 * # Safety
 * `grid` must be null or a handle from this library, freed once.
 */
void dik_grid_free(struct DikGrid *grid);

/**
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum DikStatus dik_mask_from_json(const char *json, struct DikMask **out);

/**
 * # Safety
 * `mask` must be a live handle; `out` must be writable.
 */
enum DikStatus dik_mask_to_json(const struct DikMask *mask, char **out);

/**
 * Number of set positions, or 0 for a null handle.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
size_t dik_mask_count(const struct DikMask *mask);

/**
 * # Safety
 * `mask` must be null or a handle from this library, freed once.
 */
void dik_mask_free(struct DikMask *mask);

/**
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum DikStatus dik_stack_from_json(const char *json, struct DikStack **out);

/**
 * # Safety
 * `stack` must be a live handle; `out` must be writable.
 */
enum DikStatus dik_stack_to_json(const struct DikStack *stack, char **out);

/**
 * # Safety
 * `stack` must be null or a handle from this library, freed once.
 */
void dik_stack_free(struct DikStack *stack);

/**
 * Parse a denoiser spec such as `{"kind":"local-hash","vocab_size":32}`.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum DikStatus dik_denoiser_from_json(const char *json, struct DikDenoiser **out);

/**
 * # Safety
 * `out` must be writable.
 */
enum DikStatus dik_denoiser_local_hash(size_t vocab_size,
                                       size_t locality_radius,
                                       struct DikDenoiser **out);

/**
 * # Safety
 * `denoiser` must be null or a handle from this library, freed once.
 */
void dik_denoiser_free(struct DikDenoiser *denoiser);

/**
 * Ground a prompt JSON (`point`, `box` or `text`) on `grid`.
 *
 * # Safety
 * `grid` must be a live handle, `prompt_json` a nul-terminated string and
 * `out` writable.
 */
enum DikStatus dik_ground(const struct DikGrid *grid,
                          const char *prompt_json,
                          struct DikMask **out);

/**
 * Stage 1: residual stack of `grid` over `mask` under the source prompt.
 *
 * # Safety
 * Handles must be live, `prompt` must point at `prompt_len` values (or be
 * null with length 0), `params` must be readable and `out` writable.
 */
enum DikStatus dik_invert(const struct DikGrid *grid,
                          const struct DikMask *mask,
                          const uint32_t *prompt,
                          size_t prompt_len,
                          const struct DikDenoiser *denoiser,
                          const struct DikParams *params,
                          uint64_t seed,
                          struct DikStack **out);

/**
 * Stage 2: replay `stack` on its source grid under the target prompt.
 *
 * # Safety
 * As for [`dik_invert`].
 */
enum DikStatus dik_edit(const struct DikGrid *grid,
                        const struct DikStack *stack,
                        const uint32_t *prompt,
                        size_t prompt_len,
                        const struct DikDenoiser *denoiser,
                        const struct DikParams *params,
                        uint64_t seed,
                        struct DikGrid **out);

/**
 * MSE, PSNR and SSIM of two token grids (rendered through the palette)
 * over `region`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum DikStatus dik_region_metrics(const struct DikGrid *reference,
                                  const struct DikGrid *candidate,
                                  const struct DikMask *region,
                                  struct DikMetrics *out);

/**
 * Run one benchmark case JSON under a pipeline config JSON and return the
 * case report JSON.
 *
 * # Safety
 * Strings must be nul-terminated; `out` must be writable.
 */
enum DikStatus dik_run_case(const char *case_json, const char *pipeline_json, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIK_H */
