#ifndef CPISAC_H
#define CPISAC_H

#pragma once

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum CpisacStatus {
  CPISAC_STATUS_OK = 0,
  CPISAC_STATUS_NULL_POINTER = 1,
  CPISAC_STATUS_INVALID_UTF8 = 2,
  CPISAC_STATUS_INVALID_CONFIG = 3,
  CPISAC_STATUS_RUNTIME = 4,
  CPISAC_STATUS_OUT_OF_RANGE = 5,
  CPISAC_STATUS_BUFFER_TOO_SMALL = 6,
  CPISAC_STATUS_PANIC = 7,
} CpisacStatus;

/**
 * Output of a cancellation run.
 */
typedef struct CpisacEstimates CpisacEstimates;

/**
 * One synthesized frame.
 */
typedef struct CpisacFrame CpisacFrame;

/**
 * Parsed scenario or experiment.
 */
typedef struct CpisacScenario CpisacScenario;

/**
 * One estimated target.
 */
typedef struct CpisacEstimate {
  double tau_s;
  double fd_hz;
  double range_m;
  double velocity_mps;
  double alpha_re;
  double alpha_im;
} CpisacEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *cpisac_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cpisac_version(void);

/**
 * Parses an experiment, a scenario or a bare scenario configuration.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CpisacStatus cpisac_scenario_from_json(const char *json, struct CpisacScenario **out);

/**
 * # Safety
 * `s` must come from [`cpisac_scenario_from_json`] or be NULL.
 */
void cpisac_scenario_free(struct CpisacScenario *s);

/**
 * Number of targets drawn per frame.
 *
 * # Safety
 * `s` must be a live scenario handle.
 */
uintptr_t cpisac_scenario_target_count(const struct CpisacScenario *s);

/**
 * Writes the 16-digit configuration hash and a terminating NUL into `buf`.
 *
 * # Safety
 * `s` must be a live scenario handle and `buf` writable for `len` bytes.
 */
enum CpisacStatus cpisac_scenario_config_hash(const struct CpisacScenario *s,
                                              char *buf,
                                              uintptr_t len);

/**
 * Closed-form SINR (linear) of the scenario's fixed targets.
 *
 * # Safety
 * `s` must be a live scenario handle; output pointers must be valid.
 */
enum CpisacStatus cpisac_sinr_closed_form(const struct CpisacScenario *s,
                                          double *sinr_exact,
                                          double *sinr_asymptotic);

/**
 * Synthesizes one noisy frame. Equal seeds give identical frames.
 *
 * # Safety
 * `s` must be a live scenario handle and `out` a valid pointer.
 */
enum CpisacStatus cpisac_frame_simulate(const struct CpisacScenario *s,
                                        uint64_t seed,
                                        struct CpisacFrame **out);

/**
 * # Safety
 * `f` must come from [`cpisac_frame_simulate`] or be NULL.
 */
void cpisac_frame_free(struct CpisacFrame *f);

/**
 * Grid size: `rows` subcarriers by `cols` symbols.
 *
 * # Safety
 * `f` must be a live frame handle; output pointers must be valid.
 */
enum CpisacStatus cpisac_frame_dims(const struct CpisacFrame *f, uintptr_t *rows, uintptr_t *cols);

/**
 * Copies one component (a [`CpisacComponent`] value), column-major, into
 * `re`/`im` arrays of `len` elements each (`len` must be at least rows * cols).
 *
 * # Safety
 * `f` must be a live frame handle; `re` and `im` writable for `len` doubles.
 */
enum CpisacStatus cpisac_frame_copy(const struct CpisacFrame *f,
                                    uint32_t which,
                                    double *re,
                                    double *im,
                                    uintptr_t len);

/**
 * SIC-DFT on a frame.
 *
 * # Safety
 * Handles must be live; `out` must be a valid pointer.
 */
enum CpisacStatus cpisac_sic_dft(const struct CpisacScenario *s,
                                 const struct CpisacFrame *f,
                                 struct CpisacEstimates **out);

/**
 * SIC-ESPRIT on a frame. The model order defaults to the target count.
 *
 * # Safety
 * Handles must be live; `out` must be a valid pointer.
 */
enum CpisacStatus cpisac_sic_esprit(const struct CpisacScenario *s,
                                    const struct CpisacFrame *f,
                                    struct CpisacEstimates **out);

/**
 * # Safety
 * `e` must be a live estimates handle.
 */
uintptr_t cpisac_estimates_len(const struct CpisacEstimates *e);

/**
 * # Safety
 * `e` must be a live estimates handle.
 */
bool cpisac_estimates_converged(const struct CpisacEstimates *e);

/**
 * # Safety
 * `e` must be a live estimates handle.
 */
uintptr_t cpisac_estimates_iterations(const struct CpisacEstimates *e);

/**
 * # Safety
 * `e` must be a live estimates handle and `out` a valid pointer.
 */
enum CpisacStatus cpisac_estimates_get(const struct CpisacEstimates *e,
                                       uintptr_t index,
                                       struct CpisacEstimate *out);

/**
 * # Safety
 * `e` must come from a SIC call or be NULL.
 */
void cpisac_estimates_free(struct CpisacEstimates *e);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPISAC_H */
