#ifndef CAMODIFF_H
#define CAMODIFF_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CamodiffStatus {
  CAMODIFF_STATUS_OK = 0,
  CAMODIFF_STATUS_INTERNAL = 1,
  CAMODIFF_STATUS_VALIDATION = 2,
  CAMODIFF_STATUS_NOT_READY = 3,
  CAMODIFF_STATUS_NUMERICAL = 4,
  CAMODIFF_STATUS_NULL_POINTER = 5,
  // The output buffer was too small; the required length was written.
  CAMODIFF_STATUS_BUFFER_TOO_SMALL = 6,
  CAMODIFF_STATUS_PANIC = 7,
} CamodiffStatus;

// Opaque handle to a frozen detector.
typedef struct CamodiffDetector CamodiffDetector;

// Opaque handle to a frozen generator checkpoint.
typedef struct CamodiffGenerator CamodiffGenerator;

typedef struct CamodiffBox {
  float x;
  float y;
  float w;
  float h;
} CamodiffBox;

typedef struct CamodiffDetection {
  struct CamodiffBox bbox;
  double confidence;
} CamodiffDetection;

// Detections and ground truth of one image, borrowed for one call.
typedef struct CamodiffImageResult {
  const struct CamodiffDetection *detections;
  size_t n_detections;
  const struct CamodiffBox *ground_truth;
  size_t n_ground_truth;
} CamodiffImageResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Owned by the
// library and valid until the next call on this thread.
const char *camodiff_last_error(void);

// Converts `height*width` RGB pixels to interleaved (L, a, b).
//
// # Safety
// `rgb` and `lab_out` must each hold `height*width*3` floats.
enum CamodiffStatus camodiff_rgb_to_lab(const float *rgb,
                                        size_t height,
                                        size_t width,
                                        float *lab_out);

// Grayscale SSIM of two equally sized RGB images.
//
// # Safety
// `a` and `b` must each hold `height*width*3` floats; `out` must be valid.
enum CamodiffStatus camodiff_ssim(const float *a,
                                  const float *b,
                                  size_t height,
                                  size_t width,
                                  double *out);

// AP at IoU 0.5 over `n_images` per-image results.
//
// # Safety
// `images` must hold `n_images` entries whose arrays match their counts.
enum CamodiffStatus camodiff_ap50(const struct CamodiffImageResult *images,
                                  size_t n_images,
                                  double *out);

// Loads a detector checkpoint directory.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be valid.
enum CamodiffStatus camodiff_detector_load(const char *dir, struct CamodiffDetector **out);

// Detects vehicles above `conf_threshold` after NMS at `nms_iou`. Writes at
// most `capacity` detections and the total count to `n_out`.
//
// # Safety
// `det` must come from `camodiff_detector_load`; `rgb` must hold
// `height*width*3` floats; `out` must hold `capacity` entries.
enum CamodiffStatus camodiff_detector_detect(const struct CamodiffDetector *det,
                                             const float *rgb,
                                             size_t height,
                                             size_t width,
                                             double conf_threshold,
                                             double nms_iou,
                                             struct CamodiffDetection *out,
                                             size_t capacity,
                                             size_t *n_out);

// # Safety
// `det` must come from `camodiff_detector_load` and not be used afterwards.
void camodiff_detector_free(struct CamodiffDetector *det);

// Loads a stage checkpoint together with the autoencoder it records.
//
// # Safety
// `checkpoint` must be a NUL-terminated string; `out` must be valid.
enum CamodiffStatus camodiff_generator_load(const char *checkpoint, struct CamodiffGenerator **out);

// Camouflages the vehicle under `mask` (one byte per pixel, nonzero inside)
// and writes the raw sample and its composite over the input.
//
// # Safety
// `gen` must come from `camodiff_generator_load`; `rgb`, `camouflaged_out`
// and `composited_out` must hold `height*width*3` floats; `mask` must hold
// `height*width` bytes; `scene_label` must be a NUL-terminated string.
enum CamodiffStatus camodiff_generator_infer(const struct CamodiffGenerator *gen,
                                             const float *rgb,
                                             const uint8_t *mask,
                                             size_t height,
                                             size_t width,
                                             const char *scene_label,
                                             uint64_t seed,
                                             float *camouflaged_out,
                                             float *composited_out);

// # Safety
// `gen` must come from `camodiff_generator_load` and not be used afterwards.
void camodiff_generator_free(struct CamodiffGenerator *gen);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAMODIFF_H */
