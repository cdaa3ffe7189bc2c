#ifndef RADLABEL_H
#define RADLABEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RlStatus {
  RL_STATUS_OK = 0,
  RL_STATUS_NULL_POINTER = 1,
  RL_STATUS_INVALID_UTF8 = 2,
  RL_STATUS_INVALID_ARGUMENT = 3,
  RL_STATUS_IO = 4,
  RL_STATUS_FORMAT = 5,
  RL_STATUS_NOT_FOUND = 6,
  RL_STATUS_BUFFER_TOO_SMALL = 7,
  RL_STATUS_FAILED = 8,
  RL_STATUS_PANIC = 9,
} RlStatus;

// A loaded classifier and its vocabulary.
typedef struct RlClassifier RlClassifier;

typedef struct RlConfusion {
  uint64_t true_positives;
  uint64_t false_positives;
  uint64_t true_negatives;
  uint64_t false_negatives;
} RlConfusion;

// Percentages; NaN where the denominator is zero.
typedef struct RlSummary {
  double accuracy;
  double sensitivity;
  double specificity;
} RlSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rl_version(void);

// Message of the last failed call on this thread ("" after a success).
// Valid until the next call into the library on this thread.
const char *rl_last_error(void);

// Loads a classifier checkpoint and its vocabulary file.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum RlStatus rl_classifier_load(const char *checkpoint_path,
                                 const char *vocab_path,
                                 struct RlClassifier **out);

// Releases a handle from [`rl_classifier_load`]. Null is ignored.
//
// # Safety
// `h` must come from [`rl_classifier_load`] and not be used afterwards.
void rl_classifier_free(struct RlClassifier *h);

// Number of sigmoid outputs (1 coarse, 5 granular).
//
// # Safety
// `h` must be a live handle; `out` must be writable.
enum RlStatus rl_classifier_num_outputs(const struct RlClassifier *h, size_t *out);

// Output probabilities for one report text. Writes `*written` outputs when
// `capacity` suffices, else returns `BufferTooSmall` with `*written` set to
// the required size.
//
// # Safety
// `probs` must have room for `capacity` doubles.
enum RlStatus rl_classifier_predict(const struct RlClassifier *h,
                                    const char *text,
                                    double *probs,
                                    size_t capacity,
                                    size_t *written);

// Word-level attention weights for one report as a JSON object
// `{"report_id", "tokens", "alphas"}`. Free with [`rl_string_free`].
//
// # Safety
// Strings must be NUL-terminated; `out` must be writable.
enum RlStatus rl_classifier_attention_json(const struct RlClassifier *h,
                                           const char *report_id,
                                           const char *text,
                                           char **out);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void rl_string_free(char *s);

// Even-odd containment (boundary inclusive) of `n_points` points against a
// polygon of `n_vertices` vertices. Coordinates are interleaved x,y pairs.
// Writes 1 (inside) or 0 per point to `inside`.
//
// # Safety
// Arrays must hold `2 * n_vertices`, `2 * n_points` and `n_points` elements.
enum RlStatus rl_points_in_polygon(const double *polygon_xy,
                                   size_t n_vertices,
                                   const double *points_xy,
                                   size_t n_points,
                                   uint8_t *inside);

// Confusion counts with `prob >= threshold` predicting positive. Labels
// must be 0 or 1.
//
// # Safety
// `probs` and `labels` must hold `n` elements; `out` must be writable.
enum RlStatus rl_confusion(const double *probs,
                           const uint8_t *labels,
                           size_t n,
                           double threshold,
                           struct RlConfusion *out);

// Summary percentages of a confusion count.
//
// # Safety
// `counts` must be readable and `out` writable.
enum RlStatus rl_summarize(const struct RlConfusion *counts, struct RlSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RADLABEL_H */
