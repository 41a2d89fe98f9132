/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef TSL_H
#define TSL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum TslStatus {
  TSL_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  TSL_STATUS_NULL_POINTER = 1,
  /*
   Bad input: configuration, schema, shapes, ids.
   */
  TSL_STATUS_VALIDATION = 2,
  /*
   Non-finite values during computation.
   */
  TSL_STATUS_NUMERIC = 3,
  /*
   File system failure.
   */
  TSL_STATUS_IO = 4,
  /*
   A string argument was not valid UTF-8.
   */
  TSL_STATUS_INVALID_UTF8 = 5,
  /*
   An index argument was out of range.
   */
  TSL_STATUS_OUT_OF_RANGE = 6,
  /*
   Internal failure; the library caught a panic.
   */
  TSL_STATUS_INTERNAL = 7,
} TslStatus;

/*
 One video's fused feature sequence.
 */
typedef struct TslFeatures TslFeatures;

/*
 A model with its decoding settings.
 */
typedef struct TslModel TslModel;

/*
 An evaluation report.
 */
typedef struct TslReport TslReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or null. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *tsl_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *tsl_version(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void tsl_string_free(char *s);

/*
 Loads a model from a TOML training configuration and a checkpoint.

 # Safety
 Path arguments must be NUL-terminated strings; `out` must be writable.
 */
enum TslStatus tsl_model_load(const char *config_path,
                              const char *checkpoint_path,
                              struct TslModel **out);

/*
 Freshly initialised (untrained) model from a configuration and seed.

 # Safety
 `config_path` must be a NUL-terminated string; `out` must be writable.
 */
enum TslStatus tsl_model_new(const char *config_path, uint64_t seed, struct TslModel **out);

/*
 Writes the model parameters as a checkpoint file.

 # Safety
 `model` must be a live handle; `path` a NUL-terminated string.
 */
enum TslStatus tsl_model_save(const struct TslModel *model, const char *path);

/*
 Input feature width the model expects.

 # Safety
 `model` must be a live handle or null (which yields 0).
 */
size_t tsl_model_input_dim(const struct TslModel *model);

/*
 Number of classes the model predicts.

 # Safety
 `model` must be a live handle or null (which yields 0).
 */
size_t tsl_model_num_classes(const struct TslModel *model);

/*
 # Safety
 `model` must come from this library and not have been freed. Null is
 ignored.
 */
void tsl_model_free(struct TslModel *model);

/*
 Loads a visual feature file and, unless `audio_path` is null, an audio
 file, and fuses them.

 # Safety
 Non-null path arguments must be NUL-terminated strings; `out` must be
 writable.
 */
enum TslStatus tsl_features_load(const char *visual_path,
                                 const char *audio_path,
                                 struct TslFeatures **out);

/*
 Wraps a caller-owned, row-major `len × dim` matrix of already fused
 features. The data is copied.

 # Safety
 `video_id` must be a NUL-terminated string; `data` must point to
 `len * dim` floats; `out` must be writable.
 */
enum TslStatus tsl_features_from_data(const char *video_id,
                                      double stride_sec,
                                      size_t len,
                                      size_t dim,
                                      const float *data,
                                      struct TslFeatures **out);

/*
 Number of timesteps, or 0 for null.

 # Safety
 `features` must be a live handle or null.
 */
size_t tsl_features_len(const struct TslFeatures *features);

/*
 Feature width, or 0 for null.

 # Safety
 `features` must be a live handle or null.
 */
size_t tsl_features_dim(const struct TslFeatures *features);

/*
 # Safety
 `features` must come from this library and not have been freed. Null is
 ignored.
 */
void tsl_features_free(struct TslFeatures *features);

/*
 Runs the model on one video and returns prediction JSON in `*out_json`,
 to be released with [`tsl_string_free`].

 # Safety
 `model` and `features` must be live handles; `out_json` must be writable.
 */
enum TslStatus tsl_model_predict_json(const struct TslModel *model,
                                      const struct TslFeatures *features,
                                      char **out_json);

/*
 Predicts every video in `features_dir` and writes prediction JSON to
 `out_path`.

 # Safety
 `model` must be a live handle; paths NUL-terminated strings.
 */
enum TslStatus tsl_predict_dir(const struct TslModel *model,
                               const char *features_dir,
                               const char *out_path);

/*
 Scores a prediction JSON file against an annotation JSON file.

 # Safety
 Paths must be NUL-terminated strings; `out` must be writable.
 */
enum TslStatus tsl_evaluate_files(const char *pred_path,
                                  const char *ann_path,
                                  struct TslReport **out);

/*
 Mean of the per-threshold mAPs as a fraction, or NaN for null.

 # Safety
 `report` must be a live handle or null.
 */
double tsl_report_average_map(const struct TslReport *report);

/*
 Number of tIoU thresholds in the report, or 0 for null.

 # Safety
 `report` must be a live handle or null.
 */
size_t tsl_report_num_thresholds(const struct TslReport *report);

/*
 Threshold and mAP at position `index`.

 # Safety
 `report` must be a live handle; output pointers must be writable.
 */
enum TslStatus tsl_report_map_at(const struct TslReport *report,
                                 size_t index,
                                 double *out_threshold,
                                 double *out_map);

/*
 Printable table with `row_label` as the row name; release with
 [`tsl_string_free`].

 # Safety
 `report` must be a live handle; `row_label` a NUL-terminated string;
 `out` must be writable.
 */
enum TslStatus tsl_report_table(const struct TslReport *report, const char *row_label, char **out);

/*
 Report as JSON; release with [`tsl_string_free`].

 # Safety
 `report` must be a live handle; `out` must be writable.
 */
enum TslStatus tsl_report_json(const struct TslReport *report, char **out);

/*
 # Safety
 `report` must come from this library and not have been freed. Null is
 ignored.
 */
void tsl_report_free(struct TslReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSL_H */
