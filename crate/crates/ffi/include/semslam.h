#ifndef SEMSLAM_H
#define SEMSLAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SemslamStatus {
  SEMSLAM_STATUS_OK = 0,
  SEMSLAM_STATUS_NULL_ARGUMENT = 1,
  SEMSLAM_STATUS_INVALID_UTF8 = 2,
  // Malformed JSON, schema or config violation, or an out-of-order frame.
  SEMSLAM_STATUS_INVALID_INPUT = 3,
  // Optimizer or evaluator failure.
  SEMSLAM_STATUS_RUNTIME = 4,
  // The pipeline was already finished.
  SEMSLAM_STATUS_FINISHED = 5,
  SEMSLAM_STATUS_PANIC = 6,
} SemslamStatus;

// Opaque pipeline handle.
typedef struct SemslamPipeline SemslamPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or an empty string.
// The pointer stays valid until the next library call on the same thread.
const char *semslam_last_error(void);

// Static name of a status code.
const char *semslam_status_name(enum SemslamStatus status);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` is null or came from this library and has not been freed.
void semslam_string_free(char *s);

// Creates a pipeline. `config_json` may be null for defaults. A scripted
// oracle needs `world_json`; otherwise it may be null.
//
// # Safety
// String arguments are null or nul-terminated; `out` is writable.
enum SemslamStatus semslam_pipeline_new(const char *config_json,
                                        const char *world_json,
                                        struct SemslamPipeline **out);

// Destroys a pipeline. Null is ignored.
//
// # Safety
// `p` is null or a live handle from [`semslam_pipeline_new`].
void semslam_pipeline_free(struct SemslamPipeline *p);

// Processes one frame given as a single JSON dataset line.
//
// # Safety
// `p` is a live handle and `frame_json` nul-terminated.
enum SemslamStatus semslam_pipeline_step(struct SemslamPipeline *p, const char *frame_json);

// Runs the last evaluator round and the final optimization. Later steps
// fail with `SEMSLAM_STATUS_FINISHED`; finishing twice is a no-op.
//
// # Safety
// `p` is a live handle.
enum SemslamStatus semslam_pipeline_finish(struct SemslamPipeline *p);

// Live landmarks, including those not yet seen often enough to export.
//
// # Safety
// `p` is a live handle; `out` is writable.
enum SemslamStatus semslam_pipeline_landmark_count(struct SemslamPipeline *p, uintptr_t *out);

// Frames processed so far.
//
// # Safety
// `p` is a live handle; `out` is writable.
enum SemslamStatus semslam_pipeline_pose_count(struct SemslamPipeline *p, uintptr_t *out);

// Current map export as JSON.
//
// # Safety
// `p` is a live handle; `out` is writable. Free the result with
// [`semslam_string_free`].
enum SemslamStatus semslam_pipeline_map_json(struct SemslamPipeline *p, char **out);

// Current trajectory estimate as CSV with a header row.
//
// # Safety
// As [`semslam_pipeline_map_json`].
enum SemslamStatus semslam_pipeline_trajectory_csv(struct SemslamPipeline *p, char **out);

// Every map edit so far as JSON.
//
// # Safety
// As [`semslam_pipeline_map_json`].
enum SemslamStatus semslam_pipeline_edit_log_json(struct SemslamPipeline *p, char **out);

// Generates a synthetic dataset. `config_json` may be null for defaults.
// Frames come back as JSON lines, the world as JSON.
//
// # Safety
// `config_json` is null or nul-terminated; both outputs are writable.
enum SemslamStatus semslam_simulate(const char *config_json,
                                    char **out_frames_jsonl,
                                    char **out_world_json);

// Landmark precision, recall and F1 of a map against a world, as JSON.
// Matching uses the category rule at `match_dist` meters.
//
// # Safety
// Strings are nul-terminated; `out_json` is writable.
enum SemslamStatus semslam_eval_landmarks(const char *map_json,
                                          const char *world_json,
                                          double match_dist,
                                          char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMSLAM_H */
