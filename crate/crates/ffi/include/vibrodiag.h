#ifndef VIBRODIAG_H
#define VIBRODIAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum VdStatus {
  VD_STATUS_OK = 0,
  VD_STATUS_NULL_ARGUMENT = 1,
  VD_STATUS_INVALID_UTF8 = 2,
  VD_STATUS_IO = 3,
  VD_STATUS_CHECKPOINT = 4,
  VD_STATUS_MALFORMED_WAV = 5,
  VD_STATUS_INFERENCE = 6,
  VD_STATUS_PANIC = 7,
} VdStatus;

// How the generated text was mapped to a label.
typedef enum VdParseStatus {
  VD_PARSE_STATUS_EXACT = 0,
  VD_PARSE_STATUS_SUBSTRING = 1,
  VD_PARSE_STATUS_UNPARSEABLE = 2,
} VdParseStatus;

// A loaded checkpoint.
typedef struct VdEngine VdEngine;

// A diagnosed clip plus its follow-up history.
typedef struct VdSession VdSession;

// Outcome of a diagnosis. Both strings are owned by the caller; `label` is
// null when the text matched no label.
typedef struct VdDiagnosis {
  char *raw_text;
  char *label;
  enum VdParseStatus parse_status;
  bool truncated;
} VdDiagnosis;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *vd_last_error(void);

// Library version as a static string.
const char *vd_version(void);

// Loads a checkpoint file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum VdStatus vd_engine_load(const char *path, struct VdEngine **out);

// Releases an engine. Null is ignored.
//
// # Safety
// `engine` must come from `vd_engine_load` and not be used afterwards.
void vd_engine_free(struct VdEngine *engine);

// Sets the generation budget in tokens per answer.
//
// # Safety
// `engine` must be a live engine not in use by another thread.
enum VdStatus vd_engine_set_max_len(struct VdEngine *engine, size_t max_len);

// Diagnoses a WAV file.
//
// # Safety
// `engine` must be live, `wav_path` NUL-terminated and `out` valid.
enum VdStatus vd_diagnose_file(const struct VdEngine *engine,
                               const char *wav_path,
                               struct VdDiagnosis *out);

// Diagnoses a WAV file held in memory.
//
// # Safety
// `engine` must be live, `wav` must point to `len` readable bytes and `out` be valid.
enum VdStatus vd_diagnose_bytes(const struct VdEngine *engine,
                                const uint8_t *wav,
                                size_t len,
                                struct VdDiagnosis *out);

// Releases the strings inside a diagnosis and nulls them.
//
// # Safety
// `d` must be null or point to a diagnosis filled by this library.
void vd_diagnosis_clear(struct VdDiagnosis *d);

// Diagnoses an in-memory WAV file and opens a follow-up session on it.
//
// # Safety
// As for `vd_diagnose_bytes`; `session` must be a valid pointer.
enum VdStatus vd_session_open(const struct VdEngine *engine,
                              const uint8_t *wav,
                              size_t len,
                              struct VdSession **session,
                              struct VdDiagnosis *out);

// Asks a follow-up question; the answer goes to `*answer`.
//
// # Safety
// `engine` and `session` must be live, `question` NUL-terminated and `answer` valid.
enum VdStatus vd_session_ask(const struct VdEngine *engine,
                             struct VdSession *session,
                             const char *question,
                             char **answer);

// Number of follow-up exchanges so far; 0 for null.
//
// # Safety
// `session` must be null or live.
size_t vd_session_turns(const struct VdSession *session);

// Releases a session. Null is ignored.
//
// # Safety
// `session` must come from `vd_session_open` and not be used afterwards.
void vd_session_free(struct VdSession *session);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void vd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIBRODIAG_H */
