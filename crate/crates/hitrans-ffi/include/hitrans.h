/* C API for the hitrans dialog emotion recognizer. Auto-generated; do not edit. */

#ifndef HITRANS_H
#define HITRANS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Stable result/error codes. Anything nonzero is a failure and pairs with
 * a message from `hitrans_last_error_message`.
 */
typedef enum {
  HITRANS_STATUS_OK = 0,
  HITRANS_STATUS_SHAPE = 1,
  HITRANS_STATUS_INDEX = 2,
  HITRANS_STATUS_CONFIG = 3,
  HITRANS_STATUS_CONTRACT = 4,
  HITRANS_STATUS_LENGTH = 5,
  HITRANS_STATUS_CAPACITY = 6,
  HITRANS_STATUS_PARSE = 7,
  HITRANS_STATUS_DATA = 8,
  HITRANS_STATUS_TRAIN = 9,
  HITRANS_STATUS_METRIC = 10,
  HITRANS_STATUS_CHECKPOINT = 11,
  HITRANS_STATUS_INCOMPATIBLE = 12,
  HITRANS_STATUS_CLI = 13,
  HITRANS_STATUS_IO = 14,
  /**
   * A required pointer argument was NULL.
   */
  HITRANS_STATUS_NULL_POINTER = 100,
  /**
   * A string argument was not valid UTF-8.
   */
  HITRANS_STATUS_INVALID_UTF8 = 101,
  /**
   * The library panicked; the session may be in an unknown state.
   */
  HITRANS_STATUS_PANICKED = 102,
} HitransStatus;

/**
 * A loaded model plus everything needed to turn dialog text into labels.
 * Opaque to C; create with `hitrans_session_open`, release with
 * `hitrans_session_free`.
 */
typedef struct HitransSession HitransSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string; never freed.
 */
const char *hitrans_version(void);

/**
 * Error code of the most recent failing call on this thread, or `Ok`.
 */
HitransStatus hitrans_last_error_code(void);

/**
 * Message of the most recent failing call on this thread, or NULL when no
 * error is pending. Valid until the next failing call on this thread; do
 * not free.
 */
const char *hitrans_last_error_message(void);

/**
 * Loads a checkpoint and its vocabulary file into a ready-to-predict
 * session. Returns NULL on failure (wrong format, fingerprint mismatch,
 * missing files, ...).
 *
 * # Safety
 * `checkpoint_path` and `vocab_path` must be NUL-terminated strings valid
 * for the duration of the call.
 */
HitransSession *hitrans_session_open(const char *checkpoint_path, const char *vocab_path);

/**
 * Releases a session created by `hitrans_session_open`. NULL is a no-op.
 *
 * # Safety
 * `session` must be a pointer returned by `hitrans_session_open` that has
 * not been freed already.
 */
void hitrans_session_free(HitransSession *session);

/**
 * Number of emotion classes the loaded model predicts, or -1 on NULL.
 *
 * # Safety
 * `session` must be a live pointer from `hitrans_session_open` or NULL.
 */
int hitrans_session_n_classes(const HitransSession *session);

/**
 * The model's label names as a JSON array of strings, in class order.
 * Caller frees with `hitrans_string_free`; NULL on failure.
 *
 * # Safety
 * `session` must be a live pointer from `hitrans_session_open` or NULL.
 */
char *hitrans_session_labels_json(const HitransSession *session);

/**
 * Labels one dialog. `dialog_json` is a JSON object shaped like a corpus
 * line — `{"utterances":[{"text":"...","speaker":"..."}, ...]}` (labels
 * optional and ignored) — and the result is a JSON array with one
 * predicted label name per utterance, in order. Caller frees the result
 * with `hitrans_string_free`; NULL on failure.
 *
 * # Safety
 * `session` must be a live pointer from `hitrans_session_open`;
 * `dialog_json` must be a NUL-terminated string valid for the call.
 */
char *hitrans_predict_json(const HitransSession *session, const char *dialog_json);

/**
 * Frees a string returned by this library. NULL is a no-op.
 *
 * # Safety
 * `s` must be a pointer previously returned by one of the
 * string-returning functions here, not yet freed.
 */
void hitrans_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* HITRANS_H */
