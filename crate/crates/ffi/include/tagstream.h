/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef TAGSTREAM_H
#define TAGSTREAM_H

#include <stddef.h>
#include <stdint.h>

typedef enum TsrmFrameKind {
  TSRM_FRAME_KIND_AUDIO = 0,
  TSRM_FRAME_KIND_VIDEO = 1,
  TSRM_FRAME_KIND_METADATA = 2,
} TsrmFrameKind;

// Result of every fallible call. Negative values are errors.
typedef enum TsrmStatus {
  TSRM_STATUS_OK = 0,
  // Not an error: nothing available yet (no window, no frame before the timeout).
  TSRM_STATUS_NOT_READY = 1,
  TSRM_STATUS_NULL_POINTER = -1,
  TSRM_STATUS_INVALID_ARGUMENT = -2,
  // The buffer holds only part of a frame.
  TSRM_STATUS_NEED_MORE_DATA = -3,
  TSRM_STATUS_CODEC = -4,
  TSRM_STATUS_IO = -5,
  TSRM_STATUS_END_OF_STREAM = -6,
  TSRM_STATUS_TAGGER = -7,
  TSRM_STATUS_XML = -8,
  // The output buffer is too small; the required size was reported.
  TSRM_STATUS_BUFFER_TOO_SMALL = -9,
  TSRM_STATUS_NOT_FOUND = -10,
  TSRM_STATUS_PANIC = -99,
} TsrmStatus;

// A decoded frame.
typedef struct TsrmFrame TsrmFrame;

typedef struct TsrmReceiver TsrmReceiver;

typedef struct TsrmSender TsrmSender;

// Ranked predictions for one window, or parsed from tag metadata.
typedef struct TsrmTagResult TsrmTagResult;

// A tagger plus its ranking and truncation settings.
typedef struct TsrmTagger TsrmTagger;

// One analysis window of mono samples.
typedef struct TsrmWindow TsrmWindow;

// Accumulates audio frames into fixed-length windows.
typedef struct TsrmWindower TsrmWindower;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread. Never null; empty if
// nothing has failed. Valid until the next failing call on this thread.
const char *tsrm_last_error(void);

// Library version as a static string.
const char *tsrm_version(void);

// Builds an audio frame from planar samples (`channels * samples_per_channel` floats).
//
// # Safety
// `samples` must point to that many floats; `out` must be writable.
enum TsrmStatus tsrm_frame_new_audio(uint64_t timestamp_100ns,
                                     uint32_t sample_rate_hz,
                                     uint32_t channels,
                                     uint32_t samples_per_channel,
                                     const float *samples,
                                     struct TsrmFrame **out);

// Builds a video frame. `fourcc` points to 4 bytes.
//
// # Safety
// `fourcc` must point to 4 bytes and `data` to `len` bytes.
enum TsrmStatus tsrm_frame_new_video(uint64_t timestamp_100ns,
                                     uint32_t width,
                                     uint32_t height,
                                     const uint8_t *fourcc,
                                     const uint8_t *data,
                                     uintptr_t len,
                                     struct TsrmFrame **out);

// Builds a metadata frame from a single-root XML document.
//
// # Safety
// `xml` must be a NUL-terminated string.
enum TsrmStatus tsrm_frame_new_metadata(uint64_t timestamp_100ns,
                                        const char *xml,
                                        struct TsrmFrame **out);

// # Safety
// `frame` must come from this library or be null.
void tsrm_frame_free(struct TsrmFrame *frame);

// # Safety
// `frame` must be a valid handle.
enum TsrmFrameKind tsrm_frame_kind(const struct TsrmFrame *frame);

// # Safety
// `frame` must be a valid handle.
uint64_t tsrm_frame_timestamp(const struct TsrmFrame *frame);

// Audio parameters and a borrowed pointer to the planar samples.
// Any output pointer may be null.
//
// # Safety
// `frame` must be a valid handle.
enum TsrmStatus tsrm_frame_audio(const struct TsrmFrame *frame,
                                 uint32_t *sample_rate_hz,
                                 uint32_t *channels,
                                 uint32_t *samples_per_channel,
                                 const float **samples);

// Video parameters and a borrowed pointer to the pixel bytes.
// Any output pointer may be null; `fourcc` receives 4 bytes.
//
// # Safety
// `frame` must be a valid handle.
enum TsrmStatus tsrm_frame_video(const struct TsrmFrame *frame,
                                 uint32_t *width,
                                 uint32_t *height,
                                 uint8_t *fourcc,
                                 const uint8_t **data,
                                 uintptr_t *len);

// Borrowed XML text of a metadata frame, or null for other kinds.
//
// # Safety
// `frame` must be a valid handle.
const char *tsrm_frame_metadata_xml(const struct TsrmFrame *frame);

// Writes the wire encoding of `frame` into `buf`. `written` receives the
// encoded length; on `BufferTooSmall` it receives the size needed.
//
// # Safety
// `buf` must have room for `cap` bytes; `written` must be writable.
enum TsrmStatus tsrm_encode(const struct TsrmFrame *frame,
                            uint8_t *buf,
                            uintptr_t cap,
                            uintptr_t *written);

// Decodes the first frame in `bytes`. `consumed` receives its encoded
// length; on `NeedMoreData` it receives the total length needed when known.
//
// # Safety
// `bytes` must point to `len` bytes; output pointers must be writable.
enum TsrmStatus tsrm_decode(const uint8_t *bytes,
                            uintptr_t len,
                            struct TsrmFrame **out,
                            uintptr_t *consumed);

// A windower with the given window and hop (0 means tumbling) at 48 kHz.
//
// # Safety
// `out` must be writable.
enum TsrmStatus tsrm_windower_new(uintptr_t window_samples,
                                  uintptr_t hop_samples,
                                  struct TsrmWindower **out);

// # Safety
// `w` must come from this library or be null.
void tsrm_windower_free(struct TsrmWindower *w);

// Feeds one audio frame.
//
// # Safety
// Both handles must be valid.
enum TsrmStatus tsrm_windower_push(struct TsrmWindower *w, const struct TsrmFrame *frame);

// Takes the next complete window, or returns `NotReady`.
//
// # Safety
// `w` must be valid and `out` writable.
enum TsrmStatus tsrm_windower_take(struct TsrmWindower *w, struct TsrmWindow **out);

// # Safety
// `win` must come from this library or be null.
void tsrm_window_free(struct TsrmWindow *win);

// Borrowed samples of a window. Any output pointer may be null.
//
// # Safety
// `win` must be a valid handle.
enum TsrmStatus tsrm_window_samples(const struct TsrmWindow *win,
                                    const float **samples,
                                    uintptr_t *len,
                                    uint64_t *start_timestamp_100ns,
                                    uint32_t *sample_rate_hz);

// A tagger from a spec string: `reference`, `sleep:<ms>`, `work:<passes>`
// or `external:<command>`. `top_k` of 0 keeps every prediction.
//
// # Safety
// `spec` must be a NUL-terminated string and `out` writable.
enum TsrmStatus tsrm_tagger_new(const char *spec, uintptr_t top_k, struct TsrmTagger **out);

// # Safety
// `t` must come from this library or be null.
void tsrm_tagger_free(struct TsrmTagger *t);

// Tags `len` mono samples.
//
// # Safety
// `samples` must point to `len` floats and `out` be writable.
enum TsrmStatus tsrm_tagger_tag(struct TsrmTagger *t,
                                const float *samples,
                                uintptr_t len,
                                uint32_t sample_rate_hz,
                                uint64_t start_timestamp_100ns,
                                struct TsrmTagResult **out);

// # Safety
// `r` must come from this library or be null.
void tsrm_tag_result_free(struct TsrmTagResult *r);

// # Safety
// `r` must be a valid handle.
uintptr_t tsrm_tag_result_count(const struct TsrmTagResult *r);

// Borrowed label of prediction `i`, or null when out of range.
//
// # Safety
// `r` must be a valid handle.
const char *tsrm_tag_result_label(const struct TsrmTagResult *r, uintptr_t i);

// Score of prediction `i`, or -1 when out of range.
//
// # Safety
// `r` must be a valid handle.
double tsrm_tag_result_score(const struct TsrmTagResult *r, uintptr_t i);

// Tagger time for the window in milliseconds.
//
// # Safety
// `r` must be a valid handle.
double tsrm_tag_result_inference_ms(const struct TsrmTagResult *r);

// Source name carried by parsed tag metadata; empty for local results.
//
// # Safety
// `r` must be a valid handle.
const char *tsrm_tag_result_source(const struct TsrmTagResult *r);

// Renders a result as a tag metadata frame.
//
// # Safety
// `r` must be valid, `source_name` NUL-terminated, `out` writable.
enum TsrmStatus tsrm_tag_result_to_frame(const struct TsrmTagResult *r,
                                         const char *source_name,
                                         struct TsrmFrame **out);

// Parses tag metadata. Metadata with another root gives `NotFound`.
//
// # Safety
// `frame` must be valid and `out` writable.
enum TsrmStatus tsrm_tag_result_parse(const struct TsrmFrame *frame, struct TsrmTagResult **out);

// Opens a sender on `port` (0 for any). A null `group` means the default
// group. When `announce` is non-zero the source is announced on the
// discovery port from `TSRM_DISCOVERY_PORT` or the default.
//
// # Safety
// `name` must be NUL-terminated, `group` NUL-terminated or null, `out` writable.
enum TsrmStatus tsrm_sender_new(const char *name,
                                const char *group,
                                uint16_t port,
                                int32_t announce,
                                struct TsrmSender **out);

// Flushes and closes the sender.
//
// # Safety
// `s` must come from this library or be null.
void tsrm_sender_free(struct TsrmSender *s);

// # Safety
// `s` must be a valid handle.
uint16_t tsrm_sender_port(const struct TsrmSender *s);

// # Safety
// `s` must be a valid handle.
uintptr_t tsrm_sender_subscribers(const struct TsrmSender *s);

// Waits up to `timeout_ms` for `n` subscribers; `NotReady` on timeout.
//
// # Safety
// `s` must be a valid handle.
enum TsrmStatus tsrm_sender_wait_for_subscribers(const struct TsrmSender *s,
                                                 uintptr_t n,
                                                 uint32_t timeout_ms);

// Queues `frame` for every subscriber. Never blocks on the network.
//
// # Safety
// Both handles must be valid.
enum TsrmStatus tsrm_sender_send(const struct TsrmSender *s, const struct TsrmFrame *frame);

// Connects to `host:port`. `kinds` is a bitmask of 1 << kind; 0 is invalid.
//
// # Safety
// `addr` must be NUL-terminated and `out` writable.
enum TsrmStatus tsrm_receiver_connect(const char *addr,
                                      uint8_t kinds_mask,
                                      struct TsrmReceiver **out);

// Finds `group/name` through discovery within `timeout_ms` and connects.
// A null `group` means the default group.
//
// # Safety
// Strings must be NUL-terminated (or null for `group`); `out` writable.
enum TsrmStatus tsrm_receiver_connect_named(const char *group,
                                            const char *name,
                                            uint8_t kinds_mask,
                                            uint32_t timeout_ms,
                                            struct TsrmReceiver **out);

// # Safety
// `r` must come from this library or be null.
void tsrm_receiver_free(struct TsrmReceiver *r);

// Waits up to `timeout_ms` for the next frame of a subscribed kind.
// Returns `NotReady` on timeout and `EndOfStream` once the source is gone.
//
// # Safety
// `r` must be valid and `out` writable.
enum TsrmStatus tsrm_receiver_recv(struct TsrmReceiver *r,
                                   uint32_t timeout_ms,
                                   struct TsrmFrame **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAGSTREAM_H */
