#ifndef ACAT_H
#define ACAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define ACAT_FLAG_ATT_PLUS 1

#define ACAT_FLAG_ATT_MINUS 2

#define ACAT_FLAG_UPD 4

#define ACAT_FLAG_NF 8

#define ACAT_FLAG_ALL 15

// What the defense did with a frame.
typedef enum AcatFrameMode {
  ACAT_FRAME_MODE_CLEAN = 0,
  ACAT_FRAME_MODE_DETECTED = 1,
  ACAT_FRAME_MODE_TRACED = 2,
  ACAT_FRAME_MODE_RESET = 3,
} AcatFrameMode;

// Result codes.
typedef enum AcatStatus {
  ACAT_STATUS_OK = 0,
  ACAT_STATUS_NULL_POINTER = 1,
  // Bad shape, length, or parameter value.
  ACAT_STATUS_INVALID_ARGUMENT = 2,
  ACAT_STATUS_IO = 3,
  // Malformed weights file.
  ACAT_STATUS_FORMAT = 4,
  // Any other failure inside the runtime.
  ACAT_STATUS_RUNTIME = 5,
  // A Rust panic was caught at the boundary.
  ACAT_STATUS_PANIC = 6,
} AcatStatus;

// Defense state bound to one network and one frame size.
typedef struct AcatDefense AcatDefense;

// A loaded segmentation network.
typedef struct AcatNet AcatNet;

// Defense settings. Fill with [`acat_defense_config_default`] before
// changing individual fields.
typedef struct AcatDefenseConfig {
  uint32_t monitored_layer;
  double tau;
  // Bitwise OR of the `ACAT_FLAG_*` constants.
  uint32_t flags;
  // Frames between trace updates; 0 never updates.
  uint32_t update_period;
  // Reset threshold in adversarial pixels; 0 picks the default for the frame size.
  uint32_t lambda_m;
} AcatDefenseConfig;

// Per-frame report.
typedef struct AcatFrameInfo {
  enum AcatFrameMode mode;
  // Layer executions in units of full forward passes.
  double pass_units;
  // Adversarial pixels in the applied mask, at monitored-layer resolution.
  size_t mask_pixels;
  // Current threshold, NaN when no trace is active.
  double xi;
} AcatFrameInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *acat_version(void);

// Message for the last failed call on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *acat_last_error_message(void);

// Loads network weights from `path`.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a writable pointer.
enum AcatStatus acat_net_load(const char *path, struct AcatNet **out);

// Creates the untrained toy network with seeded initial weights.
//
// # Safety
// `out` must be a writable pointer.
enum AcatStatus acat_net_toy(uint32_t class_count, uint64_t seed, struct AcatNet **out);

// Releases a network. Null is ignored.
//
// # Safety
// `net` must come from this library and not be used afterwards.
void acat_net_free(struct AcatNet *net);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `net` must be null or a live handle.
size_t acat_net_class_count(const struct AcatNet *net);

// Undefended segmentation: writes one class index per pixel into `labels`,
// which must hold `height * width` bytes.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum AcatStatus acat_net_segment(const struct AcatNet *net,
                                 const double *frame,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 uint8_t *labels,
                                 size_t labels_len);

// Writes the default defense settings into `out`.
//
// # Safety
// `out` must be a writable pointer.
enum AcatStatus acat_defense_config_default(struct AcatDefenseConfig *out);

// Creates defense state for `channels x height x width` frames. The network
// is copied, so `net` may be freed afterwards. A null `config` uses the
// defaults.
//
// # Safety
// `net` must be a live handle, `config` null or readable, `out` writable.
enum AcatStatus acat_defense_new(const struct AcatNet *net,
                                 const struct AcatDefenseConfig *config,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 struct AcatDefense **out);

// Releases defense state. Null is ignored.
//
// # Safety
// `defense` must come from this library and not be used afterwards.
void acat_defense_free(struct AcatDefense *defense);

// Runs one frame through the defense.
//
// `start_mask` is an optional `height * width` mask that seeds the trace
// when none is active; pass null when no detection is available. `labels`
// may be null; otherwise it receives `height * width` class indices of the
// defended output. `info` may be null.
//
// # Safety
// Pointers must be null where allowed or valid for the stated lengths.
enum AcatStatus acat_defense_process(struct AcatDefense *defense,
                                     const double *frame,
                                     const uint8_t *start_mask,
                                     uint8_t *labels,
                                     size_t labels_len,
                                     struct AcatFrameInfo *info);

// Resets performed so far, or 0 for a null handle.
//
// # Safety
// `defense` must be null or a live handle.
size_t acat_defense_resets(const struct AcatDefense *defense);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACAT_H */
