#ifndef NVC_H
#define NVC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum NvcStatus {
  NVC_STATUS_OK = 0,
  // A required pointer was null.
  NVC_STATUS_NULL_ARGUMENT = 1,
  // Bad extents, buffer length or non-UTF-8 path.
  NVC_STATUS_INVALID_ARGUMENT = 2,
  // File could not be read or written.
  NVC_STATUS_IO = 3,
  // Malformed checkpoint, container or image.
  NVC_STATUS_FORMAT = 4,
  // The coded image was produced by a different model.
  NVC_STATUS_MODEL_MISMATCH = 5,
  // A Rust panic was caught; the handle should not be reused.
  NVC_STATUS_INTERNAL = 6,
} NvcStatus;

// Loaded checkpoint. Opaque to C.
typedef struct NvcModel NvcModel;

// Heap bytes owned by the library. Release with [`nvc_buffer_free`].
typedef struct NvcBuffer {
  uint8_t *data;
  size_t len;
} NvcBuffer;

// Interleaved row-major RGB8 pixels, `3 * width * height` bytes. Release
// with [`nvc_image_free`].
typedef struct NvcImage {
  uint8_t *data;
  size_t len;
  uint32_t width;
  uint32_t height;
} NvcImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Static version string, e.g. `"0.1.0"`.
const char *nvc_version(void);

// Message for the last failed call on this thread, or null after a
// success. Valid until the next `nvc_` call on the same thread.
const char *nvc_last_error(void);

// Loads a checkpoint file.
//
// # Safety
// `path` is a nul-terminated string; `out` is writable.
enum NvcStatus nvc_model_load(const char *path, struct NvcModel **out);

// Parses checkpoint bytes held in memory.
//
// # Safety
// `data` is valid for `len` reads; `out` is writable.
enum NvcStatus nvc_model_from_bytes(const uint8_t *data, size_t len, struct NvcModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` came from `nvc_model_load` / `nvc_model_from_bytes` and is not
// used afterwards.
void nvc_model_free(struct NvcModel *model);

// Copies the 32-byte model identifier into `out`.
//
// # Safety
// `out` is writable for 32 bytes.
enum NvcStatus nvc_model_id(const struct NvcModel *model, uint8_t *out);

// Latent channel count of the model.
//
// # Safety
// `out` is writable.
enum NvcStatus nvc_model_latent_channels(const struct NvcModel *model, uint32_t *out);

// Compresses interleaved RGB8 pixels into a coded container.
//
// # Safety
// `rgb` is valid for `3 * width * height` reads; `out` is writable.
enum NvcStatus nvc_compress_rgb8(const struct NvcModel *model,
                                 const uint8_t *rgb,
                                 uint32_t width,
                                 uint32_t height,
                                 struct NvcBuffer *out);

// Decodes a coded container into interleaved RGB8 pixels.
//
// # Safety
// `data` is valid for `len` reads; `out` is writable.
enum NvcStatus nvc_decompress_rgb8(const struct NvcModel *model,
                                   const uint8_t *data,
                                   size_t len,
                                   struct NvcImage *out);

// File-to-file compression (PNG or binary PPM input).
//
// # Safety
// Paths are nul-terminated strings.
enum NvcStatus nvc_compress_file(const struct NvcModel *model,
                                 const char *input,
                                 const char *output);

// File-to-file decompression; the output extension picks PNG or PPM.
//
// # Safety
// Paths are nul-terminated strings.
enum NvcStatus nvc_decompress_file(const struct NvcModel *model,
                                   const char *input,
                                   const char *output);

// Releases a buffer and resets it to empty. Null is ignored.
//
// # Safety
// `buffer` was filled by this library and not freed since.
void nvc_buffer_free(struct NvcBuffer *buffer);

// Releases an image and resets it to empty. Null is ignored.
//
// # Safety
// `image` was filled by this library and not freed since.
void nvc_image_free(struct NvcImage *image);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NVC_H */
