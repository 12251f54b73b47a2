#ifndef FRAE_H
#define FRAE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define FRAE_OK 0

/**
 * A required pointer argument was null.
 */
#define FRAE_ERR_NULL 1

/**
 * A file could not be read.
 */
#define FRAE_ERR_IO 2

/**
 * Malformed model file.
 */
#define FRAE_ERR_FORMAT 3

/**
 * Argument sizes do not match the model.
 */
#define FRAE_ERR_SHAPE 4

/**
 * Malformed or corrupt bitstream.
 */
#define FRAE_ERR_BITSTREAM 5

/**
 * Bitstream was written by a different model.
 */
#define FRAE_ERR_MODEL_MISMATCH 6

/**
 * Unknown mode or otherwise invalid argument.
 */
#define FRAE_ERR_INVALID 7

/**
 * Internal error; the library caught a panic.
 */
#define FRAE_ERR_INTERNAL 8

#define FRAE_MODE_FIXED 0

#define FRAE_MODE_ARITHMETIC 1

/**
 * A loaded model.
 */
typedef struct FraeModel FraeModel;

/**
 * Frame-at-a-time coding state for one stream. Owns a copy of the model.
 */
typedef struct FraeStream FraeStream;

typedef struct FraeModelInfo {
  /**
   * Recurrency scheme code, 0 to 6.
   */
  uint32_t scheme;
  /**
   * Prior code: 0 uniform, 1 time-invariant, 2 previous latent, 3 decoder state.
   */
  uint32_t prior;
  uint32_t frame_dim;
  uint32_t latent_dim;
  uint32_t levels;
  /**
   * Fingerprint written into every bitstream header.
   */
  uint64_t hash;
} FraeModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *frae_version(void);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t frae_last_error(char *buf, size_t len);

/**
 * Loads a model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t frae_model_load(const char *path, struct FraeModel **out);

/**
 * Parses a model from the bytes of a model file.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
int32_t frae_model_from_bytes(const uint8_t *data, size_t len, struct FraeModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `frae_model_load`/`frae_model_from_bytes`
 * not yet freed.
 */
void frae_model_free(struct FraeModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
int32_t frae_model_info(const struct FraeModel *model, struct FraeModelInfo *out);

/**
 * Encodes `frames` frames to a complete bitstream. On success `*out`
 * holds `*out_len` bytes to be released with `frae_bytes_free`.
 *
 * # Safety
 * `model` must be a live handle, `data` must point to
 * `frames × frame_dim` doubles, and `out`/`out_len` be valid pointers.
 */
int32_t frae_encode(const struct FraeModel *model,
                    const double *data,
                    size_t frames,
                    uint32_t mode,
                    uint8_t **out,
                    size_t *out_len);

/**
 * Decodes a bitstream. On success `*out` holds `*frames × frame_dim`
 * doubles to be released with `frae_frames_free`.
 *
 * # Safety
 * `model` must be a live handle, `data` must point to `len` bytes and
 * `out`/`frames` be valid pointers.
 */
int32_t frae_decode(const struct FraeModel *model,
                    const uint8_t *data,
                    size_t len,
                    double **out,
                    size_t *frames);

/**
 * # Safety
 * `p`/`len` must come from `frae_encode`.
 */
void frae_bytes_free(uint8_t *p, size_t len);

/**
 * `count` is the number of doubles, `frames × frame_dim`.
 *
 * # Safety
 * `p`/`count` must come from `frae_decode`.
 */
void frae_frames_free(double *p, size_t count);

/**
 * Starts a stream at the codec's initial state.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer. The stream does
 * not borrow the model, which may be freed first.
 */
int32_t frae_stream_new(const struct FraeModel *model, struct FraeStream **out);

/**
 * # Safety
 * `stream` must be null or a live stream handle.
 */
void frae_stream_free(struct FraeStream *stream);

/**
 * # Safety
 * `stream` must be a live stream handle.
 */
int32_t frae_stream_reset(struct FraeStream *stream);

/**
 * Encodes one frame of `frame_dim` values into `latent_dim` indices and
 * advances the stream.
 *
 * # Safety
 * `stream` must be a live handle, `frame` must point to `frame_dim`
 * doubles and `indices` to `latent_dim` writable `uint32_t`.
 */
int32_t frae_stream_encode(struct FraeStream *stream, const double *frame, uint32_t *indices);

/**
 * Decodes one frame of `latent_dim` indices into `frame_dim` values and
 * advances the stream.
 *
 * # Safety
 * `stream` must be a live handle, `indices` must point to `latent_dim`
 * `uint32_t` and `frame` to `frame_dim` writable doubles.
 */
int32_t frae_stream_decode(struct FraeStream *stream, const uint32_t *indices, double *frame);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRAE_H */
