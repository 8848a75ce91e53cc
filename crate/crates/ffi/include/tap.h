#ifndef TAP_H
#define TAP_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TapStatus {
  TAP_STATUS_OK = 0,
  TAP_STATUS_NULL_POINTER = 1,
  TAP_STATUS_INVALID_UTF8 = 2,
  TAP_STATUS_INVALID_ARGUMENT = 3,
  TAP_STATUS_BUFFER_TOO_SMALL = 4,
  TAP_STATUS_IO = 5,
  TAP_STATUS_PANIC = 6,
} TapStatus;

// Collects candidate captions with their references; CIDEr-D document
// frequencies are computed over everything added.
typedef struct TapCider TapCider;

typedef struct TapPhoc TapPhoc;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer is
// valid until the next call into this library from the same thread.
const char *tap_last_error(void);

// Leave-one-out VQA accuracy of `pred` against `n` human answers (n >= 10).
//
// # Safety
// `pred` must be a NUL-terminated string, `answers` an array of `n` such
// strings and `out` a valid pointer.
enum TapStatus tap_vqa_accuracy(const char *pred,
                                const char *const *answers,
                                uintptr_t n,
                                double *out);

// ANLS of `pred` against `n` ground truths with the given threshold.
//
// # Safety
// As for [`tap_vqa_accuracy`].
enum TapStatus tap_anls(const char *pred,
                        const char *const *gts,
                        uintptr_t n,
                        double threshold,
                        double *out);

// Relation of an OCR box to an object box, as its index in
// On, Cover, Overlap, N, NE, E, SE, S, SW, W, NW, Unrelated.
// Boxes are `[x1, y1, x2, y2]` in image-normalized coordinates.
//
// # Safety
// `obj` and `ocr` must point to four doubles each; `out` must be valid.
enum TapStatus tap_classify_relation(const double *obj, const double *ocr, uint32_t *out);

// Number of relation classes reported by [`tap_classify_relation`].
uint32_t tap_relation_count(void);

// Encoder with the bundled bigram list.
//
// # Safety
// `out` must be a valid pointer.
enum TapStatus tap_phoc_new(struct TapPhoc **out);

// Encoder with a bigram list read from `path`, one bigram per line.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum TapStatus tap_phoc_from_file(const char *path, struct TapPhoc **out);

// Length of the vectors produced by `enc`, or 0 for a null handle.
//
// # Safety
// `enc` must be null or a live handle.
uintptr_t tap_phoc_dim(const struct TapPhoc *enc);

// Writes the 0/1 PHOC bits of `word` into `buf`, which must hold at least
// [`tap_phoc_dim`] bytes.
//
// # Safety
// `enc` must be a live handle, `word` a NUL-terminated string and `buf`
// writable for `len` bytes.
enum TapStatus tap_phoc_encode(const struct TapPhoc *enc,
                               const char *word,
                               uint8_t *buf,
                               uintptr_t len);

// # Safety
// `enc` must be null or a handle not yet freed.
void tap_phoc_free(struct TapPhoc *enc);

// # Safety
// `out` must be a valid pointer.
enum TapStatus tap_cider_new(struct TapCider **out);

// Adds one candidate with `n` references.
//
// # Safety
// `scorer` must be a live handle, `candidate` a NUL-terminated string and
// `refs` an array of `n` such strings.
enum TapStatus tap_cider_add(struct TapCider *scorer,
                             const char *candidate,
                             const char *const *refs,
                             uintptr_t n);

// Number of candidates added so far, or 0 for a null handle.
//
// # Safety
// `scorer` must be null or a live handle.
uintptr_t tap_cider_len(const struct TapCider *scorer);

// Writes one score per added candidate into `scores` and the corpus mean
// into `mean` (which may be null).
//
// # Safety
// `scorer` must be a live handle and `scores` writable for `len` doubles.
enum TapStatus tap_cider_compute(const struct TapCider *scorer,
                                 double *scores,
                                 uintptr_t len,
                                 double *mean);

// # Safety
// `scorer` must be null or a handle not yet freed.
void tap_cider_free(struct TapCider *scorer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAP_H */
