#ifndef PRAGE_H
#define PRAGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PrageStatus {
  PRAGE_STATUS_OK = 0,
  PRAGE_STATUS_NULL_POINTER = 1,
  PRAGE_STATUS_INVALID_UTF8 = 2,
  PRAGE_STATUS_INVALID_ARGUMENT = 3,
  PRAGE_STATUS_IO = 4,
  PRAGE_STATUS_FORMAT = 5,
  PRAGE_STATUS_PANIC = 6,
} PrageStatus;

/**
 * Hashing embedder handle.
 */
typedef struct PrageEmbedder PrageEmbedder;

/**
 * Exhaustive cosine index handle.
 */
typedef struct PrageIndex PrageIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the
 * library; valid until the next call on this thread.
 */
const char *prage_last_error(void);

/**
 * # Safety
 * `s` is null or a string returned by this library and not yet freed.
 */
void prage_string_free(char *s);

/**
 * # Safety
 * `name` is a NUL-terminated string; `out` is writable.
 */
enum PrageStatus prage_embedder_new(const char *name, size_t dim, struct PrageEmbedder **out);

/**
 * # Safety
 * `e` is null or a handle from [`prage_embedder_new`] not yet freed.
 */
void prage_embedder_free(struct PrageEmbedder *e);

/**
 * Writes the unit-length embedding of `text` into `buf`, which must hold
 * `len` floats with `len` equal to the embedder dimension.
 *
 * # Safety
 * `e` is a live handle; `buf` points to `len` writable floats.
 */
enum PrageStatus prage_embedder_embed(const struct PrageEmbedder *e,
                                      const char *text,
                                      float *buf,
                                      size_t len);

/**
 * Embeds `n` texts with `e` and indexes them under `refs`.
 *
 * # Safety
 * `refs` and `texts` point to `n` NUL-terminated strings each; `out` is
 * writable.
 */
enum PrageStatus prage_index_build(const struct PrageEmbedder *e,
                                   const char *const *refs,
                                   const char *const *texts,
                                   size_t n,
                                   struct PrageIndex **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PrageStatus prage_index_load(const char *path, struct PrageIndex **out);

/**
 * # Safety
 * `idx` is a live handle; `path` is a NUL-terminated string.
 */
enum PrageStatus prage_index_save(const struct PrageIndex *idx, const char *path);

/**
 * # Safety
 * `idx` is null or a live handle.
 */
size_t prage_index_len(const struct PrageIndex *idx);

/**
 * # Safety
 * `idx` is null or a handle not yet freed.
 */
void prage_index_free(struct PrageIndex *idx);

/**
 * Top-`k` search for `text`. Writes up to `k` hits, best first, as
 * positions into the index (see [`prage_index_ref`]) and cosine scores;
 * the hit count goes to `n_out`.
 *
 * # Safety
 * `idx` and `e` are live handles; `positions` and `scores` hold `k`
 * writable elements; `n_out` is writable.
 */
enum PrageStatus prage_index_search(const struct PrageIndex *idx,
                                    const struct PrageEmbedder *e,
                                    const char *text,
                                    size_t k,
                                    size_t *positions,
                                    double *scores,
                                    size_t *n_out);

/**
 * Reference stored at `pos`, or null when out of range. Free with
 * [`prage_string_free`].
 *
 * # Safety
 * `idx` is null or a live handle.
 */
char *prage_index_ref(const struct PrageIndex *idx, size_t pos);

/**
 * Best-reference score: `metric` (e.g. "bleu", "rougeL") of `candidate`
 * against each of the `n` references, maximized. ROUGE values are F1.
 *
 * # Safety
 * String arguments are NUL-terminated; `references` holds `n` of them;
 * `out` is writable.
 */
enum PrageStatus prage_metric_best(const char *metric,
                                   const char *candidate,
                                   const char *const *references,
                                   size_t n,
                                   double *out);

/**
 * Nominal Krippendorff's alpha. `values` is a row-major `n_units` by
 * `n_coders` matrix; entries equal to `missing` are absent ratings.
 *
 * # Safety
 * `values` holds `n_units * n_coders` integers; `out` is writable.
 */
enum PrageStatus prage_alpha_nominal(const int32_t *values,
                                     size_t n_units,
                                     size_t n_coders,
                                     int32_t missing,
                                     double *out);

/**
 * Renders the built-in French prompt for `term`. With `n_context == 0` the
 * base prompt is used, otherwise the retrieval prompt with the given
 * context items in rank order. `char_budget == 0` means unlimited.
 *
 * # Safety
 * String arguments are NUL-terminated; `context` holds `n_context` of
 * them; `out` is writable. Free the result with [`prage_string_free`].
 */
enum PrageStatus prage_render_prompt(const char *term,
                                     const char *const *context,
                                     size_t n_context,
                                     size_t char_budget,
                                     char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRAGE_H */
