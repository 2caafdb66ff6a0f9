/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef RAGFORGE_H
#define RAGFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_ARGUMENT = 1,
  RF_STATUS_INVALID_UTF8 = 2,
  RF_STATUS_INVALID_ARGUMENT = 3,
  RF_STATUS_NOT_FOUND = 4,
  RF_STATUS_INDEX_NOT_READY = 5,
  RF_STATUS_IO = 6,
  RF_STATUS_MODEL = 7,
  RF_STATUS_INTERNAL = 8,
} RfStatus;

/**
 * Opaque handle to a loaded knowledge base and its model gateway.
 */
typedef struct RfKb RfKb;

/**
 * ROUGE-L scores for one candidate/reference pair.
 */
typedef struct {
  double precision;
  double recall;
  double f;
  /**
   * Non-zero when either side had no tokens.
   */
  uint8_t empty_input;
} RfRouge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rf_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next ragforge call on the same thread.
 */
const char *rf_last_error(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void rf_string_free(char *s);

/**
 * Loads knowledge base `kb_id` from `data_dir` (the directory holding
 * `kb/`). `models_path` names the model registry and may be NULL.
 *
 * # Safety
 * String arguments must be NULL or NUL-terminated; `out` must be writable.
 */
RfStatus rf_kb_open(const char *data_dir,
                    const char *models_path,
                    const char *kb_id,
                    RfKb **out_kb);

/**
 * Releases a handle from [`rf_kb_open`]. NULL is ignored.
 *
 * # Safety
 * `kb` must come from [`rf_kb_open`] and not have been freed already.
 */
void rf_kb_free(RfKb *kb);

/**
 * Number of chunks in the knowledge base.
 *
 * # Safety
 * `kb` must be a live handle; `out_count` must be writable.
 */
RfStatus rf_kb_chunk_count(const RfKb *kb, size_t *out_count);

/**
 * Top-`k` search. Writes a JSON array of `{chunk_id, score, rank}` to
 * `out_json` (free with [`rf_string_free`]). A non-zero `approx` uses the
 * IVF index, built on first use.
 *
 * # Safety
 * `kb` must be a live handle; `query` NUL-terminated; `out_json` writable.
 */
RfStatus rf_kb_search(const RfKb *kb, const char *query, size_t k, uint8_t approx, char **out_json);

/**
 * Reciprocal rank of the first gold id within the top `k`.
 *
 * # Safety
 * `ranked` and `gold` must hold `n_ranked` / `n_gold` NUL-terminated strings.
 */
RfStatus rf_mrr_at_k(const char *const *ranked,
                     size_t n_ranked,
                     const char *const *gold,
                     size_t n_gold,
                     size_t k,
                     double *out_value);

/**
 * Binary-relevance NDCG over the top `k`.
 *
 * # Safety
 * Same contract as [`rf_mrr_at_k`].
 */
RfStatus rf_ndcg_at_k(const char *const *ranked,
                      size_t n_ranked,
                      const char *const *gold,
                      size_t n_gold,
                      size_t k,
                      double *out_value);

/**
 * Fraction of gold ids found in the top `k`.
 *
 * # Safety
 * Same contract as [`rf_mrr_at_k`].
 */
RfStatus rf_recall_at_k(const char *const *ranked,
                        size_t n_ranked,
                        const char *const *gold,
                        size_t n_gold,
                        size_t k,
                        double *out_value);

/**
 * Token-level ROUGE-L between two texts.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out_score` must be writable.
 */
RfStatus rf_rouge_l(const char *candidate, const char *reference, RfRouge *out_score);

/**
 * Chunk windows over `n_tokens` tokens as `[start, end)` pairs flattened
 * into `2 * out_count` values. Release with [`rf_spans_free`].
 *
 * # Safety
 * `out_spans` and `out_count` must be writable.
 */
RfStatus rf_chunk_spans(size_t n_tokens,
                        size_t chunk_size,
                        double overlap_fraction,
                        size_t **out_spans,
                        size_t *out_count);

/**
 * Releases spans from [`rf_chunk_spans`]. NULL is ignored.
 *
 * # Safety
 * `spans`/`count` must be exactly what [`rf_chunk_spans`] produced.
 */
void rf_spans_free(size_t *spans, size_t count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAGFORGE_H */
