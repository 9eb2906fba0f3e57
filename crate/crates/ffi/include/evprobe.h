#ifndef EVPROBE_H
#define EVPROBE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EvpStatus {
  EVP_STATUS_OK = 0,
  EVP_STATUS_NULL_POINTER = 1,
  EVP_STATUS_INVALID_ARGUMENT = 2,
  EVP_STATUS_DOMAIN = 3,
  EVP_STATUS_SHAPE = 4,
  EVP_STATUS_DATA = 5,
  EVP_STATUS_SCHEMA = 6,
  EVP_STATUS_NOT_FOUND = 7,
  EVP_STATUS_INTEGRITY = 8,
  EVP_STATUS_CONFIG = 9,
  EVP_STATUS_SELECTION = 10,
  EVP_STATUS_TRAINING = 11,
  EVP_STATUS_METRIC = 12,
  EVP_STATUS_METHOD_UNAVAILABLE = 13,
  EVP_STATUS_IO = 14,
  EVP_STATUS_PANIC = 15,
} EvpStatus;

typedef struct EvpDataset EvpDataset;

typedef struct EvpProbe EvpProbe;

typedef struct EvpWriter EvpWriter;

// Uncertainty of one generated token.
typedef struct EvpTokenScores {
  double au;
  double eu;
  double reliability;
} EvpTokenScores;

// Borrowed view of one generation, laid out as the extractor produces it.
//
// `topk_ids` and `topk_logits` hold `n_tokens * k_store` values row-major,
// with `k_store` taken from the manifest. `hidden[i]` points to the
// `n_tokens * hidden_dim` block for `layer_indices[i]`.
typedef struct EvpTraceView {
  const char *question_id;
  // 0 = WOC, 1 = WCC, 2 = WIC.
  uint8_t condition;
  uint32_t sample_index;
  size_t n_tokens;
  const uint32_t *token_ids;
  const float *chosen_logprobs;
  const uint32_t *topk_ids;
  const float *topk_logits;
  size_t n_layers;
  const uint32_t *layer_indices;
  const float *const *hidden;
  bool has_p_true;
  double p_true;
  const char *response_text;
} EvpTraceView;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *evp_last_error(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed.
void evp_string_free(char *s);

// # Safety
// `out` must be valid for writes.
enum EvpStatus evp_digamma(double x, double *out);

// Scores one token from its first `k_evidence` of `k_store` descending top
// logits (relu evidence).
//
// # Safety
// `topk_logits` must hold `k_store` values; `out` must be valid for writes.
enum EvpStatus evp_token_scores(const float *topk_logits,
                                size_t k_store,
                                size_t k_evidence,
                                struct EvpTokenScores *out);

// AUROC of `scores` against 0/1 `labels`; nonzero label bytes count as positive.
//
// # Safety
// Both arrays must hold `n` values; `out` must be valid for writes.
enum EvpStatus evp_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Judges a response against the gold answer without an LLM judge and
// returns the label as one JSON line (free with [`evp_string_free`]).
// `out_z` may be null.
//
// # Safety
// String arguments must be NUL-terminated; `out_json` must be valid for writes.
enum EvpStatus evp_fallback_label(const char *question_id,
                                  uint8_t condition,
                                  uint32_t sample_index,
                                  const char *response_text,
                                  const char *gold_answer,
                                  double theta,
                                  uint8_t *out_z,
                                  char **out_json);

// # Safety
// `path` must be NUL-terminated; `out` must be valid for writes.
enum EvpStatus evp_dataset_open(const char *path, struct EvpDataset **out);

// Number of traces, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t evp_dataset_len(const struct EvpDataset *ds);

// Checks every record checksum and stores the number of bad records in
// `out_findings`. The first finding becomes the thread's last error.
//
// # Safety
// `ds` must be a live handle; `out_findings` must be valid for writes.
enum EvpStatus evp_dataset_validate(const struct EvpDataset *ds, size_t *out_findings);

// # Safety
// `ds` must be null or a handle not yet freed.
void evp_dataset_free(struct EvpDataset *ds);

// Starts a dataset from a JSON manifest (`model_name`, `k_store`,
// `layer_indices`, `hidden_dim`, `m_samples`, optional `metadata`).
//
// # Safety
// Strings must be NUL-terminated; `out` must be valid for writes.
enum EvpStatus evp_writer_create(const char *path,
                                 const char *manifest_json,
                                 struct EvpWriter **out);

// # Safety
// `w` must be a live writer and every pointer in `trace` must satisfy the
// sizes documented on [`EvpTraceView`].
enum EvpStatus evp_writer_append(struct EvpWriter *w, const struct EvpTraceView *trace);

// Writes the manifest and closes the file. Consumes the handle, also on
// failure.
//
// # Safety
// `w` must be a live writer; it is invalid afterwards.
enum EvpStatus evp_writer_finish(struct EvpWriter *w);

// Abandons an unfinished writer.
//
// # Safety
// `w` must be null or a writer not yet finished or freed.
void evp_writer_free(struct EvpWriter *w);

// Loads a probe from one `probes.jsonl` line or a bare probe object.
//
// # Safety
// `json` must be NUL-terminated; `out` must be valid for writes.
enum EvpStatus evp_probe_from_json(const char *json, struct EvpProbe **out);

// Feature dimension, or 0 for a null handle.
//
// # Safety
// `p` must be null or a live handle.
size_t evp_probe_dim(const struct EvpProbe *p);

// Probability that the response behind `features` is correct.
//
// # Safety
// `features` must hold `d` values; `out` must be valid for writes.
enum EvpStatus evp_probe_predict(const struct EvpProbe *p,
                                 const double *features,
                                 size_t d,
                                 double *out);

// # Safety
// `p` must be null or a handle not yet freed.
void evp_probe_free(struct EvpProbe *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVPROBE_H */
