/* topiq: topic-enhanced quantized sentence-pair scoring.
 *
 * C interface to the training, evaluation, and inspection pipeline. Every
 * entry point returns a status code; on failure topiq_last_error() holds a
 * message for the calling thread. Strings returned through out-parameters
 * are heap copies the caller releases with topiq_string_free().
 */
#ifndef TOPIQ_H
#define TOPIQ_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes, also used verbatim as CLI exit codes. */
enum {
  TOPIQ_OK = 0,
  TOPIQ_USAGE_ERROR = 1,  /* bad arguments, bad config, missing stage */
  TOPIQ_DATA_ERROR = 2,   /* unreadable/inconsistent data or checkpoint */
  TOPIQ_NUMERIC_ERROR = 3 /* non-finite loss or other numeric failure */
};

/* Message for the most recent failing call on this thread; never NULL. */
const char* topiq_last_error(void);

/* Releases any char* handed out by this API. NULL is a no-op. */
void topiq_string_free(char* s);

/* The full default configuration document (JSON, caller frees). */
char* topiq_default_config(void);

/* Deterministic synthetic pair corpus: train/dev/test TSVs (80/10/10 per
 * class) plus a topics.tsv sidecar with the latent topic of each side. */
int topiq_synth(int topics, int vocab_per_topic, int pairs, uint64_t seed,
                const char* out_dir);

/* Pipeline stages. config_path may be NULL or "" for pure defaults;
 * overrides are dotted key=value strings applied on top, may be NULL when
 * n_overrides is 0. On success, when metrics_json is non-NULL it receives
 * the stage's metrics report (JSON). */
int topiq_train_ntm(const char* config_path, const char* const* overrides,
                    size_t n_overrides, char** metrics_json);
int topiq_train_joint(const char* config_path, const char* const* overrides,
                      size_t n_overrides, char** metrics_json);
int topiq_train_sts(const char* config_path, const char* const* overrides,
                    size_t n_overrides, char** metrics_json);

/* Frozen evaluation over all three splits of config.dataset. */
int topiq_eval(const char* config_path, const char* const* overrides,
               size_t n_overrides, char** metrics_json);

/* Inspection exports; *out receives TSV content (one line per topic/code). */
int topiq_inspect_topics(const char* config_path, const char* const* overrides,
                         size_t n_overrides, char** out);
int topiq_inspect_codebook(const char* config_path, const char* const* overrides,
                           size_t n_overrides, char** out);

/* Per-layer/head attention matrices for one pair, written as CSV files into
 * the configured output_dir; *files_json receives a JSON array of paths. */
int topiq_dump_attention(const char* config_path, const char* const* overrides,
                         size_t n_overrides, const char* pair_id,
                         char** files_json);

/* Opaque view of a saved checkpoint, for lightweight introspection. */
typedef struct topiq_model topiq_model;

int topiq_model_load(const char* checkpoint_path, topiq_model** out);
void topiq_model_free(topiq_model* m);
/* JSON object: parameter name -> shape array (caller frees). */
char* topiq_model_params_json(const topiq_model* m);

#ifdef __cplusplus
}
#endif

#endif /* TOPIQ_H */
