#ifndef HSCJN_H
#define HSCJN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define HSCJN_STATUS_OK 0

#define HSCJN_STATUS_USAGE 1

#define HSCJN_STATUS_RUNTIME 2

/**
 * A loaded model: checkpoint parameters, model shape, and vocabulary.
 */
typedef struct HscjnModel HscjnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *hscjn_last_error(void);

/**
 * Load a checkpoint and its vocabulary dump.
 *
 * # Safety
 * `checkpoint_path` and `vocab_path` must be NUL-terminated strings;
 * `out_model` must point to writable storage for one pointer.
 */
int hscjn_model_load(const char *checkpoint_path,
                     const char *vocab_path,
                     struct HscjnModel **out_model);

/**
 * # Safety
 * `model` must come from `hscjn_model_load` and not be freed twice.
 */
void hscjn_model_free(struct HscjnModel *model);

/**
 * Vocabulary size of a loaded model.
 *
 * # Safety
 * `model` must be a live pointer from `hscjn_model_load`.
 */
unsigned int hscjn_model_vocab_size(const struct HscjnModel *model);

/**
 * Generate a response for a `__eou__`-separated context. With
 * `two_turn`, two consecutive turns are generated and joined by
 * ` __eou__ `. The response is written to `out_response` as a
 * caller-owned string.
 *
 * # Safety
 * `model` must be live, `context` NUL-terminated, and `out_response`
 * writable for one pointer.
 */
int hscjn_generate(const struct HscjnModel *model,
                   const char *context,
                   unsigned int beam_width,
                   unsigned int max_len,
                   bool two_turn,
                   char **out_response);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must come from an out-parameter of this library and not be
 * freed twice.
 */
void hscjn_string_free(char *s);

/**
 * Score a responses file against a references file; the JSON report is
 * written to `out_json` as a caller-owned string.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out_json` must be
 * writable for one pointer.
 */
int hscjn_eval_files(const char *responses_path, const char *references_path, char **out_json);

/**
 * Run training as configured by a `key=value` file (the same format
 * the CLI's `--config` accepts; corpus paths go in the file).
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
int hscjn_train_file(const char *config_path);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* HSCJN_H */
