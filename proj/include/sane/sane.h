/* SPDX-License-Identifier: Apache-2.0 */

#ifndef SANE_SANE_H
#define SANE_SANE_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(SANE_BUILDING_LIBRARY)
#define SANE_API __attribute__((visibility("default")))
#else
#define SANE_API
#endif

typedef enum sane_status {
    SANE_OK = 0,
    SANE_E_ARGUMENT = 1,
    SANE_E_DIMENSION = 2,
    SANE_E_CONFIG = 3,
    SANE_E_FORMAT = 4,
    SANE_E_CAPACITY = 5,
    SANE_E_DATA = 6,
    SANE_E_IO = 7,
    SANE_E_NUMERIC = 8,
    SANE_E_NOT_FOUND = 9,
    SANE_E_INTERNAL = 10
} sane_status;

/* Parsed run configuration plus runtime overrides. */
typedef struct sane_run sane_run;

typedef void (*sane_log_fn)(const char* message, void* user);

SANE_API const char* sane_version(void);
SANE_API const char* sane_status_name(sane_status status);

/* Message and config key path of the last failure on the calling thread.
 * Both are empty strings after a success. */
SANE_API const char* sane_last_error(void);
SANE_API const char* sane_last_error_key(void);

/* Progress messages from every stage. Pass NULL to silence. */
SANE_API void sane_set_log_callback(sane_log_fn fn, void* user);

SANE_API sane_status sane_run_load(const char* config_path, sane_run** out);
SANE_API sane_status sane_run_parse(const char* config_json, sane_run** out);
SANE_API void sane_run_free(sane_run* run);

/* 0 restores the default: the config value, else every available core. */
SANE_API sane_status sane_run_set_workers(sane_run* run, size_t workers);
/* -1 keeps the config value; 0 or 1 overrides it. */
SANE_API sane_status sane_run_set_plots(sane_run* run, int plots);

/* Resolved configuration as JSON. Release with sane_string_free. */
SANE_API sane_status sane_run_resolved_config(const sane_run* run, char** json_out);
SANE_API void sane_string_free(char* s);

/* Stages. Each writes into the fresh directory `out`; inputs are the output
 * directories of earlier stages. */
SANE_API sane_status sane_zoo_gen(const sane_run* run, const char* out);
SANE_API sane_status sane_align(const sane_run* run, const char* zoo, const char* out);
SANE_API sane_status sane_pretrain(const sane_run* run, const char* zoo, const char* out);
SANE_API sane_status sane_embed(const sane_run* run, const char* model, const char* zoo,
                                const char* out);
SANE_API sane_status sane_probe(const sane_run* run, const char* zoo, const char* embeddings,
                                const char* out);
/* `embeddings` may be NULL. */
SANE_API sane_status sane_analyze(const sane_run* run, const char* zoo, const char* embeddings,
                                  const char* out);
SANE_API sane_status sane_sample(const sane_run* run, const char* model, const char* zoo,
                                 const char* embeddings, const char* out);
SANE_API sane_status sane_finetune(const sane_run* run, const char* samples, const char* zoo,
                                   const char* out);
SANE_API sane_status sane_report(const sane_run* run, const char* const* runs, size_t n_runs,
                                 const char* out);

#ifdef __cplusplus
}
#endif

#endif
