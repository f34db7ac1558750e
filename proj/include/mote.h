/* SPDX-License-Identifier: Apache-2.0
 *
 * C API for the mote library. All entry points return a status code;
 * MOTE_OK means success and anything else leaves a thread-local detail
 * message readable through mote_last_error(). Objects are exchanged as
 * opaque handles owned by the library; free them with the matching
 * *_free/*_close call. Strings returned through char** out-parameters are
 * heap-allocated and must be released with mote_string_free().
 */
#ifndef MOTE_H
#define MOTE_H

#include <stdint.h>

#if defined(_WIN32)
#define MOTE_API __declspec(dllexport)
#else
#define MOTE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mote_status {
  MOTE_OK = 0,
  MOTE_ERR_INVALID_ARGUMENT = 1,
  MOTE_ERR_DIMENSION_MISMATCH = 2,
  MOTE_ERR_NOT_SYMMETRIC = 3,
  MOTE_ERR_NOT_SPD = 4,
  MOTE_ERR_SIZE_GUARD = 5,
  MOTE_ERR_IO = 6,
  MOTE_ERR_PARSE = 7,
  MOTE_ERR_VERIFY = 8,
  MOTE_ERR_NULL_POINTER = 9,
  MOTE_ERR_UNKNOWN = 99
} mote_status;

MOTE_API const char* mote_version(void);
MOTE_API const char* mote_status_name(mote_status status);

/* Thread-local message describing the most recent failure. */
MOTE_API const char* mote_last_error(void);

MOTE_API void mote_string_free(char* s);

typedef struct mote_workspace mote_workspace; /* generated layer stack + batch */
typedef struct mote_plan mote_plan;           /* one editing run's recipe */
typedef struct mote_report mote_report;       /* edit / verify / bench results */

/* Generates a synthetic workspace (layers, batch, preservation inputs)
 * under out_dir. config_text holds "key = value" lines; unknown keys are
 * rejected as a parse error, missing keys take defaults. */
MOTE_API mote_status mote_generate(const char* config_text, const char* out_dir);

MOTE_API mote_status mote_workspace_open(const char* dir, mote_workspace** out);
MOTE_API void mote_workspace_close(mote_workspace* ws);

/* One JSON object describing the workspace dimensions. */
MOTE_API mote_status mote_workspace_info(const mote_workspace* ws, char** json_out);

/* Plans use the same "key = value" syntax; "layers" is mandatory. */
MOTE_API mote_status mote_plan_parse(const char* text, mote_plan** out);
MOTE_API mote_status mote_plan_load(const char* path, mote_plan** out);

/* Overrides a single plan key (e.g. "solver", "lambda", "ranks"). */
MOTE_API mote_status mote_plan_set(mote_plan* plan, const char* key, const char* value);
MOTE_API void mote_plan_free(mote_plan* plan);

/* Applies the plan to the workspace in place. When out_dir is non-NULL the
 * edited layers and report.jsonl are written there. */
MOTE_API mote_status mote_edit(mote_workspace* ws, const mote_plan* plan, const char* out_dir,
                               mote_report** out);

/* Runs the identity-verification suite. *breached is set to 0 or 1; the
 * return value is MOTE_OK whenever the suite itself ran to completion.
 * config_text may be NULL or empty for the default suite. */
MOTE_API mote_status mote_verify(const char* config_text, int* breached, mote_report** out);

/* Runs the solver benchmark grid described by config_text. */
MOTE_API mote_status mote_bench(const char* config_text, mote_report** out);

/* Machine-readable (one JSON object per line) and human-readable views. */
MOTE_API mote_status mote_report_jsonl(const mote_report* report, char** out);
MOTE_API mote_status mote_report_table(const mote_report* report, char** out);
MOTE_API void mote_report_free(mote_report* report);

#ifdef __cplusplus
}
#endif

#endif /* MOTE_H */
