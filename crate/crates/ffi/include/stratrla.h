#ifndef STRATRLA_H
#define STRATRLA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. `STRATRLA_STATUS_OK` is zero; everything else is an error.
typedef enum StratrlaStatus {
  STRATRLA_STATUS_OK = 0,
  STRATRLA_STATUS_NULL_POINTER = 1,
  STRATRLA_STATUS_INVALID_UTF8 = 2,
  STRATRLA_STATUS_CONFIG = 3,
  STRATRLA_STATUS_DOMAIN = 4,
  STRATRLA_STATUS_CONTRACT = 5,
  STRATRLA_STATUS_EXHAUSTED = 6,
  STRATRLA_STATUS_ALL_EXHAUSTED = 7,
  STRATRLA_STATUS_STOPPED = 8,
  STRATRLA_STATUS_LP = 9,
  STRATRLA_STATUS_PARSE = 10,
  STRATRLA_STATUS_IO = 11,
  STRATRLA_STATUS_JSON = 12,
  STRATRLA_STATUS_PANIC = 13,
} StratrlaStatus;

// Session state as reported by [`stratrla_session_status`].
typedef enum StratrlaSessionStatus {
  STRATRLA_SESSION_STATUS_RUNNING = 0,
  STRATRLA_SESSION_STATUS_STOPPED = 1,
  STRATRLA_SESSION_STATUS_EXHAUSTED = 2,
} StratrlaSessionStatus;

// Opaque audit session.
typedef struct StratrlaSession StratrlaSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *stratrla_version(void);

// Message for the most recent failure on this thread, or NULL after a
// success. The pointer is valid until the next call on the same thread.
const char *stratrla_last_error_message(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must be NULL or a pointer obtained from this library and not yet freed.
void stratrla_string_free(char *s);

// Creates a session from an audit config in JSON.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum StratrlaStatus stratrla_session_new(const char *config_json, struct StratrlaSession **out);

// Rebuilds a session from a snapshot produced by
// [`stratrla_session_snapshot_json`].
//
// # Safety
// `snapshot_json` must be a NUL-terminated string; `out` must be writable.
enum StratrlaStatus stratrla_session_from_snapshot(const char *snapshot_json,
                                                   struct StratrlaSession **out);

// Destroys a session. NULL is ignored.
//
// # Safety
// `session` must be NULL or a live handle from this library.
void stratrla_session_free(struct StratrlaSession *session);

// Records one audited card. `cvr` is read only when `has_cvr` is non-zero.
//
// # Safety
// `session` must be a live handle.
enum StratrlaStatus stratrla_session_ingest(struct StratrlaSession *session,
                                            size_t stratum,
                                            double mvr,
                                            bool has_cvr,
                                            double cvr);

// Current maximum combined P-values.
//
// # Safety
// `session` must be a live handle; the outputs must be writable.
enum StratrlaStatus stratrla_session_pvalues(const struct StratrlaSession *session,
                                             double *p_fisher,
                                             double *p_intersection);

// Session state.
//
// # Safety
// `session` must be a live handle; `out` must be writable.
enum StratrlaStatus stratrla_session_status(const struct StratrlaSession *session,
                                            enum StratrlaSessionStatus *out);

// Number of cards ingested so far.
//
// # Safety
// `session` must be a live handle; `out` must be writable.
enum StratrlaStatus stratrla_session_num_draws(const struct StratrlaSession *session,
                                               uint64_t *out);

// Stratum to sample next (numbered from 1).
//
// # Safety
// `session` must be a live handle; `out` must be writable.
enum StratrlaStatus stratrla_session_recommend(const struct StratrlaSession *session, size_t *out);

// Session snapshot as JSON. Free the result with [`stratrla_string_free`].
//
// # Safety
// `session` must be a live handle; `out` must be writable.
enum StratrlaStatus stratrla_session_snapshot_json(const struct StratrlaSession *session,
                                                   char **out);

// Fisher combination of `len` P-values.
//
// # Safety
// `p` must point to `len` readable doubles; `out` must be writable.
enum StratrlaStatus stratrla_fisher_pvalue(const double *p, size_t len, double *out);

// `min(1, 1 / prod M_k)` from `len` log supermartingale values.
//
// # Safety
// `log_m` must point to `len` readable doubles; `out` must be writable.
enum StratrlaStatus stratrla_intersection_pvalue(const double *log_m, size_t len, double *out);

// Upper tail of the chi-squared distribution with `2k` degrees of freedom.
//
// # Safety
// `out` must be writable.
enum StratrlaStatus stratrla_chi2_survival(double x, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRATRLA_H */
