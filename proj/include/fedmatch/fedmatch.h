#ifndef FEDMATCH_FEDMATCH_H
#define FEDMATCH_FEDMATCH_H

/* C interface to the FedMatch simulator. Every call returns an fm_status;
 * on failure fm_last_error() describes the most recent error on the calling
 * thread. Objects returned through out-parameters are owned by the caller
 * and released with the matching *_free function. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FM_API __declspec(dllexport)
#else
#define FM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fm_status {
  FM_OK = 0,
  FM_INVALID_ARGUMENT = 1,
  FM_CONFIG_ERROR = 2,
  FM_IO_ERROR = 3,
  FM_CORRUPT_DELTA = 4,
  FM_RUNTIME_ERROR = 5
} fm_status;

typedef struct fm_spec fm_spec;
typedef struct fm_result fm_result;

typedef struct fm_round_metrics {
  int round;
  double test_acc;
  double labeled_acc;
  double loss_s;
  double loss_u;
  double s2c_pct;
  double c2s_pct;
  double nnz_psi_frac;
} fm_round_metrics;

FM_API const char* fm_version(void);
FM_API const char* fm_last_error(void);
FM_API const char* fm_status_name(fm_status status);

/* "error", "info" or "debug". */
FM_API fm_status fm_set_log_level(const char* level);

FM_API fm_status fm_spec_from_file(const char* path, fm_spec** out);
FM_API fm_status fm_spec_from_json(const char* json, fm_spec** out);
FM_API void fm_spec_free(fm_spec* spec);

FM_API fm_status fm_spec_set_method(fm_spec* spec, const char* method);
FM_API fm_status fm_spec_set_seed(fm_spec* spec, uint64_t seed);
FM_API fm_status fm_spec_set_output_dir(fm_spec* spec, const char* dir);
/* Re-checks every invariant of the spec. */
FM_API fm_status fm_spec_validate(const fm_spec* spec);
/* Resolved config as JSON; release with fm_string_free. */
FM_API fm_status fm_spec_to_json(const fm_spec* spec, char** out);
FM_API void fm_string_free(char* s);

/* Runs every repetition and writes metrics, costs, config and summary files
 * under the spec's output directory. `out` may be NULL. */
FM_API fm_status fm_run(const fm_spec* spec, fm_result** out);
/* One run of the spec's seed, in memory only. */
FM_API fm_status fm_simulate(const fm_spec* spec, fm_result** out);
/* Runs the spec once per method and writes a merged compare.csv. */
FM_API fm_status fm_compare(const fm_spec* spec, const char* const* methods, size_t num_methods);

FM_API size_t fm_result_repetitions(const fm_result* result);
FM_API size_t fm_result_rounds(const fm_result* result, size_t rep);
FM_API fm_status fm_result_metrics(const fm_result* result, size_t rep, size_t index, fm_round_metrics* out);
/* Label reads made through client data handles during repetition `rep`. */
FM_API fm_status fm_result_label_reads(const fm_result* result, size_t rep, uint64_t* out);
FM_API void fm_result_free(fm_result* result);

/* Sparse delta of `local` against `reference`, serialized to bytes
 * (release with fm_bytes_free). */
FM_API fm_status fm_delta_encode(const double* local, const double* reference, size_t len, double threshold,
                                 uint8_t** bytes, size_t* num_bytes);
/* out[i] = reference[i] + delta; `out` must hold `len` values. */
FM_API fm_status fm_delta_apply(const double* reference, size_t len, const uint8_t* bytes, size_t num_bytes,
                                double* out);
FM_API void fm_bytes_free(uint8_t* bytes);

#ifdef __cplusplus
}
#endif

#endif
