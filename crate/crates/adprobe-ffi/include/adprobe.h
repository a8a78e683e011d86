#ifndef ADPROBE_H
#define ADPROBE_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call in this API.
typedef enum AdprobeStatus {
  ADPROBE_STATUS_OK = 0,
  // A required pointer argument was null.
  ADPROBE_STATUS_NULL_POINTER = 1,
  // An argument was out of range or unparsable.
  ADPROBE_STATUS_INVALID_ARGUMENT = 2,
  // A block was not balanced between the two groups.
  ADPROBE_STATUS_UNBALANCED = 3,
  // Exact enumeration would exceed the cap; sample instead.
  ADPROBE_STATUS_CAP_EXCEEDED = 4,
  // A string argument was not valid UTF-8.
  ADPROBE_STATUS_INVALID_UTF8 = 5,
  // Reading or parsing measurement data failed.
  ADPROBE_STATUS_ANALYSIS_FAILED = 6,
  // Internal panic; state is still consistent.
  ADPROBE_STATUS_INTERNAL = 7,
} AdprobeStatus;

// Per-agent observations in balanced blocks; opaque.
typedef struct AdprobeDataset AdprobeDataset;

// Test statistic over the dataset's observations and a candidate
// labeling. `values` and `labels` have `len` entries in block-major
// order; labels are 0 (control) or 1 (experimental). The callback must be
// pure; when `partitions > 1` it is invoked from multiple threads
// concurrently, so it must also be thread-safe.
typedef double (*AdprobeStatistic)(const double *values,
                                   const uint8_t *labels,
                                   size_t len,
                                   void *context);

// Outcome of one permutation test.
typedef struct AdprobeTestResult {
  // Observed value of the statistic.
  double statistic;
  // Reassignments at least as extreme as the observed labeling.
  uint64_t exceedances;
  // Enumerated patterns (exact) or Monte Carlo draws (sampled).
  uint64_t samples;
  // 0 = exact, 1 = sampled.
  int32_t mode;
  // exceedances / samples.
  double p_point;
  // Exact: equals p_point. Sampled: Clopper-Pearson 99% upper bound.
  double p_upper;
  // 0 = greater-equal tail, 1 = flipped tail.
  int32_t direction;
} AdprobeTestResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the last failure on this thread, or null if none. The
// pointer stays valid until the next failing call on the same thread.
const char *adprobe_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *adprobe_version(void);

// Build a dataset from `n_blocks * block_size` observations laid out
// block-major. `labels[i]` is the observed group of agent i: 0 control,
// 1 experimental. Every block must contain exactly block_size/2 of each.
//
// # Safety
// `values` and `labels` must point to `n_blocks * block_size` readable
// elements; `out` must be a valid pointer to receive the handle.
enum AdprobeStatus adprobe_dataset_new(const double *values,
                                       const uint8_t *labels,
                                       size_t n_blocks,
                                       size_t block_size,
                                       struct AdprobeDataset **out);

// Release a dataset created by `adprobe_dataset_new`. Null is a no-op.
//
// # Safety
// `dataset` must be a pointer from `adprobe_dataset_new` not yet freed.
void adprobe_dataset_free(struct AdprobeDataset *dataset);

// Exact blocked permutation test over every balanced label pattern.
// Fails with `CAP_EXCEEDED` when the enumeration is larger than `cap`
// (pass 0 for the default cap of 10^7).
//
// # Safety
// `dataset` must be a live handle; `statistic` non-null and pure; `out`
// valid for writing.
enum AdprobeStatus adprobe_exact_test(const struct AdprobeDataset *dataset,
                                      AdprobeStatistic statistic,
                                      void *context,
                                      int32_t direction,
                                      uint64_t cap,
                                      struct AdprobeTestResult *out);

// Monte Carlo blocked permutation test over `samples` label reassignments,
// deterministic in (seed, samples, partitions). With `partitions > 1` the
// draw stream splits into that many independent streams whose counts are
// summed; the statistic callback is then invoked concurrently.
//
// # Safety
// Same as `adprobe_exact_test`; the callback must additionally be
// thread-safe when `partitions > 1`.
enum AdprobeStatus adprobe_sampled_test(const struct AdprobeDataset *dataset,
                                        AdprobeStatistic statistic,
                                        void *context,
                                        int32_t direction,
                                        uint64_t samples,
                                        uint64_t seed,
                                        uint32_t partitions,
                                        struct AdprobeTestResult *out);

// Upper endpoint of the two-sided Clopper-Pearson interval for
// `successes` out of `trials` at `confidence` (e.g. 0.99).
//
// # Safety
// `out` must be valid for writing one double.
enum AdprobeStatus adprobe_clopper_pearson_upper(uint64_t successes,
                                                 uint64_t trials,
                                                 double confidence,
                                                 double *out);

// Bonferroni correction: p times the hypothesis count, not clamped to 1.
double adprobe_bonferroni(double p, uint32_t hypotheses);

// Holm-Bonferroni step-down over `count` unadjusted p-values.
//
// Outputs are indexed like the inputs: `adjusted[i]` is the adjusted
// p-value of input i, or NaN where the procedure reports none;
// `rejected[i]` is 1 where the hypothesis is rejected at `alpha`. Ties
// order by input index.
//
// # Safety
// `p_values`, `adjusted`, and `rejected` must point to `count` elements.
enum AdprobeStatus adprobe_holm_bonferroni(const double *p_values,
                                           size_t count,
                                           double alpha,
                                           double *adjusted,
                                           uint8_t *rejected);

// Analyze a measurement directory exactly like the CLI `analyze`
// subcommand and hand back the manifest JSON.
//
// `preset` is one of `nondiscrimination`, `transparency`,
// `effectful-choice`, `ad-choice`; `features` is `url`, `urltitle`, or
// `wordstem`. The returned string is freed with `adprobe_string_free`.
//
// # Safety
// `log_dir`, `preset`, and `features` must be NUL-terminated strings;
// `manifest_json` must be valid for writing one pointer.
enum AdprobeStatus adprobe_analyze_logs(const char *log_dir,
                                        const char *preset,
                                        const char *features,
                                        uint64_t samples,
                                        uint64_t seed,
                                        uint32_t partitions,
                                        char **manifest_json);

// Free a string returned by this library. Null is a no-op.
//
// # Safety
// `s` must come from this library and not have been freed already.
void adprobe_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADPROBE_H */
