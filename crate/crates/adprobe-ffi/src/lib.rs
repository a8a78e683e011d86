//! C ABI for the blocked permutation-test engine.
//!
//! The surface mirrors the statistical kernel: build an opaque dataset of
//! per-agent observations in balanced blocks, run exact or Monte Carlo
//! blocked permutation tests with a caller-supplied statistic callback, and
//! use the scalar helpers (Clopper-Pearson upper bounds, Bonferroni and
//! Holm-Bonferroni corrections). `adprobe_analyze_logs` exposes the whole
//! measurement-directory analysis and returns the manifest as JSON.
//!
//! Conventions: functions return [`AdprobeStatus`]; `ADPROBE_STATUS_OK` is
//! zero. On any other status, `adprobe_last_error_message` returns a
//! thread-local, NUL-terminated description valid until the next failing
//! call on the same thread. Strings returned through out-parameters are
//! freed with `adprobe_string_free`; datasets with `adprobe_dataset_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use adprobe_core::experiment::Group;
use adprobe_core::features::FeatureSetKind;
use adprobe_core::harness::{self, AnalyzeOptions, PresetKind};
use adprobe_core::stats::{
    bonferroni, clopper_pearson_upper, exact_permutation_test_with_cap, holm_bonferroni,
    sampled_permutation_test_partitioned, BlockedObservations, Direction, HypothesisFamily,
    StatsError, TestMode, TestResult,
};

/// Result of every fallible call in this API.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdprobeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or unparsable.
    InvalidArgument = 2,
    /// A block was not balanced between the two groups.
    Unbalanced = 3,
    /// Exact enumeration would exceed the cap; sample instead.
    CapExceeded = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// Reading or parsing measurement data failed.
    AnalysisFailed = 6,
    /// Internal panic; state is still consistent.
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = CString::new(message.into().replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn fail(status: AdprobeStatus, message: impl Into<String>) -> AdprobeStatus {
    set_error(message);
    status
}

/// Description of the last failure on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adprobe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map(|s| s.as_ptr()).unwrap_or(ptr::null())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adprobe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Per-agent observations in balanced blocks; opaque.
pub struct AdprobeDataset {
    data: BlockedObservations<f64>,
}

/// Outcome of one permutation test.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AdprobeTestResult {
    /// Observed value of the statistic.
    pub statistic: f64,
    /// Reassignments at least as extreme as the observed labeling.
    pub exceedances: u64,
    /// Enumerated patterns (exact) or Monte Carlo draws (sampled).
    pub samples: u64,
    /// 0 = exact, 1 = sampled.
    pub mode: i32,
    /// exceedances / samples.
    pub p_point: f64,
    /// Exact: equals p_point. Sampled: Clopper-Pearson 99% upper bound.
    pub p_upper: f64,
    /// 0 = greater-equal tail, 1 = flipped tail.
    pub direction: i32,
}

impl From<TestResult> for AdprobeTestResult {
    fn from(r: TestResult) -> AdprobeTestResult {
        AdprobeTestResult {
            statistic: r.statistic,
            exceedances: r.exceedances,
            samples: r.samples,
            mode: match r.mode {
                TestMode::Exact => 0,
                TestMode::Sampled => 1,
            },
            p_point: r.p_point,
            p_upper: r.p_upper,
            direction: match r.direction {
                Direction::GreaterEqual => 0,
                Direction::FlippedGreaterEqual => 1,
            },
        }
    }
}

/// Test statistic over the dataset's observations and a candidate
/// labeling. `values` and `labels` have `len` entries in block-major
/// order; labels are 0 (control) or 1 (experimental). The callback must be
/// pure; when `partitions > 1` it is invoked from multiple threads
/// concurrently, so it must also be thread-safe.
pub type AdprobeStatistic = Option<
    unsafe extern "C" fn(
        values: *const f64,
        labels: *const u8,
        len: usize,
        context: *mut c_void,
    ) -> f64,
>;

struct CStatistic {
    callback: unsafe extern "C" fn(*const f64, *const u8, usize, *mut c_void) -> f64,
    context: *mut c_void,
}

// The C contract requires the callback to be thread-safe when partitions
// exceed one; the context pointer travels with it.
unsafe impl Sync for CStatistic {}

impl CStatistic {
    fn eval(&self, values: &[f64], labels: &[Group]) -> f64 {
        // Group is repr(u8) with control = 0, experimental = 1.
        unsafe {
            (self.callback)(
                values.as_ptr(),
                labels.as_ptr() as *const u8,
                values.len(),
                self.context,
            )
        }
    }
}

fn parse_direction(direction: i32) -> Result<Direction, AdprobeStatus> {
    match direction {
        0 => Ok(Direction::GreaterEqual),
        1 => Ok(Direction::FlippedGreaterEqual),
        _ => Err(fail(
            AdprobeStatus::InvalidArgument,
            format!("direction must be 0 (ge) or 1 (flipped), got {direction}"),
        )),
    }
}

/// Build a dataset from `n_blocks * block_size` observations laid out
/// block-major. `labels[i]` is the observed group of agent i: 0 control,
/// 1 experimental. Every block must contain exactly block_size/2 of each.
///
/// # Safety
/// `values` and `labels` must point to `n_blocks * block_size` readable
/// elements; `out` must be a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn adprobe_dataset_new(
    values: *const f64,
    labels: *const u8,
    n_blocks: usize,
    block_size: usize,
    out: *mut *mut AdprobeDataset,
) -> AdprobeStatus {
    if values.is_null() || labels.is_null() || out.is_null() {
        return fail(AdprobeStatus::NullPointer, "values, labels, and out must be non-null");
    }
    if n_blocks == 0 || block_size == 0 || !block_size.is_multiple_of(2) {
        return fail(
            AdprobeStatus::InvalidArgument,
            format!("need n_blocks >= 1 and even block_size >= 2, got {n_blocks} x {block_size}"),
        );
    }
    let total = n_blocks * block_size;
    let values = std::slice::from_raw_parts(values, total);
    let labels = std::slice::from_raw_parts(labels, total);
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return fail(AdprobeStatus::InvalidArgument, format!("labels must be 0 or 1, got {bad}"));
    }

    let blocks: Vec<Vec<(f64, Group)>> = (0..n_blocks)
        .map(|b| {
            (0..block_size)
                .map(|j| {
                    let i = b * block_size + j;
                    let group = if labels[i] == 1 { Group::Experimental } else { Group::Control };
                    (values[i], group)
                })
                .collect()
        })
        .collect();
    match BlockedObservations::new(blocks) {
        Ok(data) => {
            out.write(Box::into_raw(Box::new(AdprobeDataset { data })));
            AdprobeStatus::Ok
        }
        Err(StatsError::Unbalanced { block }) => fail(
            AdprobeStatus::Unbalanced,
            format!("block {block} is not balanced between the two groups"),
        ),
        Err(e) => fail(AdprobeStatus::InvalidArgument, e.to_string()),
    }
}

/// Release a dataset created by `adprobe_dataset_new`. Null is a no-op.
///
/// # Safety
/// `dataset` must be a pointer from `adprobe_dataset_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adprobe_dataset_free(dataset: *mut AdprobeDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Exact blocked permutation test over every balanced label pattern.
/// Fails with `CAP_EXCEEDED` when the enumeration is larger than `cap`
/// (pass 0 for the default cap of 10^7).
///
/// # Safety
/// `dataset` must be a live handle; `statistic` non-null and pure; `out`
/// valid for writing.
#[no_mangle]
pub unsafe extern "C" fn adprobe_exact_test(
    dataset: *const AdprobeDataset,
    statistic: AdprobeStatistic,
    context: *mut c_void,
    direction: i32,
    cap: u64,
    out: *mut AdprobeTestResult,
) -> AdprobeStatus {
    let Some(callback) = statistic else {
        return fail(AdprobeStatus::NullPointer, "statistic callback must be non-null");
    };
    if dataset.is_null() || out.is_null() {
        return fail(AdprobeStatus::NullPointer, "dataset and out must be non-null");
    }
    let direction = match parse_direction(direction) {
        Ok(d) => d,
        Err(status) => return status,
    };
    let cap = if cap == 0 { adprobe_core::randomizer::DEFAULT_ENUMERATION_CAP } else { cap };
    let stat = CStatistic { callback, context };
    let data = &(*dataset).data;

    let outcome = catch_unwind(AssertUnwindSafe(|| {
        exact_permutation_test_with_cap(data, |v: &[f64], l: &[Group]| stat.eval(v, l), direction, cap)
    }));
    match outcome {
        Ok(Ok(result)) => {
            out.write(result.into());
            AdprobeStatus::Ok
        }
        Ok(Err(StatsError::Enumeration(e))) => fail(AdprobeStatus::CapExceeded, e.to_string()),
        Ok(Err(e)) => fail(AdprobeStatus::InvalidArgument, e.to_string()),
        Err(_) => fail(AdprobeStatus::Internal, "panic during exact test"),
    }
}

/// Monte Carlo blocked permutation test over `samples` label reassignments,
/// deterministic in (seed, samples, partitions). With `partitions > 1` the
/// draw stream splits into that many independent streams whose counts are
/// summed; the statistic callback is then invoked concurrently.
///
/// # Safety
/// Same as `adprobe_exact_test`; the callback must additionally be
/// thread-safe when `partitions > 1`.
#[no_mangle]
pub unsafe extern "C" fn adprobe_sampled_test(
    dataset: *const AdprobeDataset,
    statistic: AdprobeStatistic,
    context: *mut c_void,
    direction: i32,
    samples: u64,
    seed: u64,
    partitions: u32,
    out: *mut AdprobeTestResult,
) -> AdprobeStatus {
    let Some(callback) = statistic else {
        return fail(AdprobeStatus::NullPointer, "statistic callback must be non-null");
    };
    if dataset.is_null() || out.is_null() {
        return fail(AdprobeStatus::NullPointer, "dataset and out must be non-null");
    }
    if samples == 0 {
        return fail(AdprobeStatus::InvalidArgument, "samples must be at least 1");
    }
    let direction = match parse_direction(direction) {
        Ok(d) => d,
        Err(status) => return status,
    };
    let stat = CStatistic { callback, context };
    let data = &(*dataset).data;

    let outcome = catch_unwind(AssertUnwindSafe(|| {
        sampled_permutation_test_partitioned(
            data,
            |v: &[f64], l: &[Group]| stat.eval(v, l),
            direction,
            samples,
            seed,
            partitions.max(1),
        )
    }));
    match outcome {
        Ok(result) => {
            out.write(result.into());
            AdprobeStatus::Ok
        }
        Err(_) => fail(AdprobeStatus::Internal, "panic during sampled test"),
    }
}

/// Upper endpoint of the two-sided Clopper-Pearson interval for
/// `successes` out of `trials` at `confidence` (e.g. 0.99).
///
/// # Safety
/// `out` must be valid for writing one double.
#[no_mangle]
pub unsafe extern "C" fn adprobe_clopper_pearson_upper(
    successes: u64,
    trials: u64,
    confidence: f64,
    out: *mut f64,
) -> AdprobeStatus {
    if out.is_null() {
        return fail(AdprobeStatus::NullPointer, "out must be non-null");
    }
    if trials == 0 || successes > trials || !(confidence > 0.0 && confidence < 1.0) {
        return fail(
            AdprobeStatus::InvalidArgument,
            format!("need successes <= trials, trials > 0, confidence in (0,1); got {successes}/{trials} at {confidence}"),
        );
    }
    out.write(clopper_pearson_upper(successes, trials, confidence));
    AdprobeStatus::Ok
}

/// Bonferroni correction: p times the hypothesis count, not clamped to 1.
#[no_mangle]
pub extern "C" fn adprobe_bonferroni(p: f64, hypotheses: u32) -> f64 {
    bonferroni(p, hypotheses)
}

/// Holm-Bonferroni step-down over `count` unadjusted p-values.
///
/// Outputs are indexed like the inputs: `adjusted[i]` is the adjusted
/// p-value of input i, or NaN where the procedure reports none;
/// `rejected[i]` is 1 where the hypothesis is rejected at `alpha`. Ties
/// order by input index.
///
/// # Safety
/// `p_values`, `adjusted`, and `rejected` must point to `count` elements.
#[no_mangle]
pub unsafe extern "C" fn adprobe_holm_bonferroni(
    p_values: *const f64,
    count: usize,
    alpha: f64,
    adjusted: *mut f64,
    rejected: *mut u8,
) -> AdprobeStatus {
    if p_values.is_null() || adjusted.is_null() || rejected.is_null() {
        return fail(AdprobeStatus::NullPointer, "p_values, adjusted, and rejected must be non-null");
    }
    if count == 0 {
        return fail(AdprobeStatus::InvalidArgument, "count must be at least 1");
    }
    let ps = std::slice::from_raw_parts(p_values, count);
    if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return fail(AdprobeStatus::InvalidArgument, "p-values must lie in [0, 1]");
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return fail(AdprobeStatus::InvalidArgument, "alpha must lie in (0, 1)");
    }

    // Zero-padded index names make the stable tie-break follow input order.
    let width = count.to_string().len();
    let mut family = HypothesisFamily::new(
        ps.iter().enumerate().map(|(i, &p)| (format!("{i:0width$}"), p)).collect(),
    );
    family.alpha = alpha;
    let entries = holm_bonferroni(&family);
    for entry in entries {
        let index: usize = entry.name.parse().expect("index name");
        adjusted.add(index).write(entry.adjusted.unwrap_or(f64::NAN));
        rejected.add(index).write(u8::from(entry.rejected));
    }
    AdprobeStatus::Ok
}

/// Analyze a measurement directory exactly like the CLI `analyze`
/// subcommand and hand back the manifest JSON.
///
/// `preset` is one of `nondiscrimination`, `transparency`,
/// `effectful-choice`, `ad-choice`; `features` is `url`, `urltitle`, or
/// `wordstem`. The returned string is freed with `adprobe_string_free`.
///
/// # Safety
/// `log_dir`, `preset`, and `features` must be NUL-terminated strings;
/// `manifest_json` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn adprobe_analyze_logs(
    log_dir: *const c_char,
    preset: *const c_char,
    features: *const c_char,
    samples: u64,
    seed: u64,
    partitions: u32,
    manifest_json: *mut *mut c_char,
) -> AdprobeStatus {
    if log_dir.is_null() || preset.is_null() || features.is_null() || manifest_json.is_null() {
        return fail(AdprobeStatus::NullPointer, "all pointer arguments must be non-null");
    }
    let parse_str = |p: *const c_char| -> Result<&str, AdprobeStatus> {
        CStr::from_ptr(p)
            .to_str()
            .map_err(|e| fail(AdprobeStatus::InvalidUtf8, e.to_string()))
    };
    let log_dir = match parse_str(log_dir) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let preset = match parse_str(preset) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let features = match parse_str(features) {
        Ok(s) => s,
        Err(status) => return status,
    };

    let Some(preset) = PresetKind::parse(preset) else {
        return fail(AdprobeStatus::InvalidArgument, format!("unknown preset {preset:?}"));
    };
    let features = match features {
        "url" => FeatureSetKind::Url,
        "urltitle" => FeatureSetKind::UrlTitle,
        "wordstem" => FeatureSetKind::WordStem,
        other => {
            return fail(AdprobeStatus::InvalidArgument, format!("unknown feature set {other:?}"))
        }
    };
    if samples == 0 {
        return fail(AdprobeStatus::InvalidArgument, "samples must be at least 1");
    }

    let options = AnalyzeOptions {
        preset,
        features,
        samples,
        seed,
        partitions: partitions.max(1),
        top: 5,
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| harness::analyze(Path::new(log_dir), options)));
    match outcome {
        Ok(Ok(manifest)) => {
            let json = CString::new(manifest.to_json()).expect("manifest has no NUL");
            manifest_json.write(json.into_raw());
            AdprobeStatus::Ok
        }
        Ok(Err(e)) => fail(AdprobeStatus::AnalysisFailed, e.to_string()),
        Err(_) => fail(AdprobeStatus::Internal, "panic during analysis"),
    }
}

/// Free a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn adprobe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
