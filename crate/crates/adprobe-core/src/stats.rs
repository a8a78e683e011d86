//! Blocked permutation tests (exact and Monte Carlo), Clopper-Pearson
//! p-value upper bounds, keyword count statistics, and Bonferroni /
//! Holm-Bonferroni corrections.
//!
//! The permutation test compares the observed statistic to its distribution
//! over block-respecting label reassignments; exceedances use >= so ties
//! count against rejection. Monte Carlo runs report the plain sampled
//! proportion as the point estimate and the 99% Clopper-Pearson upper bound
//! as the conservative p-value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{AdRecord, AgentLog, Group};
use crate::randomizer::{self, RandomizerError, DEFAULT_ENUMERATION_CAP};
use crate::rng::{self, streams};

/// Default Monte Carlo sample count.
pub const DEFAULT_SAMPLES: u64 = 1_000_000;
/// Default Clopper-Pearson confidence for the reported upper bound.
pub const DEFAULT_CP_CONFIDENCE: f64 = 0.99;

/// Which tail the test measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Count reassignments with statistic >= observed.
    #[serde(rename = "ge")]
    GreaterEqual,
    /// The opposite tail: statistic <= observed.
    #[serde(rename = "flipped")]
    FlippedGreaterEqual,
}

impl Direction {
    fn exceeds(self, permuted: f64, observed: f64) -> bool {
        match self {
            Direction::GreaterEqual => permuted >= observed,
            Direction::FlippedGreaterEqual => permuted <= observed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMode {
    Exact,
    Sampled,
}

/// Outcome of one permutation test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Observed value of the test statistic.
    pub statistic: f64,
    /// Reassignments at least as extreme as the observed statistic.
    pub exceedances: u64,
    /// Enumerated patterns (exact) or Monte Carlo draws (sampled).
    pub samples: u64,
    pub mode: TestMode,
    /// exceedances / samples.
    pub p_point: f64,
    /// Exact: equals `p_point`. Sampled: Clopper-Pearson upper bound.
    pub p_upper: f64,
    pub direction: Direction,
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error(transparent)]
    Enumeration(#[from] RandomizerError),
    #[error("blocked data is empty")]
    Empty,
    #[error("block {block} is not balanced between the two groups")]
    Unbalanced { block: usize },
    #[error("blocks must share one size; block {block} has {got}, expected {expected}")]
    RaggedBlocks { block: usize, got: usize, expected: usize },
    #[error("keyword list must be nonempty and lowercase")]
    BadKeywords,
}

/// Per-agent observations grouped into balanced blocks, with the observed
/// labels. Observation order within a block is fixed; only labels move.
#[derive(Debug, Clone)]
pub struct BlockedObservations<T> {
    values: Vec<T>,
    labels: Vec<Group>,
    /// Half-open (start, end) index ranges of each block.
    block_bounds: Vec<(usize, usize)>,
    block_size: usize,
}

impl<T> BlockedObservations<T> {
    /// Build from per-block (observation, label) lists. Every block must be
    /// the same size and balanced between the groups.
    pub fn new(blocks: Vec<Vec<(T, Group)>>) -> Result<BlockedObservations<T>, StatsError> {
        if blocks.is_empty() || blocks.iter().any(|b| b.is_empty()) {
            return Err(StatsError::Empty);
        }
        let block_size = blocks[0].len();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut block_bounds = Vec::new();
        for (i, block) in blocks.into_iter().enumerate() {
            if block.len() != block_size {
                return Err(StatsError::RaggedBlocks {
                    block: i,
                    got: block.len(),
                    expected: block_size,
                });
            }
            let experimental = block.iter().filter(|(_, g)| *g == Group::Experimental).count();
            if !block_size.is_multiple_of(2) || experimental * 2 != block_size {
                return Err(StatsError::Unbalanced { block: i });
            }
            let start = values.len();
            for (v, g) in block {
                values.push(v);
                labels.push(g);
            }
            block_bounds.push((start, values.len()));
        }
        Ok(BlockedObservations {
            values,
            labels,
            block_bounds,
            block_size,
        })
    }

    pub fn block_count(&self) -> usize {
        self.block_bounds.len()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn observed_labels(&self) -> &[Group] {
        &self.labels
    }
}

/// Exact blocked permutation test: enumerate every block-respecting
/// balanced label pattern and report the fraction at least as extreme as
/// the observed labeling. Fails with a cap error on instances too large to
/// enumerate; use [`sampled_permutation_test`] there.
pub fn exact_permutation_test<T, S>(
    data: &BlockedObservations<T>,
    statistic: S,
    direction: Direction,
) -> Result<TestResult, StatsError>
where
    S: Fn(&[T], &[Group]) -> f64,
{
    exact_permutation_test_with_cap(data, statistic, direction, DEFAULT_ENUMERATION_CAP)
}

pub fn exact_permutation_test_with_cap<T, S>(
    data: &BlockedObservations<T>,
    statistic: S,
    direction: Direction,
    cap: u64,
) -> Result<TestResult, StatsError>
where
    S: Fn(&[T], &[Group]) -> f64,
{
    let k = data.block_count() as u32;
    let m = data.block_size() as u32;
    // Reuse the enumerability check (and its cap error) before visiting.
    let total = randomizer::enumerate_assignments_with_cap(k, m, cap)?.len();

    let observed = statistic(&data.values, &data.labels);
    let mut exceedances: u64 = 0;
    randomizer::for_each_balanced_pattern(k as usize, m as usize, |labels| {
        if direction.exceeds(statistic(&data.values, labels), observed) {
            exceedances += 1;
        }
    });

    let p = exceedances as f64 / total as f64;
    Ok(TestResult {
        statistic: observed,
        exceedances,
        samples: total,
        mode: TestMode::Exact,
        p_point: p,
        p_upper: p,
        direction,
    })
}

/// Monte Carlo blocked permutation test over `samples` uniformly drawn
/// block-respecting reassignments, deterministic given the seed. The
/// reported `p_upper` is the Clopper-Pearson 99% upper bound on the true
/// permutation p-value.
pub fn sampled_permutation_test<T, S>(
    data: &BlockedObservations<T>,
    statistic: S,
    direction: Direction,
    samples: u64,
    seed: u64,
) -> TestResult
where
    T: Sync,
    S: Fn(&[T], &[Group]) -> f64 + Sync,
{
    sampled_permutation_test_partitioned(data, statistic, direction, samples, seed, 1)
}

/// Partitioned variant: the draw stream is split into `partitions`
/// independent RNG streams whose exceedance counts are summed, so the
/// result is deterministic for a fixed (seed, samples, partitions) triple
/// no matter how the partitions are scheduled.
pub fn sampled_permutation_test_partitioned<T, S>(
    data: &BlockedObservations<T>,
    statistic: S,
    direction: Direction,
    samples: u64,
    seed: u64,
    partitions: u32,
) -> TestResult
where
    T: Sync,
    S: Fn(&[T], &[Group]) -> f64 + Sync,
{
    assert!(samples >= 1, "need at least one sample");
    let partitions = partitions.clamp(1, samples.min(u32::MAX as u64) as u32);
    let observed = statistic(&data.values, &data.labels);

    let run_partition = |p: u32| -> u64 {
        let quota = samples / partitions as u64
            + if (p as u64) < samples % partitions as u64 { 1 } else { 0 };
        let mut rng = rng::stream(seed, streams::PERMUTATION + p as u64);
        let mut labels = data.labels.clone();
        let mut exceedances = 0u64;
        for _ in 0..quota {
            randomizer::shuffle_flat_labels(&mut labels, &data.block_bounds, &mut rng);
            if direction.exceeds(statistic(&data.values, &labels), observed) {
                exceedances += 1;
            }
        }
        exceedances
    };

    let exceedances: u64 = if partitions == 1 {
        run_partition(0)
    } else {
        let run = &run_partition;
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..partitions).map(|p| scope.spawn(move || run(p))).collect();
            handles.into_iter().map(|h| h.join().expect("partition panicked")).sum()
        })
    };

    TestResult {
        statistic: observed,
        exceedances,
        samples,
        mode: TestMode::Sampled,
        p_point: exceedances as f64 / samples as f64,
        p_upper: clopper_pearson_upper(exceedances, samples, DEFAULT_CP_CONFIDENCE),
        direction,
    }
}

/// Upper endpoint of the two-sided Clopper-Pearson interval for `successes`
/// out of `trials` at the given confidence: the 1-(1-confidence)/2 quantile
/// of Beta(successes+1, trials-successes). `successes == trials` gives 1.
pub fn clopper_pearson_upper(successes: u64, trials: u64, confidence: f64) -> f64 {
    assert!(successes <= trials && trials > 0, "need 0 <= successes <= trials, trials > 0");
    assert!(confidence > 0.0 && confidence < 1.0, "confidence must be in (0, 1)");
    if successes == trials {
        return 1.0;
    }
    let target = 1.0 - (1.0 - confidence) / 2.0;
    beta_quantile(successes as f64 + 1.0, (trials - successes) as f64, target)
}

/// Quantile of Beta(a, b) by bisection on the regularized incomplete beta.
fn beta_quantile(a: f64, b: f64, q: f64) -> f64 {
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if regularized_incomplete_beta(a, b, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Regularized incomplete beta I_x(a, b) via the standard continued
/// fraction expansion.
fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        (front * beta_continued_fraction(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b).clamp(0.0, 1.0)
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITERS: usize = 400;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;

    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;

    for m in 1..=MAX_ITERS {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;

        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;

        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln(Gamma(x)) for x > 0.
#[allow(clippy::excessive_precision)]
fn ln_gamma(x: f64) -> f64 {
    const COEFFICIENTS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFICIENTS[0];
    let t = x + 7.5;
    for (i, &coef) in COEFFICIENTS.iter().enumerate().skip(1) {
        acc += coef / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Does the ad's title or body text contain any of the (lowercase)
/// keywords, case-insensitively?
pub fn ad_matches_keywords(ad: &AdRecord, keywords: &[String]) -> bool {
    let title = ad.title.to_lowercase();
    let text = ad.text.to_lowercase();
    keywords.iter().any(|k| title.contains(k) || text.contains(k))
}

/// Total count of ads in `target_group` whose title or text contains any
/// keyword. Usable as a permutation statistic in either direction.
pub fn keyword_statistic(
    logs: &[AgentLog],
    keywords: &[String],
    target_group: Group,
) -> Result<u64, StatsError> {
    if keywords.is_empty() || keywords.iter().any(|k| *k != k.to_lowercase()) {
        return Err(StatsError::BadKeywords);
    }
    Ok(logs
        .iter()
        .filter(|log| log.group == target_group)
        .flat_map(|log| log.ads.iter())
        .filter(|ad| ad_matches_keywords(ad, keywords))
        .count() as u64)
}

/// Bonferroni correction: p times the number of hypotheses, deliberately
/// not clamped to 1.
pub fn bonferroni(p: f64, hypotheses: u32) -> f64 {
    p * hypotheses as f64
}

/// A family of experiments to correct jointly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisFamily {
    /// (experiment name, unadjusted p-value) pairs.
    pub entries: Vec<(String, f64)>,
    pub alpha: f64,
}

impl HypothesisFamily {
    pub fn new(entries: Vec<(String, f64)>) -> HypothesisFamily {
        HypothesisFamily { entries, alpha: 0.05 }
    }
}

/// One hypothesis after the Holm-Bonferroni step-down, in ascending p
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmEntry {
    pub name: String,
    pub p_unadjusted: f64,
    /// p * (m + 1 - k) for ranks up to and including the first failure;
    /// later ranks report none.
    pub adjusted: Option<f64>,
    pub rejected: bool,
}

/// Holm-Bonferroni step-down over the family. Hypotheses are ordered by
/// ascending p (ties broken by name); rank k is compared to
/// alpha / (m + 1 - k); all ranks before the first failure are rejected.
/// Adjusted p-values are reported through the first failing rank, matching
/// how results tables display the value that stopped the procedure.
pub fn holm_bonferroni(family: &HypothesisFamily) -> Vec<HolmEntry> {
    assert!(!family.entries.is_empty(), "family must be nonempty");
    for (name, p) in &family.entries {
        assert!((0.0..=1.0).contains(p), "p-value out of range for {name}: {p}");
    }
    let m = family.entries.len();
    let mut sorted: Vec<(String, f64)> = family.entries.clone();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite p").then(a.0.cmp(&b.0)));

    let first_failure = sorted
        .iter()
        .enumerate()
        .position(|(i, (_, p))| *p > family.alpha / (m - i) as f64)
        .unwrap_or(m);

    sorted
        .into_iter()
        .enumerate()
        .map(|(i, (name, p))| {
            let multiplier = (m - i) as f64;
            HolmEntry {
                name,
                p_unadjusted: p,
                adjusted: (i <= first_failure).then_some(p * multiplier),
                rejected: i < first_failure,
            }
        })
        .collect()
}
