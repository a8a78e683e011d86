//! Orchestration of the full pipeline: plan -> assignment -> treatment
//! application -> measurement -> analysis -> report.
//!
//! Within every block, all treatments run to completion before any
//! measurement is collected, so time cannot leak into the comparison.
//! Analysis consumes group labels only where the methodology allows:
//! vocabulary building sees ads alone, the classifier receives unlabeled
//! vectors plus a separate label vector, and the permutation machinery
//! reads labels at statistic evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    self, Explanation, GroupCounts, LinearModel, TrainTestSplit, DEFAULT_C_GRID,
};
use crate::experiment::{
    self, Action, AgentLog, Diagnostic, ExperimentPlan, Group, LogLoadError, PlanParseError,
};
use crate::features::{self, FeatureSetKind, Vocabulary};
use crate::randomizer;
use crate::stats::{
    self, sampled_permutation_test_partitioned, BlockedObservations, Direction, HypothesisFamily,
    StatsError, TestResult,
};
use crate::sut::{Sut, SutAction, SutError};

/// The four auditable properties. Ad choice tests a keyword count in both
/// directions with a per-experiment Bonferroni of 2; the others test the
/// held-out classifier accuracy in one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetKind {
    Nondiscrimination,
    Transparency,
    EffectfulChoice,
    AdChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatisticMode {
    ClassifierAccuracy,
    KeywordCount,
}

impl PresetKind {
    pub fn statistic_mode(self) -> StatisticMode {
        match self {
            PresetKind::AdChoice => StatisticMode::KeywordCount,
            _ => StatisticMode::ClassifierAccuracy,
        }
    }

    pub fn directions(self) -> &'static [Direction] {
        match self {
            PresetKind::AdChoice => &[Direction::GreaterEqual, Direction::FlippedGreaterEqual],
            _ => &[Direction::GreaterEqual],
        }
    }

    pub fn parse(text: &str) -> Option<PresetKind> {
        match text {
            "nondiscrimination" => Some(PresetKind::Nondiscrimination),
            "transparency" => Some(PresetKind::Transparency),
            "effectful-choice" => Some(PresetKind::EffectfulChoice),
            "ad-choice" => Some(PresetKind::AdChoice),
            _ => None,
        }
    }
}

impl std::fmt::Display for PresetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PresetKind::Nondiscrimination => write!(f, "nondiscrimination"),
            PresetKind::Transparency => write!(f, "transparency"),
            PresetKind::EffectfulChoice => write!(f, "effectful-choice"),
            PresetKind::AdChoice => write!(f, "ad-choice"),
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("plan is invalid: {}", format_diagnostics(.0))]
    InvalidPlan(Vec<Diagnostic>),
    #[error(transparent)]
    Sut(#[from] SutError),
    #[error(transparent)]
    Logs(#[from] LogLoadError),
    #[error(transparent)]
    Plan(#[from] PlanParseError),
    #[error(transparent)]
    Classifier(#[from] classifier::ClassifierError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("too few blocks: analysis needs a nonempty training split, got {blocks} block(s)")]
    TooFewBlocks { blocks: usize },
    #[error("no measurement logs found")]
    NoLogs,
    #[error("block {block} is not balanced between groups")]
    UnbalancedBlock { block: u32 },
    #[error("run is marked incomplete ({completed} of {planned} blocks); refusing to analyze")]
    IncompleteRun { completed: u32, planned: u32 },
    #[error("ad-choice analysis needs a nonempty `keywords` list in the plan file")]
    MissingKeywords,
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; ")
}

/// Status marker written next to the measurement log.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunStatus {
    pub experiment_id: String,
    pub blocks_planned: u32,
    pub blocks_completed: u32,
    pub complete: bool,
}

pub const MEASUREMENTS_FILE: &str = "measurements.jsonl";
pub const PLAN_FILE: &str = "plan.txt";
pub const STATUS_FILE: &str = "run.json";

fn resolve_actions(actions: &[Action]) -> Result<Vec<SutAction>, std::io::Error> {
    actions
        .iter()
        .map(|action| {
            Ok(match action {
                Action::VisitUrlList { path } => {
                    let urls = fs::read_to_string(path)?
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .map(str::to_string)
                        .collect();
                    SutAction::Visit { urls }
                }
                Action::SetSetting { key, value } => SutAction::Set {
                    key: key.clone(),
                    value: value.clone(),
                },
                Action::RemoveInterest { keyword } => SutAction::RemoveInterest {
                    keyword: keyword.clone(),
                },
                Action::OptOut => SutAction::OptOut,
                Action::Idle => SutAction::Idle,
            })
        })
        .collect()
}

/// Apply treatments and collect measurements block by block, handing each
/// completed block's logs to `on_block`. Treatment phase is strict: every
/// apply in a block completes before the first collect of that block.
fn run_blocks(
    plan: &ExperimentPlan,
    sut: &mut dyn Sut,
    mut on_block: impl FnMut(Vec<AgentLog>),
) -> Result<(), HarnessError> {
    let diagnostics = experiment::validate_plan(plan);
    if !diagnostics.is_empty() {
        return Err(HarnessError::InvalidPlan(diagnostics));
    }
    let resolved: [Vec<SutAction>; 2] = [
        resolve_actions(&plan.treatments[0].actions)?,
        resolve_actions(&plan.treatments[1].actions)?,
    ];
    let assignment = randomizer::assign(plan.block_count, plan.block_size, plan.seed);
    let m = plan.block_size as u64;

    for block in 0..plan.block_count {
        // Treatment phase: every agent in the block finishes first.
        for agent in 0..plan.block_size {
            let global = block as u64 * m + agent as u64;
            let group = assignment.label(block as usize, agent as usize);
            let actions = match group {
                Group::Control => &resolved[0],
                Group::Experimental => &resolved[1],
            };
            for action in actions {
                sut.apply(global, action)?;
            }
        }
        // Measurement phase.
        let mut logs = Vec::with_capacity(plan.block_size as usize);
        for agent in 0..plan.block_size {
            let global = block as u64 * m + agent as u64;
            let ads = sut.collect(global, plan.reloads)?;
            let mut settings = sut.settings(global)?;
            settings.sort();
            settings.dedup();
            logs.push(AgentLog {
                experiment_id: plan.id.clone(),
                block_id: block,
                agent_id: agent,
                group: assignment.label(block as usize, agent as usize),
                ads,
                settings,
            });
        }
        on_block(logs);
    }
    Ok(())
}

/// Run the plan and return every agent log in memory, without touching the
/// filesystem. Fails on the first SUT error.
pub fn collect_logs(
    plan: &ExperimentPlan,
    sut: &mut dyn Sut,
) -> Result<Vec<AgentLog>, HarnessError> {
    let mut logs = Vec::with_capacity(plan.agents_total() as usize);
    run_blocks(plan, sut, |block| logs.extend(block))?;
    Ok(logs)
}

/// Execute the plan against a SUT and write the measurement directory:
/// `measurements.jsonl`, a normalized `plan.txt`, and a `run.json` status.
/// Blocks run one after another; on a SUT error the aborted block is
/// dropped, completed blocks are kept, and the run is marked incomplete.
pub fn run_experiment(
    plan: &ExperimentPlan,
    sut: &mut dyn Sut,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir)?;

    let mut lines = String::new();
    let mut blocks_completed = 0u32;
    let outcome = run_blocks(plan, sut, |block| {
        for log in block {
            lines.push_str(&serde_json::to_string(&log).expect("log serializes"));
            lines.push('\n');
        }
        blocks_completed += 1;
    });

    if let Err(HarnessError::InvalidPlan(diags)) = outcome {
        return Err(HarnessError::InvalidPlan(diags));
    }
    fs::write(out_dir.join(PLAN_FILE), plan.to_string())?;
    fs::write(out_dir.join(MEASUREMENTS_FILE), &lines)?;
    let status = RunStatus {
        experiment_id: plan.id.clone(),
        blocks_planned: plan.block_count,
        blocks_completed,
        complete: outcome.is_ok(),
    };
    fs::write(
        out_dir.join(STATUS_FILE),
        serde_json::to_string_pretty(&status).expect("status serializes") + "\n",
    )?;
    outcome
}

/// Vocabulary identity recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyInfo {
    pub kind: FeatureSetKind,
    pub size: usize,
    pub fingerprint: String,
}

/// Observed classifier statistic on the held-out blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedAccuracy {
    pub correct: u64,
    pub test_agents: u64,
    pub accuracy: f64,
}

/// One named permutation test outcome, with its per-experiment Bonferroni
/// correction when the preset applies one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub name: String,
    #[serde(flatten)]
    pub test: TestResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bonferroni_h: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_bonferroni: Option<f64>,
}

/// Everything needed to reproduce and report one analysis. Every p-value in
/// here traces back to a [`TestResult`] with its seed and sample count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub preset: PresetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureSetKind>,
    pub seed: u64,
    pub samples_requested: u64,
    pub partitions: u32,
    pub split: TrainTestSplit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<VocabularyInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed: Option<ObservedAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    /// Keyword-matching ads per group over all blocks (keyword mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keyword_counts: Option<GroupCounts>,
    pub results: Vec<ResultEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanations: Option<Explanation>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<RunManifest, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<RunManifest, HarnessError> {
        Ok(RunManifest::from_json(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnalyzeOptions {
    pub preset: PresetKind,
    pub features: FeatureSetKind,
    pub samples: u64,
    pub seed: u64,
    pub partitions: u32,
    /// Explanation entries per side.
    pub top: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> AnalyzeOptions {
        AnalyzeOptions {
            preset: PresetKind::Transparency,
            features: FeatureSetKind::UrlTitle,
            samples: stats::DEFAULT_SAMPLES,
            seed: 0,
            partitions: 1,
            top: 5,
        }
    }
}

/// Group logs by block id, checking per-block group balance.
fn blocks_of(logs: &[AgentLog]) -> Result<BTreeMap<u32, Vec<&AgentLog>>, HarnessError> {
    let mut blocks: BTreeMap<u32, Vec<&AgentLog>> = BTreeMap::new();
    for log in logs {
        blocks.entry(log.block_id).or_default().push(log);
    }
    for (&block, members) in &blocks {
        let experimental = members.iter().filter(|l| l.group == Group::Experimental).count();
        if experimental * 2 != members.len() {
            return Err(HarnessError::UnbalancedBlock { block });
        }
    }
    Ok(blocks)
}

fn check_run_status(log_dir: &Path) -> Result<(), HarnessError> {
    let path = log_dir.join(STATUS_FILE);
    if !path.exists() {
        return Ok(());
    }
    let status: RunStatus = serde_json::from_str(&fs::read_to_string(path)?)?;
    if !status.complete {
        return Err(HarnessError::IncompleteRun {
            completed: status.blocks_completed,
            planned: status.blocks_planned,
        });
    }
    Ok(())
}

/// Run the chosen permutation test: exact when the full pattern enumeration
/// is no larger than the requested sample budget, Monte Carlo otherwise.
fn run_test<T: Sync, S: Fn(&[T], &[Group]) -> f64 + Sync>(
    data: &BlockedObservations<T>,
    statistic: S,
    direction: Direction,
    samples: u64,
    seed: u64,
    partitions: u32,
) -> Result<TestResult, HarnessError> {
    let exact_size =
        randomizer::pattern_count(data.block_count() as u32, data.block_size() as u32);
    if let Some(count) = exact_size.filter(|&c| c <= samples) {
        let cap = count.max(1);
        Ok(stats::exact_permutation_test_with_cap(data, statistic, direction, cap)?)
    } else {
        Ok(sampled_permutation_test_partitioned(
            data, statistic, direction, samples, seed, partitions,
        ))
    }
}

/// Analyze a measurement directory under a property preset.
///
/// Classifier presets: split blocks into train/test (last 10% of blocks,
/// rounded up, test), build the vocabulary from training ads only, pick C
/// by block-respecting 10-fold cross validation, train, and run the
/// permutation test on the held-out accuracy statistic over test blocks
/// only. The ad-choice preset keeps every block for testing and runs the
/// pre-registered keyword-count statistic in both directions with a
/// per-experiment Bonferroni of 2.
pub fn analyze(log_dir: &Path, options: AnalyzeOptions) -> Result<RunManifest, HarnessError> {
    check_run_status(log_dir)?;
    let logs = experiment::load_logs(log_dir)?;

    // Ad-choice keywords are pre-registered in the plan that produced the
    // logs, never chosen after seeing the data.
    let keywords = if options.preset.statistic_mode() == StatisticMode::KeywordCount {
        let plan_path = log_dir.join(PLAN_FILE);
        if !plan_path.exists() {
            return Err(HarnessError::MissingKeywords);
        }
        Some(experiment::load_plan(&plan_path)?.keywords)
    } else {
        None
    };
    analyze_logs(&logs, keywords.as_deref(), options)
}

/// In-memory analysis entry point; `keywords` is required by keyword-count
/// presets and ignored otherwise.
pub fn analyze_logs(
    logs: &[AgentLog],
    keywords: Option<&[String]>,
    options: AnalyzeOptions,
) -> Result<RunManifest, HarnessError> {
    if logs.is_empty() {
        return Err(HarnessError::NoLogs);
    }
    let experiment_id = logs[0].experiment_id.clone();
    let blocks = blocks_of(logs)?;

    match options.preset.statistic_mode() {
        StatisticMode::ClassifierAccuracy => analyze_classifier(&experiment_id, &blocks, options),
        StatisticMode::KeywordCount => {
            let keywords = keywords.filter(|k| !k.is_empty()).ok_or(HarnessError::MissingKeywords)?;
            analyze_keywords(&experiment_id, keywords, logs, &blocks, options)
        }
    }
}

fn analyze_classifier(
    experiment_id: &str,
    blocks: &BTreeMap<u32, Vec<&AgentLog>>,
    options: AnalyzeOptions,
) -> Result<RunManifest, HarnessError> {
    let block_ids: Vec<u32> = blocks.keys().copied().collect();
    let split = TrainTestSplit::new(&block_ids);
    if split.train_blocks.is_empty() {
        return Err(HarnessError::TooFewBlocks { blocks: block_ids.len() });
    }

    // Vocabulary from training ads only; labels are not visible here.
    let train_logs: Vec<&AgentLog> = split
        .train_blocks
        .iter()
        .flat_map(|b| blocks[b].iter().copied())
        .collect();
    let vocab = features::build_vocabulary(
        options.features,
        train_logs.iter().map(|l| l.ads.as_slice()),
    );

    let train_vectors: Vec<_> = train_logs.iter().map(|l| features::vectorize(&vocab, &l.ads)).collect();
    let train_labels: Vec<Group> = train_logs.iter().map(|l| l.group).collect();
    let train_block_ids: Vec<u32> = train_logs.iter().map(|l| l.block_id).collect();

    let chosen_c = classifier::select_regularization(
        &train_vectors,
        &train_labels,
        &train_block_ids,
        vocab.len(),
        DEFAULT_C_GRID,
    )?;
    let model = classifier::train(
        &train_vectors,
        &train_labels,
        vocab.len(),
        chosen_c,
        &vocab.fingerprint(),
    )?;

    // Held-out test blocks in canonical order: experimental agents first
    // within each block.
    let mut test_logs: Vec<&AgentLog> = split
        .test_blocks
        .iter()
        .flat_map(|b| blocks[b].iter().copied())
        .collect();
    test_logs.sort_by_key(|l| {
        (l.block_id, if l.group == Group::Experimental { 0 } else { 1 }, l.agent_id)
    });

    let test_vectors: Vec<_> = test_logs.iter().map(|l| features::vectorize(&vocab, &l.ads)).collect();
    let test_labels: Vec<Group> = test_logs.iter().map(|l| l.group).collect();
    let correct = classifier::accuracy_statistic(&model, &test_vectors, &test_labels);
    let observed = ObservedAccuracy {
        correct,
        test_agents: test_labels.len() as u64,
        accuracy: correct as f64 / test_labels.len() as f64,
    };

    // Predictions are fixed; permuting labels re-scores the match count.
    let predictions: Vec<Group> =
        test_vectors.iter().map(|v| classifier::predict(&model, v)).collect();
    let mut per_block: Vec<Vec<(Group, Group)>> = Vec::new();
    let mut current_block = None;
    for (log, prediction) in test_logs.iter().zip(&predictions) {
        if current_block != Some(log.block_id) {
            current_block = Some(log.block_id);
            per_block.push(Vec::new());
        }
        per_block.last_mut().expect("pushed").push((*prediction, log.group));
    }
    let data = BlockedObservations::new(per_block)?;
    let statistic = |values: &[Group], labels: &[Group]| {
        values.iter().zip(labels).filter(|(v, l)| v == l).count() as f64
    };
    let direction = options.preset.directions()[0];
    let test = run_test(
        &data,
        statistic,
        direction,
        options.samples,
        options.seed,
        options.partitions,
    )?;

    // Explanations use the full dataset, after the statistic is in.
    let all_logs: Vec<&AgentLog> = blocks.values().flat_map(|v| v.iter().copied()).collect();
    let full_data: Vec<(features::FeatureVector, Group)> = all_logs
        .iter()
        .map(|l| (features::vectorize(&vocab, &l.ads), l.group))
        .collect();
    let explanations = classifier::explain(&model, &vocab, &full_data, options.top);

    Ok(RunManifest {
        experiment_id: experiment_id.to_string(),
        preset: options.preset,
        features: Some(options.features),
        seed: options.seed,
        samples_requested: options.samples,
        partitions: options.partitions,
        split,
        chosen_c: Some(chosen_c),
        vocabulary: Some(VocabularyInfo {
            kind: options.features,
            size: vocab.len(),
            fingerprint: vocab.fingerprint(),
        }),
        observed: Some(observed),
        keywords: None,
        keyword_counts: None,
        results: vec![ResultEntry {
            name: "classifier-accuracy".to_string(),
            test,
            bonferroni_h: None,
            p_bonferroni: None,
        }],
        explanations: Some(explanations),
    })
}

fn analyze_keywords(
    experiment_id: &str,
    keywords: &[String],
    logs: &[AgentLog],
    blocks: &BTreeMap<u32, Vec<&AgentLog>>,
    options: AnalyzeOptions,
) -> Result<RunManifest, HarnessError> {
    // All blocks are test data for this statistic. The statistic is the
    // keyword-ad count in the control (kept) group, so the greater-equal
    // tail is evidence of a decrease in the removal group.
    let per_block: Vec<Vec<(u64, Group)>> = blocks
        .values()
        .map(|members| {
            members
                .iter()
                .map(|log| {
                    let count = log
                        .ads
                        .iter()
                        .filter(|ad| stats::ad_matches_keywords(ad, keywords))
                        .count() as u64;
                    (count, log.group)
                })
                .collect()
        })
        .collect();
    let data = BlockedObservations::new(per_block)?;
    let statistic = |values: &[u64], labels: &[Group]| {
        values
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == Group::Control)
            .map(|(v, _)| *v as f64)
            .sum()
    };

    let keyword_counts = GroupCounts {
        control: stats::keyword_statistic(logs, keywords, Group::Control)?,
        experimental: stats::keyword_statistic(logs, keywords, Group::Experimental)?,
    };

    let hypotheses = options.preset.directions().len() as u32;
    let mut results = Vec::new();
    for &direction in options.preset.directions() {
        let test = run_test(
            &data,
            statistic,
            direction,
            options.samples,
            options.seed,
            options.partitions,
        )?;
        let name = match direction {
            Direction::GreaterEqual => "decrease",
            Direction::FlippedGreaterEqual => "increase",
        };
        results.push(ResultEntry {
            name: name.to_string(),
            p_bonferroni: Some(stats::bonferroni(test.p_upper, hypotheses)),
            bonferroni_h: Some(hypotheses),
            test,
        });
    }

    let block_ids: Vec<u32> = blocks.keys().copied().collect();
    Ok(RunManifest {
        experiment_id: experiment_id.to_string(),
        preset: options.preset,
        features: None,
        seed: options.seed,
        samples_requested: options.samples,
        partitions: options.partitions,
        split: TrainTestSplit {
            train_blocks: Vec::new(),
            test_blocks: block_ids,
        },
        chosen_c: None,
        vocabulary: None,
        observed: None,
        keywords: Some(keywords.to_vec()),
        keyword_counts: Some(keyword_counts),
        results,
        explanations: None,
    })
}

/// Optionally write the classifier dump produced during analysis. Kept as a
/// separate entry point so `analyze` itself stays read-only.
pub fn analyze_with_model_dump(
    log_dir: &Path,
    options: AnalyzeOptions,
    dump_path: &Path,
) -> Result<RunManifest, HarnessError> {
    // Re-deriving the model is cheap relative to the permutation test and
    // keeps the manifest path single-purpose.
    let manifest = analyze(log_dir, options)?;
    if options.preset.statistic_mode() == StatisticMode::ClassifierAccuracy {
        let logs = experiment::load_logs(log_dir)?;
        let blocks = blocks_of(&logs)?;
        let (model, vocab) = refit_model(&blocks, options, &manifest)?;
        fs::write(dump_path, classifier::dump_model(&model, &vocab))?;
    }
    Ok(manifest)
}

fn refit_model(
    blocks: &BTreeMap<u32, Vec<&AgentLog>>,
    options: AnalyzeOptions,
    manifest: &RunManifest,
) -> Result<(LinearModel, Vocabulary), HarnessError> {
    let train_logs: Vec<&AgentLog> = manifest
        .split
        .train_blocks
        .iter()
        .flat_map(|b| blocks[b].iter().copied())
        .collect();
    let vocab = features::build_vocabulary(
        options.features,
        train_logs.iter().map(|l| l.ads.as_slice()),
    );
    let vectors: Vec<_> = train_logs.iter().map(|l| features::vectorize(&vocab, &l.ads)).collect();
    let labels: Vec<Group> = train_logs.iter().map(|l| l.group).collect();
    let c = manifest.chosen_c.expect("classifier manifest");
    let model = classifier::train(&vectors, &labels, vocab.len(), c, &vocab.fingerprint())?;
    Ok((model, vocab))
}

/// Holm-Bonferroni summary across a family of experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyReport {
    pub alpha: f64,
    pub entries: Vec<stats::HolmEntry>,
}

/// Correct a family of manifests jointly. Each manifest contributes one
/// hypothesis per result entry (the flipped direction counts separately),
/// using the conservative `p_upper` as the unadjusted p-value.
pub fn summarize_family(manifests: &[RunManifest], alpha: f64) -> FamilyReport {
    let mut entries = Vec::new();
    for manifest in manifests {
        for result in &manifest.results {
            let name = if manifest.results.len() == 1 {
                manifest.experiment_id.clone()
            } else {
                format!("{} ({})", manifest.experiment_id, result.name)
            };
            entries.push((name, result.test.p_upper));
        }
    }
    let mut family = HypothesisFamily::new(entries);
    family.alpha = alpha;
    FamilyReport {
        alpha,
        entries: stats::holm_bonferroni(&family),
    }
}

/// Per-interest agent counts by group, plus whether the two groups' settings
/// are exactly identical (as multisets of per-agent interest sets).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingsDiff {
    pub per_interest: BTreeMap<String, GroupCounts>,
    pub identical: bool,
}

pub fn settings_diff(logs: &[AgentLog]) -> SettingsDiff {
    let mut per_interest: BTreeMap<String, GroupCounts> = BTreeMap::new();
    let mut per_group: BTreeMap<Group, Vec<Vec<String>>> = BTreeMap::new();
    per_group.insert(Group::Control, Vec::new());
    per_group.insert(Group::Experimental, Vec::new());

    for log in logs {
        let mut sorted = log.settings.clone();
        sorted.sort();
        per_group.get_mut(&log.group).expect("both groups present").push(sorted);
        for interest in &log.settings {
            let counts = per_interest.entry(interest.clone()).or_default();
            match log.group {
                Group::Control => counts.control += 1,
                Group::Experimental => counts.experimental += 1,
            }
        }
    }

    let mut control = per_group.remove(&Group::Control).expect("inserted");
    let mut experimental = per_group.remove(&Group::Experimental).expect("inserted");
    control.sort();
    experimental.sort();
    SettingsDiff {
        per_interest,
        identical: control == experimental,
    }
}

/// Format a p-value the way the result tables print them: up to 7 decimal
/// places, trailing zeros trimmed.
pub fn format_p(p: f64) -> String {
    let text = format!("{p:.7}");
    let text = text.trim_end_matches('0').trim_end_matches('.');
    if text.is_empty() {
        "0".to_string()
    } else {
        text.to_string()
    }
}

fn format_adjusted(entry: &stats::HolmEntry) -> String {
    match entry.adjusted {
        Some(adjusted) => {
            let star = if entry.rejected { "*" } else { "" };
            format!("{}{star}", format_p(adjusted))
        }
        None => "n/a".to_string(),
    }
}

/// Plain-text family table: one row per hypothesis, sorted by unadjusted
/// p-value, rejected entries starred, unreported adjustments shown as n/a.
/// Regenerates byte-identically from the same report.
pub fn render_family_report(report: &FamilyReport) -> String {
    let name_width = report
        .entries
        .iter()
        .map(|e| e.name.len())
        .chain(["Experiment".len()])
        .max()
        .unwrap_or(10);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_width$}  {:>14}  {:>14}",
        "Experiment", "Unadj. p-value", "Adj. p-value"
    );
    for entry in &report.entries {
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>14}  {:>14}",
            entry.name,
            format_p(entry.p_unadjusted),
            format_adjusted(entry),
        );
    }
    let _ = writeln!(out, "alpha = {}", report.alpha);
    out
}

/// Plain-text report for one manifest; byte-deterministic in the manifest.
pub fn render_manifest_report(manifest: &RunManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment: {}", manifest.experiment_id);
    let _ = writeln!(out, "preset: {}", manifest.preset);
    if let Some(features) = manifest.features {
        let _ = writeln!(out, "features: {features}");
    }
    let _ = writeln!(
        out,
        "blocks: {} train / {} test",
        manifest.split.train_blocks.len(),
        manifest.split.test_blocks.len()
    );
    if let Some(c) = manifest.chosen_c {
        let _ = writeln!(out, "chosen C: {c}");
    }
    if let Some(vocab) = &manifest.vocabulary {
        let _ = writeln!(out, "vocabulary: {} keys ({})", vocab.size, vocab.fingerprint);
    }
    if let Some(observed) = &manifest.observed {
        let _ = writeln!(
            out,
            "accuracy: {:.0}% ({}/{})",
            observed.accuracy * 100.0,
            observed.correct,
            observed.test_agents
        );
    }
    if let Some(keywords) = &manifest.keywords {
        let _ = writeln!(out, "keywords: {}", keywords.join(", "));
    }
    if let Some(counts) = &manifest.keyword_counts {
        let _ = writeln!(
            out,
            "keyword ads: kept(control) {} / removed(experimental) {}",
            counts.control, counts.experimental
        );
    }
    for result in &manifest.results {
        let mode = match result.test.mode {
            stats::TestMode::Exact => "exact",
            stats::TestMode::Sampled => "sampled",
        };
        let direction = match result.test.direction {
            Direction::GreaterEqual => "ge",
            Direction::FlippedGreaterEqual => "flipped",
        };
        let _ = writeln!(
            out,
            "result {}: statistic={} mode={mode} samples={} exceedances={} \
             p_point={} p_upper={} direction={direction}",
            result.name,
            format_p(result.test.statistic),
            result.test.samples,
            result.test.exceedances,
            format_p(result.test.p_point),
            format_p(result.test.p_upper),
        );
        if let Some(p) = result.p_bonferroni {
            let _ = writeln!(
                out,
                "  bonferroni (h={}): {}",
                result.bonferroni_h.unwrap_or(0),
                format_p(p)
            );
        }
    }
    if let Some(explanations) = &manifest.explanations {
        let mut side = |label: &str, entries: &[classifier::ExplainEntry]| {
            let _ = writeln!(out, "top {label} indicators:");
            for e in entries {
                let _ = writeln!(
                    out,
                    "  {:>8.3}  {}  agents C/E {}/{}  appearances C/E {}/{}",
                    e.coefficient,
                    e.key,
                    e.agents.control,
                    e.agents.experimental,
                    e.appearances.control,
                    e.appearances.experimental
                );
            }
        };
        side("experimental", &explanations.experimental);
        side("control", &explanations.control);
    }
    out
}

/// Plain-text settings diff: one row per interest, then the equality flag.
pub fn render_settings_diff(diff: &SettingsDiff) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<32}  {:>8}  {:>12}", "Interest", "control", "experimental");
    for (interest, counts) in &diff.per_interest {
        let _ = writeln!(
            out,
            "{:<32}  {:>8}  {:>12}",
            interest, counts.control, counts.experimental
        );
    }
    let _ = writeln!(out, "settings identical across groups: {}", diff.identical);
    out
}
