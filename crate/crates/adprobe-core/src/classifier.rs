//! L2-regularized logistic regression trained from scratch, with the
//! regularization strength chosen by block-respecting 10-fold cross
//! validation. Supplies the held-out accuracy test statistic and the
//! coefficient-based explanations.
//!
//! The trainer is deliberately plain: full-batch gradient descent with a
//! backtracking line search, which keeps the objective monotone and the
//! result deterministic. Classifier inputs are unlabeled feature vectors
//! plus a separate label vector; labels never ride along with the features.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::Group;
use crate::features::{FeatureKey, FeatureVector, Vocabulary};

/// Default regularization grid searched by cross validation.
pub const DEFAULT_C_GRID: &[f64] = &[0.001, 0.01, 0.1, 1.0, 10.0, 100.0];

const MAX_ITERATIONS: usize = 1000;
const RELATIVE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClassifierError {
    #[error("training data contains a single class; need both groups")]
    SingleClass,
    #[error("need at least {needed} training examples per class, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("need at least 2 blocks for cross validation, got {0}")]
    TooFewBlocks(usize),
    #[error("vector/label length mismatch: {vectors} vectors, {labels} labels")]
    LengthMismatch { vectors: usize, labels: usize },
    #[error("regularization grid is empty")]
    EmptyGrid,
}

/// Trained weights and bias, tied to the vocabulary they were trained under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Inverse regularization strength; the penalty is |w|^2 / (2C).
    pub c: f64,
    /// Fingerprint of the vocabulary the weights are indexed by.
    pub vocab_fingerprint: String,
}

impl LinearModel {
    pub fn score(&self, v: &FeatureVector) -> f64 {
        let mut s = self.bias;
        for (id, count) in v.iter() {
            s += self.weights[id as usize] * count as f64;
        }
        s
    }
}

/// Predict the group of one vector: experimental iff the score is strictly
/// positive; an exact zero goes to control.
pub fn predict(model: &LinearModel, v: &FeatureVector) -> Group {
    if model.score(v) > 0.0 {
        Group::Experimental
    } else {
        Group::Control
    }
}

fn signed(label: Group) -> f64 {
    match label {
        Group::Experimental => 1.0,
        Group::Control => -1.0,
    }
}

/// ln(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t
    } else if t < -30.0 {
        t.exp()
    } else {
        t.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable on both tails.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn score_one(weights: &[f64], bias: f64, v: &FeatureVector) -> f64 {
    let mut s = bias;
    for (id, count) in v.iter() {
        s += weights[id as usize] * count as f64;
    }
    s
}

/// Average logistic loss plus the L2 penalty |w|^2 / (2C); the bias is
/// unpenalized.
pub fn regularized_loss<V: Borrow<FeatureVector>>(
    weights: &[f64],
    bias: f64,
    vectors: &[V],
    labels: &[Group],
    c: f64,
) -> f64 {
    let n = vectors.len() as f64;
    let mut loss = 0.0;
    for (v, &label) in vectors.iter().zip(labels) {
        let s = score_one(weights, bias, v.borrow());
        loss += softplus(-signed(label) * s);
    }
    let penalty: f64 = weights.iter().map(|w| w * w).sum::<f64>() / (2.0 * c);
    loss / n + penalty
}

/// Analytic gradient of [`regularized_loss`] in (weights, bias).
pub fn regularized_loss_gradient<V: Borrow<FeatureVector>>(
    weights: &[f64],
    bias: f64,
    vectors: &[V],
    labels: &[Group],
    c: f64,
) -> (Vec<f64>, f64) {
    let n = vectors.len() as f64;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (v, &label) in vectors.iter().zip(labels) {
        let z = signed(label);
        let s = score_one(weights, bias, v.borrow());
        let residual = -z * sigmoid(-z * s) / n;
        grad_b += residual;
        for (id, count) in v.borrow().iter() {
            grad_w[id as usize] += residual * count as f64;
        }
    }
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g += w / c;
    }
    (grad_w, grad_b)
}

fn check_train_inputs<V>(vectors: &[V], labels: &[Group]) -> Result<(), ClassifierError> {
    if vectors.len() != labels.len() {
        return Err(ClassifierError::LengthMismatch {
            vectors: vectors.len(),
            labels: labels.len(),
        });
    }
    let experimental = labels.iter().filter(|&&l| l == Group::Experimental).count();
    if experimental == 0 || experimental == labels.len() || labels.is_empty() {
        return Err(ClassifierError::SingleClass);
    }
    Ok(())
}

/// Train on feature vectors sharing one vocabulary of `dimension` keys.
pub fn train<V: Borrow<FeatureVector>>(
    vectors: &[V],
    labels: &[Group],
    dimension: usize,
    c: f64,
    vocab_fingerprint: &str,
) -> Result<LinearModel, ClassifierError> {
    train_with_trace(vectors, labels, dimension, c, vocab_fingerprint).map(|(m, _)| m)
}

/// Like [`train`], additionally returning the objective value after every
/// accepted step (index 0 is the initial objective). The trace is
/// non-increasing by construction of the line search.
pub fn train_with_trace<V: Borrow<FeatureVector>>(
    vectors: &[V],
    labels: &[Group],
    dimension: usize,
    c: f64,
    vocab_fingerprint: &str,
) -> Result<(LinearModel, Vec<f64>), ClassifierError> {
    check_train_inputs(vectors, labels)?;
    assert!(c > 0.0 && c.is_finite(), "regularization C must be positive");

    let mut weights = vec![0.0; dimension];
    let mut bias = 0.0;
    let mut objective = regularized_loss(&weights, bias, vectors, labels, c);
    let mut trace = vec![objective];
    let mut step = 1.0_f64;

    for _ in 0..MAX_ITERATIONS {
        let (grad_w, grad_b) = regularized_loss_gradient(&weights, bias, vectors, labels, c);
        let grad_norm2: f64 = grad_w.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b;
        if grad_norm2 == 0.0 {
            break;
        }

        // Backtracking line search with the Armijo condition.
        step = (step * 2.0).min(1e6);
        let mut accepted = None;
        for _ in 0..80 {
            let trial_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - step * g)
                .collect();
            let trial_b = bias - step * grad_b;
            let trial_objective = regularized_loss(&trial_w, trial_b, vectors, labels, c);
            if trial_objective <= objective - 1e-4 * step * grad_norm2 {
                accepted = Some((trial_w, trial_b, trial_objective));
                break;
            }
            step *= 0.5;
        }
        let Some((new_w, new_b, new_objective)) = accepted else {
            break; // no admissible step: at numerical convergence
        };

        let relative_decrease = (objective - new_objective) / objective.max(f64::MIN_POSITIVE);
        weights = new_w;
        bias = new_b;
        objective = new_objective;
        trace.push(objective);
        if relative_decrease < RELATIVE_TOLERANCE {
            break;
        }
    }

    Ok((
        LinearModel {
            weights,
            bias,
            c,
            vocab_fingerprint: vocab_fingerprint.to_string(),
        },
        trace,
    ))
}

/// The blocks used for training and the held-out test blocks: the last 10%
/// of blocks by block id, rounded up, at least one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTestSplit {
    pub train_blocks: Vec<u32>,
    pub test_blocks: Vec<u32>,
}

impl TrainTestSplit {
    /// Split ordered distinct block ids.
    pub fn new(block_ids: &[u32]) -> TrainTestSplit {
        let k = block_ids.len();
        let test = k.div_ceil(10).max(1).min(k);
        TrainTestSplit {
            train_blocks: block_ids[..k - test].to_vec(),
            test_blocks: block_ids[k - test..].to_vec(),
        }
    }
}

/// Mean validation accuracy per grid value under up-to-10-fold cross
/// validation. Folds are contiguous runs of whole blocks (`block_ids`
/// gives each example's block, in block order), so agents from one block
/// never straddle a fold boundary. Returns (C, mean accuracy) pairs with C
/// ascending.
pub fn cross_validation_table(
    vectors: &[FeatureVector],
    labels: &[Group],
    block_ids: &[u32],
    dimension: usize,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>, ClassifierError> {
    if grid.is_empty() {
        return Err(ClassifierError::EmptyGrid);
    }
    check_train_inputs(vectors, labels)?;
    for class in [Group::Control, Group::Experimental] {
        let got = labels.iter().filter(|&&l| l == class).count();
        if got < 10 {
            return Err(ClassifierError::TooFewExamples { needed: 10, got });
        }
    }

    // Example index ranges of each block, in input order.
    let mut block_ranges: Vec<(usize, usize)> = Vec::new();
    for (i, &b) in block_ids.iter().enumerate() {
        match block_ranges.last_mut() {
            Some(range) if block_ids[range.0] == b => range.1 = i + 1,
            _ => block_ranges.push((i, i + 1)),
        }
    }
    let n_blocks = block_ranges.len();
    if n_blocks < 2 {
        return Err(ClassifierError::TooFewBlocks(n_blocks));
    }
    let n_folds = n_blocks.min(10);

    // Fold f covers the contiguous block range [f*n_blocks/n_folds, ...).
    let fold_spans: Vec<(usize, usize)> = (0..n_folds)
        .map(|f| {
            let lo = block_ranges[f * n_blocks / n_folds].0;
            let hi = block_ranges[(f + 1) * n_blocks / n_folds - 1].1;
            (lo, hi)
        })
        .collect();

    let mut sorted_grid: Vec<f64> = grid.to_vec();
    sorted_grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));

    let mut table = Vec::with_capacity(sorted_grid.len());
    for &c in &sorted_grid {
        let mut total_accuracy = 0.0;
        for &(lo, hi) in &fold_spans {
            let mut train_vectors = Vec::with_capacity(vectors.len() - (hi - lo));
            let mut train_labels = Vec::with_capacity(vectors.len() - (hi - lo));
            for i in (0..lo).chain(hi..vectors.len()) {
                train_vectors.push(&vectors[i]);
                train_labels.push(labels[i]);
            }
            let model = train(&train_vectors, &train_labels, dimension, c, "cv")?;
            let correct = (lo..hi)
                .filter(|&i| predict(&model, &vectors[i]) == labels[i])
                .count();
            total_accuracy += correct as f64 / (hi - lo) as f64;
        }
        table.push((c, total_accuracy / n_folds as f64));
    }
    Ok(table)
}

/// Pick the grid value maximizing mean cross-validated accuracy, ties
/// broken toward the smaller C (the stronger regularization).
pub fn select_regularization(
    vectors: &[FeatureVector],
    labels: &[Group],
    block_ids: &[u32],
    dimension: usize,
    grid: &[f64],
) -> Result<f64, ClassifierError> {
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let table = cross_validation_table(vectors, labels, block_ids, dimension, grid)?;
    let mut best: Option<(f64, f64)> = None; // (mean accuracy, C)
    for &(c, mean) in &table {
        // Strictly-better replacement over an ascending grid keeps ties on
        // the smaller C.
        if best.map(|(acc, _)| mean > acc).unwrap_or(true) {
            best = Some((mean, c));
        }
    }
    Ok(best.expect("nonempty grid").1)
}

/// Number of correct predictions on the test set; the accuracy test
/// statistic. Callers order the test set canonically (experimental agents
/// before control within each block) for reporting.
pub fn accuracy_statistic<V: Borrow<FeatureVector>>(
    model: &LinearModel,
    vectors: &[V],
    labels: &[Group],
) -> u64 {
    vectors
        .iter()
        .map(|v| v.borrow())
        .zip(labels)
        .filter(|&(v, &label)| predict(model, v) == label)
        .count() as u64
}

/// Per-group occurrence statistics for one explained feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub control: u64,
    pub experimental: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainEntry {
    pub key: String,
    pub coefficient: f64,
    /// Agents in each group with at least one occurrence.
    pub agents: GroupCounts,
    /// Total occurrences across each group's ads.
    pub appearances: GroupCounts,
}

/// The most extreme coefficients on each side, with occurrence statistics
/// computed over the full dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    /// Most positive coefficients: indicators of the experimental group.
    pub experimental: Vec<ExplainEntry>,
    /// Most negative coefficients: indicators of the control group.
    pub control: Vec<ExplainEntry>,
}

/// Rank features by coefficient and attach per-group agent counts and
/// appearance totals from `data` (the full dataset, training and test).
pub fn explain(
    model: &LinearModel,
    vocab: &Vocabulary,
    data: &[(FeatureVector, Group)],
    top: usize,
) -> Explanation {
    let d = model.weights.len();
    let top = top.min(d);

    let mut by_coefficient: Vec<u32> = (0..d as u32).collect();
    by_coefficient.sort_by(|&a, &b| {
        model.weights[b as usize]
            .partial_cmp(&model.weights[a as usize])
            .expect("finite weights")
            .then(a.cmp(&b))
    });

    let entry = |id: u32| -> ExplainEntry {
        let mut agents = GroupCounts::default();
        let mut appearances = GroupCounts::default();
        for (v, group) in data {
            let count = v.get(id) as u64;
            if count == 0 {
                continue;
            }
            match group {
                Group::Control => {
                    agents.control += 1;
                    appearances.control += count;
                }
                Group::Experimental => {
                    agents.experimental += 1;
                    appearances.experimental += count;
                }
            }
        }
        ExplainEntry {
            key: key_display(vocab.key(id)),
            coefficient: model.weights[id as usize],
            agents,
            appearances,
        }
    };

    Explanation {
        experimental: by_coefficient[..top].iter().map(|&id| entry(id)).collect(),
        control: by_coefficient[d - top..]
            .iter()
            .rev()
            .map(|&id| entry(id))
            .collect(),
    }
}

fn key_display(key: &FeatureKey) -> String {
    key.to_string()
}

/// The explanation artifact: feature keys and coefficients sorted ascending
/// by coefficient, preceded by C and the bias.
pub fn dump_model(model: &LinearModel, vocab: &Vocabulary) -> String {
    let mut lines = String::new();
    lines.push_str(&format!("C = {}\n", model.c));
    lines.push_str(&format!("bias = {}\n", model.bias));
    let mut order: Vec<u32> = (0..model.weights.len() as u32).collect();
    order.sort_by(|&a, &b| {
        model.weights[a as usize]
            .partial_cmp(&model.weights[b as usize])
            .expect("finite weights")
            .then(a.cmp(&b))
    });
    for id in order {
        lines.push_str(&format!(
            "{}\t{}\n",
            model.weights[id as usize],
            vocab.key(id)
        ));
    }
    lines
}
