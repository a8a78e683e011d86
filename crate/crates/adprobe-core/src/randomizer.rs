//! Block-respecting random assignment of treatments to agents, and
//! block-respecting label permutations for the permutation test.
//!
//! Labels never move across blocks, and every block stays balanced at
//! m/2 : m/2. Exhaustive enumeration works over the C(m, m/2)^k distinct
//! label patterns rather than the (m!)^k raw permutations: each pattern
//! stands for (m/2)!·(m/2)! per-block permutations, a constant multiplicity
//! that cancels in the permutation-test ratio, so the induced p-values are
//! identical for any statistic of (observation, label) pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::experiment::Group;
use crate::rng::{self, streams};

/// Hard ceiling on exhaustive enumeration; above this, sample instead.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Per-block balanced label vectors: `labels[b][j]` is the group of agent j
/// in block b.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    labels: Vec<Vec<Group>>,
}

impl Assignment {
    /// Build from per-block label vectors, checking balance.
    pub fn new(labels: Vec<Vec<Group>>) -> Result<Assignment, RandomizerError> {
        for (b, block) in labels.iter().enumerate() {
            let m = block.len();
            let experimental = block.iter().filter(|&&g| g == Group::Experimental).count();
            if m == 0 || m % 2 != 0 || experimental * 2 != m {
                return Err(RandomizerError::Unbalanced { block: b });
            }
        }
        Ok(Assignment { labels })
    }

    pub fn block_count(&self) -> usize {
        self.labels.len()
    }

    pub fn block_size(&self) -> usize {
        self.labels.first().map(|b| b.len()).unwrap_or(0)
    }

    pub fn blocks(&self) -> &[Vec<Group>] {
        &self.labels
    }

    pub fn label(&self, block: usize, agent: usize) -> Group {
        self.labels[block][agent]
    }

    /// All labels flattened in (block, agent) order.
    pub fn flattened(&self) -> Vec<Group> {
        self.labels.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RandomizerError {
    #[error("block {block} is not balanced between the two groups")]
    Unbalanced { block: usize },
    #[error(
        "enumeration of {count} label patterns exceeds cap {cap}; \
         use the sampled permutation test instead"
    )]
    CapExceeded { count: u64, cap: u64 },
}

/// Uniformly random balanced assignment for `block_count` blocks of
/// `block_size` agents, deterministic given the seed.
pub fn assign(block_count: u32, block_size: u32, seed: u64) -> Assignment {
    assert!(block_size > 0 && block_size.is_multiple_of(2), "block size must be positive and even");
    let mut rng = rng::stream(seed, streams::ASSIGNMENT);
    let half = (block_size / 2) as usize;
    let labels = (0..block_count)
        .map(|_| {
            let mut block: Vec<Group> = std::iter::repeat_n(Group::Experimental, half)
                .chain(std::iter::repeat_n(Group::Control, half))
                .collect();
            block.shuffle(&mut rng);
            block
        })
        .collect();
    Assignment { labels }
}

/// Re-permute labels independently and uniformly within each block,
/// preserving the block structure and per-block balance.
pub fn shuffle_labels<R: Rng>(assignment: &Assignment, rng: &mut R) -> Assignment {
    let labels = assignment
        .labels
        .iter()
        .map(|block| {
            let mut block = block.clone();
            block.shuffle(rng);
            block
        })
        .collect();
    Assignment { labels }
}

/// In-place variant used by the sampling hot loop: shuffles each block slice
/// of a flattened label buffer.
pub(crate) fn shuffle_flat_labels<R: Rng>(
    labels: &mut [Group],
    block_bounds: &[(usize, usize)],
    rng: &mut R,
) {
    for &(start, end) in block_bounds {
        labels[start..end].shuffle(rng);
    }
}

/// Number of distinct block-respecting balanced label patterns,
/// C(m, m/2)^k, or `None` on overflow.
pub fn pattern_count(block_count: u32, block_size: u32) -> Option<u64> {
    let per_block = binomial(block_size as u64, (block_size / 2) as u64)?;
    let mut total: u64 = 1;
    for _ in 0..block_count {
        total = total.checked_mul(per_block)?;
    }
    Some(total)
}

fn binomial(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k);
    let mut result: u64 = 1;
    for i in 0..k {
        result = result.checked_mul(n - i)?;
        result /= i + 1;
    }
    Some(result)
}

/// Iterate every distinct balanced label pattern exactly once, with the
/// default enumeration cap.
pub fn enumerate_assignments(
    block_count: u32,
    block_size: u32,
) -> Result<AssignmentIter, RandomizerError> {
    enumerate_assignments_with_cap(block_count, block_size, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_assignments_with_cap(
    block_count: u32,
    block_size: u32,
    cap: u64,
) -> Result<AssignmentIter, RandomizerError> {
    assert!(block_size > 0 && block_size.is_multiple_of(2), "block size must be positive and even");
    let count = pattern_count(block_count, block_size)
        .filter(|&c| c <= cap)
        .ok_or(RandomizerError::CapExceeded {
            count: pattern_count(block_count, block_size).unwrap_or(u64::MAX),
            cap,
        })?;
    Ok(AssignmentIter::new(block_count as usize, block_size as usize, count))
}

/// Odometer over per-block combinations: each block tracks which m/2
/// positions carry the experimental label.
pub struct AssignmentIter {
    block_size: usize,
    /// Per block, the sorted positions currently labeled experimental.
    combos: Vec<Vec<usize>>,
    remaining: u64,
    started: bool,
}

impl AssignmentIter {
    fn new(block_count: usize, block_size: usize, count: u64) -> AssignmentIter {
        let half = block_size / 2;
        AssignmentIter {
            block_size,
            combos: vec![(0..half).collect(); block_count],
            remaining: count,
            started: false,
        }
    }

    /// Total patterns this iterator will yield.
    pub fn len(&self) -> u64 {
        self.remaining
    }

    pub fn is_empty(&self) -> bool {
        self.remaining == 0
    }

    fn current(&self) -> Assignment {
        let labels = self
            .combos
            .iter()
            .map(|combo| {
                let mut block = vec![Group::Control; self.block_size];
                for &pos in combo {
                    block[pos] = Group::Experimental;
                }
                block
            })
            .collect();
        Assignment { labels }
    }

    /// Advance the last block's combination; on wrap, carry into earlier
    /// blocks. Returns false when every pattern has been visited.
    fn advance(&mut self) -> bool {
        for combo in self.combos.iter_mut().rev() {
            if next_combination(combo, self.block_size) {
                return true;
            }
            let half = self.block_size / 2;
            *combo = (0..half).collect();
        }
        false
    }
}

/// Step `combo` (sorted k-subset of 0..n) to the next combination in
/// lexicographic order. Returns false after the last one.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - (k - i) {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

impl Iterator for AssignmentIter {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        if self.remaining == 0 {
            return None;
        }
        if self.started && !self.advance() {
            self.remaining = 0;
            return None;
        }
        self.started = true;
        self.remaining -= 1;
        Some(self.current())
    }
}

/// Visit every balanced pattern without allocating per pattern: `visit`
/// receives the flattened (block-major) label buffer. Used by the exact
/// permutation test.
pub(crate) fn for_each_balanced_pattern<F: FnMut(&[Group])>(
    block_count: usize,
    block_size: usize,
    mut visit: F,
) {
    let half = block_size / 2;
    let mut combos: Vec<Vec<usize>> = vec![(0..half).collect(); block_count];
    let mut labels = vec![Group::Control; block_count * block_size];

    let write_block = |labels: &mut [Group], b: usize, combo: &[usize]| {
        let base = b * block_size;
        labels[base..base + block_size].fill(Group::Control);
        for &pos in combo {
            labels[base + pos] = Group::Experimental;
        }
    };

    for (b, combo) in combos.iter().enumerate() {
        write_block(&mut labels, b, combo);
    }

    loop {
        visit(&labels);
        let mut carried = false;
        for b in (0..block_count).rev() {
            if next_combination(&mut combos[b], block_size) {
                write_block(&mut labels, b, &combos[b]);
                carried = true;
                break;
            }
            combos[b] = (0..half).collect();
            write_block(&mut labels, b, &combos[b]);
        }
        if !carried {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    #[test]
    fn two_agent_block_yields_one_of_two_options() {
        for seed in 0..20 {
            let a = assign(1, 2, seed);
            let flat = a.flattened();
            assert!(
                flat == vec![Group::Experimental, Group::Control]
                    || flat == vec![Group::Control, Group::Experimental]
            );
        }
    }

    #[test]
    fn assign_is_deterministic() {
        assert_eq!(assign(3, 10, 42), assign(3, 10, 42));
    }

    #[test]
    fn assign_distribution_concentrates_binomially() {
        // m=10, k=1, 10,000 seeds: each agent experimental in 5000 +/- 300.
        let mut experimental_counts = [0u32; 10];
        for seed in 0..10_000u64 {
            let a = assign(1, 10, seed);
            for (i, &g) in a.blocks()[0].iter().enumerate() {
                if g == Group::Experimental {
                    experimental_counts[i] += 1;
                }
            }
        }
        for (i, &c) in experimental_counts.iter().enumerate() {
            assert!(
                (4700..=5300).contains(&c),
                "agent {i} drew experimental {c} times out of 10000"
            );
        }
    }

    #[test]
    fn shuffle_preserves_balance_and_blocks() {
        let a = assign(4, 6, 9);
        let mut rng = crate::rng::stream(1, 0);
        for _ in 0..50 {
            let s = shuffle_labels(&a, &mut rng);
            assert_eq!(s.block_count(), 4);
            for block in s.blocks() {
                let e = block.iter().filter(|&&g| g == Group::Experimental).count();
                assert_eq!(e, 3);
            }
        }
    }

    #[test]
    fn shuffle_k1_m2_hits_both_outcomes_evenly() {
        let a = Assignment::new(vec![vec![Group::Experimental, Group::Control]]).unwrap();
        let mut rng = crate::rng::stream(5, 0);
        let mut identity = 0;
        let n = 10_000;
        for _ in 0..n {
            let s = shuffle_labels(&a, &mut rng);
            if s == a {
                identity += 1;
            }
        }
        // Binomial(10^4, 1/2): 5000 +/- 300 is ~6 sigma.
        assert!((4700..=5300).contains(&identity), "identity count {identity}");
    }

    #[test]
    fn shuffle_k2_m2_reaches_all_four_joint_outcomes() {
        let a = Assignment::new(vec![
            vec![Group::Experimental, Group::Control],
            vec![Group::Experimental, Group::Control],
        ])
        .unwrap();
        let mut rng = crate::rng::stream(11, 0);
        let mut seen = BTreeSet::new();
        for _ in 0..200 {
            seen.insert(shuffle_labels(&a, &mut rng).flattened());
        }
        assert_eq!(seen.len(), 4, "all 4 joint outcomes should appear");
    }

    #[test]
    fn enumerate_k1_m2_yields_two() {
        let all: Vec<_> = enumerate_assignments(1, 2).unwrap().collect();
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn enumerate_k2_m4_yields_thirty_six_distinct() {
        let iter = enumerate_assignments(2, 4).unwrap();
        assert_eq!(iter.len(), 36);
        let all: BTreeSet<Vec<Group>> = iter.map(|a| a.flattened()).collect();
        assert_eq!(all.len(), 36, "patterns must be distinct");
    }

    #[test]
    fn enumerate_cap_exceeded_for_large_instances() {
        match enumerate_assignments(100, 10) {
            Err(RandomizerError::CapExceeded { .. }) => {}
            other => panic!("expected cap error, got {:?}", other.map(|i| i.len())),
        }
    }

    #[test]
    fn visitor_matches_iterator() {
        let from_iter: Vec<Vec<Group>> = enumerate_assignments(2, 4)
            .unwrap()
            .map(|a| a.flattened())
            .collect();
        let mut from_visitor = Vec::new();
        for_each_balanced_pattern(2, 4, |labels| from_visitor.push(labels.to_vec()));
        assert_eq!(from_iter, from_visitor);
    }

    #[test]
    fn pattern_counts() {
        assert_eq!(pattern_count(1, 2), Some(2));
        assert_eq!(pattern_count(2, 4), Some(36));
        assert_eq!(pattern_count(1, 10), Some(252));
        assert_eq!(pattern_count(3, 10), Some(252u64.pow(3)));
    }

    #[test]
    fn unbalanced_assignment_is_rejected() {
        let err = Assignment::new(vec![vec![Group::Control, Group::Control]]).unwrap_err();
        assert_eq!(err, RandomizerError::Unbalanced { block: 0 });
    }

    #[test]
    fn shuffle_distribution_is_uniform_over_patterns() {
        // k=1, m=4: 6 patterns; chi-square over 10^5 draws at alpha=0.001
        // (df=5, critical value 20.515).
        let a = assign(1, 4, 3);
        let mut rng = crate::rng::stream(17, 0);
        let mut counts: std::collections::BTreeMap<Vec<Group>, u64> = BTreeMap::new();
        let draws = 100_000u64;
        for _ in 0..draws {
            *counts.entry(shuffle_labels(&a, &mut rng).flattened()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let expected = draws as f64 / 6.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 20.515, "chi-square {chi2} too large for uniformity");
    }
}
