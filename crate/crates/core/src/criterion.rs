//! Block contributions, prune-set selection and the iterative schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::ProbeReport;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    /// `ACC(i) − ACC(i − 1)`.
    pub contribution: f64,
    /// Contribution is negative: the block's features are less discriminative than its input's.
    pub degraded: bool,
    pub prunable: bool,
}

/// Contribution of every block after the stem, keyed by block id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContributionTable {
    pub entries: BTreeMap<usize, Contribution>,
}

impl ContributionTable {
    /// Builds a table directly from `(id, contribution)` pairs, all prunable.
    pub fn from_contributions(values: impl IntoIterator<Item = (usize, f64)>) -> Self {
        Self {
            entries: values
                .into_iter()
                .map(|(id, c)| {
                    (
                        id,
                        Contribution {
                            contribution: c,
                            degraded: c < 0.0,
                            prunable: true,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn prunable(&self) -> impl Iterator<Item = (usize, &Contribution)> {
        self.entries.iter().filter(|(_, c)| c.prunable).map(|(id, c)| (*id, c))
    }

    pub fn degraded_ids(&self) -> BTreeSet<usize> {
        self.entries.iter().filter(|(_, c)| c.degraded).map(|(id, _)| *id).collect()
    }

    pub fn total(&self) -> f64 {
        self.entries.values().map(|c| c.contribution).sum()
    }
}

/// Turns probe accuracies into per-block contributions. Ids run
/// consecutively, so block `i`'s predecessor is `i − 1`.
pub fn contributions(report: &ProbeReport, prunable: &BTreeSet<usize>) -> Result<ContributionTable> {
    let last = match report.accuracies.keys().next_back() {
        Some(&id) => id,
        None => return Err(Error::MissingBlock(0)),
    };
    let mut entries = BTreeMap::new();
    let mut prev = report.accuracy(0)?;
    for id in 1..=last {
        let acc = report.accuracy(id)?;
        let c = acc - prev;
        entries.insert(
            id,
            Contribution {
                contribution: c,
                degraded: c < 0.0,
                prunable: prunable.contains(&id),
            },
        );
        prev = acc;
    }
    if let Some(&missing) = prunable.iter().find(|id| !entries.contains_key(id)) {
        return Err(Error::MissingBlock(missing));
    }
    Ok(ContributionTable { entries })
}

/// The `count` prunable blocks with the smallest contributions. Ties go to
/// the deeper block.
pub fn select_prune_set(table: &ContributionTable, count: usize) -> Result<BTreeSet<usize>> {
    let mut candidates: Vec<(usize, f64)> = table.prunable().map(|(id, c)| (id, c.contribution)).collect();
    if count > candidates.len() {
        return Err(Error::CountTooLarge {
            requested: count,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    Ok(candidates.into_iter().take(count).map(|(id, _)| id).collect())
}

/// Per-round ratio `β = 1 − (1 − G)^(1/R)`.
pub fn round_ratio(global_ratio: f64, rounds: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&global_ratio) {
        return Err(Error::RatioOutOfRange(global_ratio));
    }
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    Ok(1.0 - (1.0 - global_ratio).powf(1.0 / rounds as f64))
}

/// Total number of blocks the schedule removes: `round(G · n)`.
pub fn prune_target(n_prunable: usize, global_ratio: f64) -> usize {
    (global_ratio * n_prunable as f64).round() as usize
}

/// Blocks to remove in each round. Round `r` removes `round(β · remaining)`
/// (at least one while the target is unmet); the last round takes up the
/// remainder so the total equals `round(G · n)`.
pub fn round_counts(n_prunable: usize, global_ratio: f64, rounds: usize) -> Result<Vec<usize>> {
    let beta = round_ratio(global_ratio, rounds)?;
    let target = prune_target(n_prunable, global_ratio);
    if target > n_prunable {
        return Err(Error::InfeasibleTarget {
            target,
            available: n_prunable,
        });
    }
    let mut counts = Vec::with_capacity(rounds);
    let mut removed = 0;
    for r in 0..rounds {
        let left_to_remove = target - removed;
        let count = if r + 1 == rounds {
            left_to_remove
        } else {
            let remaining = n_prunable - removed;
            let mut c = (beta * remaining as f64).round() as usize;
            if c == 0 && left_to_remove > 0 {
                c = 1;
            }
            c.min(left_to_remove)
        };
        counts.push(count);
        removed += count;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub global_ratio: f64,
    pub rounds: usize,
    pub beta: f64,
    pub initial_prunable: usize,
    pub round_counts: Vec<usize>,
}

impl PruneSchedule {
    pub fn new(n_prunable: usize, global_ratio: f64, rounds: usize) -> Result<Self> {
        Ok(Self {
            global_ratio,
            rounds,
            beta: round_ratio(global_ratio, rounds)?,
            initial_prunable: n_prunable,
            round_counts: round_counts(n_prunable, global_ratio, rounds)?,
        })
    }

    /// Everything removed in a single round.
    pub fn one_shot(n_prunable: usize, global_ratio: f64) -> Result<Self> {
        Self::new(n_prunable, global_ratio, 1)
    }

    pub fn total(&self) -> usize {
        self.round_counts.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(accs: &[f64]) -> ProbeReport {
        ProbeReport {
            accuracies: accs.iter().copied().enumerate().collect(),
            eval_split_size: 100,
            seed: 0,
            reduction: Default::default(),
        }
    }

    #[test]
    fn contributions_are_successive_differences() {
        let r = report(&[0.35, 0.50, 0.62, 0.60, 0.70]);
        let t = contributions(&r, &(1..=4).collect()).unwrap();
        let got: Vec<f64> = t.entries.values().map(|c| c.contribution).collect();
        for (g, e) in got.iter().zip([0.15, 0.12, -0.02, 0.10]) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(t.degraded_ids(), BTreeSet::from([3]));
    }

    #[test]
    fn flat_and_increasing_accuracies_have_no_degraded_blocks() {
        let flat = contributions(&report(&[0.4; 5]), &(1..=4).collect()).unwrap();
        assert!(flat.entries.values().all(|c| c.contribution == 0.0 && !c.degraded));
        let up = contributions(&report(&[0.1, 0.2, 0.3, 0.4]), &(1..=3).collect()).unwrap();
        assert!(up.degraded_ids().is_empty());
    }

    #[test]
    fn missing_block_is_an_error() {
        let mut r = report(&[0.1, 0.2, 0.3]);
        r.accuracies.remove(&1);
        assert!(matches!(contributions(&r, &BTreeSet::from([2])), Err(Error::MissingBlock(1))));
    }

    #[test]
    fn selection_examples() {
        let t = ContributionTable::from_contributions([(1, 0.15), (2, 0.12), (3, -0.02), (4, 0.10)]);
        assert_eq!(select_prune_set(&t, 2).unwrap(), BTreeSet::from([3, 4]));
        assert!(select_prune_set(&t, 0).unwrap().is_empty());
        assert!(matches!(select_prune_set(&t, 5), Err(Error::CountTooLarge { .. })));
        let tie = ContributionTable::from_contributions([(1, 0.05), (2, 0.05), (3, 0.20)]);
        assert_eq!(select_prune_set(&tie, 1).unwrap(), BTreeSet::from([2]));
    }

    #[test]
    fn non_prunable_blocks_are_never_selected() {
        let r = report(&[0.1, 0.0, 0.5, 0.6]);
        let t = contributions(&r, &BTreeSet::from([2, 3])).unwrap();
        assert_eq!(select_prune_set(&t, 1).unwrap(), BTreeSet::from([3]));
    }

    #[test]
    fn exact_cube_ratios() {
        assert!((round_ratio(0.488, 3).unwrap() - 0.2).abs() < 1e-12);
        assert!((round_ratio(0.875, 3).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(round_ratio(0.0, 4).unwrap(), 0.0);
        assert!(round_ratio(1.0, 3).is_err());
        assert!(round_ratio(-0.1, 3).is_err());
    }

    #[test]
    fn eighty_one_blocks_down_to_nine() {
        assert_eq!(round_counts(81, 8.0 / 9.0, 3).unwrap(), vec![42, 20, 10]);
    }

    #[test]
    fn zero_ratio_prunes_nothing() {
        assert_eq!(round_counts(10, 0.0, 3).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn nine_blocks_four_ninths() {
        let counts = round_counts(9, 4.0 / 9.0, 3).unwrap();
        assert_eq!(counts, vec![2, 1, 1]);
    }

    #[test]
    fn half_of_twenty_five_units() {
        let s = PruneSchedule::new(25, 0.5, 3).unwrap();
        assert_eq!(s.total(), 13);
        assert_eq!(s.round_counts, vec![5, 4, 4]);
        assert_eq!(PruneSchedule::one_shot(25, 0.5).unwrap().round_counts, vec![13]);
    }
}
