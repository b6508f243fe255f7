//! Block redundancy and the prune/distill partition of the blocks.
//!
//! Block `i` maps hidden level `i` to level `i + 1`. Its redundancy `r_i` is
//! the cosine between those levels, averaged over every calibration token.
//! The pair metric for `(i, i + 1)` is
//! `½ (cos(level i, level i+2) + max(r_i, r_{i+1}))`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine, norm};
use crate::model::HiddenTrace;

pub const DEFAULT_D_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyProfile {
    pub redundancy: Vec<f64>,
    pub pair_metric: Vec<f64>,
}

impl RedundancyProfile {
    pub fn n_blocks(&self) -> usize {
        self.redundancy.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillPair {
    pub first: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPartition {
    pub p_initial: BTreeSet<usize>,
    pub distillation: Vec<DistillPair>,
    pub p_final: BTreeSet<usize>,
    pub d_threshold: f64,
}

impl SetPartition {
    pub fn distill_firsts(&self) -> Vec<usize> {
        self.distillation.iter().map(|p| p.first).collect()
    }

    /// Checks disjointness, the partition property and `p_initial ⊆ p_final`.
    pub fn check(&self, n_blocks: usize) -> Result<()> {
        let mut owner = vec![0u8; n_blocks];
        for p in &self.distillation {
            for b in [p.first, p.first + 1] {
                if b >= n_blocks {
                    return Err(Error::Consistency(format!("pair block {b} out of range")));
                }
                owner[b] += 1;
            }
        }
        for &b in &self.p_final {
            if b >= n_blocks {
                return Err(Error::Consistency(format!(
                    "pruning block {b} out of range"
                )));
            }
            owner[b] += 1;
        }
        if let Some(b) = owner.iter().position(|&c| c != 1) {
            return Err(Error::Consistency(format!(
                "block {b} is covered {} times by the partition",
                owner[b]
            )));
        }
        if !self.p_initial.is_subset(&self.p_final) {
            return Err(Error::Consistency(
                "p_initial is not contained in p_final".into(),
            ));
        }
        Ok(())
    }
}

fn level_cosine(trace: &HiddenTrace, a: usize, b: usize) -> Result<f64> {
    if trace.rows == 0 {
        return Err(Error::Argument("hidden trace has no rows".into()));
    }
    let mut sum = 0.0;
    for row in 0..trace.rows {
        sum += cosine(trace.row(a, row), trace.row(b, row)).ok_or_else(|| {
            Error::Degenerate(format!(
                "zero-norm hidden vector at level {a} or {b}, row {row}"
            ))
        })?;
    }
    Ok(sum / trace.rows as f64)
}

/// `r_i` for every block in the trace.
pub fn compute_redundancy(trace: &HiddenTrace) -> Result<Vec<f64>> {
    if trace.levels.len() < 2 {
        return Err(Error::Argument("trace needs at least one block".into()));
    }
    (0..trace.levels.len() - 1)
        .map(|i| level_cosine(trace, i, i + 1))
        .collect()
}

/// Combines the three averaged cosines of a consecutive pair.
pub fn pair_metric_from_cosines(skip: f64, first: f64, second: f64) -> f64 {
    0.5 * (skip + first.max(second))
}

/// `d_i` for every consecutive block pair.
pub fn compute_pair_metric(trace: &HiddenTrace) -> Result<Vec<f64>> {
    let n_blocks = trace.levels.len().saturating_sub(1);
    if n_blocks < 2 {
        return Err(Error::Argument(
            "pair metric needs at least two blocks".into(),
        ));
    }
    let r = compute_redundancy(trace)?;
    (0..n_blocks - 1)
        .map(|i| {
            Ok(pair_metric_from_cosines(
                level_cosine(trace, i, i + 2)?,
                r[i],
                r[i + 1],
            ))
        })
        .collect()
}

/// Mean L2 norm of each hidden level.
pub fn norm_profile(trace: &HiddenTrace) -> Vec<f64> {
    (0..trace.levels.len())
        .map(|l| {
            (0..trace.rows)
                .map(|row| norm(trace.row(l, row)))
                .sum::<f64>()
                / trace.rows.max(1) as f64
        })
        .collect()
}

/// Indices sorted by descending value, lower index first on ties.
fn ranked(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

pub fn initial_prune_count(k: usize) -> usize {
    k.div_ceil(2)
}

/// The `⌈k/2⌉` most redundant blocks.
pub fn build_initial_pruning_set(redundancy: &[f64], k: usize) -> Result<BTreeSet<usize>> {
    let n = redundancy.len();
    if k < 1 || k + 1 > n {
        return Err(Error::Argument(format!(
            "k = {k} must lie in 1..={}",
            n.saturating_sub(1)
        )));
    }
    Ok(ranked(redundancy)
        .into_iter()
        .take(initial_prune_count(k))
        .collect())
}

/// Pairs with `d_i ≥ d_T` that avoid `p_initial`. Overlapping candidates are
/// resolved greedily by descending metric (lower index on ties), so a block
/// shared by two qualifying pairs goes to the pair with the larger metric.
pub fn build_distillation_set(
    pair_metric: &[f64],
    d_threshold: f64,
    p_initial: &BTreeSet<usize>,
) -> Vec<DistillPair> {
    let mut taken = BTreeSet::new();
    let mut out = Vec::new();
    for i in ranked(pair_metric) {
        let d = pair_metric[i];
        if d < d_threshold {
            break;
        }
        if p_initial.contains(&i) || p_initial.contains(&(i + 1)) {
            continue;
        }
        if taken.contains(&i) || taken.contains(&(i + 1)) {
            continue;
        }
        taken.insert(i);
        taken.insert(i + 1);
        out.push(DistillPair {
            first: i,
            metric: d,
        });
    }
    out.sort_by_key(|p| p.first);
    out
}

/// Every block not covered by a distillation pair.
pub fn build_final_pruning_set(distillation: &[DistillPair], n_blocks: usize) -> BTreeSet<usize> {
    let covered: BTreeSet<usize> = distillation
        .iter()
        .flat_map(|p| [p.first, p.first + 1])
        .collect();
    (0..n_blocks).filter(|b| !covered.contains(b)).collect()
}

/// Runs the three set constructions in order.
pub fn build_partition(
    profile: &RedundancyProfile,
    k: usize,
    d_threshold: f64,
) -> Result<SetPartition> {
    if !(d_threshold > 0.0 && d_threshold <= 1.0) {
        return Err(Error::Argument(format!(
            "d_T = {d_threshold} must lie in (0, 1]"
        )));
    }
    let n = profile.n_blocks();
    if profile.pair_metric.len() + 1 != n {
        return Err(Error::Consistency(
            "pair metric length must be n_blocks - 1".into(),
        ));
    }
    let p_initial = build_initial_pruning_set(&profile.redundancy, k)?;
    let distillation = build_distillation_set(&profile.pair_metric, d_threshold, &p_initial);
    let p_final = build_final_pruning_set(&distillation, n);
    Ok(SetPartition {
        p_initial,
        distillation,
        p_final,
        d_threshold,
    })
}

/// Serialised form of `analysis.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub format_version: u32,
    pub n_blocks: usize,
    pub k: usize,
    pub d_threshold: f64,
    pub redundancy: Vec<f64>,
    pub pair_metric: Vec<f64>,
    pub norm_profile: Vec<f64>,
    pub p_initial: Vec<usize>,
    /// Pairs as two-element arrays.
    pub distillation: Vec<[usize; 2]>,
    pub distillation_metric: Vec<f64>,
    pub p_final: Vec<usize>,
}

impl AnalysisReport {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(
        profile: &RedundancyProfile,
        partition: &SetPartition,
        k: usize,
        norm_profile: Vec<f64>,
    ) -> Self {
        Self {
            format_version: Self::FORMAT_VERSION,
            n_blocks: profile.n_blocks(),
            k,
            d_threshold: partition.d_threshold,
            redundancy: profile.redundancy.clone(),
            pair_metric: profile.pair_metric.clone(),
            norm_profile,
            p_initial: partition.p_initial.iter().copied().collect(),
            distillation: partition
                .distillation
                .iter()
                .map(|p| [p.first, p.first + 1])
                .collect(),
            distillation_metric: partition.distillation.iter().map(|p| p.metric).collect(),
            p_final: partition.p_final.iter().copied().collect(),
        }
    }

    pub fn profile(&self) -> RedundancyProfile {
        RedundancyProfile {
            redundancy: self.redundancy.clone(),
            pair_metric: self.pair_metric.clone(),
        }
    }

    pub fn partition(&self) -> Result<SetPartition> {
        if self.format_version != Self::FORMAT_VERSION {
            return Err(Error::Consistency(format!(
                "analysis format_version {} unsupported",
                self.format_version
            )));
        }
        if self.distillation.len() != self.distillation_metric.len()
            || self.distillation.iter().any(|p| p[1] != p[0] + 1)
        {
            return Err(Error::Consistency("malformed distillation pairs".into()));
        }
        let partition = SetPartition {
            p_initial: self.p_initial.iter().copied().collect(),
            distillation: self
                .distillation
                .iter()
                .zip(&self.distillation_metric)
                .map(|(p, &metric)| DistillPair {
                    first: p[0],
                    metric,
                })
                .collect(),
            p_final: self.p_final.iter().copied().collect(),
            d_threshold: self.d_threshold,
        };
        partition.check(self.n_blocks)?;
        Ok(partition)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_from(levels: Vec<Vec<f64>>, d: usize) -> HiddenTrace {
        HiddenTrace {
            d_model: d,
            rows: levels[0].len() / d,
            slots: (0..levels.len() - 1).collect(),
            levels,
        }
    }

    #[test]
    fn redundancy_examples() {
        let t = trace_from(
            vec![
                vec![1.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 1.0],
            ],
            2,
        );
        let r = compute_redundancy(&t).unwrap();
        assert_eq!(r, vec![1.0, 0.0, 1.0]);
        let t = trace_from(vec![vec![1.0, 0.0], vec![1.0, 1.0]], 2);
        assert!(
            (compute_redundancy(&t).unwrap()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12
        );
        let t = trace_from(vec![vec![0.0, 0.0], vec![1.0, 1.0]], 2);
        assert!(matches!(compute_redundancy(&t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pair_metric_examples() {
        assert!((pair_metric_from_cosines(0.9, 0.8, 0.95) - 0.925).abs() < 1e-15);
        assert_eq!(pair_metric_from_cosines(1.0, 1.0, 1.0), 1.0);
        assert_eq!(pair_metric_from_cosines(0.5, 0.5, 0.5), 0.5);
        // Identity blocks end to end.
        let t = trace_from(vec![vec![1.0, 2.0]; 4], 2);
        let d = compute_pair_metric(&t).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn initial_set_examples() {
        let r = [0.2, 0.9, 0.85, 0.3, 0.95, 0.1, 0.4, 0.5];
        assert_eq!(
            build_initial_pruning_set(&r, 3).unwrap(),
            BTreeSet::from([4, 1])
        );
        assert_eq!(
            build_initial_pruning_set(&r, 1).unwrap(),
            BTreeSet::from([4])
        );
        let tie = [0.1, 0.2, 0.9, 0.3, 0.4, 0.9];
        assert_eq!(
            build_initial_pruning_set(&tie, 1).unwrap(),
            BTreeSet::from([2])
        );
        assert!(matches!(
            build_initial_pruning_set(&r, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            build_initial_pruning_set(&r, 8),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn distillation_examples() {
        // Pairs: (0,1)=.96 (1,2)=.97 (2,3)=.5 (3,4)=.96 (4,5)=.97
        let d = [0.96, 0.97, 0.5, 0.96, 0.97];
        let pairs = build_distillation_set(&d, 0.95, &BTreeSet::from([2]));
        let firsts: Vec<usize> = pairs.iter().map(|p| p.first).collect();
        assert_eq!(firsts, vec![0, 4]);
        assert!(build_distillation_set(&[0.5, 0.9], 0.95, &BTreeSet::new()).is_empty());
        let chain = build_distillation_set(&[0.98, 0.96], 0.95, &BTreeSet::new());
        assert_eq!(chain.iter().map(|p| p.first).collect::<Vec<_>>(), vec![0]);
        // Inclusive threshold.
        assert_eq!(
            build_distillation_set(&[0.95], 0.95, &BTreeSet::new()).len(),
            1
        );
    }

    #[test]
    fn final_set_examples() {
        let pairs = [
            DistillPair {
                first: 0,
                metric: 1.0,
            },
            DistillPair {
                first: 4,
                metric: 1.0,
            },
        ];
        assert_eq!(build_final_pruning_set(&pairs, 6), BTreeSet::from([2, 3]));
        assert_eq!(build_final_pruning_set(&[], 3), BTreeSet::from([0, 1, 2]));
        let all = [0, 2, 4].map(|first| DistillPair { first, metric: 1.0 });
        assert!(build_final_pruning_set(&all, 6).is_empty());
    }

    #[test]
    fn report_round_trip() {
        let profile = RedundancyProfile {
            redundancy: vec![0.2, 0.9, 0.97, 0.96, 0.3],
            pair_metric: vec![0.5, 0.96, 0.97, 0.4],
        };
        let part = build_partition(&profile, 1, 0.95).unwrap();
        part.check(5).unwrap();
        let rep = AnalysisReport::new(&profile, &part, 1, vec![1.0; 6]);
        let json = serde_json::to_string(&rep).unwrap();
        let back: AnalysisReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.partition().unwrap(), part);
    }
}
