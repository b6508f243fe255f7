//! Removal search: initial solution, annealing, exhaustive oracle and the
//! split of the winning combination into prefill and decode plans.

mod annealing;
mod brute;
mod stages;

pub use annealing::{
    acceptance_probability, propose_neighbor, run_annealing, selection_probabilities,
    AnnealingOutcome, AnnealingSchedule, AuditEntry, SearchState, DEFAULT_SEED, PROPOSAL_RETRIES,
    WEIGHT_FLOOR,
};
pub use brute::{binomial, brute_force_optimum, BruteForceOutcome, DEFAULT_CAP};
pub use stages::{assign_stages, StageDecision, StageOutcome, DEFAULT_THRESHOLD};

use crate::analysis::{initial_prune_count, RedundancyProfile, SetPartition};
use crate::error::{Error, Result};
use crate::plan::RemovalElement;

/// Every element the search may use: a prune for each block of `p_final`
/// and a distill for each pair, in element order.
pub fn candidate_pool(partition: &SetPartition) -> Vec<RemovalElement> {
    let mut pool: Vec<RemovalElement> = partition
        .p_final
        .iter()
        .map(|&block| RemovalElement::Prune { block })
        .chain(
            partition
                .distillation
                .iter()
                .map(|p| RemovalElement::Distill { first: p.first }),
        )
        .collect();
    pool.sort();
    pool
}

/// `p_initial` as prunes, then the best pairs by metric, then the most
/// redundant remaining prunable blocks.
pub fn build_initial_solution(
    partition: &SetPartition,
    profile: &RedundancyProfile,
    k: usize,
) -> Result<Vec<RemovalElement>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let n_prune = initial_prune_count(k);
    if partition.p_initial.len() != n_prune {
        return Err(Error::Consistency(format!(
            "p_initial has {} blocks but k = {k} needs {n_prune}",
            partition.p_initial.len()
        )));
    }
    let mut out: Vec<RemovalElement> = partition
        .p_initial
        .iter()
        .map(|&block| RemovalElement::Prune { block })
        .collect();
    let mut rest = k - n_prune;

    let mut pairs = partition.distillation.clone();
    pairs.sort_by(|a, b| b.metric.total_cmp(&a.metric).then(a.first.cmp(&b.first)));
    for p in pairs.iter().take(rest) {
        out.push(RemovalElement::Distill { first: p.first });
    }
    rest -= rest.min(pairs.len());

    if rest > 0 {
        let r = &profile.redundancy;
        let mut spare: Vec<usize> = partition
            .p_final
            .difference(&partition.p_initial)
            .copied()
            .collect();
        spare.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
        if spare.len() < rest {
            return Err(Error::Infeasible(format!(
                "k = {k} exceeds the {} available removal elements",
                out.len() + spare.len()
            )));
        }
        out.extend(
            spare
                .into_iter()
                .take(rest)
                .map(|block| RemovalElement::Prune { block }),
        );
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{build_partition, DistillPair};
    use std::collections::BTreeSet;

    fn partition(p_initial: &[usize], pairs: &[(usize, f64)], n: usize) -> SetPartition {
        let distillation: Vec<DistillPair> = pairs
            .iter()
            .map(|&(first, metric)| DistillPair { first, metric })
            .collect();
        let p_final = crate::analysis::build_final_pruning_set(&distillation, n);
        SetPartition {
            p_initial: p_initial.iter().copied().collect(),
            distillation,
            p_final,
            d_threshold: 0.95,
        }
    }

    fn profile(r: &[f64]) -> RedundancyProfile {
        RedundancyProfile {
            redundancy: r.to_vec(),
            pair_metric: vec![0.0; r.len() - 1],
        }
    }

    #[test]
    fn initial_solution_with_pairs() {
        let part = partition(&[0, 7], &[(2, 0.96), (4, 0.98)], 8);
        let prof = profile(&[0.9, 0.1, 0.5, 0.5, 0.5, 0.5, 0.2, 0.95]);
        let s = build_initial_solution(&part, &prof, 3).unwrap();
        assert_eq!(
            s,
            vec![
                RemovalElement::Prune { block: 0 },
                RemovalElement::Distill { first: 4 },
                RemovalElement::Prune { block: 7 },
            ]
        );
    }

    #[test]
    fn initial_solution_without_pairs() {
        let r = [0.9, 0.1, 0.85, 0.3, 0.95, 0.2];
        let prof = profile(&r);
        let part = partition(&[4, 0], &[], 6);
        let s = build_initial_solution(&part, &prof, 3).unwrap();
        let blocks: BTreeSet<usize> = s.iter().map(|e| e.first_block()).collect();
        assert_eq!(blocks, BTreeSet::from([0, 2, 4]));
        let part1 = partition(&[4], &[], 6);
        assert_eq!(
            build_initial_solution(&part1, &prof, 1).unwrap(),
            vec![RemovalElement::Prune { block: 4 }]
        );
    }

    #[test]
    fn infeasible_k() {
        // Three blocks, all paired but one: only two elements exist.
        let part = partition(&[2], &[(0, 0.99)], 3);
        let prof = profile(&[0.1, 0.2, 0.9]);
        assert!(matches!(
            build_initial_solution(&part, &prof, 3),
            Err(Error::Consistency(_))
        ));
        let part = partition(&[2, 0], &[], 3);
        assert_eq!(build_initial_solution(&part, &prof, 3).unwrap().len(), 3);
        let prof4 = profile(&[0.1, 0.2, 0.9, 0.3]);
        let part4 = partition(&[2, 3], &[(0, 0.99)], 4);
        assert!(matches!(
            build_initial_solution(&part4, &prof4, 4),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn pool_covers_partition() {
        let prof = RedundancyProfile {
            redundancy: vec![0.2, 0.9, 0.97, 0.96, 0.3],
            pair_metric: vec![0.5, 0.96, 0.97, 0.4],
        };
        let part = build_partition(&prof, 1, 0.95).unwrap();
        let pool = candidate_pool(&part);
        let blocks: usize = pool.iter().map(|e| e.blocks().len()).sum();
        assert_eq!(blocks, 5);
        assert!(crate::plan::block_disjoint(&pool));
    }
}
