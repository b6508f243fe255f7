use serde::{Deserialize, Serialize};

use super::candidate_pool;
use crate::analysis::SetPartition;
use crate::error::{Error, Result};
use crate::plan::{block_disjoint, RemovalElement};

pub const DEFAULT_CAP: u128 = 1_000_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceOutcome {
    pub best: Vec<RemovalElement>,
    pub best_f: f64,
    pub evaluated: usize,
}

/// Exhaustive maximum over block-disjoint `k`-subsets of the candidate
/// pool. Subsets are visited in lexicographic order of pool indices and
/// only a strictly better score replaces the incumbent.
pub fn brute_force_optimum<F>(
    partition: &SetPartition,
    k: usize,
    mut objective: F,
    cap: u128,
) -> Result<BruteForceOutcome>
where
    F: FnMut(&[RemovalElement]) -> Result<f64>,
{
    let pool = candidate_pool(partition);
    let n = pool.len();
    if k == 0 || k > n {
        return Err(Error::Infeasible(format!(
            "k = {k} with {n} removal elements"
        )));
    }
    let count = binomial(n, k);
    if count > cap {
        return Err(Error::TooLarge { count, cap });
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best: Option<(Vec<RemovalElement>, f64)> = None;
    let mut evaluated = 0;
    loop {
        let subset: Vec<RemovalElement> = idx.iter().map(|&i| pool[i]).collect();
        if block_disjoint(&subset) {
            let f = objective(&subset)?;
            evaluated += 1;
            if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
                best = Some((subset, f));
            }
        }
        // Advance to the next combination.
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
            break;
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
    let (best, best_f) =
        best.ok_or_else(|| Error::Infeasible("no block-disjoint subset".into()))?;
    Ok(BruteForceOutcome {
        best,
        best_f,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{DistillPair, SetPartition};
    use std::collections::BTreeSet;

    fn prunes(n: usize) -> SetPartition {
        SetPartition {
            p_initial: BTreeSet::new(),
            distillation: vec![],
            p_final: (0..n).collect(),
            d_threshold: 0.95,
        }
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(10, 3), 120);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(binomial(60, 30), 118264581564861424);
    }

    #[test]
    fn five_choose_two() {
        let part = prunes(5);
        let scores = [0.1, 0.5, 0.2, 0.4, 0.3];
        let out = brute_force_optimum(
            &part,
            2,
            |s| Ok(s.iter().map(|e| scores[e.first_block()]).sum()),
            DEFAULT_CAP,
        )
        .unwrap();
        assert_eq!(out.evaluated, 10);
        assert_eq!(
            out.best,
            vec![
                RemovalElement::Prune { block: 1 },
                RemovalElement::Prune { block: 3 }
            ]
        );
    }

    #[test]
    fn full_and_ties_and_cap() {
        let part = SetPartition {
            p_initial: BTreeSet::new(),
            distillation: vec![DistillPair {
                first: 1,
                metric: 0.99,
            }],
            p_final: BTreeSet::from([0, 3]),
            d_threshold: 0.95,
        };
        let all = brute_force_optimum(&part, 3, |_| Ok(0.5), DEFAULT_CAP).unwrap();
        assert_eq!(all.evaluated, 1);
        assert_eq!(all.best.len(), 3);
        let tie = brute_force_optimum(&part, 1, |_| Ok(0.5), DEFAULT_CAP).unwrap();
        assert_eq!(tie.best, vec![RemovalElement::Prune { block: 0 }]);
        assert!(matches!(
            brute_force_optimum(&prunes(30), 10, |_| Ok(0.0), DEFAULT_CAP),
            Err(Error::TooLarge { .. })
        ));
    }
}
