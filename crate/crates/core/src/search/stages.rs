use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{block_disjoint, RemovalElement, StagePlan};

pub const DEFAULT_THRESHOLD: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDecision {
    pub element: RemovalElement,
    pub f_both: f64,
    pub f_decode_only: f64,
    /// True when the element stays out of the prefill plan.
    pub decode_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub plan: StagePlan,
    pub decisions: Vec<StageDecision>,
}

/// Splits `best` into prefill and decode plans. Every element is removed
/// on the decode node; it is kept in the prefill model when doing so beats
/// removing it in both stages by more than `threshold` (absolute). Elements
/// are decided in ascending block order, each conditioned on the earlier
/// decisions.
pub fn assign_stages<F>(
    best: &[RemovalElement],
    mut objective: F,
    threshold: f64,
) -> Result<StageOutcome>
where
    F: FnMut(&StagePlan) -> Result<f64>,
{
    if threshold.is_nan() {
        return Err(Error::Argument("threshold is NaN".into()));
    }
    if !block_disjoint(best) {
        return Err(Error::Consistency("removal elements overlap".into()));
    }
    let mut decode = best.to_vec();
    decode.sort();
    let mut prefill = decode.clone();
    let mut decisions = Vec::with_capacity(decode.len());
    for &e in &decode {
        let both = StagePlan {
            prefill_removals: prefill.clone(),
            decode_removals: decode.clone(),
            threshold,
        };
        let only = StagePlan {
            prefill_removals: prefill.iter().filter(|&&x| x != e).copied().collect(),
            decode_removals: decode.clone(),
            threshold,
        };
        let f_both = objective(&both)?;
        let f_decode_only = objective(&only)?;
        let decode_only = f_decode_only - f_both > threshold;
        if decode_only {
            prefill = only.prefill_removals;
        }
        decisions.push(StageDecision {
            element: e,
            f_both,
            f_decode_only,
            decode_only,
        });
    }
    let plan = StagePlan {
        prefill_removals: prefill,
        decode_removals: decode,
        threshold,
    };
    Ok(StageOutcome { plan, decisions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(
        target: RemovalElement,
        both: f64,
        only: f64,
    ) -> impl FnMut(&StagePlan) -> Result<f64> {
        move |p: &StagePlan| {
            Ok(if p.prefill_removals.contains(&target) {
                both
            } else {
                only
            })
        }
    }

    #[test]
    fn large_gain_goes_decode_only() {
        let e = RemovalElement::Prune { block: 4 };
        let best = [RemovalElement::Distill { first: 1 }, e];
        let out = assign_stages(&best, scripted(e, 0.60, 0.70), 0.03).unwrap();
        assert_eq!(
            out.plan.prefill_removals,
            vec![RemovalElement::Distill { first: 1 }]
        );
        assert_eq!(out.plan.decode_removals.len(), 2);
        out.plan.validate(8).unwrap();
    }

    #[test]
    fn small_gain_stays_in_both() {
        let e = RemovalElement::Prune { block: 4 };
        let out = assign_stages(&[e], scripted(e, 0.60, 0.61), 0.03).unwrap();
        assert_eq!(out.plan.prefill_removals, vec![e]);
    }

    #[test]
    fn infinite_threshold_keeps_everything() {
        let e = RemovalElement::Prune { block: 0 };
        let out = assign_stages(&[e], scripted(e, 0.0, 1.0), f64::INFINITY).unwrap();
        assert_eq!(out.plan.prefill_removals, out.plan.decode_removals);
    }

    #[test]
    fn decisions_in_block_order() {
        let best = [
            RemovalElement::Prune { block: 5 },
            RemovalElement::Prune { block: 2 },
        ];
        let mut seen = Vec::new();
        assign_stages(
            &best,
            |p| {
                seen.push(p.prefill_removals.clone());
                Ok(0.5)
            },
            0.03,
        )
        .unwrap();
        assert_eq!(seen[1], vec![RemovalElement::Prune { block: 5 }]);
        assert_eq!(seen[3], vec![RemovalElement::Prune { block: 2 }]);
    }
}
