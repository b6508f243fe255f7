//! Top-1 next-token accuracy of a removal plan on calibration data.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::model::{RetainedSets, TransformerModel};
use crate::plan::{MergedBlocks, RemovalElement, StagePlan, StageViews};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Whole sequences through the decode view.
    #[default]
    Unified,
    /// Prompt halves through the prefill view.
    Prefill,
    /// Prompt halves prefilled by the prefill view, then the rest
    /// teacher-forced one step at a time through the decode view.
    Decode,
}

/// Split point between prompt and continuation.
pub fn prompt_len(seq_len: usize) -> usize {
    (seq_len / 2).max(1)
}

fn correct(logits: &[f64], target: u32) -> bool {
    argmax(logits) == target as usize
}

/// Accuracy with the plan's removals applied as `mode` dictates.
pub fn objective_accuracy(
    model: &TransformerModel,
    calibration: &[Vec<u32>],
    plan: &StagePlan,
    merged: &MergedBlocks,
    mode: EvalMode,
) -> Result<f64> {
    if calibration.is_empty() {
        return Err(Error::Argument("calibration set is empty".into()));
    }
    let views =
        StageViews::unchecked(model, &plan.prefill_removals, &plan.decode_removals, merged)?;
    let vocab = model.config.vocab;
    let mut hits = 0usize;
    let mut total = 0usize;
    for seq in calibration {
        match mode {
            EvalMode::Unified => {
                let logits = views.decode.logits(seq)?;
                for t in 0..seq.len() - 1 {
                    hits += correct(&logits[t * vocab..(t + 1) * vocab], seq[t + 1]) as usize;
                    total += 1;
                }
            }
            EvalMode::Prefill => {
                let p = prompt_len(seq.len());
                let logits = views.prefill.logits(&seq[..p])?;
                for t in 0..p - 1 {
                    hits += correct(&logits[t * vocab..(t + 1) * vocab], seq[t + 1]) as usize;
                    total += 1;
                }
            }
            EvalMode::Decode => {
                let p = prompt_len(seq.len());
                let mut cache = views.prefill.prefill(&seq[..p])?.cache;
                for t in p..seq.len() - 1 {
                    let step =
                        views
                            .decode
                            .decode_step(seq[t], &mut cache, &RetainedSets::new())?;
                    hits += correct(&step.logits, seq[t + 1]) as usize;
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Argument(format!(
            "calibration yields no predictions in {mode:?} mode"
        )));
    }
    Ok(hits as f64 / total as f64)
}

/// Memoised model-backed objective for the search routines.
pub struct ModelObjective<'a> {
    pub model: &'a TransformerModel,
    pub calibration: &'a [Vec<u32>],
    /// Stand-ins used for distill elements during search.
    pub merged: &'a MergedBlocks,
    memo: HashMap<(Vec<RemovalElement>, Vec<RemovalElement>, EvalMode), f64>,
    pub evaluations: usize,
}

impl<'a> ModelObjective<'a> {
    pub fn new(
        model: &'a TransformerModel,
        calibration: &'a [Vec<u32>],
        merged: &'a MergedBlocks,
    ) -> Self {
        Self {
            model,
            calibration,
            merged,
            memo: HashMap::new(),
            evaluations: 0,
        }
    }

    pub fn evaluate(&mut self, plan: &StagePlan, mode: EvalMode) -> Result<f64> {
        let mut pre = plan.prefill_removals.clone();
        let mut dec = plan.decode_removals.clone();
        pre.sort();
        dec.sort();
        let key = (pre, dec, mode);
        if let Some(&f) = self.memo.get(&key) {
            return Ok(f);
        }
        let f = objective_accuracy(self.model, self.calibration, plan, self.merged, mode)?;
        self.evaluations += 1;
        self.memo.insert(key, f);
        Ok(f)
    }

    /// Unified accuracy of a removal set.
    pub fn unified(&mut self, elements: &[RemovalElement]) -> Result<f64> {
        self.evaluate(&StagePlan::unified(elements.to_vec()), EvalMode::Unified)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::calibration::generate_calibration;
    use crate::model::ModelConfig;

    #[test]
    fn random_model_is_near_chance() {
        let m = TransformerModel::build(ModelConfig::new(2, 16, 2, 64, 64), 3).unwrap();
        let cal = generate_calibration(1, 65, 64, 64).unwrap();
        let f = objective_accuracy(
            &m,
            &cal,
            &StagePlan::default(),
            &MergedBlocks::new(),
            EvalMode::Unified,
        )
        .unwrap();
        assert!((0.0..=0.08).contains(&f), "{f}");
    }

    #[test]
    fn errors() {
        let m = TransformerModel::build(ModelConfig::new(2, 8, 2, 8, 16), 3).unwrap();
        let cal = generate_calibration(1, 2, 8, 8).unwrap();
        let none = MergedBlocks::new();
        assert!(matches!(
            objective_accuracy(&m, &[], &StagePlan::default(), &none, EvalMode::Unified),
            Err(Error::Argument(_))
        ));
        let all = StagePlan::unified(vec![
            RemovalElement::Prune { block: 0 },
            RemovalElement::Prune { block: 1 },
        ]);
        assert!(matches!(
            objective_accuracy(&m, &cal, &all, &none, EvalMode::Unified),
            Err(Error::EmptyModel)
        ));
    }

    #[test]
    fn decode_mode_matches_unified_without_removals() {
        // With identical views, teacher-forced decoding reproduces the
        // full-sequence predictions at the same positions.
        let m = TransformerModel::build(ModelConfig::new(3, 8, 2, 8, 32), 4).unwrap();
        let cal = generate_calibration(2, 3, 12, 8).unwrap();
        let plan = StagePlan::unified(vec![RemovalElement::Prune { block: 1 }]);
        let none = MergedBlocks::new();
        let dec = objective_accuracy(&m, &cal, &plan, &none, EvalMode::Decode).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for seq in &cal {
            let logits = m.forward_prefill(seq, &[1].into()).unwrap().logits;
            for t in prompt_len(seq.len())..seq.len() - 1 {
                hits += (argmax(&logits[t * 8..(t + 1) * 8]) == seq[t + 1] as usize) as usize;
                total += 1;
            }
        }
        assert!((dec - hits as f64 / total as f64).abs() < 1e-12);
    }
}
