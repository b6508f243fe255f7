//! Merging a consecutive block pair into one trained block.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::softmax;
use crate::model::train::{backward_from_logits, block_loss, block_loss_and_grad, Adam, ViewGrads};
use crate::model::{Block, TransformerModel, ViewLayer};
use crate::plan::{MergedBlock, MergedBlocks, RemovalElement, StagePlan, StageViews};
use crate::rng::{stream, Stream};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_STEPS: usize = 200;

/// Copy of whichever block of the pair is less redundant (first on ties).
pub fn init_merged_block(model: &TransformerModel, first: usize, redundancy: &[f64]) -> Block {
    let pick = if redundancy[first + 1] < redundancy[first] {
        first + 1
    } else {
        first
    };
    model.blocks[pick].clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLoss {
    /// MSE between the merged block's output and the pair's output.
    #[default]
    HiddenMse,
    /// KL from the full model's next-token distribution to the view's.
    LogitKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lr: f64,
    pub steps: usize,
    /// Sequences per step; `None` trains on every sequence each step.
    pub batch: Option<usize>,
    pub seed: u64,
    pub loss: DistillLoss,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            steps: DEFAULT_STEPS,
            batch: None,
            seed: 0,
            loss: DistillLoss::HiddenMse,
        }
    }
}

/// Teacher activations for one pair: per calibration sequence, the input of
/// the first block and the output of the second.
#[derive(Debug, Clone)]
pub struct DistillJob {
    pub first: usize,
    pub init: Block,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub config: DistillConfig,
}

impl DistillJob {
    /// Captures activations by running the unpruned model on `calibration`.
    pub fn capture(
        model: &TransformerModel,
        first: usize,
        redundancy: &[f64],
        calibration: &[Vec<u32>],
        config: DistillConfig,
    ) -> Result<Self> {
        if first + 1 >= model.blocks.len() {
            return Err(Error::Argument(format!(
                "pair ({first}, {}) out of range for {} blocks",
                first + 1,
                model.blocks.len()
            )));
        }
        if redundancy.len() != model.blocks.len() {
            return Err(Error::Argument(
                "redundancy length must equal the block count".into(),
            ));
        }
        if calibration.is_empty() {
            return Err(Error::Argument(
                "distillation needs calibration sequences".into(),
            ));
        }
        let view = model.full_view();
        let mut inputs = Vec::with_capacity(calibration.len());
        let mut targets = Vec::with_capacity(calibration.len());
        for seq in calibration {
            let pre = view.prefill(seq)?;
            inputs.push(pre.trace.levels[first].clone());
            targets.push(pre.trace.levels[first + 2].clone());
        }
        Ok(Self {
            first,
            init: init_merged_block(model, first, redundancy),
            inputs,
            targets,
            config,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub merged: MergedBlock,
    /// Loss of the initial block under the configured loss.
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Hidden-state MSE before and after, whatever the training loss.
    pub initial_mse: f64,
    pub final_mse: f64,
    pub history: Vec<f64>,
}

fn batches(n: usize, config: &DistillConfig, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(b) = config.batch.filter(|&b| b < n) {
        idx.shuffle(rng);
        idx.truncate(b.max(1));
        idx.sort_unstable();
    }
    idx
}

fn subset<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Trains the merged block with Adam and returns the best checkpoint seen.
pub fn distill_pair(job: &DistillJob) -> Result<DistillOutcome> {
    distill_with(
        job,
        |block, idx| {
            block_loss_and_grad(block, &subset(&job.inputs, idx), &subset(&job.targets, idx))
        },
        |block| block_loss(block, &job.inputs, &job.targets),
    )
}

/// Logit-level variant: the merged block runs inside the model in place of
/// the pair and is trained against the full model's distributions.
pub fn distill_pair_kl(
    model: &TransformerModel,
    job: &DistillJob,
    calibration: &[Vec<u32>],
) -> Result<DistillOutcome> {
    let vocab = model.config.vocab;
    let teacher: Vec<Vec<f64>> = calibration
        .iter()
        .map(|seq| model.full_view().logits(seq))
        .collect::<Result<_>>()?;
    let kl = |block: &Block, idx: &[usize], want_grad: bool| -> Result<(f64, Block)> {
        let layers = (0..model.blocks.len())
            .filter(|&s| s != job.first + 1)
            .map(|slot| ViewLayer {
                slot,
                block: if slot == job.first {
                    block
                } else {
                    &model.blocks[slot]
                },
            })
            .collect();
        let view = crate::model::ModelView::new(model, layers)?;
        let pos = job.first;
        let n: usize = idx.iter().map(|&i| calibration[i].len()).sum();
        let mut grads = ViewGrads::zeros(&view);
        let mut total = 0.0;
        for &i in idx {
            let seq = &calibration[i];
            let fwd = view.forward_seq(seq)?;
            let mut dlogits = vec![0.0; fwd.logits.len()];
            for t in 0..seq.len() {
                let ps = softmax(&fwd.logits[t * vocab..(t + 1) * vocab]);
                let pt = softmax(&teacher[i][t * vocab..(t + 1) * vocab]);
                for j in 0..vocab {
                    if pt[j] > 0.0 {
                        total += pt[j] * (pt[j].ln() - ps[j].max(f64::MIN_POSITIVE).ln());
                    }
                    dlogits[t * vocab + j] = (ps[j] - pt[j]) / n as f64;
                }
            }
            if want_grad {
                backward_from_logits(&view, &fwd, seq, &dlogits, &mut grads);
            }
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("distillation KL is not finite".into()));
        }
        Ok((loss, grads.blocks.swap_remove(pos)))
    };
    if calibration.len() != job.inputs.len() {
        return Err(Error::Argument(
            "calibration does not match the job's activations".into(),
        ));
    }
    let all: Vec<usize> = (0..calibration.len()).collect();
    distill_with(
        job,
        |block, idx| kl(block, idx, true),
        |block| kl(block, &all, false).map(|(l, _)| l),
    )
}

fn distill_with(
    job: &DistillJob,
    mut loss_and_grad: impl FnMut(&Block, &[usize]) -> Result<(f64, Block)>,
    mut full_loss: impl FnMut(&Block) -> Result<f64>,
) -> Result<DistillOutcome> {
    let cfg = job.config;
    if job.inputs.is_empty() {
        return Err(Error::Argument(
            "distillation job has no activations".into(),
        ));
    }
    let initial_mse = block_loss(&job.init, &job.inputs, &job.targets)?;
    let initial_loss = full_loss(&job.init)?;
    let mut best = job.init.clone();
    let mut best_loss = initial_loss;
    let mut history = vec![initial_loss];
    let mut current = job.init.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = stream(cfg.seed, Stream::Distill);
    for step in 0..cfg.steps {
        let idx = batches(job.inputs.len(), &cfg, &mut rng);
        let (_, grads) = loss_and_grad(&current, &idx)?;
        opt.step(
            current.params_mut().into_iter().collect(),
            grads.params().into_iter().collect(),
        );
        if !current.is_finite() {
            return Err(Error::Divergence(format!(
                "merged block diverged at step {step}"
            )));
        }
        let loss = match full_loss(&current) {
            Ok(l) => l,
            Err(Error::Numeric(msg)) => return Err(Error::Divergence(msg)),
            Err(e) => return Err(e),
        };
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = current.clone();
        }
    }
    let final_mse = block_loss(&best, &job.inputs, &job.targets)?;
    Ok(DistillOutcome {
        merged: MergedBlock {
            first: job.first,
            block: best,
            steps: cfg.steps,
            final_mse,
        },
        initial_loss,
        best_loss,
        initial_mse,
        final_mse,
        history,
    })
}

/// Trains a merged block for every distill element of `plan`.
pub fn distill_plan(
    model: &TransformerModel,
    plan: &StagePlan,
    redundancy: &[f64],
    calibration: &[Vec<u32>],
    config: DistillConfig,
) -> Result<(MergedBlocks, Vec<DistillOutcome>)> {
    let mut merged = MergedBlocks::new();
    let mut outcomes = Vec::new();
    for e in &plan.decode_removals {
        if let RemovalElement::Distill { first } = *e {
            let job = DistillJob::capture(model, first, redundancy, calibration, config)?;
            let out = match config.loss {
                DistillLoss::HiddenMse => distill_pair(&job)?,
                DistillLoss::LogitKl => distill_pair_kl(model, &job, calibration)?,
            };
            merged.insert(out.merged.clone());
            outcomes.push(out);
        }
    }
    Ok((merged, outcomes))
}

/// Prefill and decode views of `plan` with merged blocks spliced in.
pub fn apply_distillation<'a>(
    model: &'a TransformerModel,
    plan: &StagePlan,
    merged: &'a MergedBlocks,
) -> Result<StageViews<'a>> {
    StageViews::new(model, plan, merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::calibration::generate_calibration;
    use crate::model::ModelConfig;

    fn model() -> TransformerModel {
        TransformerModel::build(ModelConfig::new(4, 8, 2, 16, 32), 5).unwrap()
    }

    #[test]
    fn init_picks_lower_redundancy() {
        let m = model();
        assert_eq!(
            init_merged_block(&m, 1, &[0.0, 0.80, 0.92, 0.0]),
            m.blocks[1]
        );
        assert_eq!(
            init_merged_block(&m, 1, &[0.0, 0.92, 0.80, 0.0]),
            m.blocks[2]
        );
        assert_eq!(init_merged_block(&m, 1, &[0.0, 0.5, 0.5, 0.0]), m.blocks[1]);
    }

    #[test]
    fn zero_steps_is_identity() {
        let m = model();
        let cal = generate_calibration(1, 3, 12, 16).unwrap();
        let cfg = DistillConfig {
            steps: 0,
            ..DistillConfig::default()
        };
        let job = DistillJob::capture(&m, 1, &[0.1, 0.2, 0.3, 0.4], &cal, cfg).unwrap();
        let out = distill_pair(&job).unwrap();
        assert_eq!(out.merged.block, m.blocks[1]);
        assert_eq!(out.final_mse, out.initial_mse);
    }

    #[test]
    fn identity_second_block_is_already_optimal() {
        let mut m = model();
        let b = &mut m.blocks[2];
        b.wo.iter_mut().for_each(|x| *x = 0.0);
        b.w_down.iter_mut().for_each(|x| *x = 0.0);
        b.b_down.iter_mut().for_each(|x| *x = 0.0);
        let cal = generate_calibration(2, 3, 12, 16).unwrap();
        let job = DistillJob::capture(&m, 1, &[0.1, 0.2, 1.0, 0.4], &cal, DistillConfig::default())
            .unwrap();
        let out = distill_pair(&job).unwrap();
        assert_eq!(out.initial_mse, 0.0);
        assert_eq!(out.final_mse, 0.0);
        assert_eq!(out.merged.block, m.blocks[1]);
    }

    #[test]
    fn training_reduces_mse() {
        let m = model();
        let cal = generate_calibration(3, 4, 16, 16).unwrap();
        let job = DistillJob::capture(&m, 0, &[0.1, 0.2, 0.3, 0.4], &cal, DistillConfig::default())
            .unwrap();
        let out = distill_pair(&job).unwrap();
        assert!(out.final_mse <= out.initial_mse);
        assert!(
            out.final_mse < 0.9 * out.initial_mse,
            "{} vs {}",
            out.final_mse,
            out.initial_mse
        );
        let again = distill_pair(&job).unwrap();
        assert_eq!(again.merged.block, out.merged.block);
    }

    #[test]
    fn kl_mode_never_worsens() {
        let m = model();
        let cal = generate_calibration(4, 2, 10, 16).unwrap();
        let cfg = DistillConfig {
            steps: 20,
            loss: DistillLoss::LogitKl,
            ..DistillConfig::default()
        };
        let job = DistillJob::capture(&m, 1, &[0.1, 0.2, 0.3, 0.4], &cal, cfg).unwrap();
        let out = distill_pair_kl(&m, &job, &cal).unwrap();
        assert!(out.best_loss <= out.initial_loss);
        assert!(out.initial_loss > 0.0);
    }

    #[test]
    fn views_follow_plan() {
        let m = model();
        let r = [0.1, 0.2, 0.3, 0.4];
        let empty = MergedBlocks::new();
        let views = apply_distillation(&m, &StagePlan::default(), &empty).unwrap();
        assert_eq!(views.prefill.slots(), vec![0, 1, 2, 3]);
        assert_eq!(views.decode.slots(), vec![0, 1, 2, 3]);
        let plan = StagePlan {
            prefill_removals: vec![RemovalElement::Prune { block: 3 }],
            decode_removals: vec![
                RemovalElement::Prune { block: 3 },
                RemovalElement::Distill { first: 0 },
            ],
            threshold: 0.03,
        };
        assert!(matches!(
            apply_distillation(&m, &plan, &empty),
            Err(Error::Consistency(_))
        ));
        let merged = MergedBlocks::initialized(&m, &[0], &r);
        let views = apply_distillation(&m, &plan, &merged).unwrap();
        assert_eq!(views.prefill.layers.len(), 3);
        assert_eq!(views.decode.layers.len(), 2);
    }
}
