//! End-to-end steps shared by the command line and the acceptance suite:
//! the shipped toy instance, redundancy analysis on calibration data, and
//! the search that turns an analysis into a stage plan.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    build_partition, compute_pair_metric, compute_redundancy, norm_profile, RedundancyProfile,
    SetPartition, DEFAULT_D_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::model::calibration::generate_calibration;
use crate::model::train::train_model;
use crate::model::{AttentionStats, HiddenTrace, ModelConfig, TransformerModel};
use crate::objective::{EvalMode, ModelObjective};
use crate::plan::{MergedBlocks, RemovalElement, StagePlan};
use crate::search::{
    assign_stages, brute_force_optimum, run_annealing, AnnealingSchedule, AuditEntry,
    BruteForceOutcome, StageDecision, DEFAULT_CAP, DEFAULT_THRESHOLD,
};

/// Calibration data recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub seed: u64,
    pub samples: usize,
    pub len: usize,
}

impl CalibrationSpec {
    pub fn generate(&self, vocab: usize) -> Result<Vec<Vec<u32>>> {
        generate_calibration(self.seed, self.samples, self.len, vocab)
    }
}

/// The shipped toy model and its training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyInstance {
    pub config: ModelConfig,
    pub model_seed: u64,
    pub calibration: CalibrationSpec,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_seed: u64,
}

impl Default for ToyInstance {
    fn default() -> Self {
        Self {
            config: ModelConfig::toy(),
            model_seed: 7,
            calibration: CalibrationSpec {
                seed: 1,
                samples: 32,
                len: 32,
            },
            train_epochs: 40,
            train_lr: 1e-2,
            train_seed: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedToy {
    pub model: TransformerModel,
    pub calibration: Vec<Vec<u32>>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl ToyInstance {
    pub fn train(&self) -> Result<TrainedToy> {
        let model = TransformerModel::build(self.config, self.model_seed)?;
        let calibration = self.calibration.generate(self.config.vocab)?;
        if self.train_epochs == 0 {
            return Ok(TrainedToy {
                model,
                calibration,
                initial_loss: f64::NAN,
                final_loss: f64::NAN,
            });
        }
        let out = train_model(
            &model,
            &calibration,
            self.train_epochs,
            self.train_lr,
            self.train_seed,
        )?;
        Ok(TrainedToy {
            model: out.model,
            calibration,
            initial_loss: out.initial_loss,
            final_loss: out.best_loss,
        })
    }
}

/// Hidden trace of the unpruned model over every calibration sequence.
pub fn calibration_trace(
    model: &TransformerModel,
    calibration: &[Vec<u32>],
) -> Result<HiddenTrace> {
    if calibration.is_empty() {
        return Err(Error::Argument("calibration set is empty".into()));
    }
    let view = model.full_view();
    let mut trace = HiddenTrace::default();
    for seq in calibration {
        trace.extend(&view.prefill(seq)?.trace)?;
    }
    Ok(trace)
}

/// Attention statistics of `view`'s layers averaged over the calibration
/// set. Every sequence must have the same length.
pub fn calibration_attention(
    view: &crate::model::ModelView<'_>,
    calibration: &[Vec<u32>],
) -> Result<AttentionStats> {
    let mut iter = calibration.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Argument("calibration set is empty".into()))?;
    let mut stats = view.prefill(first)?.attention;
    for seq in iter {
        stats.merge(&view.prefill(seq)?.attention)?;
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub profile: RedundancyProfile,
    pub partition: SetPartition,
    pub norm_profile: Vec<f64>,
}

pub fn analyze(
    model: &TransformerModel,
    calibration: &[Vec<u32>],
    k: usize,
    d_threshold: f64,
) -> Result<Analysis> {
    let trace = calibration_trace(model, calibration)?;
    let profile = RedundancyProfile {
        redundancy: compute_redundancy(&trace)?,
        pair_metric: compute_pair_metric(&trace)?,
    };
    let partition = build_partition(&profile, k, d_threshold)?;
    Ok(Analysis {
        profile,
        partition,
        norm_profile: norm_profile(&trace),
    })
}

/// Search settings beyond the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub k: usize,
    pub schedule: AnnealingSchedule,
    pub threshold: f64,
    pub oracle: bool,
    pub oracle_cap: u128,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            k: 3,
            schedule: AnnealingSchedule::default(),
            threshold: DEFAULT_THRESHOLD,
            oracle: false,
            oracle_cap: DEFAULT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanElement {
    #[serde(flatten)]
    pub element: RemovalElement,
    pub prefill: bool,
    pub decode: bool,
}

/// Serialised form of `plan.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub format_version: u32,
    pub n_blocks: usize,
    pub k: usize,
    pub seed: u64,
    pub schedule: AnnealingSchedule,
    pub threshold: f64,
    pub elements: Vec<PlanElement>,
    pub initial: Vec<RemovalElement>,
    pub initial_f: f64,
    pub best_f: f64,
    pub iterations: usize,
    pub audit: Vec<AuditEntry>,
    pub stage_decisions: Vec<StageDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<BruteForceOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_match: Option<bool>,
}

impl PlanReport {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn stage_plan(&self) -> Result<StagePlan> {
        if self.format_version != Self::FORMAT_VERSION {
            return Err(Error::Consistency(format!(
                "plan format_version {} unsupported",
                self.format_version
            )));
        }
        let plan = StagePlan {
            prefill_removals: self
                .elements
                .iter()
                .filter(|e| e.prefill)
                .map(|e| e.element)
                .collect(),
            decode_removals: self
                .elements
                .iter()
                .filter(|e| e.decode)
                .map(|e| e.element)
                .collect(),
            threshold: self.threshold,
        };
        plan.validate(self.n_blocks)?;
        Ok(plan)
    }
}

/// Annealing on unified accuracy, optional brute-force comparison, then the
/// stage split on decode-mode accuracy. Distill elements are scored with
/// their untrained stand-ins.
pub fn search(
    model: &TransformerModel,
    calibration: &[Vec<u32>],
    analysis: &Analysis,
    settings: &SearchSettings,
) -> Result<PlanReport> {
    let firsts: Vec<usize> = analysis.partition.distill_firsts();
    let merged = MergedBlocks::initialized(model, &firsts, &analysis.profile.redundancy);
    let mut objective = ModelObjective::new(model, calibration, &merged);
    let annealed = run_annealing(
        &analysis.partition,
        &analysis.profile,
        settings.k,
        &settings.schedule,
        |s| objective.unified(s),
    )?;
    let oracle = if settings.oracle {
        Some(brute_force_optimum(
            &analysis.partition,
            settings.k,
            |s| objective.unified(s),
            settings.oracle_cap,
        )?)
    } else {
        None
    };
    let stages = assign_stages(
        &annealed.best,
        |p| objective.evaluate(p, EvalMode::Decode),
        settings.threshold,
    )?;
    let elements = stages
        .plan
        .decode_removals
        .iter()
        .map(|&e| PlanElement {
            element: e,
            prefill: stages.plan.prefill_removals.contains(&e),
            decode: true,
        })
        .collect();
    Ok(PlanReport {
        format_version: PlanReport::FORMAT_VERSION,
        n_blocks: model.blocks.len(),
        k: settings.k,
        seed: settings.schedule.seed,
        schedule: settings.schedule,
        threshold: settings.threshold,
        elements,
        initial: annealed.initial,
        initial_f: annealed.initial_f,
        best_f: annealed.best_f,
        iterations: annealed.iterations,
        audit: annealed.audit,
        stage_decisions: stages.decisions,
        oracle_match: oracle.as_ref().map(|o| o.best_f == annealed.best_f),
        oracle,
    })
}

/// Analysis with the defaults used throughout: `d_T` = 0.95.
pub fn analyze_default(
    model: &TransformerModel,
    calibration: &[Vec<u32>],
    k: usize,
) -> Result<Analysis> {
    analyze(model, calibration, k, DEFAULT_D_THRESHOLD)
}
