//! Scenario files: end-to-end runs on the toy model and byte-count-only
//! scenarios for full-size geometries.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::link::{transfer_metrics, LinkModel, TransferMetrics};
use super::nodes::{error_growth, reference_unified_run, run_two_node, Transport};
use super::wire::{TransferManifest, WireDtype};
use crate::analysis::compute_redundancy;
use crate::distill::{distill_plan, DistillConfig};
use crate::error::{Error, Result};
use crate::kv_prune::{
    select_layers, transfer_volume, transfer_volume_for_plan, KVSelectionPlan, TransferScenario,
    TransferVolume,
};
use crate::model::calibration::generate_calibration;
use crate::model::TransformerModel;
use crate::pipeline::{calibration_attention, calibration_trace, ToyInstance};
use crate::plan::{MergedBlocks, RemovalElement, StagePlan, StageViews};
use crate::search::DEFAULT_THRESHOLD;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;
const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvParams {
    pub p: f64,
    pub gamma: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub seed: u64,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioPlan {
    pub prefill_removals: Vec<RemovalElement>,
    pub decode_removals: Vec<RemovalElement>,
}

impl ScenarioPlan {
    pub fn stage_plan(&self) -> StagePlan {
        StagePlan {
            prefill_removals: self.prefill_removals.clone(),
            decode_removals: self.decode_removals.clone(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// A full prefill/decode run on a trained toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eScenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub instance: ToyInstance,
    pub plan: ScenarioPlan,
    /// Training for distill elements; without it merged blocks keep their
    /// initial weights.
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    pub kv: KvParams,
    pub prompt: PromptSpec,
    pub steps: usize,
    pub dtype: WireDtype,
    #[serde(default)]
    pub link: LinkModel,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

/// Byte counting only, for geometries too large to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthScenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// True when the numbers were chosen to reproduce a target rather than
    /// derived from a method's own settings.
    pub calibrated: bool,
    pub geometry: TransferScenario,
    pub prefill_removed_layers: Vec<usize>,
    pub decode_removed_layers: Vec<usize>,
    pub p: f64,
    pub selected_layers: Vec<usize>,
    #[serde(default)]
    pub link: LinkModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    E2e(E2eScenario),
    Bandwidth(BandwidthScenario),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub scenario: Scenario,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "scenario format_version {} unsupported (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn name(&self) -> &str {
        match &self.scenario {
            Scenario::E2e(s) => &s.name,
            Scenario::Bandwidth(s) => &s.name,
        }
    }
}

/// Every `*.json` scenario in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, ScenarioFile)>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot list {}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, ScenarioFile::load(&p)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub name: String,
    pub calibrated: bool,
    pub volume: TransferVolume,
    pub full_gib: f64,
    pub pruned_gib: f64,
    pub full_transfer: TransferMetrics,
    pub pruned_transfer: TransferMetrics,
}

impl BandwidthScenario {
    pub fn run(&self) -> Result<BandwidthReport> {
        let total = self.geometry.total_layers;
        let keep = |removed: &[usize]| -> BTreeSet<usize> {
            (0..total).filter(|l| !removed.contains(l)).collect()
        };
        let volume = transfer_volume(
            &self.geometry,
            &keep(&self.prefill_removed_layers),
            &keep(&self.decode_removed_layers),
            &self.selected_layers,
            self.p,
        )?;
        Ok(BandwidthReport {
            name: self.name.clone(),
            calibrated: self.calibrated,
            volume,
            full_gib: volume.bytes_full as f64 / GIB,
            pruned_gib: volume.bytes_pruned as f64 / GIB,
            full_transfer: transfer_metrics(volume.bytes_full, &self.link)?,
            pruned_transfer: transfer_metrics(volume.bytes_pruned, &self.link)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportResult {
    pub transport: Transport,
    pub transcript: Vec<u32>,
    pub round_trip_identical: bool,
    pub cache_monotonic: bool,
    pub frame_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub reference_transcript: Vec<u32>,
    pub runs: Vec<TransportResult>,
    pub transcripts_equal: bool,
    pub round_trip_identical: bool,
    pub cache_monotonic: bool,
    pub selected_layers: Vec<usize>,
    pub manifest_bytes: usize,
    pub full_manifest_bytes: usize,
    pub kv_payload_bytes: u64,
    pub full_kv_payload_bytes: u64,
    /// Closed-form byte counts for the same plans.
    pub volume: TransferVolume,
    pub volume_consistent: bool,
    pub pruned_transfer: TransferMetrics,
    pub full_transfer: TransferMetrics,
    pub error_growth: Vec<f64>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.transcripts_equal
            && self.round_trip_identical
            && self.cache_monotonic
            && self.volume_consistent
    }
}

fn monotonic(lengths: &[Vec<usize>]) -> bool {
    lengths
        .windows(2)
        .all(|w| w[0].len() == w[1].len() && w[0].iter().zip(&w[1]).all(|(a, b)| b == &(a + 1)))
}

/// Model, plan, merged blocks and KV plan a scenario runs with.
pub struct PreparedScenario {
    pub model: TransformerModel,
    pub plan: StagePlan,
    pub merged: MergedBlocks,
    pub kv_plan: KVSelectionPlan,
    pub prompt: Vec<u32>,
}

impl E2eScenario {
    pub fn prepare(&self) -> Result<PreparedScenario> {
        let toy = self.instance.train()?;
        let plan = self.plan.stage_plan();
        let n_blocks = toy.model.blocks.len();
        plan.validate(n_blocks)?;
        let firsts: Vec<usize> = plan
            .decode_removals
            .iter()
            .filter_map(|e| match *e {
                RemovalElement::Distill { first } => Some(first),
                RemovalElement::Prune { .. } => None,
            })
            .collect();
        let merged = if firsts.is_empty() {
            MergedBlocks::new()
        } else {
            let redundancy = compute_redundancy(&calibration_trace(&toy.model, &toy.calibration)?)?;
            match self.distill {
                Some(config) => {
                    distill_plan(&toy.model, &plan, &redundancy, &toy.calibration, config)?.0
                }
                None => MergedBlocks::initialized(&toy.model, &firsts, &redundancy),
            }
        };
        let kv_plan = {
            let views = StageViews::new(&toy.model, &plan, &merged)?;
            let stats = calibration_attention(&views.decode, &toy.calibration)?;
            select_layers(&stats, self.kv.p, self.kv.gamma, self.kv.n)?
        };
        let prompt =
            generate_calibration(self.prompt.seed, 1, self.prompt.len, toy.model.config.vocab)?
                .pop()
                .expect("one prompt");
        Ok(PreparedScenario {
            model: toy.model,
            plan,
            merged,
            kv_plan,
            prompt,
        })
    }

    /// Runs over an in-process channel and over loopback TCP and compares
    /// both against the single-process reference.
    pub fn run(&self) -> Result<ScenarioReport> {
        let prep = self.prepare()?;
        self.run_prepared(&prep)
    }

    pub fn run_prepared(&self, prep: &PreparedScenario) -> Result<ScenarioReport> {
        let PreparedScenario {
            model,
            plan,
            merged,
            kv_plan,
            prompt,
        } = prep;
        let reference = reference_unified_run(model, plan, merged, kv_plan, prompt, self.steps)?;
        let mut runs = Vec::new();
        let mut manifest = Vec::new();
        for transport in [
            Transport::Channel,
            Transport::Loopback {
                timeout_ms: self.timeout_ms,
            },
        ] {
            let run = run_two_node(
                model, plan, merged, kv_plan, prompt, self.steps, self.dtype, transport,
            )?;
            manifest = run.handoff.manifest.clone();
            runs.push(TransportResult {
                transport,
                cache_monotonic: monotonic(&run.decode.cache_lengths),
                round_trip_identical: run.decode.round_trip_identical,
                transcript: run.decode.transcript,
                frame_bytes: run.frame_bytes,
            });
        }
        let pruned = TransferManifest::decode(&manifest)?;
        let views = StageViews::new(model, plan, merged)?;
        let pre = views.prefill.prefill(prompt)?;
        let full = TransferManifest::build(
            &pre.cache,
            &KVSelectionPlan::disabled(kv_plan.p, kv_plan.gamma),
            &views.prefill.slots(),
            views.fingerprint,
            self.dtype,
        )?;
        let full_bytes = full.encode().len();
        let config = &model.config;
        let geometry = TransferScenario {
            total_layers: config.n_blocks,
            n_kv_heads: config.n_heads,
            head_dim: config.head_dim,
            dtype_bytes: self.dtype.size(),
            seq_len: prompt.len(),
        };
        let volume = transfer_volume_for_plan(&geometry, plan, kv_plan)?;
        Ok(ScenarioReport {
            name: self.name.clone(),
            transcripts_equal: runs.iter().all(|r| r.transcript == reference),
            round_trip_identical: runs.iter().all(|r| r.round_trip_identical),
            cache_monotonic: runs.iter().all(|r| r.cache_monotonic),
            reference_transcript: reference,
            runs,
            selected_layers: kv_plan.selected_layers.clone(),
            manifest_bytes: manifest.len(),
            full_manifest_bytes: full_bytes,
            kv_payload_bytes: pruned.kv_payload_bytes(),
            full_kv_payload_bytes: full.kv_payload_bytes(),
            volume,
            volume_consistent: volume.bytes_pruned == pruned.kv_payload_bytes()
                && volume.bytes_full == full.kv_payload_bytes(),
            pruned_transfer: transfer_metrics(manifest.len() as u64, &self.link)?,
            full_transfer: transfer_metrics(full_bytes as u64, &self.link)?,
            error_growth: error_growth(model, plan, merged, kv_plan, prompt, self.steps)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic_requires_unit_steps() {
        assert!(monotonic(&[vec![4, 8], vec![5, 9], vec![6, 10]]));
        assert!(!monotonic(&[vec![4, 8], vec![5, 10]]));
        assert!(!monotonic(&[vec![4], vec![5, 9]]));
    }

    #[test]
    fn bandwidth_without_pruning_is_one() {
        let s = BandwidthScenario {
            name: "flat".into(),
            description: String::new(),
            calibrated: false,
            geometry: TransferScenario {
                total_layers: 4,
                n_kv_heads: 2,
                head_dim: 4,
                dtype_bytes: 2,
                seq_len: 100,
            },
            prefill_removed_layers: vec![],
            decode_removed_layers: vec![],
            p: 0.3,
            selected_layers: vec![],
            link: LinkModel::default(),
        };
        let r = s.run().unwrap();
        assert_eq!(r.volume.ratio, 1.0);
        assert_eq!(r.volume.bytes_full, 4 * 100 * 32);
    }

    #[test]
    fn unknown_version_rejected() {
        let text = r#"{"format_version": 9, "kind": "bandwidth"}"#;
        assert!(ScenarioFile::from_json(text).is_err());
    }
}
