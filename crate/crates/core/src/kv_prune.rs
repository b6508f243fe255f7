//! Layer selection for first/last-token KV retention and the transfer
//! volume it saves.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionStats, RetainedSets};
use crate::plan::StagePlan;

pub const DEFAULT_P: f64 = 0.3;
pub const DEFAULT_GAMMA: f64 = 0.75;
pub const RHO_EPSILON: f64 = 1e-12;

fn check_p(p: f64) -> Result<()> {
    if !(0.0..0.5).contains(&p) {
        return Err(Error::Argument(format!(
            "retention ratio p = {p} must lie in [0, 0.5)"
        )));
    }
    Ok(())
}

/// `⌊pN⌋`, guarded against products that land a hair below an integer.
pub fn keep_each_end(n_tokens: usize, p: f64) -> usize {
    (p * n_tokens as f64 + 1e-9).floor() as usize
}

/// Attention mass on the first and last `⌊pN⌋` tokens.
pub fn head_score(attention: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    let n = attention.len();
    let m = keep_each_end(n, p);
    Ok(attention[..m].iter().sum::<f64>() + attention[n - m..].iter().sum::<f64>())
}

/// Layers whose every head scores at least `gamma`.
pub fn filter_layers(scores: &[(usize, Vec<f64>)], gamma: f64) -> Vec<usize> {
    scores
        .iter()
        .filter(|(_, heads)| heads.iter().all(|&s| s >= gamma))
        .map(|(layer, _)| *layer)
        .collect()
}

/// `ρ = μ (1 − σ / (μ + ε))` with the population standard deviation.
pub fn layer_score(heads: &[f64], epsilon: f64) -> f64 {
    let n = heads.len() as f64;
    let mu = heads.iter().sum::<f64>() / n;
    let var = heads.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    mu * (1.0 - var.sqrt() / (mu + epsilon))
}

/// Head-end indices `{0..m−1} ∪ {N−m..N−1}` with `m = ⌊pN⌋`.
pub fn retention_indices(n_tokens: usize, p: f64) -> Result<Vec<u32>> {
    check_p(p)?;
    if n_tokens < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 tokens, got {n_tokens}"
        )));
    }
    let m = keep_each_end(n_tokens, p);
    if m == 0 {
        log::warn!("retention ratio {p} keeps no tokens of {n_tokens}; selected layers drop their prefill cache");
    }
    Ok((0..m)
        .chain(n_tokens - m..n_tokens)
        .map(|i| i as u32)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub head_scores: Vec<f64>,
    pub rho: f64,
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KVSelectionPlan {
    pub p: f64,
    pub gamma: f64,
    /// Requested layer count.
    pub n: usize,
    pub selected_layers: Vec<usize>,
    pub scores: Vec<LayerScore>,
}

impl KVSelectionPlan {
    /// A plan that prunes nothing.
    pub fn disabled(p: f64, gamma: f64) -> Self {
        Self {
            p,
            gamma,
            n: 0,
            selected_layers: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn is_selected(&self, layer: usize) -> bool {
        self.selected_layers.contains(&layer)
    }

    /// Retained prefill positions for each selected layer present in
    /// `layers`, for a prompt of `n_tokens`.
    pub fn retained_sets(&self, n_tokens: usize, layers: &[usize]) -> Result<RetainedSets> {
        if self.selected_layers.is_empty() {
            return Ok(RetainedSets::new());
        }
        let keep = retention_indices(n_tokens, self.p)?;
        Ok(self
            .selected_layers
            .iter()
            .filter(|l| layers.contains(l))
            .map(|&l| (l, keep.clone()))
            .collect())
    }
}

/// Selection from precomputed head scores: filter by `gamma`, rank by `ρ`
/// (lower layer on ties) and take `n`.
pub fn select_from_scores(
    head_scores: &[(usize, Vec<f64>)],
    p: f64,
    gamma: f64,
    n: usize,
) -> Result<KVSelectionPlan> {
    check_p(p)?;
    let admissible: BTreeSet<usize> = filter_layers(head_scores, gamma).into_iter().collect();
    let scores: Vec<LayerScore> = head_scores
        .iter()
        .map(|(layer, heads)| LayerScore {
            layer: *layer,
            head_scores: heads.clone(),
            rho: layer_score(heads, RHO_EPSILON),
            admissible: admissible.contains(layer),
        })
        .collect();
    let mut ranked: Vec<&LayerScore> = scores.iter().filter(|s| s.admissible).collect();
    ranked.sort_by(|a, b| b.rho.total_cmp(&a.rho).then(a.layer.cmp(&b.layer)));
    if n > ranked.len() {
        log::warn!(
            "requested {n} KV-pruned layers but only {} pass the gamma = {gamma} filter",
            ranked.len()
        );
    }
    let mut selected_layers: Vec<usize> = ranked.iter().take(n).map(|s| s.layer).collect();
    selected_layers.sort_unstable();
    debug_assert!(selected_layers.iter().all(|l| admissible.contains(l)));
    Ok(KVSelectionPlan {
        p,
        gamma,
        n,
        selected_layers,
        scores,
    })
}

/// Head scores of every layer in `stats`.
pub fn head_scores(stats: &AttentionStats, p: f64) -> Result<Vec<(usize, Vec<f64>)>> {
    stats
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let heads = (0..l.head_sums.len())
                .map(|h| head_score(&stats.distribution(i, h), p))
                .collect::<Result<Vec<f64>>>()?;
            Ok((l.layer, heads))
        })
        .collect()
}

pub fn select_layers(
    stats: &AttentionStats,
    p: f64,
    gamma: f64,
    n: usize,
) -> Result<KVSelectionPlan> {
    select_from_scores(&head_scores(stats, p)?, p, gamma, n)
}

/// Model geometry for byte counting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferScenario {
    pub total_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub dtype_bytes: usize,
    pub seq_len: usize,
}

impl TransferScenario {
    pub fn validate(&self) -> Result<()> {
        if self.total_layers == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
            || self.dtype_bytes == 0
            || self.seq_len == 0
        {
            return Err(Error::Argument(
                "transfer scenario counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// K plus V bytes for one token in one layer.
    pub fn bytes_per_token_layer(&self) -> u64 {
        2 * (self.n_kv_heads * self.head_dim * self.dtype_bytes) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferVolume {
    pub bytes_full: u64,
    pub bytes_pruned: u64,
    pub ratio: f64,
}

impl TransferVolume {
    pub fn new(bytes_full: u64, bytes_pruned: u64) -> Self {
        let ratio = if bytes_pruned == 0 {
            if bytes_full == 0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            bytes_full as f64 / bytes_pruned as f64
        };
        Self {
            bytes_full,
            bytes_pruned,
            ratio,
        }
    }
}

/// Bytes shipped without and with pruning. Without pruning every layer
/// the prefill node runs is sent whole; with pruning, layers the decode node
/// skips are dropped and selected layers carry `2⌊pN⌋` tokens.
pub fn transfer_volume(
    scenario: &TransferScenario,
    prefill_layers: &BTreeSet<usize>,
    decode_layers: &BTreeSet<usize>,
    selected_layers: &[usize],
    p: f64,
) -> Result<TransferVolume> {
    scenario.validate()?;
    check_p(p)?;
    let total = scenario.total_layers;
    if let Some(l) = prefill_layers
        .iter()
        .chain(decode_layers)
        .chain(selected_layers)
        .find(|&&l| l >= total)
    {
        return Err(Error::Consistency(format!(
            "layer {l} out of range for {total} layers"
        )));
    }
    if let Some(l) = decode_layers.difference(prefill_layers).next() {
        return Err(Error::Consistency(format!(
            "decode layer {l} has no prefill cache (prefill plan must be a subset of the decode plan)"
        )));
    }
    let b = scenario.bytes_per_token_layer();
    let n = scenario.seq_len as u64;
    let kept = 2 * keep_each_end(scenario.seq_len, p) as u64;
    let full = prefill_layers.len() as u64 * n * b;
    let pruned = decode_layers
        .iter()
        .map(|l| {
            if selected_layers.contains(l) {
                kept * b
            } else {
                n * b
            }
        })
        .sum();
    Ok(TransferVolume::new(full, pruned))
}

/// [`transfer_volume`] with layer sets taken from a stage plan.
pub fn transfer_volume_for_plan(
    scenario: &TransferScenario,
    plan: &StagePlan,
    kv_plan: &KVSelectionPlan,
) -> Result<TransferVolume> {
    plan.validate(scenario.total_layers)?;
    transfer_volume(
        scenario,
        &plan.prefill_slots(scenario.total_layers)?,
        &plan.decode_slots(scenario.total_layers)?,
        &kv_plan.selected_layers,
        kv_plan.p,
    )
}

/// Serialised form of `kvplan.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvPlanReport {
    pub format_version: u32,
    pub p: f64,
    pub gamma: f64,
    pub n: usize,
    pub selected_layers: Vec<usize>,
    /// Prompt length the retained ranges below refer to.
    pub n_tokens: usize,
    /// Half-open `[start, end)` ranges per selected layer.
    pub retained_ranges: Vec<RetainedRange>,
    pub scores: Vec<LayerScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedRange {
    pub layer: usize,
    pub head: [usize; 2],
    pub tail: [usize; 2],
}

impl KvPlanReport {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(plan: &KVSelectionPlan, n_tokens: usize) -> Self {
        let m = keep_each_end(n_tokens, plan.p);
        Self {
            format_version: Self::FORMAT_VERSION,
            p: plan.p,
            gamma: plan.gamma,
            n: plan.n,
            selected_layers: plan.selected_layers.clone(),
            n_tokens,
            retained_ranges: plan
                .selected_layers
                .iter()
                .map(|&layer| RetainedRange {
                    layer,
                    head: [0, m],
                    tail: [n_tokens - m, n_tokens],
                })
                .collect(),
            scores: plan.scores.clone(),
        }
    }

    pub fn plan(&self) -> Result<KVSelectionPlan> {
        if self.format_version != Self::FORMAT_VERSION {
            return Err(Error::Consistency(format!(
                "kvplan format_version {} unsupported",
                self.format_version
            )));
        }
        check_p(self.p)?;
        Ok(KVSelectionPlan {
            p: self.p,
            gamma: self.gamma,
            n: self.n,
            selected_layers: self.selected_layers.clone(),
            scores: self.scores.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_score_examples() {
        let a = [0.4, 0.05, 0.05, 0.05, 0.05, 0.4];
        assert!((head_score(&a, 1.0 / 6.0).unwrap() - 0.8).abs() < 1e-12);
        assert!((head_score(&[0.1; 10], 0.3).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(head_score(&a, 0.5), Err(Error::Argument(_))));
        assert_eq!(keep_each_end(100, 0.29), 29);
    }

    #[test]
    fn filter_examples() {
        let scores = vec![(0, vec![0.8, 0.76, 0.9]), (1, vec![0.8, 0.74])];
        assert_eq!(filter_layers(&scores, 0.75), vec![0]);
        assert_eq!(filter_layers(&scores, 0.0), vec![0, 1]);
    }

    #[test]
    fn rho_examples() {
        assert!((layer_score(&[0.8, 0.8, 0.8], RHO_EPSILON) - 0.8).abs() < 1e-12);
        assert!((layer_score(&[0.6, 1.0], RHO_EPSILON) - 0.6).abs() < 1e-12);
        assert_eq!(layer_score(&[0.0, 0.0], RHO_EPSILON), 0.0);
    }

    #[test]
    fn selection_examples() {
        let scores: Vec<_> = [0.6, 0.9, 0.7, 0.85]
            .iter()
            .enumerate()
            .map(|(l, &s)| (l, vec![s; 2]))
            .collect();
        let plan = select_from_scores(&scores, 0.3, 0.5, 2).unwrap();
        assert_eq!(plan.selected_layers, vec![1, 3]);
        assert!(select_from_scores(&scores, 0.3, 0.5, 0)
            .unwrap()
            .selected_layers
            .is_empty());
        assert_eq!(
            select_from_scores(&scores, 0.3, 0.8, 5)
                .unwrap()
                .selected_layers,
            vec![1, 3]
        );
    }

    #[test]
    fn retention_examples() {
        assert_eq!(retention_indices(10, 0.3).unwrap(), vec![0, 1, 2, 7, 8, 9]);
        assert_eq!(retention_indices(5, 0.3).unwrap(), vec![0, 4]);
        assert!(retention_indices(3, 0.2).unwrap().is_empty());
        assert!(retention_indices(1, 0.2).is_err());
    }

    #[test]
    fn volume_examples() {
        // 8 bytes per token per layer: 2 * 1 head * 2 dims * 2 bytes.
        let sc = TransferScenario {
            total_layers: 4,
            n_kv_heads: 1,
            head_dim: 2,
            dtype_bytes: 2,
            seq_len: 100,
        };
        let all: BTreeSet<usize> = (0..4).collect();
        let v = transfer_volume(&sc, &all, &all, &[1, 2], 0.3).unwrap();
        assert_eq!((v.bytes_full, v.bytes_pruned), (3200, 2560));
        assert_eq!(v.ratio, 1.25);
        assert_eq!(
            transfer_volume(&sc, &all, &all, &[], 0.3).unwrap().ratio,
            1.0
        );
        let fewer: BTreeSet<usize> = (0..3).collect();
        assert!(matches!(
            transfer_volume(&sc, &fewer, &all, &[], 0.3),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn report_round_trip() {
        let scores: Vec<_> = (0..3).map(|l| (l, vec![0.9, 0.8])).collect();
        let plan = select_from_scores(&scores, 0.25, 0.75, 2).unwrap();
        let rep = KvPlanReport::new(&plan, 16);
        assert_eq!(rep.retained_ranges[0].head, [0, 4]);
        assert_eq!(rep.retained_ranges[0].tail, [12, 16]);
        let back: KvPlanReport =
            serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back.plan().unwrap(), plan);
    }
}
