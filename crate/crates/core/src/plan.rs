//! Removal elements, stage plans, and the model views they induce.
//!
//! Every element removes exactly one block. `Prune(i)` skips slot `i`.
//! `Distill(i)` replaces the pair `(i, i+1)` by one merged block that runs at
//! slot `i`; slot `i + 1` is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Block, ModelView, TransformerModel, ViewLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RemovalElement {
    Prune { block: usize },
    Distill { first: usize },
}

impl RemovalElement {
    pub fn blocks(&self) -> Vec<usize> {
        match *self {
            RemovalElement::Prune { block } => vec![block],
            RemovalElement::Distill { first } => vec![first, first + 1],
        }
    }

    pub fn first_block(&self) -> usize {
        match *self {
            RemovalElement::Prune { block } => block,
            RemovalElement::Distill { first } => first,
        }
    }

    pub fn last_block(&self) -> usize {
        match *self {
            RemovalElement::Prune { block } => block,
            RemovalElement::Distill { first } => first + 1,
        }
    }

    /// The slot a view skips for this element.
    pub fn removed_slot(&self) -> usize {
        self.last_block()
    }

    /// Selection weight: `r_i` for a prune, the pair mean for a distill.
    pub fn weight(&self, redundancy: &[f64]) -> f64 {
        match *self {
            RemovalElement::Prune { block } => redundancy[block],
            RemovalElement::Distill { first } => 0.5 * (redundancy[first] + redundancy[first + 1]),
        }
    }

    pub fn overlaps(&self, other: &RemovalElement) -> bool {
        self.first_block() <= other.last_block() && other.first_block() <= self.last_block()
    }

    /// Ordering key: ascending first block, prunes before distills.
    pub fn sort_key(&self) -> (usize, u8) {
        match *self {
            RemovalElement::Prune { block } => (block, 0),
            RemovalElement::Distill { first } => (first, 1),
        }
    }
}

impl PartialOrd for RemovalElement {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RemovalElement {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for RemovalElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RemovalElement::Prune { block } => write!(f, "prune({block})"),
            RemovalElement::Distill { first } => write!(f, "distill({first},{})", first + 1),
        }
    }
}

/// True when no two elements share a block.
pub fn block_disjoint(elements: &[RemovalElement]) -> bool {
    let mut seen = BTreeSet::new();
    elements
        .iter()
        .flat_map(|e| e.blocks())
        .all(|b| seen.insert(b))
}

/// Removed slots for a set of elements, checked against the block count.
pub fn removed_slots(elements: &[RemovalElement], n_blocks: usize) -> Result<BTreeSet<usize>> {
    if !block_disjoint(elements) {
        return Err(Error::Consistency("removal elements overlap".into()));
    }
    if let Some(e) = elements.iter().find(|e| e.last_block() >= n_blocks) {
        return Err(Error::Argument(format!(
            "{e} out of range for {n_blocks} blocks"
        )));
    }
    Ok(elements.iter().map(RemovalElement::removed_slot).collect())
}

/// Slots still executing after `elements` are applied.
pub fn remaining_slots(elements: &[RemovalElement], n_blocks: usize) -> Result<BTreeSet<usize>> {
    let removed = removed_slots(elements, n_blocks)?;
    Ok((0..n_blocks).filter(|s| !removed.contains(s)).collect())
}

/// Per-stage removal sets. The prefill set must be a subset of the decode
/// set so every block the decode node runs has a cache from prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StagePlan {
    pub prefill_removals: Vec<RemovalElement>,
    pub decode_removals: Vec<RemovalElement>,
    pub threshold: f64,
}

impl StagePlan {
    /// Same removals in both stages.
    pub fn unified(elements: Vec<RemovalElement>) -> Self {
        Self {
            prefill_removals: elements.clone(),
            decode_removals: elements,
            threshold: f64::INFINITY,
        }
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        removed_slots(&self.prefill_removals, n_blocks)?;
        removed_slots(&self.decode_removals, n_blocks)?;
        if let Some(e) = self
            .prefill_removals
            .iter()
            .find(|e| !self.decode_removals.contains(e))
        {
            return Err(Error::Consistency(format!(
                "prefill removal {e} is not part of the decode removals"
            )));
        }
        Ok(())
    }

    pub fn prefill_slots(&self, n_blocks: usize) -> Result<BTreeSet<usize>> {
        remaining_slots(&self.prefill_removals, n_blocks)
    }

    pub fn decode_slots(&self, n_blocks: usize) -> Result<BTreeSet<usize>> {
        remaining_slots(&self.decode_removals, n_blocks)
    }

    /// Elements removed only on the decode node.
    pub fn decode_only(&self) -> Vec<RemovalElement> {
        self.decode_removals
            .iter()
            .filter(|e| !self.prefill_removals.contains(e))
            .copied()
            .collect()
    }
}

/// A block trained to stand in for the pair `(first, first + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedBlock {
    pub first: usize,
    pub block: Block,
    pub steps: usize,
    pub final_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergedBlocks {
    map: BTreeMap<usize, MergedBlock>,
}

impl MergedBlocks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, merged: MergedBlock) {
        self.map.insert(merged.first, merged);
    }

    pub fn get(&self, first: usize) -> Option<&MergedBlock> {
        self.map.get(&first)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MergedBlock> {
        self.map.values()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Untrained stand-ins: each pair starts from the weights of its less
    /// redundant block (lower `r`, first block on ties).
    pub fn initialized(model: &TransformerModel, firsts: &[usize], redundancy: &[f64]) -> Self {
        let mut out = Self::new();
        for &first in firsts {
            out.insert(MergedBlock {
                first,
                block: crate::distill::init_merged_block(model, first, redundancy),
                steps: 0,
                final_mse: f64::NAN,
            });
        }
        out
    }
}

/// View of `model` with `elements` applied.
pub fn element_view<'a>(
    model: &'a TransformerModel,
    elements: &[RemovalElement],
    merged: &'a MergedBlocks,
) -> Result<ModelView<'a>> {
    let n = model.blocks.len();
    let removed = removed_slots(elements, n)?;
    let mut substitute = BTreeMap::new();
    for e in elements {
        if let RemovalElement::Distill { first } = *e {
            let m = merged
                .get(first)
                .ok_or_else(|| Error::Consistency(format!("no merged block for {e}")))?;
            substitute.insert(first, &m.block);
        }
    }
    let layers = (0..n)
        .filter(|s| !removed.contains(s))
        .map(|slot| ViewLayer {
            slot,
            block: substitute
                .get(&slot)
                .copied()
                .unwrap_or(&model.blocks[slot]),
        })
        .collect();
    ModelView::new(model, layers)
}

/// The prefill and decode views of one stage plan.
#[derive(Debug, Clone)]
pub struct StageViews<'a> {
    pub prefill: ModelView<'a>,
    pub decode: ModelView<'a>,
    pub fingerprint: u64,
}

impl<'a> StageViews<'a> {
    pub fn new(
        model: &'a TransformerModel,
        plan: &StagePlan,
        merged: &'a MergedBlocks,
    ) -> Result<Self> {
        plan.validate(model.blocks.len())?;
        Ok(Self {
            prefill: element_view(model, &plan.prefill_removals, merged)?,
            decode: element_view(model, &plan.decode_removals, merged)?,
            fingerprint: fingerprint(model, merged),
        })
    }

    /// Views without the subset check, for evaluating arbitrary pairs of
    /// removal sets. The decode view's slots must still have caches.
    pub fn unchecked(
        model: &'a TransformerModel,
        prefill: &[RemovalElement],
        decode: &[RemovalElement],
        merged: &'a MergedBlocks,
    ) -> Result<Self> {
        Ok(Self {
            prefill: element_view(model, prefill, merged)?,
            decode: element_view(model, decode, merged)?,
            fingerprint: fingerprint(model, merged),
        })
    }
}

/// Identity of a base model together with its merged blocks.
pub fn fingerprint(model: &TransformerModel, merged: &MergedBlocks) -> u64 {
    if merged.is_empty() {
        return model.fingerprint();
    }
    let mut h = Sha256::new();
    h.update(model.fingerprint().to_le_bytes());
    for m in merged.iter() {
        h.update((m.first as u64).to_le_bytes());
        for p in m.block.params() {
            for x in p {
                h.update(x.to_le_bytes());
            }
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn element_geometry() {
        let p = RemovalElement::Prune { block: 3 };
        let d = RemovalElement::Distill { first: 3 };
        assert_eq!(d.blocks(), vec![3, 4]);
        assert_eq!(d.removed_slot(), 4);
        assert!(p.overlaps(&d));
        assert!(!RemovalElement::Prune { block: 5 }.overlaps(&d));
        assert!(!block_disjoint(&[p, d]));
        assert_eq!(d.weight(&[0.0, 0.0, 0.0, 0.8, 0.9]), 0.5 * (0.8 + 0.9));
    }

    #[test]
    fn subset_rule_enforced() {
        let plan = StagePlan {
            prefill_removals: vec![RemovalElement::Prune { block: 1 }],
            decode_removals: vec![RemovalElement::Prune { block: 2 }],
            threshold: 0.03,
        };
        assert!(matches!(plan.validate(4), Err(Error::Consistency(_))));
    }

    #[test]
    fn views_substitute_merged_blocks() {
        let model = TransformerModel::build(ModelConfig::new(4, 8, 2, 8, 16), 2).unwrap();
        let r = [0.9, 0.5, 0.7, 0.6];
        let merged = MergedBlocks::initialized(&model, &[1], &r);
        let plan = StagePlan {
            prefill_removals: vec![],
            decode_removals: vec![RemovalElement::Distill { first: 1 }],
            threshold: 0.03,
        };
        let views = StageViews::new(&model, &plan, &merged).unwrap();
        assert_eq!(views.prefill.slots(), vec![0, 1, 2, 3]);
        assert_eq!(views.decode.slots(), vec![0, 1, 3]);
        // r[1] < r[2], so slot 1 keeps block 1's weights.
        assert_eq!(views.decode.layers[1].block, &model.blocks[1]);
        let empty = MergedBlocks::new();
        assert!(matches!(
            StageViews::new(&model, &plan, &empty),
            Err(Error::Consistency(_))
        ));
    }
}
