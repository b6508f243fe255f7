use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Keys and values of one layer. Keys are stored after rotary encoding, so a
/// retained entry keeps the geometry of its original absolute position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// Block slot (index in the unpruned model) that produced this cache.
    pub layer: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub positions: Vec<u32>,
    /// `tokens × n_heads × head_dim`, row-major.
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl LayerCache {
    pub fn new(layer: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            layer,
            n_heads,
            head_dim,
            positions: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn key(&self, entry: usize) -> &[f64] {
        let w = self.width();
        &self.keys[entry * w..(entry + 1) * w]
    }

    pub fn value(&self, entry: usize) -> &[f64] {
        let w = self.width();
        &self.values[entry * w..(entry + 1) * w]
    }

    pub fn push(&mut self, position: u32, key: &[f64], value: &[f64]) {
        debug_assert_eq!(key.len(), self.width());
        debug_assert!(self.positions.last().is_none_or(|&p| p < position));
        self.positions.push(position);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }

    /// Keeps only the entries whose position satisfies `keep`.
    pub fn retain_positions(&self, mut keep: impl FnMut(u32) -> bool) -> LayerCache {
        let mut out = LayerCache::new(self.layer, self.n_heads, self.head_dim);
        for e in 0..self.len() {
            if keep(self.positions[e]) {
                out.push(self.positions[e], self.key(e), self.value(e));
            }
        }
        out
    }

    fn check(&self) -> Result<()> {
        let w = self.width();
        if self.keys.len() != self.len() * w || self.values.len() != self.len() * w {
            return Err(Error::Consistency(format!(
                "layer {}: key/value payload does not match {} entries",
                self.layer,
                self.len()
            )));
        }
        if self.positions.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Consistency(format!(
                "layer {}: positions not strictly increasing",
                self.layer
            )));
        }
        Ok(())
    }
}

/// Prefill positions each layer may attend to during decode. Layers that are
/// absent keep their whole prefill cache. Decode-generated entries are always
/// visible.
pub type RetainedSets = BTreeMap<usize, Vec<u32>>;

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    /// Number of prompt tokens the prefill pass processed.
    pub prefill_len: usize,
    /// Absolute position the next appended token will receive.
    pub next_position: usize,
    pub layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn layer(&self, id: usize) -> Option<&LayerCache> {
        self.layers.iter().find(|l| l.layer == id)
    }

    pub fn layer_mut(&mut self, id: usize) -> Option<&mut LayerCache> {
        self.layers.iter_mut().find(|l| l.layer == id)
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.check()?;
            if l.positions
                .last()
                .is_some_and(|&p| p as usize >= self.next_position)
            {
                return Err(Error::Consistency(format!(
                    "layer {} holds a position beyond next_position {}",
                    l.layer, self.next_position
                )));
            }
        }
        if self.layers.windows(2).any(|w| w[0].layer >= w[1].layer) {
            return Err(Error::Consistency(
                "layer ids not strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Checks that every retained position refers to a prefill entry.
    pub fn check_retained(&self, retained: &RetainedSets) -> Result<()> {
        for (&layer, positions) in retained {
            let cache = self.layer(layer).ok_or_else(|| {
                Error::Argument(format!(
                    "retention given for layer {layer} which has no cache"
                ))
            })?;
            if positions.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Argument(format!(
                    "retained positions for layer {layer} not strictly increasing"
                )));
            }
            for &p in positions {
                if p as usize >= self.prefill_len || cache.positions.binary_search(&p).is_err() {
                    return Err(Error::Argument(format!(
                        "retained position {p} out of range for layer {layer} (prefill length {})",
                        self.prefill_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Physically drops the prefill entries a retention plan hides.
    pub fn pruned(&self, retained: &RetainedSets) -> Result<KVCache> {
        self.check_retained(retained)?;
        let prefill_len = self.prefill_len as u32;
        let layers = self
            .layers
            .iter()
            .map(|l| match retained.get(&l.layer) {
                None => l.clone(),
                Some(keep) => {
                    l.retain_positions(|p| p >= prefill_len || keep.binary_search(&p).is_ok())
                }
            })
            .collect();
        Ok(KVCache {
            prefill_len: self.prefill_len,
            next_position: self.next_position,
            layers,
        })
    }

    /// Restricts the cache to the given layer ids, preserving order.
    pub fn only_layers(&self, ids: &[usize]) -> KVCache {
        KVCache {
            prefill_len: self.prefill_len,
            next_position: self.next_position,
            layers: self
                .layers
                .iter()
                .filter(|l| ids.contains(&l.layer))
                .cloned()
                .collect(),
        }
    }
}
