//! A small decoder-only transformer with KV caching and instrumentation.
//!
//! Blocks are addressed by *slot*: their index in the unpruned model. A
//! [`ModelView`] is an ordered list of slots with the block that runs there,
//! which is how removal plans (skipped slots) and merged blocks (a slot
//! running substitute weights) are applied without copying the model.

mod block;
pub mod calibration;
pub mod checkpoint;
mod config;
mod kv;
pub mod train;

use std::collections::BTreeSet;

use rand::Rng as _;
use sha2::{Digest, Sha256};

pub use block::{rope, Block, BlockShape, BlockTape};
pub use config::{Dtype, ModelConfig};
pub use kv::{KVCache, LayerCache, RetainedSets};

use crate::error::{Error, Result};
use crate::linalg::{argmax, matmul, rmsnorm};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub embedding: Vec<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    /// `d_model × vocab`
    pub unembed: Vec<f64>,
}

/// Input and output hidden states of every executed block, stacked over all
/// samples and token positions (`rows × d_model` per level).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenTrace {
    pub d_model: usize,
    pub rows: usize,
    /// Slot of the block that produced level `i + 1`.
    pub slots: Vec<usize>,
    /// `slots.len() + 1` levels; level 0 is the embedding output.
    pub levels: Vec<Vec<f64>>,
}

impl HiddenTrace {
    pub fn row(&self, level: usize, row: usize) -> &[f64] {
        &self.levels[level][row * self.d_model..(row + 1) * self.d_model]
    }

    /// Appends another trace taken through the same blocks.
    pub fn extend(&mut self, other: &HiddenTrace) -> Result<()> {
        if self.levels.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.slots != other.slots || self.d_model != other.d_model {
            return Err(Error::Consistency(
                "cannot merge traces taken through different blocks".into(),
            ));
        }
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.extend_from_slice(b);
        }
        self.rows += other.rows;
        Ok(())
    }
}

/// Attention mass per key position, accumulated over query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub layer: usize,
    /// Per head, summed attention rows (length `n_tokens`).
    pub head_sums: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub n_tokens: usize,
    /// Number of query rows summed into each head.
    pub rows: usize,
    pub layers: Vec<LayerAttention>,
}

impl AttentionStats {
    /// Averaged attention distribution of one head; sums to one.
    pub fn distribution(&self, layer_index: usize, head: usize) -> Vec<f64> {
        self.layers[layer_index].head_sums[head]
            .iter()
            .map(|s| s / self.rows as f64)
            .collect()
    }

    /// Builds stats straight from per-head distributions (one row each).
    pub fn from_distributions(n_tokens: usize, layers: Vec<(usize, Vec<Vec<f64>>)>) -> Self {
        Self {
            n_tokens,
            rows: 1,
            layers: layers
                .into_iter()
                .map(|(layer, head_sums)| LayerAttention { layer, head_sums })
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &AttentionStats) -> Result<()> {
        if self.n_tokens != other.n_tokens || self.layers.len() != other.layers.len() {
            return Err(Error::Consistency(
                "attention statistics need equal sequence lengths and layer sets".into(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.layer != b.layer {
                return Err(Error::Consistency(
                    "attention statistics layer mismatch".into(),
                ));
            }
            for (ha, hb) in a.head_sums.iter_mut().zip(&b.head_sums) {
                for (x, y) in ha.iter_mut().zip(hb) {
                    *x += y;
                }
            }
        }
        self.rows += other.rows;
        Ok(())
    }

    /// Keeps only the listed layers.
    pub fn restrict(&self, layers: &[usize]) -> AttentionStats {
        AttentionStats {
            n_tokens: self.n_tokens,
            rows: self.rows,
            layers: self
                .layers
                .iter()
                .filter(|l| layers.contains(&l.layer))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// `tokens × vocab`
    pub logits: Vec<f64>,
    pub trace: HiddenTrace,
    pub cache: KVCache,
    pub attention: AttentionStats,
}

impl PrefillOutput {
    pub fn last_logits(&self, vocab: usize) -> &[f64] {
        &self.logits[self.logits.len() - vocab..]
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// `(slot, number of cache entries attended to)` per executed layer.
    pub support: Vec<(usize, usize)>,
}

/// A block running at a given slot.
#[derive(Debug, Clone, Copy)]
pub struct ViewLayer<'a> {
    pub slot: usize,
    pub block: &'a Block,
}

#[derive(Debug, Clone)]
pub struct ModelView<'a> {
    pub model: &'a TransformerModel,
    pub layers: Vec<ViewLayer<'a>>,
}

pub(crate) struct SeqForward {
    pub tapes: Vec<BlockTape>,
    pub final_in: Vec<f64>,
    pub final_norm: Vec<f64>,
    pub final_rms: Vec<f64>,
    pub logits: Vec<f64>,
}

impl TransformerModel {
    /// Deterministic random parameters for `config`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::ModelInit);
        let shape = Self::shape_of(&config);
        let d = config.d_model;
        let v = config.vocab;
        let embedding = (0..v * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let blocks = (0..config.n_blocks)
            .map(|_| Block::init(shape, &mut rng))
            .collect();
        let a = (3.0 / d as f64).sqrt();
        let unembed = (0..d * v).map(|_| rng.gen_range(-a..a)).collect();
        let mut model = Self {
            config,
            embedding,
            blocks,
            final_norm: vec![1.0; d],
            unembed,
        };
        model.round_to_dtype();
        Ok(model)
    }

    fn shape_of(config: &ModelConfig) -> BlockShape {
        BlockShape {
            d_model: config.d_model,
            n_heads: config.n_heads,
            head_dim: config.head_dim,
            d_ff: config.d_ff,
        }
    }

    pub fn block_shape(&self) -> BlockShape {
        Self::shape_of(&self.config)
    }

    pub fn round_to_dtype(&mut self) {
        let dt = self.config.dtype;
        for p in self.params_mut() {
            dt.round_slice(p);
        }
    }

    /// All parameter tensors in checkpoint order.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.embedding];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.push(&self.final_norm);
        out.push(&self.unembed);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            embedding: vec![0.0; self.embedding.len()],
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            final_norm: vec![0.0; self.final_norm.len()],
            unembed: vec![0.0; self.unembed.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Stable 64-bit fingerprint of config and parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(checkpoint::config_bytes(&self.config));
        for p in self.params() {
            for x in p {
                h.update(x.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
    }

    /// View that skips the `removed` slots.
    pub fn view(&self, removed: &BTreeSet<usize>) -> Result<ModelView<'_>> {
        if let Some(&bad) = removed.iter().find(|&&i| i >= self.blocks.len()) {
            return Err(Error::Argument(format!(
                "block {bad} out of range for a {}-block model",
                self.blocks.len()
            )));
        }
        let layers: Vec<_> = self
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(slot, block)| ViewLayer { slot, block })
            .collect();
        ModelView::new(self, layers)
    }

    pub fn full_view(&self) -> ModelView<'_> {
        self.view(&BTreeSet::new())
            .expect("full view is always valid")
    }

    /// A new model physically rebuilt without the `removed` blocks.
    pub fn without_blocks(&self, removed: &BTreeSet<usize>) -> Result<TransformerModel> {
        let blocks: Vec<Block> = self
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, b)| b.clone())
            .collect();
        if blocks.is_empty() {
            return Err(Error::EmptyModel);
        }
        let mut config = self.config;
        config.n_blocks = blocks.len();
        Ok(TransformerModel {
            config,
            embedding: self.embedding.clone(),
            blocks,
            final_norm: self.final_norm.clone(),
            unembed: self.unembed.clone(),
        })
    }

    /// Prefill with the `removed` blocks skipped.
    pub fn forward_prefill(
        &self,
        tokens: &[u32],
        removed: &BTreeSet<usize>,
    ) -> Result<PrefillOutput> {
        self.view(removed)?.prefill(tokens)
    }

    /// One decode step with the `removed` blocks skipped. Selected layers
    /// attend only to their retained prefill positions.
    pub fn decode_step(
        &self,
        token: u32,
        cache: &mut KVCache,
        retained: &RetainedSets,
        removed: &BTreeSet<usize>,
    ) -> Result<StepOutput> {
        self.view(removed)?.decode_step(token, cache, retained)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Argument(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            x.extend_from_slice(&self.embedding[t * d..(t + 1) * d]);
        }
        x
    }

    fn head(&self, x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (nf, rms) = rmsnorm(x, &self.final_norm);
        let logits = matmul(
            &nf,
            &self.unembed,
            rows,
            self.config.d_model,
            self.config.vocab,
        );
        (nf, rms, logits)
    }
}

impl<'a> ModelView<'a> {
    pub fn new(model: &'a TransformerModel, layers: Vec<ViewLayer<'a>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyModel);
        }
        if layers.windows(2).any(|w| w[0].slot >= w[1].slot) {
            return Err(Error::Consistency(
                "view slots must be strictly increasing".into(),
            ));
        }
        Ok(Self { model, layers })
    }

    pub fn slots(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.slot).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn check_prompt(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if tokens.len() > self.model.config.max_seq {
            return Err(Error::Argument(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.model.config.max_seq
            )));
        }
        self.model.check_tokens(tokens)
    }

    pub(crate) fn forward_seq(&self, tokens: &[u32]) -> Result<SeqForward> {
        self.check_prompt(tokens)?;
        let positions: Vec<u32> = (0..tokens.len() as u32).collect();
        let mut x = self.model.embed(tokens);
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let tape = layer.block.forward_seq(&x, &positions);
            x = tape.out.clone();
            tapes.push(tape);
        }
        let (final_norm, final_rms, logits) = self.model.head(&x, tokens.len());
        Ok(SeqForward {
            tapes,
            final_in: x,
            final_norm,
            final_rms,
            logits,
        })
    }

    /// Logits only (`tokens × vocab`).
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward_seq(tokens)?.logits)
    }

    /// Full prefill: logits, hidden trace, KV cache and attention stats.
    pub fn prefill(&self, tokens: &[u32]) -> Result<PrefillOutput> {
        let fwd = self.forward_seq(tokens)?;
        let cfg = &self.model.config;
        let t_len = tokens.len();
        let mut levels = Vec::with_capacity(self.layers.len() + 1);
        levels.push(self.model.embed(tokens));
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut attn = Vec::with_capacity(self.layers.len());
        for (layer, tape) in self.layers.iter().zip(&fwd.tapes) {
            levels.push(tape.out.clone());
            let mut cache = LayerCache::new(layer.slot, cfg.n_heads, cfg.head_dim);
            cache.positions = tape.positions.clone();
            cache.keys = tape.k.iter().map(|&v| cfg.dtype.round(v)).collect();
            cache.values = tape.v.iter().map(|&v| cfg.dtype.round(v)).collect();
            layers.push(cache);

            let head_sums = (0..cfg.n_heads)
                .map(|h| {
                    let mut sums = vec![0.0; t_len];
                    for row in tape.probs[h * t_len * t_len..(h + 1) * t_len * t_len].chunks(t_len)
                    {
                        for (s, p) in sums.iter_mut().zip(row) {
                            *s += p;
                        }
                    }
                    sums
                })
                .collect();
            attn.push(LayerAttention {
                layer: layer.slot,
                head_sums,
            });
        }
        Ok(PrefillOutput {
            logits: fwd.logits,
            trace: HiddenTrace {
                d_model: cfg.d_model,
                rows: t_len,
                slots: self.slots(),
                levels,
            },
            cache: KVCache {
                prefill_len: t_len,
                next_position: t_len,
                layers,
            },
            attention: AttentionStats {
                n_tokens: t_len,
                rows: t_len,
                layers: attn,
            },
        })
    }

    /// Feeds one token at the cache's next position. Every executed slot must
    /// have a cache layer; the new entry is appended un-pruned.
    pub fn decode_step(
        &self,
        token: u32,
        cache: &mut KVCache,
        retained: &RetainedSets,
    ) -> Result<StepOutput> {
        let cfg = &self.model.config;
        self.model.check_tokens(&[token])?;
        if cache.next_position >= cfg.max_seq {
            return Err(Error::Argument(format!(
                "position {} exceeds max_seq {}",
                cache.next_position, cfg.max_seq
            )));
        }
        cache.check_retained(retained)?;
        for layer in &self.layers {
            if cache.layer(layer.slot).is_none() {
                return Err(Error::Consistency(format!(
                    "no cache for executed block {}",
                    layer.slot
                )));
            }
        }
        let position = cache.next_position as u32;
        let prefill_len = cache.prefill_len;
        let dtype = cfg.dtype;
        let mut x = self.model.embed(&[token]);
        let mut support = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let lc = cache.layer_mut(layer.slot).expect("checked above");
            let (out, n) = layer.block.forward_step(
                &x,
                position,
                lc,
                retained.get(&layer.slot).map(Vec::as_slice),
                prefill_len,
                |v| dtype.round(v),
            );
            support.push((layer.slot, n));
            x = out;
        }
        cache.next_position += 1;
        let (_, _, logits) = self.model.head(&x, 1);
        Ok(StepOutput { logits, support })
    }

    /// Plain greedy generation with the full cache.
    pub fn generate(&self, prompt: &[u32], steps: usize) -> Result<Vec<u32>> {
        let vocab = self.model.config.vocab;
        let pre = self.prefill(prompt)?;
        let mut token = argmax(pre.last_logits(vocab)) as u32;
        let mut cache = pre.cache;
        let mut out = vec![token];
        for _ in 0..steps {
            let step = self.decode_step(token, &mut cache, &RetainedSets::new())?;
            token = argmax(&step.logits) as u32;
            out.push(token);
        }
        Ok(out)
    }
}

/// Runs `tokens` through the model with the `removed` blocks skipped.
pub fn forward_prefill(
    model: &TransformerModel,
    tokens: &[u32],
    removed: &BTreeSet<usize>,
) -> Result<PrefillOutput> {
    model.forward_prefill(tokens, removed)
}
