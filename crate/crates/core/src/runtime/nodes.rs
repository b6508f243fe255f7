//! The prefill node, the decode node, and the single-process reference.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{TransferManifest, WireDtype};
use crate::codec::Reader;
use crate::error::{Error, Result, WireError};
use crate::kv_prune::KVSelectionPlan;
use crate::linalg::{argmax, norm};
use crate::model::{ModelView, RetainedSets, TransformerModel};
use crate::plan::{MergedBlocks, StagePlan, StageViews};

/// What the prefill node sends: the first generated token and the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Handoff {
    pub first_token: u32,
    pub manifest: Vec<u8>,
}

impl Handoff {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.manifest.len() + 4);
        out.extend_from_slice(&self.first_token.to_le_bytes());
        out.extend_from_slice(&self.manifest);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let first_token = r.u32("first token")?;
        Ok(Self {
            first_token,
            manifest: bytes[4..].to_vec(),
        })
    }
}

/// Runs the prompt through the prefill view with its full cache, then
/// packages the cache for the decode view's layers.
pub fn run_prefill_node(
    views: &StageViews<'_>,
    prompt: &[u32],
    kv_plan: &KVSelectionPlan,
    dtype: WireDtype,
) -> Result<Handoff> {
    let vocab = views.prefill.config().vocab;
    let pre = views.prefill.prefill(prompt)?;
    let first_token = argmax(pre.last_logits(vocab)) as u32;
    let manifest = TransferManifest::build(
        &pre.cache,
        kv_plan,
        &views.decode.slots(),
        views.fingerprint,
        dtype,
    )?;
    Ok(Handoff {
        first_token,
        manifest: manifest.encode(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRun {
    /// First token from prefill followed by `steps` decoded tokens.
    pub transcript: Vec<u32>,
    /// Cache length of each decode layer before each step and after the last.
    pub cache_lengths: Vec<Vec<usize>>,
    /// Re-encoding the received manifest reproduced it byte for byte.
    pub round_trip_identical: bool,
}

fn check_manifest(
    view: &ModelView<'_>,
    manifest: &TransferManifest,
    fingerprint: u64,
) -> Result<()> {
    let cfg = view.config();
    if manifest.model_hash != fingerprint {
        return Err(Error::Consistency(format!(
            "manifest model hash {:#018x} does not match decode model {:#018x}",
            manifest.model_hash, fingerprint
        )));
    }
    for l in &manifest.layers {
        if l.n_heads as usize != cfg.n_heads || l.head_dim as usize != cfg.head_dim {
            return Err(Error::Consistency(format!(
                "manifest layer {} has {}×{} heads, model has {}×{}",
                l.layer, l.n_heads, l.head_dim, cfg.n_heads, cfg.head_dim
            )));
        }
    }
    let ids = manifest.layer_ids();
    if ids != view.slots() {
        return Err(Error::Consistency(format!(
            "manifest layers {ids:?} do not match decode layers {:?}",
            view.slots()
        )));
    }
    if manifest.n_tokens as usize >= cfg.max_seq {
        return Err(Error::Consistency("prompt leaves no room to decode".into()));
    }
    Ok(())
}

/// Resumes from the shipped cache and decodes greedily for `steps` tokens.
pub fn run_decode_node(
    views: &StageViews<'_>,
    handoff: &Handoff,
    steps: usize,
) -> Result<DecodeRun> {
    let manifest = TransferManifest::decode(&handoff.manifest)?;
    let round_trip_identical = manifest.encode() == handoff.manifest;
    check_manifest(&views.decode, &manifest, views.fingerprint)?;
    let mut cache = manifest.to_cache();
    let none = RetainedSets::new();
    let mut token = handoff.first_token;
    let mut transcript = vec![token];
    let mut cache_lengths = vec![cache.layers.iter().map(|l| l.len()).collect()];
    for _ in 0..steps {
        let out = views.decode.decode_step(token, &mut cache, &none)?;
        token = argmax(&out.logits) as u32;
        transcript.push(token);
        cache_lengths.push(cache.layers.iter().map(|l| l.len()).collect());
    }
    Ok(DecodeRun {
        transcript,
        cache_lengths,
        round_trip_identical,
    })
}

/// Same semantics in one process without the wire: the decode view attends
/// through retention masks over the in-memory prefill cache.
pub fn reference_unified_run(
    model: &TransformerModel,
    plan: &StagePlan,
    merged: &MergedBlocks,
    kv_plan: &KVSelectionPlan,
    prompt: &[u32],
    steps: usize,
) -> Result<Vec<u32>> {
    let views = StageViews::new(model, plan, merged)?;
    let vocab = model.config.vocab;
    let pre = views.prefill.prefill(prompt)?;
    let slots = views.decode.slots();
    let mut cache = pre.cache.only_layers(&slots);
    let retained = kv_plan.retained_sets(prompt.len(), &slots)?;
    let mut token = argmax(pre.last_logits(vocab)) as u32;
    let mut transcript = vec![token];
    for _ in 0..steps {
        let out = views.decode.decode_step(token, &mut cache, &retained)?;
        token = argmax(&out.logits) as u32;
        transcript.push(token);
    }
    Ok(transcript)
}

/// Per-step distance between decode logits with and without KV pruning,
/// both fed the pruned run's tokens.
pub fn error_growth(
    model: &TransformerModel,
    plan: &StagePlan,
    merged: &MergedBlocks,
    kv_plan: &KVSelectionPlan,
    prompt: &[u32],
    steps: usize,
) -> Result<Vec<f64>> {
    let views = StageViews::new(model, plan, merged)?;
    let pre = views.prefill.prefill(prompt)?;
    let slots = views.decode.slots();
    let retained = kv_plan.retained_sets(prompt.len(), &slots)?;
    let mut pruned = pre.cache.only_layers(&slots);
    let mut full = pruned.clone();
    let mut token = argmax(pre.last_logits(model.config.vocab)) as u32;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = views.decode.decode_step(token, &mut pruned, &retained)?;
        let b = views
            .decode
            .decode_step(token, &mut full, &RetainedSets::new())?;
        let diff: Vec<f64> = a.logits.iter().zip(&b.logits).map(|(x, y)| x - y).collect();
        out.push(norm(&diff));
        token = argmax(&a.logits) as u32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Transport {
    /// In-process channel between two threads.
    Channel,
    /// TCP over loopback with the given read timeout.
    Loopback { timeout_ms: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoNodeRun {
    pub decode: DecodeRun,
    pub handoff: Handoff,
    /// Bytes that crossed the link, framing included.
    pub frame_bytes: usize,
}

fn write_frame(mut w: impl Write, payload: &[u8]) -> std::io::Result<()> {
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

fn read_frame(mut r: impl Read) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Prefill and decode on two threads that share only the encoded handoff.
#[allow(clippy::too_many_arguments)]
pub fn run_two_node(
    model: &TransformerModel,
    plan: &StagePlan,
    merged: &MergedBlocks,
    kv_plan: &KVSelectionPlan,
    prompt: &[u32],
    steps: usize,
    dtype: WireDtype,
    transport: Transport,
) -> Result<TwoNodeRun> {
    plan.validate(model.blocks.len())?;
    let prefill_node = || -> Result<Handoff> {
        let views = StageViews::new(model, plan, merged)?;
        run_prefill_node(&views, prompt, kv_plan, dtype)
    };
    let decode_node = |frame: Vec<u8>| -> Result<(Handoff, DecodeRun)> {
        let views = StageViews::new(model, plan, merged)?;
        let handoff = Handoff::decode(&frame)?;
        let run = run_decode_node(&views, &handoff, steps)?;
        Ok((handoff, run))
    };
    std::thread::scope(|s| -> Result<TwoNodeRun> {
        match transport {
            Transport::Channel => {
                let (tx, rx) = mpsc::channel::<Vec<u8>>();
                let decoder = s.spawn(move || -> Result<(usize, Handoff, DecodeRun)> {
                    let frame = rx.recv().map_err(|_| {
                        Error::Consistency("prefill node hung up before sending".into())
                    })?;
                    let n = frame.len() + 8;
                    let (h, r) = decode_node(frame)?;
                    Ok((n, h, r))
                });
                let sent = prefill_node().and_then(|h| {
                    tx.send(h.encode())
                        .map_err(|_| Error::Consistency("decode node hung up".into()))
                });
                drop(tx);
                let joined = decoder.join().expect("decode thread panicked");
                sent?;
                let (frame_bytes, handoff, decode) = joined?;
                Ok(TwoNodeRun {
                    decode,
                    handoff,
                    frame_bytes,
                })
            }
            Transport::Loopback { timeout_ms } => {
                let listener = TcpListener::bind("127.0.0.1:0")?;
                let addr = listener.local_addr()?;
                let timeout = Some(Duration::from_millis(timeout_ms.max(1)));
                let decoder = s.spawn(move || -> Result<(usize, Handoff, DecodeRun)> {
                    let (stream, _) = listener.accept()?;
                    stream.set_read_timeout(timeout)?;
                    let frame = read_frame(&stream)?;
                    let n = frame.len() + 8;
                    let (h, r) = decode_node(frame)?;
                    Ok((n, h, r))
                });
                let sent = prefill_node().and_then(|h| {
                    let stream = TcpStream::connect(addr)?;
                    stream.set_write_timeout(timeout)?;
                    write_frame(&stream, &h.encode())?;
                    Ok(())
                });
                if sent.is_err() {
                    // Unblock the accept so the decode thread can exit.
                    let _ = TcpStream::connect(addr);
                }
                let joined = decoder.join().expect("decode thread panicked");
                sent?;
                let (frame_bytes, handoff, decode) = joined?;
                Ok(TwoNodeRun {
                    decode,
                    handoff,
                    frame_bytes,
                })
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_prune::select_from_scores;
    use crate::model::ModelConfig;
    use crate::plan::RemovalElement;

    fn model() -> TransformerModel {
        TransformerModel::build(ModelConfig::new(5, 8, 2, 16, 48), 21).unwrap()
    }

    fn kv(layers: &[usize], p: f64) -> KVSelectionPlan {
        let scores: Vec<_> = layers.iter().map(|&l| (l, vec![1.0])).collect();
        select_from_scores(&scores, p, 0.0, layers.len()).unwrap()
    }

    #[test]
    fn empty_plans_match_plain_generation() {
        let m = model();
        let prompt: Vec<u32> = (0..12).map(|i| (i * 5 % 16) as u32).collect();
        let none = MergedBlocks::new();
        let run = run_two_node(
            &m,
            &StagePlan::default(),
            &none,
            &kv(&[], 0.3),
            &prompt,
            6,
            WireDtype::F64,
            Transport::Channel,
        )
        .unwrap();
        assert_eq!(
            run.decode.transcript,
            m.full_view().generate(&prompt, 6).unwrap()
        );
        assert!(run.decode.round_trip_identical);
    }

    #[test]
    fn two_node_equals_reference() {
        let m = model();
        let prompt: Vec<u32> = (0..16).map(|i| (i * 7 % 16) as u32).collect();
        let none = MergedBlocks::new();
        let plan = StagePlan {
            prefill_removals: vec![RemovalElement::Prune { block: 4 }],
            decode_removals: vec![
                RemovalElement::Prune { block: 4 },
                RemovalElement::Prune { block: 1 },
            ],
            threshold: 0.03,
        };
        let kvp = kv(&[0, 3], 0.25);
        for transport in [Transport::Channel, Transport::Loopback { timeout_ms: 5000 }] {
            let run = run_two_node(
                &m,
                &plan,
                &none,
                &kvp,
                &prompt,
                8,
                WireDtype::F64,
                transport,
            )
            .unwrap();
            let reference = reference_unified_run(&m, &plan, &none, &kvp, &prompt, 8).unwrap();
            assert_eq!(run.decode.transcript, reference);
            for (step, lens) in run.decode.cache_lengths.iter().enumerate() {
                assert_eq!(lens, &vec![8 + step, 16 + step, 8 + step]);
            }
            let manifest = TransferManifest::decode(&run.handoff.manifest).unwrap();
            assert_eq!(manifest.layer_ids(), vec![0, 2, 3]);
        }
    }

    #[test]
    fn reference_rejects_non_subset_plans() {
        let m = model();
        let plan = StagePlan {
            prefill_removals: vec![RemovalElement::Prune { block: 2 }],
            decode_removals: vec![],
            threshold: 0.03,
        };
        let none = MergedBlocks::new();
        assert!(matches!(
            reference_unified_run(&m, &plan, &none, &kv(&[], 0.3), &[1, 2, 3], 2),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn wrong_model_is_rejected() {
        let m = model();
        let other = TransformerModel::build(ModelConfig::new(5, 8, 2, 16, 48), 22).unwrap();
        let none = MergedBlocks::new();
        let plan = StagePlan::default();
        let views = StageViews::new(&m, &plan, &none).unwrap();
        let handoff =
            run_prefill_node(&views, &[1, 2, 3, 4], &kv(&[], 0.3), WireDtype::F64).unwrap();
        let other_views = StageViews::new(&other, &plan, &none).unwrap();
        assert!(matches!(
            run_decode_node(&other_views, &handoff, 2),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn growth_is_zero_without_pruning() {
        let m = model();
        let none = MergedBlocks::new();
        let g = error_growth(
            &m,
            &StagePlan::default(),
            &none,
            &kv(&[], 0.3),
            &[1, 2, 3, 4, 5, 6],
            4,
        )
        .unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let g = error_growth(
            &m,
            &StagePlan::default(),
            &none,
            &kv(&[0, 1, 2, 3, 4], 0.2),
            &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
            4,
        )
        .unwrap();
        assert!(g.iter().any(|&x| x > 0.0));
    }
}
