//! Two-node prefill/decode execution over a binary KV manifest.

mod bound;
mod link;
mod nodes;
pub mod scenario;
pub mod wire;

pub use bound::{error_bound, PerturbationCase};
pub use link::{transfer_metrics, LinkModel, TransferMetrics};
pub use nodes::{
    error_growth, reference_unified_run, run_decode_node, run_prefill_node, run_two_node,
    DecodeRun, Handoff, Transport, TwoNodeRun,
};
pub use wire::{
    deserialize_manifest, serialize_manifest, ManifestMeta, TransferManifest, WireDtype,
};
