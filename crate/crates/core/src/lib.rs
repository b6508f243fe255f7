//! Planning and simulation of block and KV-cache pruning for transformer
//! inference split across a prefill node and a decode node.

pub mod analysis;
mod codec;
pub mod distill;
pub mod error;
pub mod kv_prune;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod plan;
pub mod rng;
pub mod runtime;
pub mod search;
pub mod verify;

pub use error::{Error, Result, WireError};
