//! Binary model checkpoints.
//!
//! ```text
//! "PDTK" | version u16 | config | parameters | merged blocks | CRC32
//! config:        n_blocks, d_model, n_heads, head_dim, d_ff, vocab, max_seq (u32 each) | dtype u8
//! parameters:    every tensor in `TransformerModel::params` order, f32 or f64 per dtype
//! merged blocks: count u32, then per block: first u32 | second u32 | steps u32 |
//!                final_mse f64 | block tensors
//! ```
//! All integers and floats are little-endian. The CRC32 covers every byte
//! before it.

use super::{Block, Dtype, ModelConfig, TransformerModel};
use crate::codec::{put_f64, put_u32, split_crc, Reader};
use crate::error::{Error, Result, WireError};
use crate::plan::{MergedBlock, MergedBlocks};

pub const MAGIC: [u8; 4] = *b"PDTK";
pub const VERSION: u16 = 1;

pub(crate) fn config_bytes(c: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(29);
    for v in [
        c.n_blocks, c.d_model, c.n_heads, c.head_dim, c.d_ff, c.vocab, c.max_seq,
    ] {
        put_u32(&mut out, v as u32);
    }
    out.push(c.dtype.code());
    out
}

fn put_tensor(out: &mut Vec<u8>, t: &[f64], dtype: Dtype) {
    for &x in t {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F64 => put_f64(out, x),
        }
    }
}

fn read_tensor(
    r: &mut Reader<'_>,
    dst: &mut [f64],
    dtype: Dtype,
) -> std::result::Result<(), WireError> {
    for x in dst.iter_mut() {
        *x = match dtype {
            Dtype::F32 => f32::from_le_bytes(r.array("parameters")?) as f64,
            Dtype::F64 => r.f64("parameters")?,
        };
    }
    Ok(())
}

fn dtype_from_code(code: u8) -> std::result::Result<Dtype, WireError> {
    match code {
        0 => Ok(Dtype::F32),
        1 => Ok(Dtype::F64),
        other => Err(WireError::UnknownDtype(other)),
    }
}

pub fn encode(model: &TransformerModel, merged: &MergedBlocks) -> Vec<u8> {
    let dtype = model.config.dtype;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_bytes(&model.config));
    for p in model.params() {
        put_tensor(&mut out, p, dtype);
    }
    put_u32(&mut out, merged.len() as u32);
    for m in merged.iter() {
        put_u32(&mut out, m.first as u32);
        put_u32(&mut out, (m.first + 1) as u32);
        put_u32(&mut out, m.steps as u32);
        put_f64(&mut out, m.final_mse);
        for p in m.block.params() {
            put_tensor(&mut out, p, dtype);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn decode(bytes: &[u8]) -> Result<(TransformerModel, MergedBlocks)> {
    let mut head = Reader::new(bytes);
    let magic = head.array::<4>("magic")?;
    if magic != MAGIC {
        return Err(WireError::BadMagic {
            expected: MAGIC,
            found: magic,
        }
        .into());
    }
    let version = head.u16("version")?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version).into());
    }
    let body = split_crc(bytes, "checkpoint")?;
    let mut r = Reader::new(body);
    r.take(6, "header")?;
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32("config")? as usize;
    }
    let dtype = dtype_from_code(r.u8("config")?)?;
    let config = ModelConfig {
        n_blocks: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        head_dim: dims[3],
        d_ff: dims[4],
        vocab: dims[5],
        max_seq: dims[6],
        dtype,
    };
    config.validate()?;
    let mut model = TransformerModel::build(config, 0)?;
    for p in model.params_mut() {
        read_tensor(&mut r, p, dtype)?;
    }
    let count = r.u32("merged count")?;
    let mut merged = MergedBlocks::new();
    for _ in 0..count {
        let first = r.u32("merged record")? as usize;
        let second = r.u32("merged record")? as usize;
        if second != first + 1 || second >= config.n_blocks {
            return Err(
                WireError::Shape(format!("merged pair ({first}, {second}) is invalid")).into(),
            );
        }
        let steps = r.u32("merged record")? as usize;
        let final_mse = r.f64("merged record")?;
        let mut block = Block::zeros(model.block_shape());
        for p in block.params_mut() {
            read_tensor(&mut r, p, dtype)?;
        }
        merged.insert(MergedBlock {
            first,
            block,
            steps,
            final_mse,
        });
    }
    if r.remaining() != 0 {
        return Err(WireError::TrailingBytes(r.remaining()).into());
    }
    if !model.is_finite() {
        return Err(Error::Numeric(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok((model, merged))
}

pub fn save(path: &std::path::Path, model: &TransformerModel, merged: &MergedBlocks) -> Result<()> {
    std::fs::write(path, encode(model, merged))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<(TransformerModel, MergedBlocks)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_dtypes() {
        for dtype in [Dtype::F32, Dtype::F64] {
            let mut cfg = ModelConfig::new(3, 8, 2, 10, 16);
            cfg.dtype = dtype;
            let model = TransformerModel::build(cfg, 5).unwrap();
            let merged = MergedBlocks::initialized(&model, &[1], &[0.1, 0.3, 0.2]);
            let bytes = encode(&model, &merged);
            let (m2, g2) = decode(&bytes).unwrap();
            assert_eq!(m2, model);
            assert_eq!(g2.get(1).unwrap().block, merged.get(1).unwrap().block);
            assert_eq!(encode(&m2, &g2), bytes);
        }
    }

    #[test]
    fn corruption_detected() {
        let model = TransformerModel::build(ModelConfig::new(2, 4, 2, 4, 8), 1).unwrap();
        let mut bytes = encode(&model, &MergedBlocks::new());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            decode(&bytes),
            Err(Error::Wire(WireError::Crc { .. }))
        ));
        assert!(matches!(
            decode(&bytes[..3]),
            Err(Error::Wire(WireError::Truncated(_)))
        ));
        let mut bad = encode(&model, &MergedBlocks::new());
        bad[0] = b'X';
        assert!(matches!(
            decode(&bad),
            Err(Error::Wire(WireError::BadMagic { .. }))
        ));
    }
}
