//! The KV transfer manifest and its binary frame.
//!
//! ```text
//! header:  "PDKV" | version u16 | flags u16 | model hash u64 | N u32 | dtype u8 | layer count u16
//! layer:   layer id u16 | mode u8 | keep each end u32 | heads u16 | head dim u16 | entries u32 |
//!          positions u32 × entries | K | V | CRC32 of the record
//! trailer: CRC32 of every preceding byte
//! ```
//! Integers and payloads are little-endian. K and V are `entries × heads ×
//! head dim` values in the header's dtype (0 = f32, 1 = f64, 2 = f16).

use half::f16;
use serde::{Deserialize, Serialize};

use crate::codec::{put_u16, put_u32, put_u64, split_crc, Reader};
use crate::error::{Error, Result, WireError};
use crate::kv_prune::{keep_each_end, KVSelectionPlan};
use crate::model::{Dtype, KVCache, LayerCache};

pub const MAGIC: [u8; 4] = *b"PDKV";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 23;
/// Set when at least one layer ships first/last entries only.
pub const FLAG_PRUNED: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireDtype {
    F32,
    F64,
    /// Storage only: values are rounded to half precision on the wire.
    F16,
}

impl WireDtype {
    pub fn code(self) -> u8 {
        match self {
            WireDtype::F32 => 0,
            WireDtype::F64 => 1,
            WireDtype::F16 => 2,
        }
    }

    pub fn from_code(code: u8) -> std::result::Result<Self, WireError> {
        match code {
            0 => Ok(WireDtype::F32),
            1 => Ok(WireDtype::F64),
            2 => Ok(WireDtype::F16),
            other => Err(WireError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            WireDtype::F32 => 4,
            WireDtype::F64 => 8,
            WireDtype::F16 => 2,
        }
    }

    /// Lossless wire type for a model dtype.
    pub fn for_model(dtype: Dtype) -> Self {
        match dtype {
            Dtype::F32 => WireDtype::F32,
            Dtype::F64 => WireDtype::F64,
        }
    }

    fn put(self, out: &mut Vec<u8>, x: f64) {
        match self {
            WireDtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            WireDtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
            WireDtype::F16 => out.extend_from_slice(&f16::from_f64(x).to_le_bytes()),
        }
    }

    fn read(self, r: &mut Reader<'_>, what: &'static str) -> std::result::Result<f64, WireError> {
        Ok(match self {
            WireDtype::F32 => f32::from_le_bytes(r.array(what)?) as f64,
            WireDtype::F64 => r.f64(what)?,
            WireDtype::F16 => f16::from_le_bytes(r.array(what)?).to_f64(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Retention {
    Full,
    FirstLast { keep_each_end: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestLayer {
    pub layer: u16,
    pub retention: Retention,
    pub n_heads: u16,
    pub head_dim: u16,
    pub positions: Vec<u32>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl ManifestLayer {
    pub fn width(&self) -> usize {
        self.n_heads as usize * self.head_dim as usize
    }

    /// Positions the retention mode prescribes for a prompt of `n` tokens.
    fn expected_positions(&self, n: u32) -> Vec<u32> {
        match self.retention {
            Retention::Full => (0..n).collect(),
            Retention::FirstLast { keep_each_end: m } => (0..m).chain(n - m..n).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferManifest {
    pub flags: u16,
    pub model_hash: u64,
    pub n_tokens: u32,
    pub dtype: WireDtype,
    pub layers: Vec<ManifestLayer>,
}

/// Header fields of a decoded manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestMeta {
    pub version: u16,
    pub flags: u16,
    pub model_hash: u64,
    pub n_tokens: u32,
    pub dtype: WireDtype,
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v)
        .map_err(|_| Error::Consistency(format!("{what} {v} does not fit the wire format")))
}

impl TransferManifest {
    /// Manifest for the layers in `layers` (the decode node's slots). Layers
    /// selected by `kv_plan` carry only their first and last `⌊pN⌋` entries.
    pub fn build(
        cache: &KVCache,
        kv_plan: &KVSelectionPlan,
        layers: &[usize],
        model_hash: u64,
        dtype: WireDtype,
    ) -> Result<Self> {
        cache.validate()?;
        if cache.next_position != cache.prefill_len {
            return Err(Error::Consistency(
                "cache already holds decode entries".into(),
            ));
        }
        let n = cache.prefill_len;
        let n_u32 = u32::try_from(n)
            .map_err(|_| Error::Consistency("prompt too long for the wire".into()))?;
        let m = keep_each_end(n, kv_plan.p);
        let mut out = Vec::with_capacity(layers.len());
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for id in sorted {
            let lc = cache.layer(id).ok_or_else(|| {
                Error::Consistency(format!("decode layer {id} has no prefill cache"))
            })?;
            if lc.positions != (0..n_u32).collect::<Vec<_>>() {
                return Err(Error::Consistency(format!(
                    "layer {id} cache is not a full prefill cache"
                )));
            }
            let (retention, src) = if kv_plan.is_selected(id) {
                let keep: Vec<u32> = (0..m).chain(n - m..n).map(|i| i as u32).collect();
                (
                    Retention::FirstLast {
                        keep_each_end: m as u32,
                    },
                    lc.retain_positions(|p| keep.binary_search(&p).is_ok()),
                )
            } else {
                (Retention::Full, lc.clone())
            };
            out.push(ManifestLayer {
                layer: to_u16(id, "layer id")?,
                retention,
                n_heads: to_u16(lc.n_heads, "head count")?,
                head_dim: to_u16(lc.head_dim, "head dim")?,
                positions: src.positions,
                keys: src.keys,
                values: src.values,
            });
        }
        let flags = if out.iter().any(|l| l.retention != Retention::Full) {
            FLAG_PRUNED
        } else {
            0
        };
        Ok(Self {
            flags,
            model_hash,
            n_tokens: n_u32,
            dtype,
            layers: out,
        })
    }

    pub fn meta(&self) -> ManifestMeta {
        ManifestMeta {
            version: VERSION,
            flags: self.flags,
            model_hash: self.model_hash,
            n_tokens: self.n_tokens,
            dtype: self.dtype,
        }
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer as usize).collect()
    }

    /// Bytes of K and V payload, excluding framing.
    pub fn kv_payload_bytes(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| 2 * (l.positions.len() * l.width() * self.dtype.size()) as u64)
            .sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 + self.kv_payload_bytes() as usize);
        out.extend_from_slice(&MAGIC);
        put_u16(&mut out, VERSION);
        put_u16(&mut out, self.flags);
        put_u64(&mut out, self.model_hash);
        put_u32(&mut out, self.n_tokens);
        out.push(self.dtype.code());
        put_u16(&mut out, self.layers.len() as u16);
        for l in &self.layers {
            let start = out.len();
            put_u16(&mut out, l.layer);
            let (mode, keep) = match l.retention {
                Retention::Full => (0u8, 0u32),
                Retention::FirstLast { keep_each_end } => (1, keep_each_end),
            };
            out.push(mode);
            put_u32(&mut out, keep);
            put_u16(&mut out, l.n_heads);
            put_u16(&mut out, l.head_dim);
            put_u32(&mut out, l.positions.len() as u32);
            for &p in &l.positions {
                put_u32(&mut out, p);
            }
            for &x in l.keys.iter().chain(&l.values) {
                self.dtype.put(&mut out, x);
            }
            let crc = crc32fast::hash(&out[start..]);
            put_u32(&mut out, crc);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Parses and fully validates a frame; nothing is returned unless every
    /// checksum and shape declaration holds.
    /// Parses and verifies a frame. A structural error in a frame whose
    /// trailer checksum does not match is reported as corruption.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, WireError> {
        match Self::parse(bytes) {
            Err(WireError::Shape(msg)) => {
                split_crc(bytes, "manifest").and(Err(WireError::Shape(msg)))
            }
            other => other,
        }
    }

    fn parse(bytes: &[u8]) -> std::result::Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.array("magic")?;
        if magic != MAGIC {
            return Err(WireError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        let flags = r.u16("flags")?;
        let model_hash = r.u64("model hash")?;
        let n_tokens = r.u32("token count")?;
        let dtype = WireDtype::from_code(r.u8("dtype")?)?;
        let n_layers = r.u16("layer count")?;
        let mut layers = Vec::with_capacity(n_layers as usize);
        for _ in 0..n_layers {
            let start = r.position();
            let layer = r.u16("layer id")?;
            let mode = r.u8("retention mode")?;
            let keep = r.u32("retention width")?;
            let retention = match mode {
                0 => Retention::Full,
                1 => Retention::FirstLast {
                    keep_each_end: keep,
                },
                other => {
                    return Err(WireError::Shape(format!(
                        "layer {layer}: unknown retention mode {other}"
                    )))
                }
            };
            let n_heads = r.u16("head count")?;
            let head_dim = r.u16("head dim")?;
            let count = r.u32("entry count")? as usize;
            if count > n_tokens as usize {
                return Err(WireError::Shape(format!(
                    "layer {layer}: {count} entries exceed the {n_tokens}-token prompt"
                )));
            }
            let positions = (0..count)
                .map(|_| r.u32("positions"))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let width = n_heads as usize * head_dim as usize;
            let n_vals = count * width;
            if r.remaining() < 2 * n_vals * dtype.size() {
                return Err(WireError::Truncated("key/value payload"));
            }
            let keys = (0..n_vals)
                .map(|_| dtype.read(&mut r, "keys"))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let values = (0..n_vals)
                .map(|_| dtype.read(&mut r, "values"))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let end = r.position();
            let stored = r.u32("layer checksum")?;
            let computed = crc32fast::hash(&bytes[start..end]);
            if stored != computed {
                return Err(WireError::Crc {
                    section: "layer record",
                    stored,
                    computed,
                });
            }
            let rec = ManifestLayer {
                layer,
                retention,
                n_heads,
                head_dim,
                positions,
                keys,
                values,
            };
            if let Retention::FirstLast { keep_each_end } = retention {
                if 2 * keep_each_end as u64 > n_tokens as u64 {
                    return Err(WireError::Shape(format!(
                        "layer {layer}: retention wider than the prompt"
                    )));
                }
            }
            if rec.positions != rec.expected_positions(n_tokens) {
                return Err(WireError::Shape(format!(
                    "layer {layer}: positions do not match the declared retention"
                )));
            }
            if layers
                .last()
                .is_some_and(|p: &ManifestLayer| p.layer >= layer)
            {
                return Err(WireError::Shape("layer ids not strictly increasing".into()));
            }
            layers.push(rec);
        }
        let end = r.position();
        let stored = r.u32("manifest checksum")?;
        let computed = crc32fast::hash(&bytes[..end]);
        if stored != computed {
            return Err(WireError::Crc {
                section: "manifest",
                stored,
                computed,
            });
        }
        if r.remaining() > 0 {
            return Err(WireError::TrailingBytes(r.remaining()));
        }
        Ok(Self {
            flags,
            model_hash,
            n_tokens,
            dtype,
            layers,
        })
    }

    /// The cache the decode node resumes from.
    pub fn to_cache(&self) -> KVCache {
        let n = self.n_tokens as usize;
        KVCache {
            prefill_len: n,
            next_position: n,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCache {
                    layer: l.layer as usize,
                    n_heads: l.n_heads as usize,
                    head_dim: l.head_dim as usize,
                    positions: l.positions.clone(),
                    keys: l.keys.clone(),
                    values: l.values.clone(),
                })
                .collect(),
        }
    }
}

/// Builds and encodes the manifest for the decode node's `layers`.
pub fn serialize_manifest(
    cache: &KVCache,
    kv_plan: &KVSelectionPlan,
    layers: &[usize],
    model_hash: u64,
    dtype: WireDtype,
) -> Result<Vec<u8>> {
    Ok(TransferManifest::build(cache, kv_plan, layers, model_hash, dtype)?.encode())
}

pub fn deserialize_manifest(bytes: &[u8]) -> Result<(KVCache, ManifestMeta)> {
    let m = TransferManifest::decode(bytes)?;
    Ok((m.to_cache(), m.meta()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_prune::select_from_scores;
    use crate::model::{ModelConfig, TransformerModel};

    fn cache() -> KVCache {
        let m = TransformerModel::build(ModelConfig::new(3, 8, 2, 16, 32), 1).unwrap();
        m.full_view()
            .prefill(&(0..16).collect::<Vec<u32>>())
            .unwrap()
            .cache
    }

    fn plan(selected: &[usize], p: f64) -> KVSelectionPlan {
        let scores: Vec<_> = selected.iter().map(|&l| (l, vec![1.0])).collect();
        select_from_scores(&scores, p, 0.0, selected.len()).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = cache();
        for dtype in [WireDtype::F64, WireDtype::F32, WireDtype::F16] {
            let bytes = serialize_manifest(&c, &plan(&[1], 0.25), &[0, 1, 2], 42, dtype).unwrap();
            let m = TransferManifest::decode(&bytes).unwrap();
            assert_eq!(m.encode(), bytes);
            assert_eq!(m.layers[1].positions, vec![0, 1, 2, 3, 12, 13, 14, 15]);
            assert_eq!(m.flags, FLAG_PRUNED);
        }
        let bytes = serialize_manifest(&c, &plan(&[], 0.25), &[0, 2], 42, WireDtype::F64).unwrap();
        let (back, meta) = deserialize_manifest(&bytes).unwrap();
        assert_eq!(back, c.only_layers(&[0, 2]));
        assert_eq!(meta.model_hash, 42);
        assert_eq!(meta.flags, 0);
    }

    #[test]
    fn empty_manifest_is_header_and_trailer() {
        let c = cache();
        let bytes = serialize_manifest(&c, &plan(&[], 0.3), &[], 7, WireDtype::F64).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert!(TransferManifest::decode(&bytes).unwrap().layers.is_empty());
    }

    #[test]
    fn corruption_is_rejected() {
        let c = cache();
        let bytes = serialize_manifest(&c, &plan(&[0], 0.25), &[0, 1], 9, WireDtype::F64).unwrap();
        for i in (HEADER_LEN + 20..bytes.len()).step_by(97) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(
                matches!(TransferManifest::decode(&bad), Err(WireError::Crc { .. })),
                "byte {i}: {:?}",
                TransferManifest::decode(&bad)
            );
        }
        for cut in [3, HEADER_LEN, HEADER_LEN + 10, bytes.len() - 1] {
            assert!(
                matches!(
                    TransferManifest::decode(&bytes[..cut]),
                    Err(WireError::Truncated(_))
                ),
                "cut {cut}"
            );
        }
        let mut future = bytes.clone();
        future[4] = 2;
        assert_eq!(
            TransferManifest::decode(&future),
            Err(WireError::UnsupportedVersion(2))
        );
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            TransferManifest::decode(&magic),
            Err(WireError::BadMagic { .. })
        ));
        let mut dt = bytes.clone();
        dt[20] = 9;
        assert_eq!(
            TransferManifest::decode(&dt),
            Err(WireError::UnknownDtype(9))
        );
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            TransferManifest::decode(&long),
            Err(WireError::TrailingBytes(1))
        ));
    }

    #[test]
    fn missing_layer_is_inconsistent() {
        let c = cache().only_layers(&[0, 2]);
        assert!(matches!(
            serialize_manifest(&c, &plan(&[], 0.3), &[0, 1], 1, WireDtype::F64),
            Err(Error::Consistency(_))
        ));
    }
}
