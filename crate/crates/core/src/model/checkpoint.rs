//! Little-endian binary checkpoints.
//!
//! ```text
//! magic    "EBFTCKPT"
//! u32      version
//! header   u32 vocab, u32 d_model, u32 n_layers, u32 n_heads, u32 max_seq_len,
//!          u32 mlp kind (0 standard, 1 gated), f64 ln_eps
//! u32      entry count
//! entries  u32 name length, utf-8 name, u8 dtype (0 f64, 1 mask),
//!          u32 rank, u64 dims[rank], u64 payload offset, u64 payload length
//! payload  raw tensor bytes; offsets are relative to the payload start
//! ```
//!
//! A mask entry is named `<weight>.mask`; its payload is a pattern record
//! (u8 kind: 0 unstructured, 1 n:m, 2 channel; u32 n; u32 m; f64 sparsity)
//! followed by the bits packed least-significant-bit first.

use super::{LanguageModel, MlpKind, ModelConfig};
use crate::error::{Error, Result};
use crate::pruning::{MaskPattern, MaskTable, SparsityMask};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EBFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_MASK: u8 = 1;
const MASK_SUFFIX: &str = ".mask";
const PATTERN_RECORD: usize = 1 + 4 + 4 + 8;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub masks: MaskTable,
}

impl Checkpoint {
    pub fn from_model(model: &LanguageModel, masks: Option<&MaskTable>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config,
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            masks: masks.cloned().unwrap_or_default(),
        }
    }

    pub fn to_model(&self) -> Result<LanguageModel> {
        let mut model = LanguageModel::new_random(self.config, 0)
            .map_err(|e| Error::Format(format!("header describes an invalid model: {e}")))?;
        let mut table: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in model.named_tensors_mut() {
            let t = table
                .remove(name.as_str())
                .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra:?}")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, u8, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in &self.tensors {
            let mut payload = Vec::with_capacity(8 * t.numel());
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            entries.push((name.clone(), DTYPE_F64, t.shape().to_vec(), payload));
        }
        for (name, mask) in &self.masks {
            entries.push((format!("{name}{MASK_SUFFIX}"), DTYPE_MASK, mask.shape().to_vec(), encode_mask(mask)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let c = &self.config;
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mlp: u32 = match c.mlp {
            MlpKind::Standard => 0,
            MlpKind::Gated => 1,
        };
        out.extend_from_slice(&mlp.to_le_bytes());
        out.extend_from_slice(&c.ln_eps.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, dtype, shape, payload) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*dtype);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            offset += payload.len() as u64;
        }
        for (_, _, _, payload) in &entries {
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic bytes (not an EBFT checkpoint)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32("header")? as usize;
        }
        let mlp = match r.u32("header")? {
            0 => MlpKind::Standard,
            1 => MlpKind::Gated,
            k => return Err(Error::Format(format!("unknown mlp kind {k} in header"))),
        };
        let ln_eps = f64::from_le_bytes(r.take(8, "header")?.try_into().expect("8 bytes"));
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            max_seq_len: dims[4],
            mlp,
            ln_eps,
        };

        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let what = format!("name table entry {i}");
            let len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| Error::Format(format!("{what}: name is not utf-8")))?
                .to_string();
            let dtype = r.take(1, &name)?[0];
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let offset = r.u64(&name)? as usize;
            let length = r.u64(&name)? as usize;
            entries.push((name, dtype, shape, offset, length));
        }
        let payload = &buf[r.pos..];

        let mut tensors = Vec::new();
        let mut masks = MaskTable::new();
        for (name, dtype, shape, offset, length) in entries {
            let end = offset
                .checked_add(length)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Format(format!("{name:?}: payload truncated")))?;
            let bytes = &payload[offset..end];
            let numel: usize = shape.iter().product();
            match dtype {
                DTYPE_F64 => {
                    if length != 8 * numel {
                        return Err(Error::Format(format!(
                            "{name:?}: shape {shape:?} needs {} bytes, table says {length}",
                            8 * numel
                        )));
                    }
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name:?}: {e}")))?;
                    tensors.push((name, t));
                }
                DTYPE_MASK => {
                    let weight = name
                        .strip_suffix(MASK_SUFFIX)
                        .ok_or_else(|| Error::Format(format!("mask entry {name:?} lacks the {MASK_SUFFIX} suffix")))?
                        .to_string();
                    let mask = decode_mask(&name, &shape, bytes)?.with_owner(weight.clone());
                    masks.insert(weight, mask);
                }
                other => return Err(Error::Format(format!("{name:?}: unknown dtype tag {other}"))),
            }
        }

        for (weight, mask) in &masks {
            match tensors.iter().find(|(n, _)| n == weight) {
                None => {
                    return Err(Error::Format(format!(
                        "mask {weight}{MASK_SUFFIX} refers to nonexistent weight {weight:?}"
                    )))
                }
                Some((_, t)) if t.shape() != mask.shape() => {
                    return Err(Error::Format(format!(
                        "mask {weight}{MASK_SUFFIX} has shape {:?} but the weight has {:?}",
                        mask.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Checkpoint {
            version,
            config,
            tensors,
            masks,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("file truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn encode_mask(mask: &SparsityMask) -> Vec<u8> {
    let (kind, n, m, s) = match mask.pattern {
        MaskPattern::Unstructured { sparsity } => (0u8, 0u32, 0u32, sparsity),
        MaskPattern::NM { n, m } => (1, n as u32, m as u32, 0.0),
        MaskPattern::Channel { sparsity } => (2, 0, 0, sparsity),
    };
    let mut out = Vec::with_capacity(PATTERN_RECORD + mask.len().div_ceil(8));
    out.push(kind);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&s.to_le_bytes());
    for chunk in mask.bits().chunks(8) {
        let byte = chunk
            .iter()
            .enumerate()
            .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
        out.push(byte);
    }
    out
}

fn decode_mask(name: &str, shape: &[usize], bytes: &[u8]) -> Result<SparsityMask> {
    let numel: usize = shape.iter().product();
    if bytes.len() != PATTERN_RECORD + numel.div_ceil(8) {
        return Err(Error::Format(format!(
            "mask {name:?}: payload of {} bytes does not fit shape {shape:?}",
            bytes.len()
        )));
    }
    let n = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes")) as usize;
    let m = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let s = f64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let pattern = match bytes[0] {
        0 => MaskPattern::Unstructured { sparsity: s },
        1 => MaskPattern::NM { n, m },
        2 => MaskPattern::Channel { sparsity: s },
        k => return Err(Error::Format(format!("mask {name:?}: unknown pattern kind {k}"))),
    };
    let packed = &bytes[PATTERN_RECORD..];
    let bits = (0..numel).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    SparsityMask::new(pattern, shape, bits).map_err(|e| Error::Format(format!("mask {name:?}: {e}")))
}

pub fn save_checkpoint(model: &LanguageModel, masks: Option<&MaskTable>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::from_model(model, masks);
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    Checkpoint::from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LanguageModel {
        let cfg = ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 5,
            mlp: MlpKind::Gated,
            ln_eps: 1e-5,
        };
        LanguageModel::new_random(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let mut masks = MaskTable::new();
        let name = "blocks.1.mlp.down.weight".to_string();
        let bits = (0..8 * 32).map(|i| i % 3 != 0).collect();
        masks.insert(
            name.clone(),
            SparsityMask::new(MaskPattern::Unstructured { sparsity: 0.33 }, &[8, 32], bits)
                .unwrap()
                .with_owner(name.clone()),
        );
        let bytes = Checkpoint::from_model(&m, Some(&masks)).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.to_model().unwrap().bit_eq(&m));
        assert_eq!(back.masks, masks);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = Checkpoint::from_model(&small(), None).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = Checkpoint::from_model(&small(), None).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        match Checkpoint::from_bytes(&v2) {
            Err(Error::Format(msg)) => assert!(msg.contains("version")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mask_for_missing_weight_names_the_mask() {
        let m = small();
        let mut masks = MaskTable::new();
        masks.insert("blocks.9.attn.q.weight".into(), SparsityMask::ones(&[8, 8]));
        let bytes = Checkpoint::from_model(&m, Some(&masks)).to_bytes();
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("blocks.9.attn.q.weight.mask"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
