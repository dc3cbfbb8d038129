//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "SPDCKPT1"
//! u32     header entries, each: u32 key len, key, u32 value len, value
//! u32     tensors, each: u32 name len, name, u32 rank, u64 dims[rank], raw elements
//! ```
//!
//! A full checkpoint holds every model tensor. An overlay holds only the
//! blocks an optimization rewrote, keyed by block index, together with the
//! hash of the full checkpoint it applies to.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, SpdError};
use crate::model::{DecoderBlockWeights, Model, ModelConfig, NormParams};
use crate::tensor::{Elem, Tensor, DTYPE, ELEM_SIZE};

pub const MAGIC: &[u8; 8] = b"SPDCKPT1";

/// Reads a whole file, naming it in the error.
pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|source| SpdError::File { path: path.display().to_string(), source })
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|source| SpdError::File { path: path.display().to_string(), source })
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| SpdError::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawCheckpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

impl RawCheckpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for (k, v) in &self.header {
            put_bytes(&mut out, k.as_bytes());
            put_bytes(&mut out, v.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(SpdError::Format("not a checkpoint: bad magic".into()));
        }
        let mut header = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            header.insert(k, v);
        }
        let dtype = header.get("dtype").map(String::as_str).unwrap_or(DTYPE);
        if dtype != DTYPE {
            return Err(SpdError::Format(format!("checkpoint dtype {dtype}, this build reads {DTYPE}")));
        }
        let n = r.u32()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = numel.and_then(|n| n.checked_mul(ELEM_SIZE)).ok_or_else(|| {
                SpdError::Format(format!("tensor {name} shape {shape:?} overflows"))
            })?;
            let data = r
                .take(len)?
                .chunks_exact(ELEM_SIZE)
                .map(|c| Elem::from_le_bytes(c.try_into().expect("element width")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(SpdError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }

    fn take(&mut self, name: &str) -> Option<Tensor> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| SpdError::Format(format!("checkpoint header lacks `{key}`")))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| SpdError::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SpdError::Format("non-UTF-8 string".into()))
    }
}

fn push_block(out: &mut Vec<(String, Tensor)>, i: usize, b: &DecoderBlockWeights) {
    for (name, t) in b.named() {
        out.push((format!("blocks.{i}.{name}"), t.clone()));
    }
}

fn take_block(raw: &mut RawCheckpoint, i: usize) -> Result<DecoderBlockWeights> {
    DecoderBlockWeights::from_named(|n| raw.take(&format!("blocks.{i}.{n}")))
}

fn check_block_shapes(b: &DecoderBlockWeights, reference: &DecoderBlockWeights, i: usize) -> Result<()> {
    let got = b.named();
    let want = reference.named();
    if got.len() != want.len() || got.iter().zip(&want).any(|(g, w)| g.0 != w.0 || g.1.shape() != w.1.shape()) {
        return Err(SpdError::Format(format!("block {i} tensors do not match the model layout")));
    }
    Ok(())
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut raw = RawCheckpoint::default();
    raw.header.insert("kind".into(), "model".into());
    raw.header.insert("dtype".into(), DTYPE.into());
    raw.header.insert("config".into(), serde_json::to_string(&model.config)?);
    raw.tensors.push(("embed".into(), model.embed.clone()));
    raw.tensors.push(("pos".into(), model.pos.clone()));
    for (i, b) in model.blocks.iter().enumerate() {
        push_block(&mut raw.tensors, i, b);
    }
    raw.tensors.push(("final_norm.weight".into(), model.final_norm.weight.clone()));
    if let Some(b) = &model.final_norm.bias {
        raw.tensors.push(("final_norm.bias".into(), b.clone()));
    }
    if let Some(h) = &model.head {
        raw.tensors.push(("head".into(), h.clone()));
    }
    Ok(raw.encode())
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut raw = RawCheckpoint::decode(bytes)?;
    if raw.header_value("kind")? != "model" {
        return Err(SpdError::Format("expected a full model checkpoint".into()));
    }
    let config: ModelConfig = serde_json::from_str(raw.header_value("config")?)?;
    config.validate()?;
    let mut req = |n: &str| raw.take(n).ok_or_else(|| SpdError::Format(format!("missing tensor {n}")));
    let embed = req("embed")?;
    let pos = req("pos")?;
    let final_weight = req("final_norm.weight")?;
    let final_norm = NormParams { weight: final_weight, bias: raw.take("final_norm.bias") };
    let head = raw.take("head");
    let blocks = (0..config.n_layers).map(|i| take_block(&mut raw, i)).collect::<Result<Vec<_>>>()?;
    if let Some((name, _)) = raw.tensors.first() {
        return Err(SpdError::Format(format!("unexpected tensor {name}")));
    }
    let d = config.d_model;
    if embed.shape() != [config.vocab_size, d] || pos.shape() != [config.max_seq, d] {
        return Err(SpdError::Format("embedding shapes do not match the config".into()));
    }
    let template = crate::model::init_model(&ModelConfig { n_layers: 1, vocab_size: 1, max_seq: 1, ..config.clone() }, 0)?;
    for (i, b) in blocks.iter().enumerate() {
        check_block_shapes(b, &template.blocks[0], i)?;
    }
    Ok(Model { config, embed, pos, blocks, final_norm, head })
}

/// Hex SHA-256 of the model's checkpoint encoding.
pub fn model_hash(model: &Model) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode_model(model)?)))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&read_file(path)?)
}

/// Replacement weights for some blocks of a base model.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub base_hash: String,
    pub blocks: BTreeMap<usize, DecoderBlockWeights>,
}

impl Overlay {
    pub fn new(base: &Model) -> Result<Self> {
        Ok(Self { base_hash: model_hash(base)?, blocks: BTreeMap::new() })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut raw = RawCheckpoint::default();
        raw.header.insert("kind".into(), "overlay".into());
        raw.header.insert("dtype".into(), DTYPE.into());
        raw.header.insert("base_hash".into(), self.base_hash.clone());
        let keys: Vec<usize> = self.blocks.keys().copied().collect();
        raw.header.insert("blocks".into(), serde_json::to_string(&keys)?);
        for (&i, b) in &self.blocks {
            push_block(&mut raw.tensors, i, b);
        }
        Ok(raw.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut raw = RawCheckpoint::decode(bytes)?;
        if raw.header_value("kind")? != "overlay" {
            return Err(SpdError::Format("expected an overlay checkpoint".into()));
        }
        let base_hash = raw.header_value("base_hash")?.to_string();
        let keys: Vec<usize> = serde_json::from_str(raw.header_value("blocks")?)?;
        let blocks = keys
            .into_iter()
            .map(|i| take_block(&mut raw, i).map(|b| (i, b)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        if let Some((name, _)) = raw.tensors.first() {
            return Err(SpdError::Format(format!("unexpected tensor {name}")));
        }
        Ok(Self { base_hash, blocks })
    }

    /// The base model with this overlay's blocks substituted. Fails when
    /// `base` is not the model the overlay was built against.
    pub fn apply(&self, base: &Model) -> Result<Model> {
        let hash = model_hash(base)?;
        if hash != self.base_hash {
            return Err(SpdError::Contract(format!(
                "overlay expects base {}, got {}",
                self.base_hash, hash
            )));
        }
        let mut out = base.clone();
        for (&i, b) in &self.blocks {
            let slot = out.blocks.get_mut(i).ok_or_else(|| {
                SpdError::Format(format!("overlay block {i} outside a {}-block model", base.n_layers()))
            })?;
            check_block_shapes(b, slot, i)?;
            *slot = b.clone();
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}
