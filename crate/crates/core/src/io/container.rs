//! Self-describing binary container for checkpoints, datasets, and raw
//! frames.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"NIPC"
//! u16    format version
//! u16    kind length, then kind bytes (utf-8 tag: "fan", "nip", ...)
//! u32    meta length, then meta bytes (json document)
//! u32    tensor count, then per tensor:
//!          u16 name length + name bytes
//!          u8  dtype (0 = f32)
//!          u8  rank, then rank x u32 extents
//!          elements x 4 bytes (f32 bits)
//! 32 B   sha-256 over everything above
//! ```
//!
//! The trailing digest makes truncation and bit rot detectable; an unknown
//! version is rejected outright rather than parsed on faith.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::params::ParamSet;
use crate::raw::{BayerStack, CfaOrder, RawSample};
use crate::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"NIPC";
pub const CONTAINER_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// In-memory form of a container: a kind tag, a free-form JSON metadata
/// document, and an ordered table of named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value, tensors: ParamSet<f32>) -> Self {
        Self { kind: kind.to_string(), meta, tensors }
    }
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize to the container byte format (checksum included).
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CONTAINER_MAGIC);
    put_u16(&mut buf, CONTAINER_VERSION);
    let kind = ck.kind.as_bytes();
    if kind.len() > u16::MAX as usize {
        return Err(Error::Contract("container kind tag too long".into()));
    }
    put_u16(&mut buf, kind.len() as u16);
    buf.extend_from_slice(kind);
    let meta = serde_json::to_string(&ck.meta)
        .map_err(|e| Error::Contract(format!("meta not serializable: {e}")))?;
    put_u32(&mut buf, meta.len() as u32);
    buf.extend_from_slice(meta.as_bytes());
    put_u32(&mut buf, ck.tensors.len() as u32);
    for (name, t) in ck.tensors.iter() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("tensor name too long: {name}")));
        }
        put_u16(&mut buf, nb.len() as u16);
        buf.extend_from_slice(nb);
        buf.push(DTYPE_F32);
        if t.rank() > u8::MAX as usize {
            return Err(Error::Contract(format!("tensor rank too large: {name}")));
        }
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            if d > u32::MAX as usize {
                return Err(Error::Contract(format!("tensor extent too large: {name}")));
            }
            put_u32(&mut buf, d as u32);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Byte cursor that converts every overrun into an integrity error, so a
/// truncated file can never panic the reader.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Integrity("container truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("container holds invalid utf-8".into()))
    }
}

/// Parse container bytes, verifying magic, version, and checksum.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CONTAINER_MAGIC.len() + 2 + 32 {
        return Err(Error::Integrity("container truncated".into()));
    }
    if bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::Integrity("not a NIPC container (bad magic)".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Version { found: version, supported: CONTAINER_VERSION });
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Integrity("container checksum mismatch".into()));
    }

    let mut c = Cursor { data: body, pos: 6 };
    let kind_len = c.u16()? as usize;
    let kind = c.str(kind_len)?;
    let meta_len = c.u32()? as usize;
    let meta_str = c.str(meta_len)?;
    let meta: serde_json::Value = serde_json::from_str(&meta_str)
        .map_err(|e| Error::Integrity(format!("container meta is not valid json: {e}")))?;
    let count = c.u32()? as usize;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = c.str(name_len)?;
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Integrity(format!("unknown tensor dtype {dtype} for {name}")));
        }
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut elems = 1usize;
        for _ in 0..rank {
            let d = c.u32()? as usize;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| Error::Integrity(format!("tensor extents overflow for {name}")))?;
            shape.push(d);
        }
        let raw = c.take(elems * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(&name, Tensor::new(&shape, data)?)?;
    }
    if c.pos != body.len() {
        return Err(Error::Integrity("container has trailing bytes".into()));
    }
    Ok(Checkpoint { kind, meta, tensors })
}

/// Write a container atomically (temp file + rename).
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("nipc.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

/// Store a synthetic dataset: tensors `s{i}.stack` / `s{i}.target`, count and
/// CFA order in the metadata.
pub fn save_dataset(path: &Path, samples: &[RawSample<f32>]) -> Result<()> {
    let mut tensors = ParamSet::new();
    let mut cfa = CfaOrder::Rggb;
    for (i, s) in samples.iter().enumerate() {
        cfa = s.stack.cfa();
        tensors.insert(&format!("s{i}.stack"), s.stack.data().clone())?;
        tensors.insert(&format!("s{i}.target"), s.target.clone())?;
    }
    let meta = serde_json::json!({ "count": samples.len(), "cfa": cfa.label() });
    save_checkpoint(path, &Checkpoint::new("dataset", meta, tensors))
}

pub fn load_dataset(path: &Path) -> Result<Vec<RawSample<f32>>> {
    let ck = load_checkpoint(path)?;
    if ck.kind != "dataset" {
        return Err(Error::Input(format!("{} is a '{}' container, not a dataset", path.display(), ck.kind)));
    }
    let count = ck.meta["count"]
        .as_u64()
        .ok_or_else(|| Error::Integrity("dataset meta lacks a count".into()))? as usize;
    let cfa = CfaOrder::parse(ck.meta["cfa"].as_str().unwrap_or("rggb"))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let stack = ck
            .tensors
            .get(&format!("s{i}.stack"))
            .ok_or_else(|| Error::Integrity(format!("dataset missing tensor s{i}.stack")))?;
        let target = ck
            .tensors
            .get(&format!("s{i}.target"))
            .ok_or_else(|| Error::Integrity(format!("dataset missing tensor s{i}.target")))?;
        out.push(RawSample { stack: BayerStack::new(stack.clone(), cfa)?, target: target.clone() });
    }
    Ok(out)
}

/// Store one packed raw frame (kind "raw"), optionally with its reference
/// development.
pub fn save_raw_stack(
    path: &Path,
    stack: &BayerStack<f32>,
    target: Option<&Tensor<f32>>,
) -> Result<()> {
    let mut tensors = ParamSet::new();
    tensors.insert("stack", stack.data().clone())?;
    if let Some(t) = target {
        tensors.insert("target", t.clone())?;
    }
    let meta = serde_json::json!({ "cfa": stack.cfa().label() });
    save_checkpoint(path, &Checkpoint::new("raw", meta, tensors))
}

pub fn load_raw_stack(path: &Path) -> Result<(BayerStack<f32>, Option<Tensor<f32>>)> {
    let ck = load_checkpoint(path)?;
    match ck.kind.as_str() {
        "raw" => {
            let cfa = CfaOrder::parse(ck.meta["cfa"].as_str().unwrap_or("rggb"))?;
            let stack = ck
                .tensors
                .get("stack")
                .ok_or_else(|| Error::Integrity("raw container missing 'stack'".into()))?;
            Ok((BayerStack::new(stack.clone(), cfa)?, ck.tensors.get("target").cloned()))
        }
        // A dataset works as a raw input too: its first sample is used.
        "dataset" => {
            let samples = load_dataset(path)?;
            let first = samples
                .into_iter()
                .next()
                .ok_or_else(|| Error::Input("dataset container is empty".into()))?;
            Ok((first.stack, Some(first.target)))
        }
        other => Err(Error::Input(format!(
            "{} is a '{other}' container, expected raw or dataset",
            path.display()
        ))),
    }
}
