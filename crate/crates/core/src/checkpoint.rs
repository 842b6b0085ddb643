//! Versioned container of named arrays.
//!
//! ```text
//! dfar-ckpt v1
//! meta {"model":{...},"item_fingerprint":"..."}
//! arrays <count>
//! <name> <dim,dim,...>
//! <row-major little-endian f32 payload>
//! ...
//! ```
//!
//! Arrays appear in byte-wise name order, so equal parameters always produce
//! equal files.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DfarError, Result};
use crate::model::{DfarParams, ModelConfig};
use crate::params::ParamGroup;
use crate::tensor::Tensor;

pub const MAGIC: &str = "dfar-ckpt v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Fingerprint of the item id space the embeddings were trained on.
    pub item_fingerprint: String,
}

pub fn write_arrays<W: Write>(mut out: W, meta: &CheckpointMeta, arrays: &BTreeMap<String, &Tensor>) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    let json = serde_json::to_string(meta).map_err(|e| DfarError::Config(e.to_string()))?;
    writeln!(out, "meta {json}")?;
    writeln!(out, "arrays {}", arrays.len())?;
    for (name, t) in arrays {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let dims = if dims.is_empty() { "-".to_string() } else { dims.join(",") };
        writeln!(out, "{name} {dims}")?;
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn save<W: Write>(out: W, params: &DfarParams, meta: &CheckpointMeta) -> Result<()> {
    let arrays: BTreeMap<String, &Tensor> = params.named().into_iter().collect();
    write_arrays(out, meta, &arrays)
}

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut buf = Vec::new();
    r.read_until(b'\n', &mut buf)?;
    if buf.last() != Some(&b'\n') {
        return Err(DfarError::Compatibility("truncated checkpoint header".into()));
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| DfarError::Compatibility("checkpoint header is not UTF-8".into()))
}

pub fn read_arrays<R: BufRead>(mut r: R) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bad = |msg: String| DfarError::Compatibility(msg);
    let magic = header_line(&mut r)?;
    if magic != MAGIC {
        return Err(bad(format!("not a {MAGIC} checkpoint (header `{magic}`)")));
    }
    let meta_line = header_line(&mut r)?;
    let json = meta_line
        .strip_prefix("meta ")
        .ok_or_else(|| bad("missing meta line".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| bad(format!("meta: {e}")))?;
    let count: usize = header_line(&mut r)?
        .strip_prefix("arrays ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("missing array count".into()))?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let line = header_line(&mut r)?;
        let (name, dims) = line
            .rsplit_once(' ')
            .ok_or_else(|| bad(format!("bad array header `{line}`")))?;
        let shape: Vec<usize> = if dims == "-" {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in `{line}`"))))
                .collect::<Result<_>>()?
        };
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(format!("payload of `{name}` is truncated")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    Ok((meta, arrays))
}

/// Rebuilds the parameters; every expected array must be present with its
/// expected shape and nothing else may be.
pub fn load<R: BufRead>(r: R) -> Result<(CheckpointMeta, DfarParams)> {
    let (meta, mut arrays) = read_arrays(r)?;
    let mut params = DfarParams::init(&meta.model, 0)?;
    for (name, slot) in params.named_mut() {
        let t = arrays
            .remove(&name)
            .ok_or_else(|| DfarError::Compatibility(format!("checkpoint lacks `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(DfarError::Compatibility(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(DfarError::Compatibility(format!("unexpected array `{extra}`")));
    }
    Ok((meta, params))
}
