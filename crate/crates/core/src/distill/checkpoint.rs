//! Checkpoint file layout:
//!
//! ```text
//! u64 LE   header length in bytes
//! JSON     header (CheckpointHeader)
//! f32 LE   parameters: w1, b1, w2, b2, head_w, head_b
//! ```
//!
//! Encoder weights are `[out][in][ky][kx]`, head weights `[out][in]`, all
//! row-major. Parameters are trained in f64 and stored rounded to f32.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Head, ModelState};
use crate::bev::EncoderParams;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::HEAD_OUTPUTS;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub c_in: usize,
    pub hidden: usize,
    pub d: usize,
    pub layer_shapes: Vec<(String, Vec<usize>)>,
    pub head_shapes: Vec<(String, Vec<usize>)>,
    pub param_count: usize,
    /// Training mode that produced the weights, or "init".
    pub mode: String,
    pub seed: u64,
    /// SHA-256 of the resolved training configuration JSON.
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: ModelState,
}

pub fn config_hash(config_json: &str) -> String {
    Sha256::digest(config_json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn head_shapes(d: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head_w".into(), vec![HEAD_OUTPUTS, d]),
        ("head_b".into(), vec![HEAD_OUTPUTS]),
    ]
}

pub fn header_for(
    model: &ModelState,
    mode: &str,
    seed: u64,
    config_hash: String,
) -> CheckpointHeader {
    let e = &model.encoder;
    CheckpointHeader {
        version: CHECKPOINT_VERSION,
        c_in: e.c_in,
        hidden: e.hidden,
        d: e.d,
        layer_shapes: e.layer_shapes(),
        head_shapes: head_shapes(e.d),
        param_count: e.len() + model.head.len(),
        mode: mode.to_string(),
        seed,
        config_hash,
    }
}

pub fn encode_checkpoint(header: &CheckpointHeader, model: &ModelState) -> Result<Vec<u8>> {
    model.check()?;
    let json = serde_json::to_vec(header).map_err(|e| Error::json("<checkpoint header>", e))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * header.param_count);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.to_flat() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::json(path, e))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut model = ModelState {
        encoder: EncoderParams::zeros(header.c_in, header.hidden, header.d),
        head: Head::zeros(header.d),
        frozen: false,
    };
    if model.encoder.layer_shapes() != header.layer_shapes
        || head_shapes(header.d) != header.head_shapes
    {
        return Err(bad("layer shapes do not match the declared widths".into()));
    }
    let n = model.encoder.len() + model.head.len();
    if header.param_count != n {
        return Err(bad(format!(
            "header declares {} parameters, widths imply {n}",
            header.param_count
        )));
    }
    let blob = &bytes[8 + len..];
    if blob.len() != 4 * n {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            4 * n,
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite parameter at index {i}")));
    }
    let (enc, head) = values.split_at(model.encoder.len());
    model.encoder.set_flat(enc)?;
    for (p, v) in model.head.iter_mut().zip(head) {
        *p = *v;
    }
    Ok(Checkpoint { header, model })
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, model: &ModelState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(header, model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
