//! Binary model checkpoints.
//!
//! Layout: magic `GMNP`, u32 version, a 4-byte section tag, u32 length of
//! the JSON-encoded config, the config bytes, u64 parameter count, then the
//! parameters as little-endian f32 in registry order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::context::{ConditionalFlow, FlowConfig};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::geo::read_u32;

pub const MAGIC: &[u8; 4] = b"GMNP";
pub const VERSION: u32 = 1;
pub const DENOISER_TAG: &[u8; 4] = b"DNSR";
pub const FLOW_TAG: &[u8; 4] = b"FLOW";

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_params<C: Serialize>(path: impl AsRef<Path>, tag: &[u8; 4], config: &C, params: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(bad(path, "refusing to write non-finite parameters"));
    }
    let json = serde_json::to_vec(config)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(tag)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for &v in params {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params<C: DeserializeOwned>(path: impl AsRef<Path>, tag: &[u8; 4]) -> Result<(C, Vec<f64>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| bad(path, format!("cannot open: {e}")))?;
    let mut r = BufReader::new(file);
    let truncated = |e: std::io::Error| bad(path, format!("truncated: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let version = read_u32(&mut r).map_err(truncated)?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let mut section = [0u8; 4];
    r.read_exact(&mut section).map_err(truncated)?;
    if &section != tag {
        return Err(bad(
            path,
            format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&section)
            ),
        ));
    }
    let len = read_u32(&mut r).map_err(truncated)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(truncated)?;
    let config: C = serde_json::from_slice(&json).map_err(|e| bad(path, format!("bad config: {e}")))?;
    let mut n = [0u8; 8];
    r.read_exact(&mut n).map_err(truncated)?;
    let n = u64::from_le_bytes(n) as usize;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    let params = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((config, params))
}

pub fn save_denoiser(path: impl AsRef<Path>, model: &DenoiserModel) -> Result<()> {
    write_params(path, DENOISER_TAG, &model.config, &model.params.to_flat())
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let path = path.as_ref();
    let (config, flat): (DenoiserConfig, _) = read_params(path, DENOISER_TAG)?;
    DenoiserModel::from_parts(config, &flat).map_err(|e| bad(path, e.to_string()))
}

pub fn save_flow(path: impl AsRef<Path>, flow: &ConditionalFlow) -> Result<()> {
    write_params(path, FLOW_TAG, &flow.config, &flow.params.to_flat())
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<ConditionalFlow> {
    let path = path.as_ref();
    let (config, flat): (FlowConfig, _) = read_params(path, FLOW_TAG)?;
    ConditionalFlow::from_parts(config, &flat).map_err(|e| bad(path, e.to_string()))
}
