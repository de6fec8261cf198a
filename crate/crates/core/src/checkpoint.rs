//! Encoder checkpoints.
//!
//! A checkpoint is one line of JSON (the header) followed by a binary payload
//! of little-endian `f64`. For each channel `k = 0..K` in order the payload
//! holds `W_k` (`f × d`, row-major) and then `b_k` (`d` values), so a file for
//! `K` channels is `K · (f·d + d) · 8` bytes after the newline. The header
//! records the payload length and its SHA-256.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checksum::sha256_hex;
use crate::diffmath::Tensor;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const FORMAT: &str = "cdlg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub num_features: usize,
    pub seed: u64,
    /// Epoch whose parameters are stored.
    pub epoch: usize,
    pub payload_bytes: usize,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: EncoderParams,
}

fn payload(params: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::with_capacity((params.weight().len() + params.bias().len()) * 8);
    for k in 0..params.channels() {
        for v in params
            .channel_weight(k)
            .data()
            .iter()
            .chain(params.channel_bias(k))
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    params: &EncoderParams,
    encoder: &EncoderConfig,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    if params.channels() != encoder.channels || params.dim() != encoder.dim {
        return Err(Error::Checkpoint(format!(
            "parameters are K={} d={}, config says K={} d={}",
            params.channels(),
            params.dim(),
            encoder.channels,
            encoder.dim
        )));
    }
    let body = payload(params);
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        encoder: encoder.clone(),
        num_features: params.num_features(),
        seed,
        epoch,
        payload_bytes: body.len(),
        payload_sha256: sha256_hex(&body),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&body);

    let tmp = path.with_extension("tmp");
    let ctx = || format!("writing {}", path.display());
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
    file.sync_all().map_err(|e| Error::io(ctx(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("no header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let body = &bytes[nl + 1..];
    let (k, d, f) = (
        header.encoder.channels,
        header.encoder.dim,
        header.num_features,
    );
    let expected = k * (f * d + d) * 8;
    if body.len() != header.payload_bytes || body.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, header says {}, shape needs {expected}",
            body.len(),
            header.payload_bytes
        )));
    }
    if sha256_hex(body) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let channels = values
        .chunks_exact(f * d + d)
        .map(|chunk| {
            let (w, b) = chunk.split_at(f * d);
            Ok((Tensor::from_vec(vec![f, d], w.to_vec())?, b.to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let params = EncoderParams::from_channels(&channels)?;
    if !params.all_finite() {
        return Err(bad("non-finite parameter values".into()));
    }
    Ok(Checkpoint { header, params })
}
