//! Parameter checkpoints: one JSON header line followed by the raw little-endian
//! f64 payload in flattened parameter order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::critic::{CriticParams, Layer};
use super::segmenter::SegmenterParams;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("payload holds {got} bytes, header implies {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("invalid shapes: {0}")]
    InvalidShapes(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    magic: String,
    kind: String,
    dtype: String,
    /// Critic: layer widths. Segmenter: [k, hidden].
    shapes: Vec<usize>,
    seed: u64,
    #[serde(default)]
    meta: serde_json::Value,
}

const MAGIC: &str = "ackpt1";

fn encode(kind: &str, shapes: Vec<usize>, seed: u64, meta: serde_json::Value, params: &[f64]) -> Vec<u8> {
    let header = Header {
        magic: MAGIC.into(),
        kind: kind.into(),
        dtype: "f64".into(),
        shapes,
        seed,
        meta,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode<'a>(bytes: &'a [u8], kind: &str) -> Result<(Header, Vec<f64>), CheckpointError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::MalformedHeader("missing newline".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    if header.magic != MAGIC || header.dtype != "f64" {
        return Err(CheckpointError::MalformedHeader(format!(
            "magic {:?}, dtype {:?}",
            header.magic, header.dtype
        )));
    }
    if header.kind != kind {
        return Err(CheckpointError::WrongKind {
            expected: kind.into(),
            found: header.kind,
        });
    }
    let payload: &'a [u8] = &bytes[nl + 1..];
    if !payload.len().is_multiple_of(8) {
        return Err(CheckpointError::PayloadLength {
            expected: payload.len() / 8 * 8,
            got: payload.len(),
        });
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, params))
}

fn check_len(params: &[f64], expected: usize) -> Result<(), CheckpointError> {
    if params.len() == expected {
        Ok(())
    } else {
        Err(CheckpointError::PayloadLength {
            expected: expected * 8,
            got: params.len() * 8,
        })
    }
}

pub fn encode_critic(p: &CriticParams, seed: u64, meta: serde_json::Value) -> Vec<u8> {
    let mut widths = vec![p.input_len()];
    widths.extend(p.layers.iter().map(|l| l.outputs));
    encode("critic", widths, seed, meta, &p.params())
}

pub fn decode_critic(bytes: &[u8]) -> Result<(CriticParams, u64), CheckpointError> {
    let (h, params) = decode(bytes, "critic")?;
    if h.shapes.len() < 2 || h.shapes.contains(&0) {
        return Err(CheckpointError::InvalidShapes(format!("{:?}", h.shapes)));
    }
    let mut p = CriticParams {
        layers: h.shapes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
    };
    check_len(&params, p.param_count())?;
    p.set_params(&params);
    p.check().map_err(|e| CheckpointError::InvalidShapes(e.to_string()))?;
    Ok((p, h.seed))
}

pub fn encode_segmenter(p: &SegmenterParams, seed: u64, meta: serde_json::Value) -> Vec<u8> {
    encode("segmenter", vec![p.k, p.hidden], seed, meta, &p.params())
}

pub fn decode_segmenter(bytes: &[u8]) -> Result<(SegmenterParams, u64), CheckpointError> {
    let (h, params) = decode(bytes, "segmenter")?;
    let [k, hidden] = h.shapes[..] else {
        return Err(CheckpointError::InvalidShapes(format!("{:?}", h.shapes)));
    };
    if k % 2 == 0 || hidden == 0 {
        return Err(CheckpointError::InvalidShapes(format!("{:?}", h.shapes)));
    }
    let mut p = SegmenterParams::zeros(k, hidden);
    check_len(&params, p.param_count())?;
    p.set_params(&params);
    Ok((p, h.seed))
}
