//! Wire types of the HTTP API and their conversions to engine types.

use std::collections::BTreeMap;

use airwayal::losses::LossBreakdown;
use airwayal::orchestrator::{Provenance, Role, RoundRecord, SetMetrics};
use airwayal::query::SampleId;
use airwayal::volume::{BinaryMask, ImageVolume, VolumeDims, Voxel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResponse {
    /// Index of the latest completed round (0 is the initial training).
    pub round: usize,
    pub strategy: String,
    pub oracle: String,
    pub labeled: usize,
    pub unlabeled: usize,
    pub pending_annotations: usize,
    /// Queued ids still awaiting a submission.
    pub pending: Vec<SampleId>,
    /// A round advance is running on the background worker.
    pub training: bool,
    pub finished: bool,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub selected: Vec<SampleId>,
    pub validation: SetMetrics,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub checkpoint: String,
    pub final_loss: Option<LossBreakdown>,
}

impl From<&RoundRecord> for RoundSummary {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            selected: r.selected.clone(),
            validation: r.validation,
            labeled_count: r.labeled_count,
            unlabeled_count: r.unlabeled_count,
            checkpoint: r.checkpoint.clone(),
            final_loss: r.loss_curve.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: SampleId,
    pub role: Role,
    pub provenance: Provenance,
    pub labeled: bool,
    pub pending: bool,
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "x" => Some(Axis::X),
            "y" => Some(Axis::Y),
            "z" => Some(Axis::Z),
            _ => None,
        }
    }

    fn slot(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// Volume axes along the slice's columns and rows.
    fn plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }

    pub fn extent(self, dims: VolumeDims) -> usize {
        dims.as_array()[self.slot()]
    }
}

pub const OVERLAYS: [&str; 4] = ["pred", "gt", "machine_centerline", "corrected_centerline"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResponse {
    pub axis: Axis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major 0–255 intensities, scaled by the whole volume's range.
    pub image: Vec<u8>,
    pub overlays: BTreeMap<String, Vec<Voxel>>,
}

/// Grayscale slice of `img`; a constant volume maps to all zeros.
pub fn slice_image(img: &ImageVolume, axis: Axis, index: usize) -> (usize, usize, Vec<u8>) {
    let dims = img.dims().as_array();
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = f64::from(hi) - f64::from(lo);
    let (cu, rv) = axis.plane();
    let (w, h) = (dims[cu], dims[rv]);
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut v = [0; 3];
            v[axis.slot()] = index;
            v[cu] = c;
            v[rv] = r;
            let x = if span > 0.0 {
                (f64::from(img.get(v)) - f64::from(lo)) / span * 255.0
            } else {
                0.0
            };
            out.push(x.round() as u8);
        }
    }
    (w, h, out)
}

/// Voxels of `mask` lying in the slice.
pub fn restrict(mask: &BinaryMask, axis: Axis, index: usize) -> Vec<Voxel> {
    mask.voxels().filter(|v| v[axis.slot()] == index).collect()
}

/// A mask as runs along x, `[x_start, y, z, length]`, in z-then-y row order.
pub type Run = [usize; 4];

pub fn encode_runs(mask: &BinaryMask) -> Vec<Run> {
    let [nx, ny, nz] = mask.dims().as_array();
    let mut runs = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            let mut x = 0;
            while x < nx {
                if mask.get([x, y, z]) {
                    let start = x;
                    while x < nx && mask.get([x, y, z]) {
                        x += 1;
                    }
                    runs.push([start, y, z, x - start]);
                } else {
                    x += 1;
                }
            }
        }
    }
    runs
}

pub fn decode_runs(dims: VolumeDims, runs: &[Run]) -> Result<BinaryMask, String> {
    let [nx, ny, nz] = dims.as_array();
    let mut mask = BinaryMask::empty(dims);
    for &[x, y, z, len] in runs {
        if len == 0 || y >= ny || z >= nz || x.checked_add(len).is_none_or(|end| end > nx) {
            return Err(format!("run [{x}, {y}, {z}, {len}] leaves the {nx}x{ny}x{nz} volume"));
        }
        for xi in x..x + len {
            mask.set([xi, y, z], true);
        }
    }
    Ok(mask)
}

pub fn decode_voxels(dims: VolumeDims, voxels: &[Voxel]) -> Result<BinaryMask, String> {
    let [nx, ny, nz] = dims.as_array();
    if let Some(v) = voxels.iter().find(|v| v[0] >= nx || v[1] >= ny || v[2] >= nz) {
        return Err(format!("voxel {v:?} leaves the {nx}x{ny}x{nz} volume"));
    }
    Ok(BinaryMask::from_voxels(dims, voxels.iter().copied()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSubmission {
    /// Must match the path id when present.
    #[serde(default)]
    pub sample_id: Option<SampleId>,
    pub mask_runs: Vec<Run>,
    pub centerline: Vec<Voxel>,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvanceResponse {
    pub round: usize,
}
