//! Browser demo over the core library: generate a phantom, extract its
//! centerline tree, and score a thresholded segmentation against ground truth.
//!
//! [`DemoState`] holds the logic and is tested natively; [`Demo`] is the thin
//! wasm-bindgen wrapper the page drives.

use airwayal::metrics::{evaluate, BranchDetection, SegmentationReport};
use airwayal::morphology::{keep_largest_component, skeletonize, Connectivity};
use airwayal::orchestrator::{centerline_tree, generate_phantom, PhantomError, PhantomSpec};
use airwayal::tree::AirwayTree;
use airwayal::volume::{BinaryMask, ImageVolume, VolumeDims};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Edge length of the demo phantoms.
pub const SIZE: usize = 40;

const GT_TINT: [u8; 3] = [40, 200, 90];
const PRED_TINT: [u8; 3] = [230, 60, 60];
const CENTERLINE: [u8; 3] = [255, 220, 0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Layers {
    pub gt: bool,
    pub pred: bool,
    pub centerline: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhantomInfo {
    pub seed: u64,
    pub size: usize,
    pub branch_count: usize,
    pub gt_voxels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeInfo {
    pub centerline_voxels: usize,
    pub branch_count: Option<usize>,
    pub generated_branch_count: usize,
    pub branch_lengths: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreInfo {
    pub threshold: f64,
    pub pred_voxels: usize,
    pub report: SegmentationReport,
}

pub struct DemoState {
    seed: u64,
    branch_count: usize,
    image: ImageVolume,
    gt: BinaryMask,
    centerline: Option<BinaryMask>,
    tree: Option<AirwayTree>,
    pred: Option<BinaryMask>,
}

impl DemoState {
    pub fn generate(seed: u64, branches: usize, noise: f64) -> Result<Self, PhantomError> {
        let spec = PhantomSpec {
            dims: VolumeDims::cube(SIZE),
            branch_count: (branches, branches),
            noise,
            ..PhantomSpec::default()
        };
        let p = generate_phantom(seed, &spec)?;
        Ok(Self {
            seed,
            branch_count: p.branch_count,
            image: p.image,
            gt: p.gt_mask,
            centerline: None,
            tree: None,
            pred: None,
        })
    }

    pub fn info(&self) -> PhantomInfo {
        PhantomInfo {
            seed: self.seed,
            size: SIZE,
            branch_count: self.branch_count,
            gt_voxels: self.gt.count(),
        }
    }

    pub fn gt(&self) -> &BinaryMask {
        &self.gt
    }

    pub fn image(&self) -> &ImageVolume {
        &self.image
    }

    /// Thins the ground truth and parses its tree.
    pub fn extract_tree(&mut self) -> TreeInfo {
        let cl = skeletonize(&self.gt);
        let tree = centerline_tree(&cl);
        let info = TreeInfo {
            centerline_voxels: cl.count(),
            branch_count: tree.as_ref().map(AirwayTree::branch_count),
            generated_branch_count: self.branch_count,
            branch_lengths: tree
                .as_ref()
                .map(|t| t.branches.iter().map(|b| b.len()).collect())
                .unwrap_or_default(),
        };
        self.centerline = Some(cl);
        self.tree = tree;
        info
    }

    /// Segments by thresholding intensities and scores the result.
    pub fn score_threshold(&mut self, threshold: f64, postprocess: bool, bd_fraction: f64) -> ScoreInfo {
        if self.centerline.is_none() {
            self.extract_tree();
        }
        let raw = BinaryMask::from_voxels(
            self.gt.dims(),
            (0..self.gt.dims().len())
                .filter(|&i| f64::from(self.image.data()[i]) >= threshold)
                .map(|i| self.gt.dims().coord(i)),
        );
        let pred = if postprocess {
            keep_largest_component(&raw, Connectivity::TwentySix)
        } else {
            raw
        };
        let report = evaluate(
            &pred,
            &self.gt,
            self.tree.as_ref(),
            false,
            BranchDetection::Fraction(bd_fraction.clamp(f64::MIN_POSITIVE, 1.0)),
        )
        .expect("prediction shares the phantom's dims");
        let info = ScoreInfo {
            threshold,
            pred_voxels: pred.count(),
            report,
        };
        self.pred = Some(pred);
        info
    }

    /// RGBA pixels of the z-plane `index`, or of the maximum projection along
    /// z when `index` is `None`; row-major with y down the rows.
    pub fn render(&self, index: Option<usize>, layers: Layers) -> Vec<u8> {
        let n = SIZE;
        let data = self.image.data();
        let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let span = f64::from(hi) - f64::from(lo);
        let zs: Vec<usize> = match index {
            Some(z) => vec![z.min(n - 1)],
            None => (0..n).collect(),
        };
        let hit = |m: Option<&BinaryMask>, x: usize, y: usize| m.is_some_and(|m| zs.iter().any(|&z| m.get([x, y, z])));
        let mut out = Vec::with_capacity(n * n * 4);
        for y in 0..n {
            for x in 0..n {
                let v = zs
                    .iter()
                    .map(|&z| self.image.get([x, y, z]))
                    .fold(f32::NEG_INFINITY, f32::max);
                let g = if span > 0.0 {
                    ((f64::from(v) - f64::from(lo)) / span * 255.0).round() as u8
                } else {
                    0
                };
                let mut px = [g; 3];
                if layers.gt && hit(Some(&self.gt), x, y) {
                    px = blend(px, GT_TINT);
                }
                if layers.pred && hit(self.pred.as_ref(), x, y) {
                    px = blend(px, PRED_TINT);
                }
                if layers.centerline && hit(self.centerline.as_ref(), x, y) {
                    px = CENTERLINE;
                }
                out.extend_from_slice(&px);
                out.push(255);
            }
        }
        out
    }
}

fn blend(base: [u8; 3], tint: [u8; 3]) -> [u8; 3] {
    let mix = |a: u8, b: u8| ((u16::from(a) + u16::from(b)) / 2) as u8;
    [mix(base[0], tint[0]), mix(base[1], tint[1]), mix(base[2], tint[2])]
}

fn js_error(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("demo payloads serialize")
}

#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
}

#[wasm_bindgen]
impl Demo {
    /// Generates a phantom; `branches` must be odd.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, branches: u32, noise: f64) -> Result<Demo, JsValue> {
        DemoState::generate(u64::from(seed), branches as usize, noise)
            .map(|state| Demo { state })
            .map_err(js_error)
    }

    pub fn size() -> usize {
        SIZE
    }

    /// Phantom summary as JSON.
    pub fn info(&self) -> String {
        to_json(&self.state.info())
    }

    /// Skeletonizes the ground truth and parses its tree; JSON summary.
    pub fn skeletonize(&mut self) -> String {
        to_json(&self.state.extract_tree())
    }

    /// Thresholds the image into a prediction and scores it; JSON report.
    pub fn score(&mut self, threshold: f64, postprocess: bool, bd_fraction: f64) -> String {
        to_json(&self.state.score_threshold(threshold, postprocess, bd_fraction))
    }

    /// RGBA pixels of z-slice `index`, or the projection when `index` is negative.
    pub fn render(&self, index: i32, gt: bool, pred: bool, centerline: bool) -> Vec<u8> {
        let layers = Layers { gt, pred, centerline };
        self.state.render(usize::try_from(index).ok(), layers)
    }
}
