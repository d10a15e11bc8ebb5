//! Training losses with analytic gradients with respect to voxel probabilities
//! (and critic inputs for the penalty term).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::critic::{clipped_norm, interpolate, pairs};
use crate::model::{critic_forward, critic_input_gradient, CriticParams, ModelError};
use crate::morphology::skeletonize;
use crate::rng::{RngExt, SeededRng};
use crate::tree::AirwayTree;
use crate::volume::{BinaryMask, ProbVolume, VolumeDims};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction and target dimensions differ")]
    DimMismatch,
    #[error("ground-truth tree has no branches")]
    EmptyTree,
    #[error("centerline is empty")]
    EmptyCenterline,
    #[error("empty batch")]
    EmptyBatch,
    #[error("feature length mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

fn from_model(e: ModelError) -> LossError {
    match e {
        ModelError::ShapeMismatch { expected, got } => LossError::ShapeMismatch { expected, got },
        _ => LossError::EmptyBatch,
    }
}

/// Smoothing term guarding the overlap ratios against empty denominators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smooth(pub f64);

impl Default for Smooth {
    fn default() -> Self {
        Smooth(1e-6)
    }
}

/// Weights of dice, BCE, branch, centerline and WD terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; 5]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([0.2; 5])
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.0.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(LossError::InvalidWeights(format!("{:?}", self.0)))
        }
    }
}

/// Weighted five-term sum, or the unweighted four-term sum without the centerline term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Eq3,
    #[default]
    Eq5,
}

/// Which centerline supervises the centerline term: raw extraction or expert-corrected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterlineMode {
    Machine,
    #[default]
    Corrected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub dice: f64,
    pub bce: f64,
    pub branch: f64,
    pub centerline: f64,
    pub wd: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub bce: f64,
    pub branch: f64,
    pub centerline: f64,
    pub wd: f64,
    pub total: f64,
}

pub const BCE_EPS: f64 = 1e-7;

fn check_dims(a: VolumeDims, b: VolumeDims) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::DimMismatch)
    }
}

pub(crate) fn dice_raw(p: &[f64], g: &[bool], s: f64) -> (f64, Vec<f64>) {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&pv, &gv) in p.iter().zip(g) {
        let gv = gv as u8 as f64;
        inter += pv * gv;
        union += pv + gv;
    }
    let num = 2.0 * inter + s;
    let den = union + s;
    let grad = g
        .iter()
        .map(|&gv| -(2.0 * (gv as u8 as f64) * den - num) / (den * den))
        .collect();
    (1.0 - num / den, grad)
}

pub(crate) fn bce_raw(p: &[f64], g: &[bool]) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pv, &gv) in p.iter().zip(g) {
        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let inside = pc == pv;
        if gv {
            value -= pc.ln();
            grad.push(if inside { -1.0 / (n * pc) } else { 0.0 });
        } else {
            value -= (1.0 - pc).ln();
            grad.push(if inside { 1.0 / (n * (1.0 - pc)) } else { 0.0 });
        }
    }
    (value / n, grad)
}

/// `1 - (sum_{v in idx} p*g + s) / (sum_{v in idx} g + s)`
pub(crate) fn recall_raw(p: &[f64], idx: &[bool], g: &[bool], s: f64) -> (f64, Vec<f64>) {
    let (mut num, mut den) = (s, s);
    for ((&pv, &iv), &gv) in p.iter().zip(idx).zip(g) {
        if iv && gv {
            num += pv;
            den += 1.0;
        }
    }
    let grad = idx
        .iter()
        .zip(g)
        .map(|(&iv, &gv)| if iv && gv { -1.0 / den } else { 0.0 })
        .collect();
    (1.0 - num / den, grad)
}

/// Soft Dice loss.
pub fn dice_loss(pred: &ProbVolume, gt: &BinaryMask, s: Smooth) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred.dims(), gt.dims())?;
    Ok(dice_raw(pred.data(), gt.data(), s.0))
}

/// Mean binary cross entropy with probabilities clamped into `[eps, 1 - eps]`.
pub fn bce_loss(pred: &ProbVolume, gt: &BinaryMask) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred.dims(), gt.dims())?;
    Ok(bce_raw(pred.data(), gt.data()))
}

/// Recall of the prediction over the voxels indexed by the ground-truth branches.
pub fn branch_loss(
    pred: &ProbVolume,
    gt_tree: &AirwayTree,
    gt: &BinaryMask,
    s: Smooth,
) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred.dims(), gt.dims())?;
    if gt_tree.branch_count() == 0 {
        return Err(LossError::EmptyTree);
    }
    let idx = gt_tree.voxel_mask(gt.dims());
    branch_loss_indexed(pred, &idx, gt, s)
}

/// Branch loss with the branch-indexed voxel set given as a mask (used on patches).
pub fn branch_loss_indexed(
    pred: &ProbVolume,
    indexed: &BinaryMask,
    gt: &BinaryMask,
    s: Smooth,
) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred.dims(), gt.dims())?;
    check_dims(pred.dims(), indexed.dims())?;
    Ok(recall_raw(pred.data(), indexed.data(), gt.data(), s.0))
}

/// Centerline loss. The value compares the skeleton of the thresholded
/// prediction with `gt_cl`; the gradient is that of the differentiable
/// surrogate [`centerline_surrogate`]. `mode` only labels which centerline
/// `gt_cl` is; the formula is the same.
pub fn centerline_loss(
    pred: &ProbVolume,
    binarize_threshold: f64,
    gt_cl: &BinaryMask,
    s: Smooth,
    _mode: CenterlineMode,
) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred.dims(), gt_cl.dims())?;
    if gt_cl.is_blank() {
        return Err(LossError::EmptyCenterline);
    }
    let skel = skeletonize(&pred.threshold(binarize_threshold));
    let (mut hit, mut total) = (s.0, s.0);
    for (&e, &c) in skel.data().iter().zip(gt_cl.data()) {
        if c {
            total += 1.0;
            if e {
                hit += 1.0;
            }
        }
    }
    let (_, grad) = recall_raw(pred.data(), gt_cl.data(), gt_cl.data(), s.0);
    Ok((1.0 - hit / total, grad))
}

/// `1 - (sum_{v in gt_cl} p + s) / (|gt_cl| + s)`: the relaxation whose gradient
/// [`centerline_loss`] reports.
pub fn centerline_surrogate(pred: &ProbVolume, gt_cl: &BinaryMask, s: Smooth) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred.dims(), gt_cl.dims())?;
    if gt_cl.is_blank() {
        return Err(LossError::EmptyCenterline);
    }
    Ok(recall_raw(pred.data(), gt_cl.data(), gt_cl.data(), s.0))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `mean(D(unlabeled)) - mean(D(labeled))`
pub fn wasserstein_loss(d_ulb: &[f64], d_lb: &[f64]) -> Result<f64, LossError> {
    if d_ulb.is_empty() || d_lb.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(mean(d_ulb) - mean(d_lb))
}

/// Mean of `(|g| - 1)^2` over interpolates between zipped pairs (shorter batch
/// cycled), with `g` the critic's input gradient clipped to `max_norm`.
pub fn gradient_penalty(
    critic: &CriticParams,
    h_s: &[Vec<f64>],
    h_t: &[Vec<f64>],
    max_norm: f64,
    rng: &mut SeededRng,
) -> Result<f64, LossError> {
    if h_s.is_empty() || h_t.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (a, b) in pairs(h_s, h_t) {
        if a.len() != b.len() {
            return Err(LossError::ShapeMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        let alpha: f64 = rng.random();
        let x = interpolate(a, b, alpha);
        let g = critic_input_gradient(critic, &x).map_err(from_model)?;
        let (norm, _) = clipped_norm(&g, max_norm);
        acc += (norm - 1.0).powi(2);
        n += 1;
    }
    Ok(acc / n as f64)
}

fn scores(critic: &CriticParams, batch: &[Vec<f64>]) -> Result<Vec<f64>, LossError> {
    batch
        .iter()
        .map(|f| critic_forward(critic, f).map_err(from_model))
        .collect()
}

/// Wasserstein estimate plus gradient penalty.
pub fn wd_loss(
    critic: &CriticParams,
    h_s: &[Vec<f64>],
    h_t: &[Vec<f64>],
    max_norm: f64,
    rng: &mut SeededRng,
) -> Result<f64, LossError> {
    let w = wasserstein_loss(&scores(critic, h_s)?, &scores(critic, h_t)?)?;
    Ok(w + gradient_penalty(critic, h_s, h_t, max_norm, rng)?)
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights, mode: LossMode) -> LossBreakdown {
    let total = match mode {
        LossMode::Eq5 => {
            let w = weights.0;
            w[0] * parts.dice + w[1] * parts.bce + w[2] * parts.branch + w[3] * parts.centerline + w[4] * parts.wd
        }
        LossMode::Eq3 => parts.dice + parts.bce + parts.branch + parts.wd,
    };
    LossBreakdown {
        dice: parts.dice,
        bce: parts.bce,
        branch: parts.branch,
        centerline: parts.centerline,
        wd: parts.wd,
        total,
    }
}

/// Coefficients applied to the dice, BCE, branch and centerline gradients.
pub fn gradient_coefficients(weights: &LossWeights, mode: LossMode) -> [f64; 4] {
    match mode {
        LossMode::Eq5 => [weights.0[0], weights.0[1], weights.0[2], weights.0[3]],
        LossMode::Eq3 => [1.0, 1.0, 1.0, 0.0],
    }
}
