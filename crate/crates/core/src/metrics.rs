//! Overlap and tree metrics, and paired significance tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::morphology::{keep_largest_component, skeletonize, Connectivity};
use crate::tree::{build_skeleton_graph, detect_cycles, AirwayTree};
use crate::volume::BinaryMask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground-truth dimensions differ")]
    DimMismatch,
    #[error("{0} is undefined: zero denominator")]
    UndefinedMetric(&'static str),
    #[error("ground-truth tree has no branches")]
    EmptyTree,
    #[error("branch detection threshold must lie in (0, 1]")]
    InvalidThreshold,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("paired differences have zero variance")]
    DegenerateVariance,
    #[error("need at least {0} pairs")]
    TooFewPairs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimMismatch);
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dsc(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return Err(MetricsError::UndefinedMetric("dsc"));
    }
    Ok(2.0 * c.tp as f64 / den as f64)
}

pub fn iou(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        return Err(MetricsError::UndefinedMetric("iou"));
    }
    Ok(c.tp as f64 / den as f64)
}

pub fn precision(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let den = c.tp + c.fp;
    if den == 0 {
        return Err(MetricsError::UndefinedMetric("precision"));
    }
    Ok(c.tp as f64 / den as f64)
}

fn check_tree(pred: &BinaryMask, gt_tree: &AirwayTree) -> Result<(), MetricsError> {
    if gt_tree.branch_count() == 0 {
        return Err(MetricsError::EmptyTree);
    }
    let dims = pred.dims();
    let inside = gt_tree
        .branches
        .iter()
        .flat_map(|b| &b.path)
        .all(|v| dims.contains([v[0] as i64, v[1] as i64, v[2] as i64]));
    if inside {
        Ok(())
    } else {
        Err(MetricsError::DimMismatch)
    }
}

/// Fraction of ground-truth centerline voxels inside the prediction.
pub fn tree_detected_ratio(pred: &BinaryMask, gt_tree: &AirwayTree) -> Result<f64, MetricsError> {
    check_tree(pred, gt_tree)?;
    let cl = gt_tree.voxel_mask(pred.dims());
    let total = cl.count();
    let hit = cl.voxels().filter(|&v| pred.get(v)).count();
    Ok(hit as f64 / total as f64)
}

/// When a ground-truth branch counts as detected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchDetection {
    /// At least this fraction of the branch path lies inside the prediction.
    Fraction(f64),
    /// Any path voxel lies inside the prediction.
    AnyVoxel,
}

impl Default for BranchDetection {
    fn default() -> Self {
        BranchDetection::Fraction(0.8)
    }
}

pub fn branch_detected_ratio(
    pred: &BinaryMask,
    gt_tree: &AirwayTree,
    rule: BranchDetection,
) -> Result<f64, MetricsError> {
    check_tree(pred, gt_tree)?;
    if let BranchDetection::Fraction(t) = rule {
        if !(t > 0.0 && t <= 1.0) {
            return Err(MetricsError::InvalidThreshold);
        }
    }
    let detected = gt_tree
        .branches
        .iter()
        .filter(|b| {
            let hit = b.path.iter().filter(|&&v| pred.get(v)).count();
            match rule {
                BranchDetection::Fraction(t) => hit as f64 >= t * b.path.len() as f64,
                BranchDetection::AnyVoxel => hit > 0,
            }
        })
        .count();
    Ok(detected as f64 / gt_tree.branch_count() as f64)
}

/// Metric bundle reported for a prediction; undefined ratios are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub td: Option<f64>,
    pub bd: Option<f64>,
    /// Independent cycles in the skeleton of the (post-processed) prediction.
    pub cycle_count: usize,
}

/// Metrics of `pred` against `gt`, after keeping the largest 26-connected
/// component unless `postprocess` is false.
pub fn evaluate(
    pred: &BinaryMask,
    gt: &BinaryMask,
    gt_tree: Option<&AirwayTree>,
    postprocess: bool,
    rule: BranchDetection,
) -> Result<SegmentationReport, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimMismatch);
    }
    let pred = if postprocess {
        keep_largest_component(pred, Connectivity::TwentySix)
    } else {
        pred.clone()
    };
    let c = confusion(&pred, gt)?;
    let defined = |r: Result<f64, MetricsError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::UndefinedMetric(_)) | Err(MetricsError::EmptyTree) => Ok(None),
        Err(e) => Err(e),
    };
    let (td, bd) = match gt_tree {
        Some(t) => (
            defined(tree_detected_ratio(&pred, t))?,
            defined(branch_detected_ratio(&pred, t, rule))?,
        ),
        None => (None, None),
    };
    Ok(SegmentationReport {
        dsc: defined(dsc(&c))?,
        iou: defined(iou(&c))?,
        precision: defined(precision(&c))?,
        td,
        bd,
        cycle_count: detect_cycles(&build_skeleton_graph(&skeletonize(&pred))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    WilcoxonExact,
    WilcoxonNormal,
    PairedT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// The first member of each pair tends to be smaller.
    Less,
    /// The first member of each pair tends to be larger.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n_effective: usize,
}

/// Ranks of `values` (1-based, ties averaged) and the tie-correction sum of `t^3 - t`.
fn average_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    (ranks, tie_sum)
}

/// Number of sign assignments giving each positive-rank sum `0..=n(n+1)/2`.
fn signed_rank_counts(n: usize) -> Vec<f64> {
    let total = n * (n + 1) / 2;
    let mut counts = vec![0.0; total + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<TestResult, MetricsError> {
    wilcoxon_signed_rank_with(pairs, Alternative::TwoSided)
}

/// Signed-rank test on `a - b`. Zero differences are dropped; the null
/// distribution is exact for at most 25 untied differences, otherwise normal
/// with tie and continuity corrections. The statistic is `min(W+, W-)`.
pub fn wilcoxon_signed_rank_with(pairs: &[(f64, f64)], alt: Alternative) -> Result<TestResult, MetricsError> {
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(MetricsError::AllZeroDifferences);
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let (ranks, tie_sum) = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let (p, method) = if n <= 25 && tie_sum == 0.0 {
        let counts = signed_rank_counts(n);
        let all = 2f64.powi(n as i32);
        let wp = w_plus.round() as usize;
        let tot = n * (n + 1) / 2;
        let mass: f64 = match alt {
            Alternative::TwoSided => {
                let w = statistic.round() as usize;
                (0..=tot).filter(|&t| t.min(tot - t) <= w).map(|t| counts[t]).sum()
            }
            Alternative::Greater => counts[wp..].iter().sum(),
            Alternative::Less => counts[..=wp].iter().sum(),
        };
        (mass / all, TestMethod::WilcoxonExact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_sum / 48.0;
        let p = if var <= 0.0 {
            1.0
        } else {
            let sd = var.sqrt();
            let normal = Normal::standard();
            match alt {
                Alternative::TwoSided => {
                    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
                    2.0 * normal.sf(z)
                }
                Alternative::Greater => normal.sf((w_plus - mean - 0.5) / sd),
                Alternative::Less => normal.cdf((w_plus - mean + 0.5) / sd),
            }
        };
        (p, TestMethod::WilcoxonNormal)
    };
    Ok(TestResult {
        statistic,
        p_value: p.clamp(0.0, 1.0),
        method,
        n_effective: n,
    })
}

/// Two-sided paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(pairs: &[(f64, f64)]) -> Result<TestResult, MetricsError> {
    let n = pairs.len();
    if n < 2 {
        return Err(MetricsError::TooFewPairs(2));
    }
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("positive degrees of freedom");
    let p = 2.0 * dist.sf(t.abs());
    Ok(TestResult {
        statistic: t,
        p_value: p.clamp(0.0, 1.0),
        method: TestMethod::PairedT,
        n_effective: n,
    })
}
