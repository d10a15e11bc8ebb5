//! Voxel classifier over the k^3 intensity neighborhood: one ReLU hidden layer
//! and a logistic output.

use serde::{Deserialize, Serialize};

use super::{ModelError, TrainConfig};
use crate::losses::{
    bce_raw, centerline_loss, dice_raw, gradient_coefficients, recall_raw, total_loss, CenterlineMode, LossBreakdown,
    LossParts, Smooth,
};
use crate::rng::{standard_normal, RngExt, SeededRng};
use crate::volume::{extract_patch, BinaryMask, ImageVolume, PatchSpec, ProbVolume, VolumeDims, Voxel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterParams {
    /// Neighborhood edge length (odd).
    pub k: usize,
    pub hidden: usize,
    /// Row-major `hidden x k^3`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl SegmenterParams {
    pub fn zeros(k: usize, hidden: usize) -> Self {
        let inputs = k * k * k;
        Self {
            k,
            hidden,
            w1: vec![0.0; hidden * inputs],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn random(k: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(k, hidden);
        let s1 = (1.0 / p.inputs() as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = s1 * standard_normal(rng));
        p.w2.iter_mut().for_each(|w| *w = s2 * standard_normal(rng));
        p
    }

    pub fn inputs(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, rest) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = rest[0];
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let expect = [
            (self.hidden * self.inputs(), self.w1.len()),
            (self.hidden, self.b1.len()),
            (self.hidden, self.w2.len()),
        ];
        if self.k.is_multiple_of(2) {
            return Err(ModelError::ShapeMismatch {
                expected: self.k + 1,
                got: self.k,
            });
        }
        for (expected, got) in expect {
            if expected != got {
                return Err(ModelError::ShapeMismatch { expected, got });
            }
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Image padded by `r` voxels on every side with edge values replicated.
struct PaddedImage {
    data: Vec<f64>,
    dims: [usize; 3],
    r: usize,
    /// Offsets of the k^3 neighborhood relative to the center, x fastest.
    offsets: Vec<isize>,
}

impl PaddedImage {
    fn new(img: &ImageVolume, k: usize) -> Self {
        let r = k / 2;
        let d = img.dims().as_array();
        let dims = [d[0] + 2 * r, d[1] + 2 * r, d[2] + 2 * r];
        let clamp = |c: usize, n: usize| c.saturating_sub(r).min(n - 1);
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(img.get([clamp(x, d[0]), clamp(y, d[1]), clamp(z, d[2])]) as f64);
                }
            }
        }
        let r_i = r as isize;
        let mut offsets = Vec::with_capacity(k * k * k);
        for dz in -r_i..=r_i {
            for dy in -r_i..=r_i {
                for dx in -r_i..=r_i {
                    offsets.push(dx + dims[0] as isize * (dy + dims[1] as isize * dz));
                }
            }
        }
        Self { data, dims, r, offsets }
    }

    fn gather(&self, v: Voxel, out: &mut [f64]) {
        let c = (v[0] + self.r) + self.dims[0] * ((v[1] + self.r) + self.dims[1] * (v[2] + self.r));
        for (o, off) in out.iter_mut().zip(&self.offsets) {
            *o = self.data[(c as isize + off) as usize];
        }
    }
}

/// Forward pass over one region; hidden activations are kept for backprop.
struct RegionPass {
    probs: Vec<f64>,
    hidden: Vec<f64>,
}

fn region_voxels(spec: &PatchSpec) -> impl Iterator<Item = Voxel> + '_ {
    let d = spec.dims.as_array();
    (0..spec.dims.len()).map(move |i| {
        let x = i % d[0];
        let y = (i / d[0]) % d[1];
        let z = i / (d[0] * d[1]);
        [spec.origin[0] + x, spec.origin[1] + y, spec.origin[2] + z]
    })
}

fn forward_region(p: &SegmenterParams, img: &PaddedImage, spec: &PatchSpec, keep_hidden: bool) -> RegionPass {
    let n_in = p.inputs();
    let mut x = vec![0.0; n_in];
    let mut h = vec![0.0; p.hidden];
    let mut probs = Vec::with_capacity(spec.dims.len());
    let mut hidden = Vec::with_capacity(if keep_hidden { spec.dims.len() * p.hidden } else { 0 });
    for v in region_voxels(spec) {
        img.gather(v, &mut x);
        let mut z = p.b2;
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &p.w1[j * n_in..(j + 1) * n_in];
            let a = p.b1[j] + row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>();
            *hj = a.max(0.0);
            z += p.w2[j] * *hj;
        }
        probs.push(sigmoid(z));
        if keep_hidden {
            hidden.extend_from_slice(&h);
        }
    }
    RegionPass { probs, hidden }
}

/// Accumulates `sum_v dL/dp_v * dp_v/dtheta` into `acc` (flattened parameter order).
fn backward_region(
    p: &SegmenterParams,
    img: &PaddedImage,
    spec: &PatchSpec,
    pass: &RegionPass,
    dl_dp: &[f64],
    scale: f64,
    acc: &mut [f64],
) {
    let n_in = p.inputs();
    let (w1_len, b1_len) = (p.w1.len(), p.b1.len());
    let mut x = vec![0.0; n_in];
    for (i, v) in region_voxels(spec).enumerate() {
        let prob = pass.probs[i];
        let dz = scale * dl_dp[i] * prob * (1.0 - prob);
        if dz == 0.0 {
            continue;
        }
        img.gather(v, &mut x);
        let h = &pass.hidden[i * p.hidden..(i + 1) * p.hidden];
        for j in 0..p.hidden {
            acc[w1_len + b1_len + j] += dz * h[j];
            if h[j] > 0.0 {
                let dh = dz * p.w2[j];
                acc[w1_len + j] += dh;
                let row = &mut acc[j * n_in..(j + 1) * n_in];
                for (a, xi) in row.iter_mut().zip(&x) {
                    *a += dh * xi;
                }
            }
        }
        acc[w1_len + b1_len + p.hidden] += dz;
    }
}

/// Probability map over the whole image; borders use clamped-edge neighborhoods.
pub fn segmenter_predict(p: &SegmenterParams, img: &ImageVolume) -> ProbVolume {
    let padded = PaddedImage::new(img, p.k);
    let pass = forward_region(p, &padded, &PatchSpec::whole(img.dims()), false);
    ProbVolume::new(img.dims(), pass.probs).expect("sigmoid output lies in [0, 1]")
}

fn check_input(p: &SegmenterParams, x: &[f64]) -> Result<(), ModelError> {
    p.check()?;
    if x.len() != p.inputs() {
        return Err(ModelError::ShapeMismatch {
            expected: p.inputs(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Probability for one flattened k^3 neighborhood (x fastest).
pub fn segmenter_voxel_forward(p: &SegmenterParams, x: &[f64]) -> Result<f64, ModelError> {
    check_input(p, x)?;
    let n_in = p.inputs();
    let z = (0..p.hidden).fold(p.b2, |z, j| {
        let a = p.b1[j]
            + p.w1[j * n_in..(j + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(w, xi)| w * xi)
                .sum::<f64>();
        z + p.w2[j] * a.max(0.0)
    });
    Ok(sigmoid(z))
}

/// Gradients of one voxel's probability with respect to the flattened parameters
/// and to the neighborhood intensities. ReLU subgradient at 0 is 0.
pub fn segmenter_voxel_gradients(p: &SegmenterParams, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    check_input(p, x)?;
    let n_in = p.inputs();
    let (w1_len, b1_len) = (p.w1.len(), p.b1.len());
    let pre: Vec<f64> = (0..p.hidden)
        .map(|j| {
            p.b1[j]
                + p.w1[j * n_in..(j + 1) * n_in]
                    .iter()
                    .zip(x)
                    .map(|(w, xi)| w * xi)
                    .sum::<f64>()
        })
        .collect();
    let z = p.b2 + pre.iter().zip(&p.w2).map(|(a, w)| w * a.max(0.0)).sum::<f64>();
    let prob = sigmoid(z);
    let dz = prob * (1.0 - prob);
    let mut dparam = vec![0.0; p.param_count()];
    let mut dx = vec![0.0; n_in];
    for j in 0..p.hidden {
        dparam[w1_len + b1_len + j] = dz * pre[j].max(0.0);
        if pre[j] > 0.0 {
            let dh = dz * p.w2[j];
            dparam[w1_len + j] = dh;
            for i in 0..n_in {
                dparam[j * n_in + i] = dh * x[i];
                dx[i] += dh * p.w1[j * n_in + i];
            }
        }
    }
    dparam[w1_len + b1_len + p.hidden] = dz;
    Ok((dparam, dx))
}

/// A labeled volume prepared for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: ImageVolume,
    pub gt_mask: BinaryMask,
    /// Voxels of the ground-truth branch paths (branch loss index set).
    pub branch_voxels: BinaryMask,
    /// Centerline supervising the centerline term (machine or corrected).
    pub centerline: BinaryMask,
}

/// Loss breakdown on one patch and the gradient of the differentiable objective
/// with respect to the parameters. `wd` enters the total as a constant.
pub fn patch_loss_gradient(
    p: &SegmenterParams,
    sample: &TrainingSample,
    spec: &PatchSpec,
    cfg: &TrainConfig,
    wd: f64,
) -> Result<(LossBreakdown, f64, Vec<f64>), ModelError> {
    let padded = PaddedImage::new(&sample.image, p.k);
    let mut acc = vec![0.0; p.param_count()];
    let (b, objective) = patch_accumulate(p, &padded, sample, spec, cfg, wd, 1.0, &mut acc)?;
    Ok((b, objective, acc))
}

#[allow(clippy::too_many_arguments)]
fn patch_accumulate(
    p: &SegmenterParams,
    padded: &PaddedImage,
    sample: &TrainingSample,
    spec: &PatchSpec,
    cfg: &TrainConfig,
    wd: f64,
    scale: f64,
    acc: &mut [f64],
) -> Result<(LossBreakdown, f64), ModelError> {
    let s = Smooth::default();
    let pass = forward_region(p, padded, spec, true);
    let gt = extract_patch(&sample.gt_mask, spec).map_err(|_| ModelError::EmptyPatch)?;
    let idx = extract_patch(&sample.branch_voxels, spec).map_err(|_| ModelError::EmptyPatch)?;
    let cl = extract_patch(&sample.centerline, spec).map_err(|_| ModelError::EmptyPatch)?;
    let (dice, g_dice) = dice_raw(&pass.probs, gt.data(), s.0);
    let (bce, g_bce) = bce_raw(&pass.probs, gt.data());
    let (branch, g_branch) = recall_raw(&pass.probs, idx.data(), gt.data(), s.0);
    let (cl_surrogate, g_cl) = recall_raw(&pass.probs, cl.data(), cl.data(), s.0);
    let centerline = if cl.is_blank() {
        0.0
    } else {
        let prob = ProbVolume::new(spec.dims, pass.probs.clone()).expect("probabilities");
        centerline_loss(&prob, cfg.binarize_threshold, &cl, s, CenterlineMode::Corrected)?.0
    };
    let parts = LossParts {
        dice,
        bce,
        branch,
        centerline,
        wd,
    };
    let breakdown = total_loss(&parts, &cfg.weights, cfg.loss_mode);
    let c = gradient_coefficients(&cfg.weights, cfg.loss_mode);
    let objective = c[0] * dice + c[1] * bce + c[2] * branch + c[3] * cl_surrogate;
    let dl_dp: Vec<f64> = (0..pass.probs.len())
        .map(|i| c[0] * g_dice[i] + c[1] * g_bce[i] + c[2] * g_branch[i] + c[3] * g_cl[i])
        .collect();
    backward_region(p, padded, spec, &pass, &dl_dp, scale, acc);
    Ok((breakdown, objective))
}

/// Cubic patch of edge `size` (clipped to the volume) around a random foreground
/// voxel, or anywhere with probability 0.2.
fn sample_patch(sample: &TrainingSample, size: usize, fg: &[usize], rng: &mut SeededRng) -> PatchSpec {
    let dims = sample.gt_mask.dims();
    let d = dims.as_array();
    let center = if !fg.is_empty() && rng.random::<f64>() < 0.8 {
        dims.coord(fg[rng.random_range(0..fg.len())])
    } else {
        [
            rng.random_range(0..d[0]),
            rng.random_range(0..d[1]),
            rng.random_range(0..d[2]),
        ]
    };
    let mut origin = [0; 3];
    let mut pd = [0; 3];
    for a in 0..3 {
        pd[a] = size.min(d[a]);
        origin[a] = center[a].saturating_sub(pd[a] / 2).min(d[a] - pd[a]);
    }
    PatchSpec::new(origin, VolumeDims::new(pd[0], pd[1], pd[2]).expect("positive"))
}

/// Plain SGD on patches drawn around the foreground. Returns the trained
/// parameters and the mean loss breakdown of every epoch.
pub fn train_segmenter(
    p: &SegmenterParams,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    wd: f64,
    rng: &mut SeededRng,
) -> Result<(SegmenterParams, Vec<LossBreakdown>), ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    p.check()?;
    cfg.validate()?;
    for s in samples {
        let d = s.image.dims();
        if s.gt_mask.dims() != d || s.branch_voxels.dims() != d || s.centerline.dims() != d {
            return Err(ModelError::Loss(crate::losses::LossError::DimMismatch));
        }
    }
    let padded: Vec<PaddedImage> = samples.iter().map(|s| PaddedImage::new(&s.image, p.k)).collect();
    let fg: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| {
            (0..s.gt_mask.dims().len())
                .filter(|&i| s.gt_mask.get_index(i))
                .collect()
        })
        .collect();
    let mut out = p.clone();
    let mut theta = out.params();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        // Fisher-Yates on the sample order.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = vec![0.0; theta.len()];
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let spec = sample_patch(&samples[i], cfg.patch_size, &fg[i], rng);
                let (b, _) = patch_accumulate(&out, &padded[i], &samples[i], &spec, cfg, wd, scale, &mut acc)?;
                sum.dice += b.dice;
                sum.bce += b.bce;
                sum.branch += b.branch;
                sum.centerline += b.centerline;
                sum.wd += b.wd;
                sum.total += b.total;
            }
            for (t, g) in theta.iter_mut().zip(&acc) {
                *t -= cfg.learning_rate * g;
            }
            out.set_params(&theta);
        }
        let n = samples.len() as f64;
        curve.push(LossBreakdown {
            dice: sum.dice / n,
            bce: sum.bce / n,
            branch: sum.branch / n,
            centerline: sum.centerline / n,
            wd: sum.wd / n,
            total: sum.total / n,
        });
    }
    Ok((out, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Direct per-voxel evaluation with explicit clamped indexing.
    fn naive_predict(p: &SegmenterParams, img: &ImageVolume, v: Voxel) -> f64 {
        let d = img.dims().as_array();
        let r = (p.k / 2) as i64;
        let mut x = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let c = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                    let c: Vec<usize> = (0..3).map(|a| c[a].clamp(0, d[a] as i64 - 1) as usize).collect();
                    x.push(img.get([c[0], c[1], c[2]]) as f64);
                }
            }
        }
        let mut z = p.b2;
        for j in 0..p.hidden {
            let mut a = p.b1[j];
            for (i, xi) in x.iter().enumerate() {
                a += p.w1[j * x.len() + i] * xi;
            }
            z += p.w2[j] * a.max(0.0);
        }
        1.0 / (1.0 + (-z).exp())
    }

    fn random_image(rng: &mut SeededRng, dims: VolumeDims) -> ImageVolume {
        let data = (0..dims.len()).map(|_| standard_normal(rng) as f32).collect();
        ImageVolume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn zero_weights_give_half() {
        let img = ImageVolume::filled(VolumeDims::cube(4), 3.0);
        let out = segmenter_predict(&SegmenterParams::zeros(5, 16), &img);
        assert!(out.data().iter().all(|&v| v == 0.5));
        let mut p = SegmenterParams::zeros(5, 16);
        p.b2 = 20.0;
        assert!(segmenter_predict(&p, &img).data().iter().all(|&v| v > 0.999));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = seeded(3);
        let dims = VolumeDims::cube(8);
        let img = random_image(&mut rng, dims);
        let mut p = SegmenterParams::random(5, 16, &mut rng);
        p.b1.iter_mut().for_each(|b| *b = 0.1 * standard_normal(&mut rng));
        let out = segmenter_predict(&p, &img);
        for i in 0..dims.len() {
            let v = dims.coord(i);
            assert!((out.get(v) - naive_predict(&p, &img, v)).abs() < 1e-12);
        }
    }

    #[test]
    fn params_roundtrip() {
        let p = SegmenterParams::random(3, 4, &mut seeded(1));
        let mut q = SegmenterParams::zeros(3, 4);
        q.set_params(&p.params());
        assert_eq!(p, q);
        assert!(SegmenterParams::zeros(4, 2).check().is_err());
    }

    fn tube_sample(noise: f64, rng: &mut SeededRng) -> TrainingSample {
        let dims = VolumeDims::cube(16);
        let mut gt = BinaryMask::empty(dims);
        let mut cl = BinaryMask::empty(dims);
        for z in 1..15 {
            cl.set([8, 8, z], true);
            for y in 7..10 {
                for x in 7..10 {
                    gt.set([x, y, z], true);
                }
            }
        }
        let data = gt
            .data()
            .iter()
            .map(|&b| (b as u8 as f64 + noise * standard_normal(rng)) as f32)
            .collect();
        TrainingSample {
            image: ImageVolume::new(dims, [1.0; 3], data).unwrap(),
            gt_mask: gt,
            branch_voxels: cl.clone(),
            centerline: cl,
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mut rng = seeded(8);
        let sample = tube_sample(0.0, &mut rng);
        let p = SegmenterParams::random(5, 16, &mut rng);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 1,
            patch_size: 16,
            ..TrainConfig::default()
        };
        let (_, curve) = train_segmenter(&p, std::slice::from_ref(&sample), &cfg, 0.0, &mut seeded(1)).unwrap();
        assert_eq!(curve.len(), 50);
        assert!(curve[49].total < curve[0].total, "{:?} -> {:?}", curve[0], curve[49]);
        let (q, again) = train_segmenter(&p, std::slice::from_ref(&sample), &cfg, 0.0, &mut seeded(1)).unwrap();
        assert_eq!(curve, again);
        let zero = TrainConfig { epochs: 0, ..cfg };
        let (same, empty) = train_segmenter(&p, std::slice::from_ref(&sample), &zero, 0.0, &mut seeded(1)).unwrap();
        assert_eq!((same, empty.len()), (p.clone(), 0));
        assert_ne!(q, p);
        assert_eq!(
            train_segmenter(&p, &[], &cfg, 0.0, &mut seeded(1)),
            Err(ModelError::EmptyTrainingSet)
        );
    }
}
