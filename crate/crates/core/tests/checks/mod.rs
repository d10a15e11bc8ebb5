//! Seeded measurement loops shared by the property tests, which assert on
//! them, and the acceptance suite, which reports them.
#![allow(dead_code)]

use airwayal::losses::{bce_loss, branch_loss_indexed, centerline_surrogate, dice_loss, LossMode, Smooth};
use airwayal::metrics::{
    branch_detected_ratio, dsc, iou, tree_detected_ratio, wilcoxon_signed_rank, wilcoxon_signed_rank_with, Alternative,
    BranchDetection, ConfusionCounts, TestMethod,
};
use airwayal::model::critic::CRITIC_WIDTHS;
use airwayal::model::{
    critic_forward, critic_input_gradient, critic_param_gradient, patch_loss_gradient, segmenter_voxel_forward,
    segmenter_voxel_gradients, wd_objective_gradient, CriticParams, SegmenterParams, TrainConfig, TrainingSample,
};
use airwayal::morphology::{
    component_count, connected_components, is_thin, keep_largest_component, skeletonize, Connectivity,
};
use airwayal::orchestrator::{centerline_tree, generate_phantom, PhantomSpec};
use airwayal::rng::{derived, standard_normal, RngExt, SeededRng};
use airwayal::tree::AirwayTree;
use airwayal::volume::{BinaryMask, ImageVolume, PatchSpec, ProbVolume, VolumeDims};

use crate::oracles::{
    background_components, brute_bd, brute_td, enumerate_signed_rank, euler_characteristic, flood_labels,
    flood_largest, neighbor_offsets, numeric_gradient, random_blobs, random_mask, rel_err,
};

// ---------------------------------------------------------------------------
// Gradients

pub const GRAD_CASES: u64 = 100;
pub const GRAD_TOL: f64 = 1e-4;
const LOSS_STEP: f64 = 1e-4;
const MODEL_STEP: f64 = 1e-6;

fn probs(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
}

fn nonblank(rng: &mut SeededRng, dims: VolumeDims, density: f64) -> BinaryMask {
    let mut m = random_mask(rng, dims, density);
    m.set_index(rng.random_range(0..dims.len()), true);
    m
}

/// Runs `check` over seeded cases and returns the worst relative error.
fn worst(tag: &str, check: impl Fn(&mut SeededRng) -> f64) -> f64 {
    (0..GRAD_CASES)
        .map(|i| check(&mut derived(11, tag, i)))
        .fold(0.0, f64::max)
}

fn prob_volume(dims: VolumeDims, p: &[f64]) -> ProbVolume {
    ProbVolume::new(dims, p.to_vec()).unwrap()
}

pub fn grad_dice() -> f64 {
    worst("dice", |rng| {
        let dims = VolumeDims::new(4, 3, 2).unwrap();
        let gt = random_mask(rng, dims, 0.4);
        let p = probs(rng, dims.len());
        let s = Smooth(rng.random_range(1e-6..1.0));
        let (_, g) = dice_loss(&prob_volume(dims, &p), &gt, s).unwrap();
        let n = numeric_gradient(|x| dice_loss(&prob_volume(dims, x), &gt, s).unwrap().0, &p, LOSS_STEP);
        rel_err(&g, &n)
    })
}

pub fn grad_bce() -> f64 {
    worst("bce", |rng| {
        let dims = VolumeDims::new(3, 3, 3).unwrap();
        let gt = random_mask(rng, dims, 0.5);
        let p = probs(rng, dims.len());
        let (_, g) = bce_loss(&prob_volume(dims, &p), &gt).unwrap();
        let n = numeric_gradient(|x| bce_loss(&prob_volume(dims, x), &gt).unwrap().0, &p, LOSS_STEP);
        rel_err(&g, &n)
    })
}

pub fn grad_branch() -> f64 {
    worst("branch", |rng| {
        let dims = VolumeDims::new(5, 4, 2).unwrap();
        let gt = nonblank(rng, dims, 0.5);
        let idx = nonblank(rng, dims, 0.5).union(&gt).unwrap();
        let p = probs(rng, dims.len());
        let s = Smooth(rng.random_range(1e-6..1.0));
        let (_, g) = branch_loss_indexed(&prob_volume(dims, &p), &idx, &gt, s).unwrap();
        let n = numeric_gradient(
            |x| branch_loss_indexed(&prob_volume(dims, x), &idx, &gt, s).unwrap().0,
            &p,
            LOSS_STEP,
        );
        rel_err(&g, &n)
    })
}

pub fn grad_centerline() -> f64 {
    worst("centerline", |rng| {
        let dims = VolumeDims::new(4, 4, 3).unwrap();
        let cl = nonblank(rng, dims, 0.2);
        let p = probs(rng, dims.len());
        let s = Smooth(rng.random_range(1e-6..1.0));
        let (_, g) = centerline_surrogate(&prob_volume(dims, &p), &cl, s).unwrap();
        let n = numeric_gradient(
            |x| centerline_surrogate(&prob_volume(dims, x), &cl, s).unwrap().0,
            &p,
            LOSS_STEP,
        );
        rel_err(&g, &n)
    })
}

fn random_critic(rng: &mut SeededRng) -> (CriticParams, Vec<usize>) {
    // Small random architectures keep the difference quotients cheap while
    // still exercising every layer; every tenth case uses the real widths.
    let widths: Vec<usize> = if rng.random_range(0..10) == 0 {
        CRITIC_WIDTHS.to_vec()
    } else {
        let depth = rng.random_range(1..=5);
        let mut w: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=6)).collect();
        w.push(1);
        w
    };
    let mut c = CriticParams::random(&widths, rng);
    // Nonzero biases keep pre-activations off the ReLU kink, where the
    // difference quotient straddles two slopes.
    for l in &mut c.layers {
        l.bias.iter_mut().for_each(|b| *b = 0.1 * standard_normal(rng));
    }
    (c, widths)
}

fn features(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

pub fn grad_critic_input() -> f64 {
    worst("critic-input", |rng| {
        let (c, w) = random_critic(rng);
        let f = features(rng, w[0]);
        let g = critic_input_gradient(&c, &f).unwrap();
        let n = numeric_gradient(|x| critic_forward(&c, x).unwrap(), &f, MODEL_STEP);
        rel_err(&g, &n)
    })
}

pub fn grad_critic_param() -> f64 {
    worst("critic-param", |rng| {
        let (c, w) = random_critic(rng);
        let f = features(rng, w[0]);
        let g = critic_param_gradient(&c, &f).unwrap();
        let n = numeric_gradient(
            |t| {
                let mut q = c.clone();
                q.set_params(t);
                critic_forward(&q, &f).unwrap()
            },
            &c.params(),
            MODEL_STEP,
        );
        rel_err(&g, &n)
    })
}

/// Wasserstein estimate plus gradient penalty, differentiated twice through the critic.
pub fn grad_critic_objective() -> f64 {
    worst("critic-wd", |rng| {
        let (c, w) = random_critic(rng);
        let batch = rng.random_range(1..=3);
        let h_s: Vec<Vec<f64>> = (0..batch).map(|_| features(rng, w[0])).collect();
        let h_t: Vec<Vec<f64>> = (0..batch).map(|_| features(rng, w[0])).collect();
        let alphas: Vec<f64> = (0..batch).map(|_| rng.random()).collect();
        // Mostly unclipped; some cases with a tight bound exercise the clipped branch.
        let max_norm = if rng.random_range(0..4) == 0 { 0.05 } else { 1e6 };
        let (_, g) = wd_objective_gradient(&c, &h_s, &h_t, &alphas, max_norm).unwrap();
        let n = numeric_gradient(
            |t| {
                let mut q = c.clone();
                q.set_params(t);
                wd_objective_gradient(&q, &h_s, &h_t, &alphas, max_norm).unwrap().0
            },
            &c.params(),
            MODEL_STEP,
        );
        rel_err(&g, &n)
    })
}

pub fn grad_segmenter_voxel() -> f64 {
    worst("segmenter-voxel", |rng| {
        let k = if rng.random::<bool>() { 3 } else { 5 };
        let hidden = rng.random_range(1..=8);
        let mut p = SegmenterParams::random(k, hidden, rng);
        p.b1.iter_mut().for_each(|b| *b = 0.1 * standard_normal(rng));
        let x = features(rng, p.inputs());
        let (gp, gx) = segmenter_voxel_gradients(&p, &x).unwrap();
        let nx = numeric_gradient(|v| segmenter_voxel_forward(&p, v).unwrap(), &x, MODEL_STEP);
        let np = numeric_gradient(
            |t| {
                let mut q = p.clone();
                q.set_params(t);
                segmenter_voxel_forward(&q, &x).unwrap()
            },
            &p.params(),
            MODEL_STEP,
        );
        rel_err(&gx, &nx).max(rel_err(&gp, &np))
    })
}

pub fn grad_segmenter_patch() -> f64 {
    worst("segmenter-patch", |rng| {
        let dims = VolumeDims::cube(5);
        let image = ImageVolume::new(dims, [1.0; 3], (0..dims.len()).map(|_| rng.random::<f32>()).collect()).unwrap();
        let sample = TrainingSample {
            image,
            gt_mask: nonblank(rng, dims, 0.4),
            branch_voxels: nonblank(rng, dims, 0.3),
            centerline: nonblank(rng, dims, 0.1),
        };
        let mut p = SegmenterParams::random(3, rng.random_range(1..=4), rng);
        p.b1.iter_mut().for_each(|b| *b = 0.1 * standard_normal(rng));
        let cfg = TrainConfig {
            loss_mode: if rng.random::<bool>() {
                LossMode::Eq5
            } else {
                LossMode::Eq3
            },
            ..TrainConfig::default()
        };
        let origin = [rng.random_range(0..2), rng.random_range(0..2), rng.random_range(0..2)];
        let spec = PatchSpec::new(origin, VolumeDims::cube(4));
        let (_, _, g) = patch_loss_gradient(&p, &sample, &spec, &cfg, 0.3).unwrap();
        let n = numeric_gradient(
            |t| {
                let mut q = p.clone();
                q.set_params(t);
                patch_loss_gradient(&q, &sample, &spec, &cfg, 0.3).unwrap().1
            },
            &p.params(),
            MODEL_STEP,
        );
        rel_err(&g, &n)
    })
}

/// A named measurement returning its worst relative error.
pub type GradientCheck = (&'static str, fn() -> f64);

pub const GRADIENT_CHECKS: [GradientCheck; 9] = [
    ("dice", grad_dice),
    ("bce", grad_bce),
    ("branch", grad_branch),
    ("centerline surrogate", grad_centerline),
    ("critic input", grad_critic_input),
    ("critic params", grad_critic_param),
    ("critic objective", grad_critic_objective),
    ("segmenter voxel params+input", grad_segmenter_voxel),
    ("segmenter patch objective", grad_segmenter_patch),
];

// ---------------------------------------------------------------------------
// Morphology

pub const CONNS: [(Connectivity, usize); 3] = [
    (Connectivity::Six, 1),
    (Connectivity::Eighteen, 2),
    (Connectivity::TwentySix, 3),
];

/// (seed, connectivity) pairs where labeling disagrees with flood fill, over 100 random 16³ volumes.
pub fn labeling_mismatches() -> Vec<String> {
    let mut bad = Vec::new();
    for seed in 0..100 {
        let mut rng = derived(3, "cca", seed);
        let density = rng.random_range(0.05..0.6);
        let mask = random_mask(&mut rng, VolumeDims::cube(16), density);
        for (conn, nz) in CONNS {
            let lv = connected_components(&mask, conn);
            let (labels, count) = flood_labels(&mask, &neighbor_offsets(nz));
            if lv.label_count != count || lv.labels != labels {
                bad.push(format!("seed {seed} {conn:?}"));
            }
        }
    }
    bad
}

/// Same for keep-largest, plus single-component and idempotence checks.
pub fn largest_mismatches() -> Vec<String> {
    let mut bad = Vec::new();
    for seed in 0..100 {
        let mut rng = derived(3, "largest", seed);
        let density = rng.random_range(0.05..0.4);
        let mask = random_mask(&mut rng, VolumeDims::cube(16), density);
        for (conn, nz) in CONNS {
            let kept = keep_largest_component(&mask, conn);
            if kept != flood_largest(&mask, &neighbor_offsets(nz))
                || component_count(&kept, conn) > 1
                || keep_largest_component(&kept, conn) != kept
            {
                bad.push(format!("seed {seed} {conn:?}"));
            }
        }
    }
    bad
}

pub fn euler(mask: &BinaryMask) -> i64 {
    euler_characteristic(mask.voxels().map(|v| [v[0] as i64, v[1] as i64, v[2] as i64]))
}

/// Violated skeleton invariants of one mask.
pub fn skeleton_violations(mask: &BinaryMask) -> Vec<&'static str> {
    let skel = skeletonize(mask);
    let mut bad = Vec::new();
    if !skel.is_subset_of(mask) {
        bad.push("subset");
    }
    if !is_thin(&skel) {
        bad.push("thin");
    }
    if component_count(&skel, Connectivity::TwentySix) != component_count(mask, Connectivity::TwentySix) {
        bad.push("component count");
    }
    if background_components(&skel) != background_components(mask) {
        bad.push("cavities");
    }
    if euler(&skel) != euler(mask) {
        bad.push("euler characteristic");
    }
    if skeletonize(&skel) != skel {
        bad.push("fixed point");
    }
    bad
}

/// The 100 fuzzed masks: half box unions, half random noise, 6..24 per axis.
pub fn fuzzed_mask(seed: u64) -> BinaryMask {
    let mut rng = derived(3, "skeleton", seed);
    let n = rng.random_range(6..=24);
    let dims = VolumeDims::new(n, rng.random_range(6..=24), rng.random_range(6..=24)).unwrap();
    if seed.is_multiple_of(2) {
        let boxes = rng.random_range(1..12);
        random_blobs(&mut rng, dims, boxes)
    } else {
        let density = rng.random_range(0.1..0.7);
        random_mask(&mut rng, dims, density)
    }
}

pub fn skeleton_fuzz_failures() -> Vec<String> {
    (0..100)
        .filter_map(|seed| {
            let bad = skeleton_violations(&fuzzed_mask(seed));
            (!bad.is_empty()).then(|| format!("seed {seed}: {}", bad.join(", ")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics

/// A noise-free phantom's centerline tree and a damaged prediction.
pub fn tube_case(seed: u64) -> (BinaryMask, AirwayTree, BinaryMask) {
    let spec = PhantomSpec {
        branch_count: (1, 5),
        noise: 0.0,
        ..PhantomSpec::default()
    };
    let p = generate_phantom(seed, &spec).unwrap();
    let tree = centerline_tree(&skeletonize(&p.gt_mask)).unwrap();
    let mut rng = derived(seed, "damage", 0);
    let pred = damage(&p.gt_mask, &mut rng);
    (p.gt_mask, tree, pred)
}

/// Cuts random slabs out of the mask and sprinkles false positives.
fn damage(mask: &BinaryMask, rng: &mut SeededRng) -> BinaryMask {
    let mut out = mask.clone();
    let d = mask.dims().as_array();
    for _ in 0..rng.random_range(0..6) {
        let axis = rng.random_range(0..3);
        let at = rng.random_range(0..d[axis]);
        let width = rng.random_range(1..5);
        for v in mask.voxels() {
            if v[axis] >= at && v[axis] < at + width {
                out.set(v, false);
            }
        }
    }
    for _ in 0..rng.random_range(0..50) {
        out.set(
            [
                rng.random_range(0..d[0]),
                rng.random_range(0..d[1]),
                rng.random_range(0..d[2]),
            ],
            true,
        );
    }
    out
}

/// Tube cases (out of 50) where TD or BD under any rule differs from brute force.
pub fn td_bd_mismatches() -> Vec<String> {
    let mut bad = Vec::new();
    for seed in 0..50 {
        let (_, tree, pred) = tube_case(seed);
        if tree_detected_ratio(&pred, &tree).unwrap() != brute_td(&pred, &tree) {
            bad.push(format!("seed {seed} td"));
        }
        for t in [0.5, 0.8, 1.0] {
            if branch_detected_ratio(&pred, &tree, BranchDetection::Fraction(t)).unwrap()
                != brute_bd(&pred, &tree, Some(t))
            {
                bad.push(format!("seed {seed} bd@{t}"));
            }
        }
        if branch_detected_ratio(&pred, &tree, BranchDetection::AnyVoxel).unwrap() != brute_bd(&pred, &tree, None) {
            bad.push(format!("seed {seed} bd@any"));
        }
    }
    bad
}

/// Worst |dsc − 2·iou/(1+iou)| over fuzzed confusion counts.
pub fn dsc_iou_worst(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let mut rng = derived(5, "dsc-iou", i);
        // Mix small and large magnitudes so both rounding regimes appear.
        let hi = if i % 2 == 0 { 20 } else { 1_000_000_000 };
        let c = ConfusionCounts {
            tp: rng.random_range(0..hi),
            fp: rng.random_range(0..hi),
            fn_: rng.random_range(0..hi),
            tn: rng.random_range(0..hi),
        };
        if let (Ok(d), Ok(j)) = (dsc(&c), iou(&c)) {
            worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
        }
    }
    worst
}

/// Worst |p − enumeration p| over 50 datasets with n ≤ 10 and all three alternatives.
pub fn wilcoxon_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let mut rng = derived(5, "wilcoxon", case);
        let n = rng.random_range(1..=10);
        // Distinct magnitudes: a shuffled ladder with random signs and jitter.
        let mut mags: Vec<f64> = (1..=n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
        for i in (1..n).rev() {
            mags.swap(i, rng.random_range(0..=i));
        }
        let pairs: Vec<(f64, f64)> = mags
            .iter()
            .map(|&m| {
                let b = rng.random_range(-5.0..5.0);
                (b + if rng.random::<bool>() { m } else { -m }, b)
            })
            .collect();
        let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
        let (two, greater, less) = enumerate_signed_rank(&diffs);
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        if r.method != TestMethod::WilcoxonExact {
            return f64::INFINITY;
        }
        let g = wilcoxon_signed_rank_with(&pairs, Alternative::Greater).unwrap();
        let l = wilcoxon_signed_rank_with(&pairs, Alternative::Less).unwrap();
        worst = worst
            .max((r.p_value - two.min(1.0)).abs())
            .max((g.p_value - greater).abs())
            .max((l.p_value - less).abs());
    }
    worst
}
