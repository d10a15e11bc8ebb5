//! Synthetic branching-tube volumes with known tree truth, and simulated
//! centerline-extraction flaws.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{seeded, standard_normal, RngExt, SeededRng};
use crate::tree::{build_skeleton_graph, parse_tree, RootPolicy};
use crate::volume::{BinaryMask, ImageVolume, VolumeDims, Voxel};

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("cannot place the requested tree in the volume: {0}")]
    SpecInfeasible(String),
    #[error("centerline is empty")]
    EmptyCenterline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: VolumeDims,
    /// Inclusive range. Bifurcating trees have an odd number of branches, so the
    /// generator draws among the odd values of the range.
    pub branch_count: (usize, usize),
    pub radius: (f64, f64),
    pub noise: f64,
    #[serde(default)]
    pub distal_dilation: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: VolumeDims::cube(32),
            branch_count: (3, 5),
            radius: (1.0, 2.0),
            noise: 0.12,
            distal_dilation: false,
        }
    }
}

/// One tube of the phantom tree: a tapered capsule between two points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius_start: f64,
    pub radius_end: f64,
    pub parent: Option<usize>,
}

impl Segment {
    fn max_radius(&self) -> f64 {
        self.radius_start.max(self.radius_end)
    }

    fn length(&self) -> f64 {
        norm(sub(self.end, self.start))
    }

    fn direction(&self) -> [f64; 3] {
        scale(sub(self.end, self.start), 1.0 / self.length())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: ImageVolume,
    pub gt_mask: BinaryMask,
    pub segments: Vec<Segment>,
    pub branch_count: usize,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Distance from `p` to the segment, and the clamped projection parameter.
fn point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> (f64, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 {
        0.0
    } else {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    };
    (norm(sub(p, add(a, scale(ab, t)))), t)
}

/// Minimum distance from the part of `s` at arc length `>= skip` to segment `t`.
fn clearance(s: &Segment, skip: f64, t: &Segment) -> f64 {
    let len = s.length();
    let dir = s.direction();
    let mut best = f64::INFINITY;
    let mut arc = skip;
    while arc <= len {
        let (d, _) = point_segment(add(s.start, scale(dir, arc)), t.start, t.end);
        best = best.min(d);
        arc += 0.5;
    }
    best
}

fn random_unit_perpendicular(rng: &mut SeededRng, d: [f64; 3]) -> [f64; 3] {
    loop {
        let v = [standard_normal(rng), standard_normal(rng), standard_normal(rng)];
        let c = cross(d, v);
        let n = norm(c);
        if n > 1e-6 {
            return scale(c, 1.0 / n);
        }
    }
}

struct Grower<'a> {
    spec: &'a PhantomSpec,
    min_len: f64,
    max_len: f64,
    dilation: f64,
}

impl Grower<'_> {
    fn inside(&self, p: [f64; 3], r: f64) -> bool {
        let d = self.spec.dims.as_array();
        let m = r + 1.5;
        (0..3).all(|a| p[a] >= m && p[a] <= d[a] as f64 - 1.0 - m)
    }

    fn envelope(&self, s: &Segment) -> f64 {
        s.radius_start.max(s.radius_end * self.dilation)
    }

    fn trunk(&self, rng: &mut SeededRng) -> Option<Segment> {
        let d = self.spec.dims.as_array();
        let r = rng.random_range(self.spec.radius.0..=self.spec.radius.1);
        let top = d[2] as f64 - 1.0 - (r * self.dilation + 2.0);
        let jitter = |rng: &mut SeededRng, n: usize| n as f64 / 2.0 - 0.5 + rng.random_range(-1.5..=1.5);
        let start = [jitter(rng, d[0]), jitter(rng, d[1]), top];
        let tilt = rng.random_range(0.0..0.25f64);
        let side = random_unit_perpendicular(rng, [0.0, 0.0, 1.0]);
        let dir = add(scale([0.0, 0.0, -1.0], tilt.cos()), scale(side, tilt.sin()));
        let len = rng.random_range(self.max_len..=self.max_len * 1.3);
        let seg = Segment {
            start,
            end: add(start, scale(dir, len)),
            radius_start: r,
            radius_end: r,
            parent: None,
        };
        self.inside(seg.end, self.envelope(&seg)).then_some(seg)
    }

    fn feasible(&self, cand: &Segment, sibling: Option<&Segment>, existing: &[Segment], parent: usize) -> bool {
        let env = self.envelope(cand);
        if !self.inside(cand.end, env) {
            return false;
        }
        // Near the junction the tube necessarily overlaps its parent and sibling.
        let skip = self.envelope(&existing[parent]) + env + 2.0;
        let gap_ok = |t: &Segment, from: f64| clearance(cand, from, t) >= env + self.envelope(t) + 2.0;
        for (i, t) in existing.iter().enumerate() {
            let from = if i == parent || t.parent == Some(parent) {
                skip
            } else {
                0.0
            };
            if !gap_ok(t, from) {
                return false;
            }
        }
        sibling.is_none_or(|sib| gap_ok(sib, skip))
    }

    fn children(&self, rng: &mut SeededRng, segs: &[Segment], parent: usize) -> Option<[Segment; 2]> {
        let p = &segs[parent];
        let d = p.direction();
        let r = (p.radius_end * 0.85).max(self.spec.radius.0);
        for _ in 0..30 {
            let u = random_unit_perpendicular(rng, d);
            let mut pair = Vec::with_capacity(2);
            for sign in [1.0, -1.0] {
                let theta = rng.random_range(0.45..0.9f64);
                let dir = add(scale(d, theta.cos()), scale(u, sign * theta.sin()));
                let len = rng.random_range(self.min_len..=self.max_len);
                pair.push(Segment {
                    start: p.end,
                    end: add(p.end, scale(dir, len)),
                    radius_start: r,
                    radius_end: r,
                    parent: Some(parent),
                });
            }
            if self.feasible(&pair[0], None, segs, parent) && self.feasible(&pair[1], Some(&pair[0]), segs, parent) {
                let b = pair.pop().unwrap();
                let a = pair.pop().unwrap();
                return Some([a, b]);
            }
        }
        None
    }
}

fn draw_branch_count(rng: &mut SeededRng, range: (usize, usize)) -> Result<usize, PhantomError> {
    let odd: Vec<usize> = (range.0.max(1)..=range.1).filter(|b| b % 2 == 1).collect();
    if odd.is_empty() {
        return Err(PhantomError::SpecInfeasible(format!(
            "no odd branch count in {}..={}; bifurcating trees have an odd number of branches",
            range.0, range.1
        )));
    }
    Ok(odd[rng.random_range(0..odd.len())])
}

fn voxelize(dims: VolumeDims, segs: &[Segment]) -> BinaryMask {
    let mut mask = BinaryMask::empty(dims);
    let d = dims.as_array();
    for s in segs {
        let r = s.max_radius();
        let lo: Vec<usize> = (0..3)
            .map(|a| (s.start[a].min(s.end[a]) - r - 1.0).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((s.start[a].max(s.end[a]) + r + 1.0).ceil() as usize).min(d[a] - 1))
            .collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = [x as f64, y as f64, z as f64];
                    let (dist, t) = point_segment(p, s.start, s.end);
                    if dist <= s.radius_start + (s.radius_end - s.radius_start) * t {
                        mask.set([x, y, z], true);
                    }
                }
            }
        }
    }
    mask
}

/// Intensity: blurred airway indicator plus Gaussian noise.
fn synthesize(mask: &BinaryMask, noise: f64, rng: &mut SeededRng) -> ImageVolume {
    let dims = mask.dims();
    let mut field: Vec<f64> = mask.data().iter().map(|&b| b as u8 as f64).collect();
    let strides = [1usize, dims.nx(), dims.nx() * dims.ny()];
    let extents = dims.as_array();
    for axis in 0..3 {
        let src = field.clone();
        for (i, out) in field.iter_mut().enumerate() {
            let c = dims.coord(i)[axis];
            let prev = if c > 0 { src[i - strides[axis]] } else { src[i] };
            let next = if c + 1 < extents[axis] {
                src[i + strides[axis]]
            } else {
                src[i]
            };
            *out = 0.25 * prev + 0.5 * src[i] + 0.25 * next;
        }
    }
    let data = field
        .iter()
        .map(|&v| (v + noise * standard_normal(rng)) as f32)
        .collect();
    ImageVolume::new(dims, [1.0; 3], data).expect("dims match")
}

/// Builds a random bifurcating tube tree. Deterministic for a given seed and spec.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    let d = spec.dims.as_array();
    if d.iter().any(|&n| n < 16) {
        return Err(PhantomError::SpecInfeasible("dims must be at least 16^3".into()));
    }
    if !(spec.radius.0 > 0.0 && spec.radius.0 <= spec.radius.1) || spec.noise < 0.0 {
        return Err(PhantomError::SpecInfeasible("invalid radius range or noise".into()));
    }
    let mut rng = seeded(seed);
    let target = draw_branch_count(&mut rng, spec.branch_count)?;
    let smallest = *d.iter().min().unwrap() as f64;
    let grower = Grower {
        spec,
        min_len: (2.0 * spec.radius.1 + 5.0).max(7.0),
        max_len: (smallest / 4.0).max((2.0 * spec.radius.1 + 5.0).max(7.0) + 2.0),
        dilation: if spec.distal_dilation { 1.6 } else { 1.0 },
    };

    for _attempt in 0..1000 {
        let Some(trunk) = grower.trunk(&mut rng) else { continue };
        let mut segs = vec![trunk];
        let mut leaves = vec![0usize];
        while segs.len() < target && !leaves.is_empty() {
            let pick = rng.random_range(0..leaves.len());
            let leaf = leaves.swap_remove(pick);
            if let Some([a, b]) = grower.children(&mut rng, &segs, leaf) {
                leaves.push(segs.len());
                segs.push(a);
                leaves.push(segs.len());
                segs.push(b);
            }
        }
        if segs.len() != target {
            continue;
        }
        if spec.distal_dilation {
            for i in 0..segs.len() {
                if !segs.iter().any(|s| s.parent == Some(i)) {
                    segs[i].radius_end *= grower.dilation;
                }
            }
        }
        let gt_mask = voxelize(spec.dims, &segs);
        let image = synthesize(&gt_mask, spec.noise, &mut rng);
        return Ok(Phantom {
            image,
            gt_mask,
            branch_count: segs.len(),
            segments: segs,
        });
    }
    Err(PhantomError::SpecInfeasible(format!(
        "could not place {target} branches in {}x{}x{}",
        d[0], d[1], d[2]
    )))
}

/// The two coordinate axes least aligned with `dir`.
fn cross_axes(dir: [i64; 3]) -> (usize, usize) {
    let mut axes = [0usize, 1, 2];
    axes.sort_by_key(|&a| (dir[a].abs(), a));
    (axes[0], axes[1])
}

fn unit(axis: usize, sign: i64) -> [i64; 3] {
    let mut v = [0; 3];
    v[axis] = sign;
    v
}

fn shifted(dims: VolumeDims, v: Voxel, o: [i64; 3]) -> Option<Voxel> {
    dims.offset(v, o)
}

/// Adds 1-3 loop or stub artifacts attached to the centerline, mimicking the
/// spurious rings and spurs of automatic skeleton extraction. The first artifact
/// is always a loop. The output is a superset of the input.
pub fn corrupt_centerline(cl: &BinaryMask, seed: u64) -> Result<BinaryMask, PhantomError> {
    if cl.is_blank() {
        return Err(PhantomError::EmptyCenterline);
    }
    let dims = cl.dims();
    let mut rng = seeded(seed);
    let tree =
        parse_tree(&build_skeleton_graph(cl), RootPolicy::HighestZ).map_err(|_| PhantomError::EmptyCenterline)?;
    // Anchor candidates with a local direction estimate.
    let mut anchors: Vec<(Voxel, [i64; 3])> = Vec::new();
    for b in &tree.branches {
        for w in b.path.windows(3) {
            let dir = [
                w[2][0] as i64 - w[0][0] as i64,
                w[2][1] as i64 - w[0][1] as i64,
                w[2][2] as i64 - w[0][2] as i64,
            ];
            anchors.push((w[1], dir));
        }
    }
    if anchors.is_empty() {
        anchors = cl.voxels().map(|v| (v, [0, 0, 1])).collect();
    }

    let mut out = cl.clone();
    let count = rng.random_range(1..=3usize);
    for k in 0..count {
        let is_loop = k == 0 || rng.random_bool(0.5);
        for _ in 0..20 {
            let (a, dir) = anchors[rng.random_range(0..anchors.len())];
            let (e_axis, f_axis) = cross_axes(dir);
            let e = unit(e_axis, if rng.random_bool(0.5) { 1 } else { -1 });
            let f = unit(f_axis, 1);
            let mut added: Vec<Voxel> = Vec::new();
            let mut ok = true;
            if is_loop {
                // Diamond ring of radius r in the (e, f) plane passing through the anchor.
                let r = rng.random_range(2..=3i64);
                for i in -r..=r {
                    for j in [-(r - i.abs()), r - i.abs()] {
                        let o = [
                            (i + r) * e[0] + j * f[0],
                            (i + r) * e[1] + j * f[1],
                            (i + r) * e[2] + j * f[2],
                        ];
                        match shifted(dims, a, o) {
                            Some(v) => added.push(v),
                            None => ok = false,
                        }
                    }
                }
            } else {
                let len = rng.random_range(3..=5i64);
                for s in 1..=len {
                    match shifted(dims, a, [s * e[0], s * e[1], s * e[2]]) {
                        Some(v) => added.push(v),
                        None => ok = false,
                    }
                }
            }
            if ok {
                for v in added {
                    out.set(v, true);
                }
                break;
            }
        }
    }
    Ok(out)
}
