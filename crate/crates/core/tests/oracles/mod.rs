//! Independent reference implementations used to check the engine. Each oracle
//! is written from the definition, deliberately without sharing code paths
//! with the implementation under test.
#![allow(dead_code)]

use std::collections::{HashSet, VecDeque};

use airwayal::rng::{RngExt, SeededRng};
use airwayal::tree::AirwayTree;
use airwayal::volume::{BinaryMask, VolumeDims, Voxel};

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max-norm relative error between two gradient vectors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

// ---------------------------------------------------------------------------
// Random volumes

pub fn random_mask(rng: &mut SeededRng, dims: VolumeDims, density: f64) -> BinaryMask {
    BinaryMask::new(dims, (0..dims.len()).map(|_| rng.random::<f64>() < density).collect()).unwrap()
}

/// Union of random axis-aligned boxes: solid shapes with holes and tunnels
/// where boxes overlap, more realistic input for thinning than salt noise.
pub fn random_blobs(rng: &mut SeededRng, dims: VolumeDims, boxes: usize) -> BinaryMask {
    let d = dims.as_array();
    let mut m = BinaryMask::empty(dims);
    for _ in 0..boxes {
        let lo: Vec<usize> = (0..3).map(|a| rng.random_range(0..d[a])).collect();
        let hi: Vec<usize> = (0..3).map(|a| (lo[a] + rng.random_range(1..=6)).min(d[a])).collect();
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    m.set([x, y, z], true);
                }
            }
        }
    }
    // Random pinholes make cavities and tunnels likely.
    for _ in 0..boxes * 2 {
        let v = [
            rng.random_range(0..d[0]),
            rng.random_range(0..d[1]),
            rng.random_range(0..d[2]),
        ];
        m.set(v, false);
    }
    m
}

// ---------------------------------------------------------------------------
// Connectivity

/// Offsets with Chebyshev distance 1 and at most `max_nonzero` nonzero axes
/// (1 = faces, 2 = faces and edges, 3 = full cube).
pub fn neighbor_offsets(max_nonzero: usize) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1i64 {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let nz = [dx, dy, dz].iter().filter(|&&c| c != 0).count();
                if nz > 0 && nz <= max_nonzero {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Breadth-first flood fill. Components are numbered in the order their first
/// voxel appears in a linear scan.
pub fn flood_labels(mask: &BinaryMask, offsets: &[[i64; 3]]) -> (Vec<u32>, u32) {
    let dims = mask.dims();
    let d = dims.as_array();
    let mut labels = vec![0u32; dims.len()];
    let mut next = 0;
    for start in 0..dims.len() {
        if !mask.get_index(start) || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = (
                (i % d[0]) as i64,
                ((i / d[0]) % d[1]) as i64,
                (i / (d[0] * d[1])) as i64,
            );
            for o in offsets {
                let (nx, ny, nz) = (x + o[0], y + o[1], z + o[2]);
                if nx < 0 || ny < 0 || nz < 0 || nx >= d[0] as i64 || ny >= d[1] as i64 || nz >= d[2] as i64 {
                    continue;
                }
                let j = nx as usize + d[0] * (ny as usize + d[1] * nz as usize);
                if mask.get_index(j) && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, next)
}

/// Largest flood-fill component, earliest-found on ties.
pub fn flood_largest(mask: &BinaryMask, offsets: &[[i64; 3]]) -> BinaryMask {
    let (labels, n) = flood_labels(mask, offsets);
    if n == 0 {
        return mask.clone();
    }
    let mut sizes = vec![0usize; n as usize + 1];
    labels.iter().for_each(|&l| sizes[l as usize] += 1);
    let best = (1..=n as usize).rev().max_by_key(|&l| sizes[l]).unwrap();
    BinaryMask::new(mask.dims(), labels.iter().map(|&l| l as usize == best).collect()).unwrap()
}

/// Background components under 6-adjacency, with everything outside the
/// volume treated as one extra background region.
pub fn background_components(mask: &BinaryMask) -> u32 {
    let d = mask.dims().as_array();
    let padded_dims = VolumeDims::new(d[0] + 2, d[1] + 2, d[2] + 2).unwrap();
    let mut bg = BinaryMask::full(padded_dims);
    for v in mask.voxels() {
        bg.set([v[0] + 1, v[1] + 1, v[2] + 1], false);
    }
    flood_labels(&bg, &neighbor_offsets(1)).1
}

// ---------------------------------------------------------------------------
// Euler characteristic

/// Euler characteristic of the union of closed unit cubes at the foreground
/// voxels: alternating count of distinct vertices, edges, faces and cubes.
pub fn euler_characteristic(voxels: impl IntoIterator<Item = [i64; 3]>) -> i64 {
    let mut cells: HashSet<[i64; 3]> = HashSet::new();
    for v in voxels {
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    cells.insert([2 * v[0] + i, 2 * v[1] + j, 2 * v[2] + k]);
                }
            }
        }
    }
    cells
        .iter()
        .map(|c| {
            // Odd doubled coordinates are the cell's open directions.
            let dim = c.iter().filter(|&&x| x.rem_euclid(2) == 1).count();
            if dim % 2 == 0 {
                1
            } else {
                -1
            }
        })
        .sum()
}

/// Cube positions of a 3x3x3 neighborhood bitmask, bit `(dx+1) + 3(dy+1) + 9(dz+1)`.
pub fn cube_voxels(nbhd: u32) -> Vec<[i64; 3]> {
    (0..27)
        .filter(|b| nbhd & (1 << b) != 0)
        .map(|b| [(b % 3) as i64 - 1, ((b / 3) % 3) as i64 - 1, (b / 9) as i64 - 1])
        .collect()
}

/// Simple-point test by invariants: the punctured neighborhood is one
/// 26-connected piece, and removing the center leaves the Euler characteristic
/// of the neighborhood unchanged.
pub fn euler_simple(nbhd: u32) -> bool {
    let with = nbhd | (1 << 13);
    let without = nbhd & !(1 << 13);
    let punctured = cube_voxels(without);
    if punctured.is_empty() {
        return false;
    }
    // 26-components of the punctured neighborhood by naive BFS.
    let mut seen = vec![false; punctured.len()];
    let mut comps = 0;
    for s in 0..punctured.len() {
        if seen[s] {
            continue;
        }
        comps += 1;
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(a) = stack.pop() {
            for b in 0..punctured.len() {
                let adj = (0..3).all(|k| (punctured[a][k] - punctured[b][k]).abs() <= 1);
                if !seen[b] && adj {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
    }
    comps == 1 && euler_characteristic(cube_voxels(with)) == euler_characteristic(punctured)
}

// ---------------------------------------------------------------------------
// Tree metrics

/// Fraction of tree voxels inside `pred`, scanning the whole volume.
pub fn brute_td(pred: &BinaryMask, tree: &AirwayTree) -> f64 {
    let cl: HashSet<Voxel> = tree.branches.iter().flat_map(|b| b.path.iter().copied()).collect();
    let d = pred.dims().as_array();
    let (mut hit, mut total) = (0usize, 0usize);
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if cl.contains(&[x, y, z]) {
                    total += 1;
                    hit += pred.get([x, y, z]) as usize;
                }
            }
        }
    }
    hit as f64 / total as f64
}

/// Detected-branch fraction; `threshold = None` means any voxel suffices.
pub fn brute_bd(pred: &BinaryMask, tree: &AirwayTree, threshold: Option<f64>) -> f64 {
    let mut detected = 0;
    for b in &tree.branches {
        let mut hit = 0;
        for v in &b.path {
            if pred.get(*v) {
                hit += 1;
            }
        }
        let ok = match threshold {
            Some(t) => hit as f64 / b.path.len() as f64 >= t,
            None => hit > 0,
        };
        detected += ok as usize;
    }
    detected as f64 / tree.branches.len() as f64
}

// ---------------------------------------------------------------------------
// Statistics

/// Two-sided and one-sided signed-rank p-values by enumerating all `2^n` sign
/// assignments of ranks `1..=n`. `diffs` must be nonzero with distinct magnitudes.
pub fn enumerate_signed_rank(diffs: &[f64]) -> (f64, f64, f64) {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    let total = n * (n + 1) / 2;
    let observed: usize = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| rank[i]).sum();
    let obs_min = observed.min(total - observed);
    let (mut two, mut greater, mut less) = (0u64, 0u64, 0u64);
    for signs in 0u64..(1 << n) {
        let w: usize = (1..=n).filter(|r| signs & (1 << (r - 1)) != 0).sum();
        two += (w.min(total - w) <= obs_min) as u64;
        greater += (w >= observed) as u64;
        less += (w <= observed) as u64;
    }
    let all = (1u64 << n) as f64;
    (two as f64 / all, greater as f64 / all, less as f64 / all)
}

/// Two-sided p-value of Student's t with four degrees of freedom, in closed form.
pub fn t4_two_sided(t: f64) -> f64 {
    let x = t.abs() / (t * t + 4.0).sqrt();
    1.0 - x * (3.0 - x * x) / 2.0
}
