//! Topology-preserving thinning, connected-component labeling and largest-component
//! post-processing on binary volumes.

use serde::{Deserialize, Serialize};

use crate::volume::{BinaryMask, VolumeDims, Voxel};

/// The 26 neighbor offsets of the 3x3x3 cube, in `(dz, dy, dx)` raster order.
pub const OFFSETS_26: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    /// Whether two voxels at `offset` from each other are neighbors.
    pub fn admits(&self, offset: [i64; 3]) -> bool {
        let nonzero = offset.iter().filter(|&&c| c != 0).count();
        let unit = offset.iter().all(|c| c.abs() <= 1);
        unit && nonzero > 0
            && match self {
                Connectivity::Six => nonzero == 1,
                Connectivity::Eighteen => nonzero <= 2,
                Connectivity::TwentySix => true,
            }
    }

    pub fn offsets(&self) -> impl Iterator<Item = [i64; 3]> + '_ {
        OFFSETS_26.into_iter().filter(move |o| self.admits(*o))
    }
}

/// Per-voxel component labels; 0 is background, components are `1..=label_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: VolumeDims,
    pub labels: Vec<u32>,
    pub label_count: u32,
}

impl LabelVolume {
    pub fn get(&self, v: Voxel) -> u32 {
        self.labels[self.dims.index(v)]
    }

    /// Voxel count of each component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.label_count as usize];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Two-pass union-find labeling. Labels are renumbered so that components are
/// numbered in the order their first voxel appears in a linear scan.
pub fn connected_components(mask: &BinaryMask, conn: Connectivity) -> LabelVolume {
    let dims = mask.dims();
    // Only neighbors that precede the current voxel in scan order.
    let backward: Vec<[i64; 3]> = conn
        .offsets()
        .filter(|o| o[2] < 0 || (o[2] == 0 && (o[1] < 0 || (o[1] == 0 && o[0] < 0))))
        .collect();

    let mut provisional = vec![0u32; dims.len()];
    let mut parent: Vec<u32> = vec![0];
    for (i, &fg) in mask.data().iter().enumerate() {
        if !fg {
            continue;
        }
        let v = dims.coord(i);
        let mut root: Option<u32> = None;
        for &o in &backward {
            let Some(n) = dims.offset(v, o) else { continue };
            let l = provisional[dims.index(n)];
            if l == 0 {
                continue;
            }
            let r = find(&mut parent, l);
            root = Some(match root {
                None => r,
                Some(cur) if cur == r => cur,
                Some(cur) => {
                    let (lo, hi) = if cur < r { (cur, r) } else { (r, cur) };
                    parent[hi as usize] = lo;
                    lo
                }
            });
        }
        provisional[i] = match root {
            Some(r) => r,
            None => {
                let l = parent.len() as u32;
                parent.push(l);
                l
            }
        };
    }

    let mut remap = vec![0u32; parent.len()];
    let mut next = 0u32;
    let mut labels = vec![0u32; dims.len()];
    for (i, &l) in provisional.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let r = find(&mut parent, l) as usize;
        if remap[r] == 0 {
            next += 1;
            remap[r] = next;
        }
        labels[i] = remap[r];
    }
    LabelVolume {
        dims,
        labels,
        label_count: next,
    }
}

/// Keeps only the component with the most voxels (smallest label on ties).
pub fn keep_largest_component(mask: &BinaryMask, conn: Connectivity) -> BinaryMask {
    let lv = connected_components(mask, conn);
    if lv.label_count == 0 {
        return mask.clone();
    }
    let sizes = lv.sizes();
    let mut best = 0usize;
    for (i, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = i;
        }
    }
    let keep = best as u32 + 1;
    BinaryMask::new(lv.dims, lv.labels.iter().map(|&l| l == keep).collect()).expect("dims unchanged")
}

pub fn component_count(mask: &BinaryMask, conn: Connectivity) -> u32 {
    connected_components(mask, conn).label_count
}

// ---------------------------------------------------------------------------
// Simple-point characterization on the 3x3x3 neighborhood.
//
// Neighborhood bits are indexed by (dx+1) + 3(dy+1) + 9(dz+1); bit 13 is the center.

const CENTER: usize = 13;

const fn cube_pos(i: usize) -> [i64; 3] {
    [(i % 3) as i64 - 1, ((i / 3) % 3) as i64 - 1, (i / 9) as i64 - 1]
}

const fn nonzero_count(p: [i64; 3]) -> usize {
    (p[0] != 0) as usize + (p[1] != 0) as usize + (p[2] != 0) as usize
}

/// For each cube position, the other non-center positions 26-adjacent to it.
const ADJ26: [u32; 27] = {
    let mut out = [0u32; 27];
    let mut i = 0;
    while i < 27 {
        let a = cube_pos(i);
        let mut j = 0;
        while j < 27 {
            let b = cube_pos(j);
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let cheb = d[0].abs() <= 1 && d[1].abs() <= 1 && d[2].abs() <= 1;
            if i != j && j != CENTER && cheb {
                out[i] |= 1 << j;
            }
            j += 1;
        }
        i += 1;
    }
    out
};

/// For each position in the 18-neighborhood, its face-adjacent partners inside the 18-neighborhood.
const ADJ6_N18: [u32; 27] = {
    let mut out = [0u32; 27];
    let mut i = 0;
    while i < 27 {
        let a = cube_pos(i);
        let mut j = 0;
        while j < 27 {
            let b = cube_pos(j);
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let face = nonzero_count(d) == 1 && d[0].abs() + d[1].abs() + d[2].abs() == 1;
            let in18 = j != CENTER && nonzero_count(b) <= 2;
            if face && in18 {
                out[i] |= 1 << j;
            }
            j += 1;
        }
        i += 1;
    }
    out
};

const N18_MASK: u32 = {
    let mut m = 0u32;
    let mut i = 0;
    while i < 27 {
        let n = nonzero_count(cube_pos(i));
        if n >= 1 && n <= 2 {
            m |= 1 << i;
        }
        i += 1;
    }
    m
};

const FACE_MASK: u32 = {
    let mut m = 0u32;
    let mut i = 0;
    while i < 27 {
        if nonzero_count(cube_pos(i)) == 1 {
            m |= 1 << i;
        }
        i += 1;
    }
    m
};

const ALL26: u32 = ((1u32 << 27) - 1) & !(1 << CENTER);

fn component_of(seed: u32, allowed: u32, adj: &[u32; 27]) -> u32 {
    let mut comp = seed;
    let mut frontier = seed;
    while frontier != 0 {
        let mut next = 0u32;
        let mut f = frontier;
        while f != 0 {
            let b = f.trailing_zeros() as usize;
            f &= f - 1;
            next |= adj[b];
        }
        next &= allowed & !comp;
        comp |= next;
        frontier = next;
    }
    comp
}

/// Number of 26-components of the foreground in the punctured neighborhood.
fn t26(nbhd: u32) -> u32 {
    let mut remaining = nbhd & ALL26;
    let mut count = 0;
    while remaining != 0 {
        let seed = remaining & remaining.wrapping_neg();
        remaining &= !component_of(seed, remaining, &ADJ26);
        count += 1;
    }
    count
}

/// Number of 6-components of the background in the 18-neighborhood that touch a face neighbor.
fn t6(nbhd: u32) -> u32 {
    let bg = !nbhd & N18_MASK;
    let mut faces = bg & FACE_MASK;
    let mut count = 0;
    while faces != 0 {
        let seed = faces & faces.wrapping_neg();
        let comp = component_of(seed, bg, &ADJ6_N18);
        faces &= !comp;
        count += 1;
    }
    count
}

/// Whether deleting the center voxel preserves topology (26-foreground / 6-background).
pub fn is_simple(nbhd: u32) -> bool {
    t26(nbhd) == 1 && t6(nbhd) == 1
}

// ---------------------------------------------------------------------------
// Thinning

/// Linear-index neighborhood offsets for a padded grid, ordered by cube bit.
struct Padded {
    dims: [usize; 3],
    data: Vec<u8>,
    nbr: [isize; 27],
}

impl Padded {
    fn new(mask: &BinaryMask) -> Self {
        let d = mask.dims();
        let dims = [d.nx() + 2, d.ny() + 2, d.nz() + 2];
        let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
        for v in mask.voxels() {
            data[v[0] + 1 + dims[0] * (v[1] + 1 + dims[1] * (v[2] + 1))] = 1;
        }
        let mut nbr = [0isize; 27];
        for (i, n) in nbr.iter_mut().enumerate() {
            let p = cube_pos(i);
            *n = p[0] as isize + dims[0] as isize * (p[1] as isize + dims[1] as isize * p[2] as isize);
        }
        Self { dims, data, nbr }
    }

    #[inline]
    fn neighborhood(&self, i: usize) -> u32 {
        let mut bits = 0u32;
        for (b, &o) in self.nbr.iter().enumerate() {
            if self.data[(i as isize + o) as usize] != 0 {
                bits |= 1 << b;
            }
        }
        bits
    }

    fn unpad(&self, dims: VolumeDims) -> BinaryMask {
        let mut out = BinaryMask::empty(dims);
        for z in 0..dims.nz() {
            for y in 0..dims.ny() {
                for x in 0..dims.nx() {
                    let i = x + 1 + self.dims[0] * (y + 1 + self.dims[1] * (z + 1));
                    if self.data[i] != 0 {
                        out.set([x, y, z], true);
                    }
                }
            }
        }
        out
    }
}

/// Border directions peeled in each pass: up, down, north, south, east, west.
const PEEL_ORDER: [usize; 6] = [
    22, // +z
    4,  // -z
    16, // +y
    10, // -y
    14, // +x
    12, // -x
];

/// Reduces a binary volume to a one-voxel-thin centerline by directional
/// border peeling with a simple-point test.
///
/// Each pass runs six sub-iterations (up, down, north, south, east, west).
/// In every sub-iteration the border voxels facing the current direction that
/// are simple and not curve endpoints are collected first, then deleted one by
/// one with the simple-point test re-evaluated before each deletion. The
/// resulting skeleton is a subset of the input with the same topology.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let mut grid = Padded::new(mask);
    let mut live: Vec<usize> = (0..grid.data.len()).filter(|&i| grid.data[i] != 0).collect();
    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        for &dir in &PEEL_ORDER {
            candidates.clear();
            for &i in &live {
                if grid.data[(i as isize + grid.nbr[dir]) as usize] != 0 {
                    continue;
                }
                let nb = grid.neighborhood(i);
                if (nb & ALL26).count_ones() == 1 {
                    continue;
                }
                if is_simple(nb) {
                    candidates.push(i);
                }
            }
            for &i in &candidates {
                if is_simple(grid.neighborhood(i)) {
                    grid.data[i] = 0;
                    changed = true;
                }
            }
            if !candidates.is_empty() {
                live.retain(|&i| grid.data[i] != 0);
            }
        }
        if !changed {
            break;
        }
    }
    grid.unpad(mask.dims())
}

/// True when no 2x2x2 block is entirely foreground.
pub fn is_thin(mask: &BinaryMask) -> bool {
    let d = mask.dims();
    if d.nx() < 2 || d.ny() < 2 || d.nz() < 2 {
        return true;
    }
    for z in 0..d.nz() - 1 {
        for y in 0..d.ny() - 1 {
            for x in 0..d.nx() - 1 {
                let full = (0..8).all(|k| mask.get([x + (k & 1), y + ((k >> 1) & 1), z + (k >> 2)]));
                if full {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(len: usize) -> BinaryMask {
        BinaryMask::from_voxels(VolumeDims::new(3, 3, len + 2).unwrap(), (1..=len).map(|z| [1, 1, z]))
    }

    #[test]
    fn thin_line_is_fixed_point() {
        let m = line(9);
        assert_eq!(skeletonize(&m), m);
    }

    #[test]
    fn empty_stays_empty() {
        let m = BinaryMask::empty(VolumeDims::cube(5));
        assert!(skeletonize(&m).is_blank());
    }

    #[test]
    fn isolated_voxel_survives() {
        let m = BinaryMask::from_voxels(VolumeDims::cube(3), [[1, 1, 1]]);
        assert_eq!(skeletonize(&m), m);
    }

    #[test]
    fn solid_block_reduces_to_one_voxel() {
        let d = VolumeDims::cube(6);
        let m = BinaryMask::from_voxels(
            d,
            (1..5).flat_map(|z| (1..5).flat_map(move |y| (1..5).map(move |x| [x, y, z]))),
        );
        let s = skeletonize(&m);
        assert!(s.count() >= 1);
        assert!(s.is_subset_of(&m));
        assert_eq!(component_count(&s, Connectivity::TwentySix), 1);
        assert!(is_thin(&s));
    }

    #[test]
    fn hollow_box_keeps_cavity() {
        // A 5^3 shell around one empty voxel: background cavity must survive.
        let d = VolumeDims::cube(7);
        let mut m = BinaryMask::empty(d);
        for z in 1..6 {
            for y in 1..6 {
                for x in 1..6 {
                    if [x, y, z] != [3, 3, 3] {
                        m.set([x, y, z], true);
                    }
                }
            }
        }
        let s = skeletonize(&m);
        assert!(!s.get([3, 3, 3]));
        // The cavity is still enclosed: its 6-component of background is separate from the outside.
        let bg = BinaryMask::new(d, s.data().iter().map(|&b| !b).collect()).unwrap();
        assert_eq!(component_count(&bg, Connectivity::Six), 2);
    }

    #[test]
    fn simple_point_basics() {
        // Isolated center: not simple (would delete a component).
        assert!(!is_simple(1 << CENTER));
        // Center with one face neighbor: simple.
        assert!(is_simple((1 << CENTER) | (1 << 14)));
        // Center bridging two opposite neighbors: not simple.
        assert!(!is_simple((1 << CENTER) | (1 << 12) | (1 << 14)));
        // Fully surrounded: interior point, not simple.
        assert!(!is_simple((1 << 27) - 1));
    }

    #[test]
    fn labeling_basics() {
        let d = VolumeDims::new(5, 2, 2).unwrap();
        let mut m = BinaryMask::empty(d);
        for z in 0..2 {
            for y in 0..2 {
                m.set([0, y, z], true);
                m.set([1, y, z], true);
                m.set([3, y, z], true);
                m.set([4, y, z], true);
            }
        }
        let lv = connected_components(&m, Connectivity::TwentySix);
        assert_eq!(lv.label_count, 2);
        assert_eq!(lv.get([0, 0, 0]), 1);
        assert_eq!(lv.get([4, 1, 1]), 2);
    }

    #[test]
    fn connectivity_changes_partition() {
        let d = VolumeDims::cube(2);
        let m = BinaryMask::from_voxels(d, [[0, 0, 0], [1, 1, 1]]);
        assert_eq!(component_count(&m, Connectivity::Six), 2);
        assert_eq!(component_count(&m, Connectivity::Eighteen), 2);
        assert_eq!(component_count(&m, Connectivity::TwentySix), 1);
        let m = BinaryMask::from_voxels(d, [[0, 0, 0], [1, 1, 0]]);
        assert_eq!(component_count(&m, Connectivity::Six), 2);
        assert_eq!(component_count(&m, Connectivity::Eighteen), 1);
    }

    #[test]
    fn largest_component_kept() {
        let d = VolumeDims::new(20, 1, 1).unwrap();
        let m = BinaryMask::from_voxels(d, (0..3).chain(5..15).map(|x| [x, 0, 0]));
        let k = keep_largest_component(&m, Connectivity::TwentySix);
        assert_eq!(k.count(), 10);
        assert!(k.get([5, 0, 0]) && !k.get([0, 0, 0]));
        assert_eq!(keep_largest_component(&k, Connectivity::TwentySix), k);
        // Tie goes to the first component in scan order.
        let m = BinaryMask::from_voxels(d, [[0, 0, 0], [5, 0, 0]]);
        let k = keep_largest_component(&m, Connectivity::TwentySix);
        assert_eq!(k.voxels().collect::<Vec<_>>(), vec![[0, 0, 0]]);
    }
}
