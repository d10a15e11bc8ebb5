//! Fixed two-scale pooled-statistics pyramid summarizing a patch.

use super::ModelError;
use crate::volume::ImageVolume;

pub const FEATURE_LEN: usize = 64;

pub type FeatureVector = Vec<f64>;

/// Half-open index ranges of the low and high octant along an axis of length `n`.
/// For odd `n` the middle slab belongs to both halves.
fn halves(n: usize) -> [(usize, usize); 2] {
    [(0, n.div_ceil(2)), (n / 2, n)]
}

fn octant_stats(data: &[f64], dims: [usize; 3], out: &mut Vec<f64>) {
    let [hx, hy, hz] = [halves(dims[0]), halves(dims[1]), halves(dims[2])];
    for oct in 0..8 {
        let (x0, x1) = hx[oct & 1];
        let (y0, y1) = hy[(oct >> 1) & 1];
        let (z0, z1) = hz[(oct >> 2) & 1];
        let (mut sum, mut sq, mut lo, mut hi, mut n) = (0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = data[x + dims[0] * (y + dims[1] * z)];
                    sum += v;
                    sq += v * v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                    n += 1.0;
                }
            }
        }
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        out.extend_from_slice(&[mean, var.sqrt(), lo, hi]);
    }
}

/// 2x average pooling; edge blocks of odd extents average the voxels they hold.
fn downsample(data: &[f64], dims: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let nd = [dims[0].div_ceil(2), dims[1].div_ceil(2), dims[2].div_ceil(2)];
    let mut sums = vec![0.0; nd[0] * nd[1] * nd[2]];
    let mut counts = vec![0.0; sums.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let j = x / 2 + nd[0] * (y / 2 + nd[1] * (z / 2));
                sums[j] += data[x + dims[0] * (y + dims[1] * z)];
                counts[j] += 1.0;
            }
        }
    }
    let pooled = sums.iter().zip(&counts).map(|(s, c)| s / c).collect();
    (pooled, nd)
}

/// Per-octant mean, std, min and max at full and half resolution (8 x 4 x 2 = 64).
pub fn extract_features(img: &ImageVolume) -> Result<FeatureVector, ModelError> {
    if img.data().is_empty() {
        return Err(ModelError::EmptyPatch);
    }
    let dims = img.dims().as_array();
    let data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(FEATURE_LEN);
    octant_stats(&data, dims, &mut out);
    let (pooled, pdims) = downsample(&data, dims);
    octant_stats(&pooled, pdims, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeDims;

    #[test]
    fn constant_patch() {
        let f = extract_features(&ImageVolume::filled(VolumeDims::new(5, 4, 3).unwrap(), 2.5)).unwrap();
        assert_eq!(f.len(), FEATURE_LEN);
        for chunk in f.chunks(4) {
            assert_eq!(chunk, [2.5, 0.0, 2.5, 2.5]);
        }
    }

    #[test]
    fn intensity_shift() {
        let dims = VolumeDims::cube(6);
        let data: Vec<f32> = (0..dims.len()).map(|i| ((i * 37) % 11) as f32 * 0.25).collect();
        let shifted: Vec<f32> = data.iter().map(|v| v + 3.0).collect();
        let a = extract_features(&ImageVolume::new(dims, [1.0; 3], data).unwrap()).unwrap();
        let b = extract_features(&ImageVolume::new(dims, [1.0; 3], shifted).unwrap()).unwrap();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            if i % 4 == 1 {
                assert!((x - y).abs() < 1e-9);
            } else {
                assert!((y - x - 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pooled_scale_matches_naive_oracle() {
        let dims = VolumeDims::new(7, 6, 5).unwrap();
        let data: Vec<f32> = (0..dims.len()).map(|i| ((i * 7919) % 23) as f32 - 11.0).collect();
        let img = ImageVolume::new(dims, [1.0; 3], data).unwrap();
        let f = extract_features(&img).unwrap();
        // Naive: the pooled voxel (i,j,k) averages the in-bounds voxels of its 2x2x2 block.
        let pooled = |i: usize, j: usize, k: usize| {
            let mut vals = Vec::new();
            for (dx, dy, dz) in (0..8).map(|b| (b & 1, (b >> 1) & 1, b >> 2)) {
                let v = [2 * i + dx, 2 * j + dy, 2 * k + dz];
                if v[0] < 7 && v[1] < 6 && v[2] < 5 {
                    vals.push(img.get(v) as f64);
                }
            }
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        // Octant 7 (high x, y, z) of the pooled grid: x in 2..4, y in 1..3, z in 1..3.
        let mut vals = Vec::new();
        for k in 1..3 {
            for j in 1..3 {
                for i in 2..4 {
                    vals.push(pooled(i, j, k));
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let base = 32 + 7 * 4;
        assert!((f[base] - mean).abs() < 1e-12);
        assert!((f[base + 2] - min).abs() < 1e-12);
        assert!((f[base + 3] - max).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let img = ImageVolume::filled(VolumeDims::cube(2), 1.0);
        assert_eq!(extract_features(&img), extract_features(&img));
    }
}
