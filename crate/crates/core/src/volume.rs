//! Dense 3D voxel grids, the VVOL container format, and patch extraction.
//!
//! All grids use x-fastest linear order: `index = x + nx * (y + ny * z)`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer voxel coordinate `[x, y, z]`.
pub type Voxel = [usize; 3];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume dimensions must be positive, got {0}x{1}x{2}")]
    InvalidDims(usize, usize, usize),
    #[error("data length {got} does not match {expected} voxels")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value {value} at voxel {index} is out of range")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("spacing components must be positive and finite")]
    InvalidSpacing,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload truncated: expected {expected} bytes, found {got}")]
    TruncatedData { expected: usize, got: usize },
    #[error("payload has {0} unexpected trailing bytes")]
    TrailingData(usize),
    #[error("patch at {origin:?} with size {size:?} exceeds volume {dims:?}")]
    OutOfBounds { origin: Voxel, size: Voxel, dims: Voxel },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch(Voxel, Voxel),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct VolumeDims {
    nx: usize,
    ny: usize,
    nz: usize,
}

impl VolumeDims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, VolumeError> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::InvalidDims(nx, ny, nz));
        }
        nx.checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or(VolumeError::InvalidDims(nx, ny, nz))?;
        Ok(Self { nx, ny, nz })
    }

    /// Cube of side `n`. Panics if `n == 0`.
    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n).expect("cube side must be positive")
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn nz(&self) -> usize {
        self.nz
    }
    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, v: Voxel) -> usize {
        v[0] + self.nx * (v[1] + self.ny * v[2])
    }

    #[inline]
    pub fn coord(&self, index: usize) -> Voxel {
        let x = index % self.nx;
        let rest = index / self.nx;
        [x, rest % self.ny, rest / self.ny]
    }

    #[inline]
    pub fn contains(&self, c: [i64; 3]) -> bool {
        c[0] >= 0
            && c[1] >= 0
            && c[2] >= 0
            && (c[0] as usize) < self.nx
            && (c[1] as usize) < self.ny
            && (c[2] as usize) < self.nz
    }

    /// Neighbor of `v` at `offset` if it falls inside the grid.
    #[inline]
    pub fn offset(&self, v: Voxel, offset: [i64; 3]) -> Option<Voxel> {
        let c = [
            v[0] as i64 + offset[0],
            v[1] as i64 + offset[1],
            v[2] as i64 + offset[2],
        ];
        self.contains(c).then(|| [c[0] as usize, c[1] as usize, c[2] as usize])
    }
}

impl TryFrom<[usize; 3]> for VolumeDims {
    type Error = VolumeError;
    fn try_from(v: [usize; 3]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<VolumeDims> for [usize; 3] {
    fn from(d: VolumeDims) -> Self {
        d.as_array()
    }
}

fn check_len(dims: VolumeDims, len: usize) -> Result<(), VolumeError> {
    if dims.len() != len {
        return Err(VolumeError::LengthMismatch {
            expected: dims.len(),
            got: len,
        });
    }
    Ok(())
}

/// Intensity volume with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    dims: VolumeDims,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl ImageVolume {
    pub fn new(dims: VolumeDims, spacing: [f64; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        check_len(dims, data.len())?;
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidSpacing);
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: VolumeDims, value: f32) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> VolumeDims {
        self.dims
    }
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn get(&self, v: Voxel) -> f32 {
        self.data[self.dims.index(v)]
    }
}

/// Boolean segmentation grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    dims: VolumeDims,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: VolumeDims, data: Vec<bool>) -> Result<Self, VolumeError> {
        check_len(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn empty(dims: VolumeDims) -> Self {
        Self {
            dims,
            data: vec![false; dims.len()],
        }
    }

    pub fn full(dims: VolumeDims) -> Self {
        Self {
            dims,
            data: vec![true; dims.len()],
        }
    }

    pub fn from_voxels<I: IntoIterator<Item = Voxel>>(dims: VolumeDims, voxels: I) -> Self {
        let mut m = Self::empty(dims);
        for v in voxels {
            m.set(v, true);
        }
        m
    }

    pub fn dims(&self) -> VolumeDims {
        self.dims
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub fn get(&self, v: Voxel) -> bool {
        self.data[self.dims.index(v)]
    }
    pub fn get_index(&self, i: usize) -> bool {
        self.data[i]
    }
    pub fn set(&mut self, v: Voxel, value: bool) {
        let i = self.dims.index(v);
        self.data[i] = value;
    }
    pub fn set_index(&mut self, i: usize, value: bool) {
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_blank(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground voxels in linear order.
    pub fn voxels(&self) -> impl Iterator<Item = Voxel> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| self.dims.coord(i))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, VolumeError> {
        same_dims(self.dims, other.dims)?;
        Ok(BinaryMask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask, VolumeError> {
        same_dims(self.dims, other.dims)?;
        Ok(BinaryMask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect(),
        })
    }

    /// Dilation by one voxel with the full 3x3x3 structuring element.
    pub fn dilate26(&self) -> BinaryMask {
        let mut out = self.clone();
        for v in self.voxels() {
            for off in crate::morphology::OFFSETS_26 {
                if let Some(n) = self.dims.offset(v, off) {
                    out.set(n, true);
                }
            }
        }
        out
    }
}

pub(crate) fn same_dims(a: VolumeDims, b: VolumeDims) -> Result<(), VolumeError> {
    if a != b {
        return Err(VolumeError::DimMismatch(a.as_array(), b.as_array()));
    }
    Ok(())
}

/// Per-voxel foreground probability, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    dims: VolumeDims,
    data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(dims: VolumeDims, data: Vec<f64>) -> Result<Self, VolumeError> {
        check_len(dims, data.len())?;
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(VolumeError::ValueOutOfRange { index, value });
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: VolumeDims, p: f64) -> Self {
        assert!((0.0..=1.0).contains(&p), "probability out of range");
        Self {
            dims,
            data: vec![p; dims.len()],
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            dims: mask.dims,
            data: mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn dims(&self) -> VolumeDims {
        self.dims
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn get(&self, v: Voxel) -> f64 {
        self.data[self.dims.index(v)]
    }

    /// `p >= threshold`, voxelwise.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            data: self.data.iter().map(|&p| p >= threshold).collect(),
        }
    }
}

/// Axis-aligned sub-box of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: Voxel,
    pub dims: VolumeDims,
}

impl PatchSpec {
    pub fn new(origin: Voxel, dims: VolumeDims) -> Self {
        Self { origin, dims }
    }

    pub fn whole(dims: VolumeDims) -> Self {
        Self {
            origin: [0, 0, 0],
            dims,
        }
    }

    pub fn check(&self, parent: VolumeDims) -> Result<(), VolumeError> {
        let p = parent.as_array();
        let s = self.dims.as_array();
        if (0..3).any(|a| self.origin[a] + s[a] > p[a]) {
            return Err(VolumeError::OutOfBounds {
                origin: self.origin,
                size: s,
                dims: p,
            });
        }
        Ok(())
    }
}

fn gather<T: Copy>(data: &[T], parent: VolumeDims, spec: &PatchSpec) -> Vec<T> {
    let d = spec.dims;
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.nz() {
        for y in 0..d.ny() {
            let start = parent.index([spec.origin[0], spec.origin[1] + y, spec.origin[2] + z]);
            out.extend_from_slice(&data[start..start + d.nx()]);
        }
    }
    out
}

/// Sub-box extraction, implemented by every volume kind.
pub trait Patch: Sized {
    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self, VolumeError>;
}

impl Patch for ImageVolume {
    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self, VolumeError> {
        spec.check(self.dims)?;
        Ok(Self {
            dims: spec.dims,
            spacing: self.spacing,
            data: gather(&self.data, self.dims, spec),
        })
    }
}

impl Patch for BinaryMask {
    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self, VolumeError> {
        spec.check(self.dims)?;
        Ok(Self {
            dims: spec.dims,
            data: gather(&self.data, self.dims, spec),
        })
    }
}

impl Patch for ProbVolume {
    fn extract_patch(&self, spec: &PatchSpec) -> Result<Self, VolumeError> {
        spec.check(self.dims)?;
        Ok(Self {
            dims: spec.dims,
            data: gather(&self.data, self.dims, spec),
        })
    }
}

pub fn extract_patch<V: Patch>(vol: &V, spec: &PatchSpec) -> Result<V, VolumeError> {
    vol.extract_patch(spec)
}

/// Any volume kind, as stored in a VVOL file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Image(ImageVolume),
    Mask(BinaryMask),
    Prob(ProbVolume),
}

impl AnyVolume {
    pub fn dims(&self) -> VolumeDims {
        match self {
            AnyVolume::Image(v) => v.dims,
            AnyVolume::Mask(v) => v.dims,
            AnyVolume::Prob(v) => v.dims,
        }
    }

    pub fn kind(&self) -> VolumeKind {
        match self {
            AnyVolume::Image(_) => VolumeKind::Image,
            AnyVolume::Mask(_) => VolumeKind::Mask,
            AnyVolume::Prob(_) => VolumeKind::Prob,
        }
    }

    pub fn into_mask(self) -> Option<BinaryMask> {
        match self {
            AnyVolume::Mask(m) => Some(m),
            _ => None,
        }
    }
    pub fn into_image(self) -> Option<ImageVolume> {
        match self {
            AnyVolume::Image(m) => Some(m),
            _ => None,
        }
    }
    pub fn into_prob(self) -> Option<ProbVolume> {
        match self {
            AnyVolume::Prob(m) => Some(m),
            _ => None,
        }
    }
}

impl From<ImageVolume> for AnyVolume {
    fn from(v: ImageVolume) -> Self {
        AnyVolume::Image(v)
    }
}
impl From<BinaryMask> for AnyVolume {
    fn from(v: BinaryMask) -> Self {
        AnyVolume::Mask(v)
    }
}
impl From<ProbVolume> for AnyVolume {
    fn from(v: ProbVolume) -> Self {
        AnyVolume::Prob(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
    Prob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    U8,
    F32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VvolHeader {
    magic: String,
    dtype: Dtype,
    kind: VolumeKind,
    shape: [usize; 3],
    spacing: [f64; 3],
}

const MAGIC: &str = "vvol1";

/// Serializes a volume into VVOL bytes: one JSON header line, then the raw payload.
///
/// Probabilities are narrowed to `f32`.
pub fn encode_volume(vol: &AnyVolume) -> Vec<u8> {
    let (dtype, spacing) = match vol {
        AnyVolume::Image(v) => (Dtype::F32, v.spacing),
        AnyVolume::Mask(_) => (Dtype::U8, [1.0; 3]),
        AnyVolume::Prob(_) => (Dtype::F32, [1.0; 3]),
    };
    let header = VvolHeader {
        magic: MAGIC.to_string(),
        dtype,
        kind: vol.kind(),
        shape: vol.dims().as_array(),
        spacing,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    match vol {
        AnyVolume::Image(v) => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        AnyVolume::Mask(m) => out.extend(m.data.iter().map(|&b| b as u8)),
        AnyVolume::Prob(p) => {
            for &x in &p.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<AnyVolume, VolumeError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| VolumeError::MalformedHeader("missing header line".into()))?;
    let header: VvolHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
    if header.magic != MAGIC {
        return Err(VolumeError::MalformedHeader(format!("bad magic {:?}", header.magic)));
    }
    let dims = VolumeDims::try_from(header.shape).map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
    let elem = match header.dtype {
        Dtype::U8 => 1,
        Dtype::F32 => 4,
    };
    let payload = &bytes[nl + 1..];
    let expected = dims.len() * elem;
    if payload.len() < expected {
        return Err(VolumeError::TruncatedData {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(VolumeError::TrailingData(payload.len() - expected));
    }
    let floats = || {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
    };
    match (header.kind, header.dtype) {
        (VolumeKind::Mask, Dtype::U8) => {
            let mut data = Vec::with_capacity(dims.len());
            for (index, &b) in payload.iter().enumerate() {
                match b {
                    0 => data.push(false),
                    1 => data.push(true),
                    _ => return Err(VolumeError::ValueOutOfRange { index, value: b as f64 }),
                }
            }
            Ok(AnyVolume::Mask(BinaryMask::new(dims, data)?))
        }
        (VolumeKind::Prob, Dtype::F32) => {
            let data: Vec<f64> = floats().map(f64::from).collect();
            Ok(AnyVolume::Prob(ProbVolume::new(dims, data)?))
        }
        (VolumeKind::Image, Dtype::F32) => Ok(AnyVolume::Image(
            ImageVolume::new(dims, header.spacing, floats().collect())
                .map_err(|e| VolumeError::MalformedHeader(e.to_string()))?,
        )),
        (VolumeKind::Image, Dtype::U8) => Ok(AnyVolume::Image(
            ImageVolume::new(dims, header.spacing, payload.iter().map(|&b| b as f32).collect())
                .map_err(|e| VolumeError::MalformedHeader(e.to_string()))?,
        )),
        (kind, dtype) => Err(VolumeError::MalformedHeader(format!(
            "dtype {dtype:?} is not valid for kind {kind:?}"
        ))),
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume, VolumeError> {
    decode_volume(&fs::read(path)?)
}

pub fn write_volume(vol: &AnyVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_volume(vol))?;
    Ok(())
}

/// Reads a file that must contain a mask.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask, VolumeError> {
    match read_volume(path)? {
        AnyVolume::Mask(m) => Ok(m),
        other => Err(VolumeError::MalformedHeader(format!(
            "expected a mask, found {:?}",
            other.kind()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dtype: &str, kind: &str, shape: [usize; 3]) -> Vec<u8> {
        format!(
            "{{\"magic\":\"vvol1\",\"dtype\":\"{dtype}\",\"kind\":\"{kind}\",\"shape\":[{},{},{}],\"spacing\":[1,1,1]}}\n",
            shape[0], shape[1], shape[2]
        )
        .into_bytes()
    }

    #[test]
    fn mask_of_ones() {
        let mut bytes = header("u8", "mask", [2, 2, 2]);
        bytes.extend([1u8; 8]);
        let m = decode_volume(&bytes).unwrap().into_mask().unwrap();
        assert_eq!(m.count(), 8);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = header("u8", "mask", [2, 2, 2]);
        bytes.extend([1u8; 7]);
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::TruncatedData { expected: 8, got: 7 })
        ));
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(
            decode_volume(b"not json\n"),
            Err(VolumeError::MalformedHeader(_))
        ));
        assert!(matches!(decode_volume(b"{}"), Err(VolumeError::MalformedHeader(_))));
        let mut bytes = header("f32", "mask", [1, 1, 1]);
        bytes.extend([0u8; 4]);
        assert!(matches!(decode_volume(&bytes), Err(VolumeError::MalformedHeader(_))));
        let mut bytes = header("u8", "mask", [0, 1, 1]);
        bytes.extend([0u8; 0]);
        assert!(matches!(decode_volume(&bytes), Err(VolumeError::MalformedHeader(_))));
    }

    #[test]
    fn prob_out_of_range_rejected() {
        let mut bytes = header("f32", "prob", [2, 1, 1]);
        bytes.extend(0.5f32.to_le_bytes());
        bytes.extend(1.5f32.to_le_bytes());
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::ValueOutOfRange { index: 1, .. })
        ));
        let mut bytes = header("u8", "mask", [1, 1, 1]);
        bytes.push(2);
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::ValueOutOfRange { .. })
        ));
    }

    #[test]
    fn empty_mask_is_one_byte_payload() {
        let m = BinaryMask::empty(VolumeDims::cube(1));
        let bytes = encode_volume(&m.into());
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[nl + 1..], &[0u8]);
    }

    #[test]
    fn prob_payload_is_le_f32() {
        let p = ProbVolume::filled(VolumeDims::new(3, 1, 1).unwrap(), 0.5);
        let bytes = encode_volume(&p.into());
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[nl + 1..], &[0, 0, 0, 0x3f, 0, 0, 0, 0x3f, 0, 0, 0, 0x3f]);
    }

    #[test]
    fn patch_identity_and_offset() {
        let d = VolumeDims::new(2, 1, 1).unwrap();
        let img = ImageVolume::new(d, [1.0; 3], vec![3.0, 7.0]).unwrap();
        assert_eq!(img.extract_patch(&PatchSpec::whole(d)).unwrap(), img);
        let p = img
            .extract_patch(&PatchSpec::new([1, 0, 0], VolumeDims::cube(1)))
            .unwrap();
        assert_eq!(p.data(), &[7.0]);
        assert!(matches!(
            img.extract_patch(&PatchSpec::new([1, 0, 0], VolumeDims::new(2, 1, 1).unwrap())),
            Err(VolumeError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn index_roundtrip() {
        let d = VolumeDims::new(3, 4, 5).unwrap();
        for i in 0..d.len() {
            assert_eq!(d.index(d.coord(i)), i);
        }
        assert_eq!(d.index([1, 0, 0]), 1);
        assert_eq!(d.index([0, 1, 0]), 3);
        assert_eq!(d.index([0, 0, 1]), 12);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vvol");
        let m = BinaryMask::from_voxels(VolumeDims::cube(3), [[0, 1, 2], [2, 2, 2]]);
        write_volume(&m.clone().into(), &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }
}
