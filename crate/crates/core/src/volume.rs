//! Dense 3D volumes, masks, reductions and the bit-exact TAUV on-disk format.
//!
//! A [`Volume`] is a flat `f32` buffer in x-fastest order with an optional
//! channel dimension (channel-major blocks). Values are kept finite by every
//! public operation and reductions run in a fixed serial order, so repeated
//! runs produce bit-identical results. Per-voxel arithmetic is evaluated in
//! `f64` and rounded once to `f32`, which for add/sub/mul coincides with the
//! correctly rounded single-precision result.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Grid extents of a volume, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Dim(format!("dims must be positive, got {nx}x{ny}x{nz}")));
        }
        Ok(Dims { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Dims::new(n, n, n)
    }

    /// Voxels per channel.
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(x, y, z)` in x-fastest order.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        (z * self.ny + y) * self.nx + x
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Dense scalar field over a 3D grid; the carrier for images, latents,
/// anomaly maps and denoiser conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    channels: usize,
    data: Vec<f32>,
}

impl Volume {
    /// Builds a volume from raw data, rejecting length mismatches and
    /// non-finite values.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Self::with_channels(dims, 1, data)
    }

    pub fn with_channels(dims: Dims, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Dim("channels must be positive".into()));
        }
        let expect = dims.len() * channels;
        if data.len() != expect {
            return Err(Error::Dim(format!(
                "data length {} does not match {} x {} channels = {}",
                data.len(),
                dims,
                channels,
                expect
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {bad}",
                data[bad]
            )));
        }
        Ok(Volume { dims, channels, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume { dims, channels: 1, data: vec![0.0; dims.len()] }
    }

    pub fn constant(dims: Dims, value: f32) -> Result<Self> {
        Volume::new(dims, vec![value; dims.len()])
    }

    /// Single-channel volume filled from a coordinate function.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    fn check_same_shape(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims || self.channels != other.channels {
            return Err(Error::Dim(format!(
                "shape mismatch: {}x{}ch vs {}x{}ch",
                self.dims, self.channels, other.dims, other.channels
            )));
        }
        Ok(())
    }

    fn from_f64_iter(
        dims: Dims,
        channels: usize,
        iter: impl Iterator<Item = f64>,
    ) -> Result<Volume> {
        let mut data = Vec::with_capacity(dims.len() * channels);
        for v in iter {
            let v32 = v as f32;
            if !v32.is_finite() {
                return Err(Error::Numeric(format!("operation produced non-finite value {v}")));
            }
            data.push(v32);
        }
        debug_assert_eq!(data.len(), dims.len() * channels);
        Ok(Volume { dims, channels, data })
    }

    pub fn add(&self, other: &Volume) -> Result<Volume> {
        self.check_same_shape(other)?;
        Volume::from_f64_iter(
            self.dims,
            self.channels,
            self.data.iter().zip(&other.data).map(|(a, b)| *a as f64 + *b as f64),
        )
    }

    pub fn sub(&self, other: &Volume) -> Result<Volume> {
        self.check_same_shape(other)?;
        Volume::from_f64_iter(
            self.dims,
            self.channels,
            self.data.iter().zip(&other.data).map(|(a, b)| *a as f64 - *b as f64),
        )
    }

    pub fn mul(&self, other: &Volume) -> Result<Volume> {
        self.check_same_shape(other)?;
        Volume::from_f64_iter(
            self.dims,
            self.channels,
            self.data.iter().zip(&other.data).map(|(a, b)| *a as f64 * *b as f64),
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Volume> {
        Volume::from_f64_iter(
            self.dims,
            self.channels,
            self.data.iter().map(|a| *a as f64 * factor),
        )
    }

    /// `a*va + b*vb` with one rounding per voxel; the workhorse of the
    /// samplers and parametrization conversions.
    pub fn lincomb(a: f64, va: &Volume, b: f64, vb: &Volume) -> Result<Volume> {
        va.check_same_shape(vb)?;
        Volume::from_f64_iter(
            va.dims,
            va.channels,
            va.data
                .iter()
                .zip(&vb.data)
                .map(|(x, y)| a * (*x as f64) + b * (*y as f64)),
        )
    }

    /// Mean of channel-0 voxels selected by the mask; serial f64 summation.
    pub fn masked_mean(&self, mask: &Mask) -> Result<f64> {
        if self.channels != 1 {
            return Err(Error::Dim(format!(
                "masked_mean expects a single-channel volume, got {} channels",
                self.channels
            )));
        }
        self.masked_mean_channel(mask, 0)
    }

    /// Per-channel masked mean; used for multi-channel appearance statistics.
    pub fn masked_mean_channel(&self, mask: &Mask, c: usize) -> Result<f64> {
        if self.dims != mask.dims {
            return Err(Error::Dim(format!(
                "mask shape {} does not match volume {}",
                mask.dims, self.dims
            )));
        }
        if c >= self.channels {
            return Err(Error::Dim(format!("channel {c} out of range ({})", self.channels)));
        }
        let n = mask.nonzero_count();
        if n == 0 {
            return Err(Error::Domain("mask has no nonzero voxels".into()));
        }
        let mut sum = 0.0f64;
        for (v, m) in self.channel(c).iter().zip(&mask.data) {
            sum += (*v as f64) * (*m as f64);
        }
        Ok(sum / n as f64)
    }

    /// Linear-interpolation percentile of the masked voxels, `q` in [0, 100].
    pub fn percentile(&self, mask: &Mask, q: f64) -> Result<f64> {
        if self.channels != 1 {
            return Err(Error::Dim("percentile expects a single-channel volume".into()));
        }
        if self.dims != mask.dims {
            return Err(Error::Dim(format!(
                "mask shape {} does not match volume {}",
                mask.dims, self.dims
            )));
        }
        if !(0.0..=100.0).contains(&q) {
            return Err(Error::Domain(format!("percentile q={q} outside [0, 100]")));
        }
        let mut vals: Vec<f32> = self
            .data
            .iter()
            .zip(&mask.data)
            .filter(|(_, m)| **m != 0.0)
            .map(|(v, _)| *v)
            .collect();
        if vals.is_empty() {
            return Err(Error::Domain("mask has no nonzero voxels".into()));
        }
        vals.sort_by(f32::total_cmp);
        let rank = q / 100.0 * (vals.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        let frac = rank - lo as f64;
        Ok(vals[lo] as f64 * (1.0 - frac) + vals[hi] as f64 * frac)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn max_abs_diff(&self, other: &Volume) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max))
    }

    /// Euclidean distance between two volumes, accumulated in f64.
    pub fn l2_distance(&self, other: &Volume) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut sum = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = *a as f64 - *b as f64;
            sum += d * d;
        }
        Ok(sum.sqrt())
    }
}

/// Binary {0, 1} field sharing the Volume grid layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: Dims,
    data: Vec<f32>,
    nonzero: usize,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Dim(format!(
                "mask data length {} does not match {}",
                data.len(),
                dims
            )));
        }
        let mut nonzero = 0usize;
        for v in &data {
            if *v == 1.0 {
                nonzero += 1;
            } else if *v != 0.0 {
                return Err(Error::Domain(format!("mask value {v} is not 0.0 or 1.0")));
            }
        }
        Ok(Mask { dims, data, nonzero })
    }

    pub fn from_predicate(dims: Dims, mut pred: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        let mut nonzero = 0;
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let on = pred(x, y, z);
                    nonzero += on as usize;
                    data.push(if on { 1.0 } else { 0.0 });
                }
            }
        }
        Mask { dims, data, nonzero }
    }

    /// Reinterprets a single-channel volume as a mask; values must already
    /// be exactly 0.0 or 1.0.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        if vol.channels() != 1 {
            return Err(Error::Dim("mask volume must be single-channel".into()));
        }
        Mask::new(vol.dims(), vol.data().to_vec())
    }

    pub fn full(dims: Dims) -> Self {
        Mask { dims, data: vec![1.0; dims.len()], nonzero: dims.len() }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)] != 0.0
    }

    pub fn nonzero_count(&self) -> usize {
        self.nonzero
    }

    pub fn to_volume(&self) -> Volume {
        Volume { dims: self.dims, channels: 1, data: self.data.clone() }
    }

    /// Intersection of two masks on the same grid.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::Dim(format!("mask shape {} vs {}", self.dims, other.dims)));
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| if *a != 0.0 && *b != 0.0 { 1.0 } else { 0.0 })
            .collect();
        Mask::new(self.dims, data)
    }
}

// ---------------------------------------------------------------------------
// TAUV binary format
// ---------------------------------------------------------------------------

const TAUV_MAGIC: [u8; 4] = *b"TAUV";
const TAUV_VERSION: u32 = 1;

/// Serializes a volume in the TAUV layout: magic, version, channels,
/// nx, ny, nz (u32 LE), then f32 LE voxels in x-fastest channel-major order.
pub fn tauv_bytes(vol: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + vol.data.len() * 4);
    out.extend_from_slice(&TAUV_MAGIC);
    out.extend_from_slice(&TAUV_VERSION.to_le_bytes());
    out.extend_from_slice(&(vol.channels as u32).to_le_bytes());
    out.extend_from_slice(&(vol.dims.nx as u32).to_le_bytes());
    out.extend_from_slice(&(vol.dims.ny as u32).to_le_bytes());
    out.extend_from_slice(&(vol.dims.nz as u32).to_le_bytes());
    for v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tauv_from_bytes(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 24 {
        return Err(Error::Io(format!("TAUV header truncated ({} bytes)", bytes.len())));
    }
    if bytes[0..4] != TAUV_MAGIC {
        return Err(Error::Io(format!(
            "bad TAUV magic {:02x} {:02x} {:02x} {:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = read_u32(4);
    if version != TAUV_VERSION {
        return Err(Error::Io(format!("unsupported TAUV version {version}")));
    }
    let channels = read_u32(8) as usize;
    let nx = read_u32(12) as usize;
    let ny = read_u32(16) as usize;
    let nz = read_u32(20) as usize;
    let dims = Dims::new(nx, ny, nz)?;
    let count = dims
        .len()
        .checked_mul(channels)
        .ok_or_else(|| Error::Io("TAUV voxel count overflow".into()))?;
    let expect = 24 + count * 4;
    if bytes.len() != expect {
        return Err(Error::Io(format!(
            "TAUV payload length {} does not match header ({expect} expected)",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in bytes[24..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Volume::with_channels(dims, channels, data)
}

/// Atomically writes `bytes` to `path` (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io_path(dir, e))?;
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io_path(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io_path(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io_path(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io_path(path, e))
}

pub fn write_tauv(path: &Path, vol: &Volume) -> Result<()> {
    atomic_write(path, &tauv_bytes(vol))
}

pub fn read_tauv(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io_path(path, e))?;
    tauv_from_bytes(&bytes).map_err(|e| match e {
        Error::Io(msg) => Error::Io(format!("{}: {msg}", path.display())),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// PGM slice export
// ---------------------------------------------------------------------------

/// Writes the axial slice `z` of channel 0 as an 8-bit binary PGM, min-max
/// scaled over that slice; the scaling bounds go to `<path>.bounds.txt`.
pub fn write_axial_pgm(path: &Path, vol: &Volume, z: usize) -> Result<()> {
    let dims = vol.dims();
    if z >= dims.nz {
        return Err(Error::Domain(format!("slice z={z} out of range (nz={})", dims.nz)));
    }
    let slice: Vec<f32> = (0..dims.ny)
        .flat_map(|y| (0..dims.nx).map(move |x| (x, y)))
        .map(|(x, y)| vol.get(x, y, z))
        .collect();
    let lo = slice.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { (hi - lo) as f64 } else { 1.0 };

    let mut out = format!("P5\n{} {}\n255\n", dims.nx, dims.ny).into_bytes();
    for v in &slice {
        let t = ((*v as f64 - lo as f64) / span * 255.0).round().clamp(0.0, 255.0);
        out.push(t as u8);
    }
    atomic_write(path, &out)?;

    let sidecar = format!("{}.bounds.txt", path.display());
    let text = format!("min = {lo}\nmax = {hi}\nz = {z}\n");
    atomic_write(Path::new(&sidecar), text.as_bytes())
}
