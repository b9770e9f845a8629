//! Fixed analytic latent codec and latent-space edge extraction.
//!
//! Encoding is k^3 average pooling, decoding is center-aligned trilinear
//! upsampling with replicated borders. Both are linear maps, which keeps the
//! downstream anomaly arithmetic exact: decoding a latent difference equals
//! the difference of decoded volumes.

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

/// Downsampling factor of the analytic codec; trilinear interpolation on
/// the way back up.
#[derive(Debug, Clone, Copy)]
pub struct LatentCodecSpec {
    pub k: usize,
}

impl LatentCodecSpec {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("codec factor k must be positive".into()));
        }
        Ok(LatentCodecSpec { k })
    }

    pub fn latent_dims(&self, image: Dims) -> Result<Dims> {
        if image.nx % self.k != 0 || image.ny % self.k != 0 || image.nz % self.k != 0 {
            return Err(Error::Config(format!(
                "image dims {image} not divisible by codec factor {}",
                self.k
            )));
        }
        Dims::new(image.nx / self.k, image.ny / self.k, image.nz / self.k)
    }
}

/// k^3 block averaging into latent space.
pub fn encode(image: &Volume, spec: &LatentCodecSpec) -> Result<Volume> {
    if image.channels() != 1 {
        return Err(Error::Dim("codec expects single-channel volumes".into()));
    }
    let k = spec.k;
    let out_dims = spec.latent_dims(image.dims())?;
    if k == 1 {
        return Ok(image.clone());
    }
    let inv = 1.0 / (k * k * k) as f64;
    let mut data = Vec::with_capacity(out_dims.len());
    for cz in 0..out_dims.nz {
        for cy in 0..out_dims.ny {
            for cx in 0..out_dims.nx {
                let mut sum = 0.0f64;
                for dz in 0..k {
                    for dy in 0..k {
                        for dx in 0..k {
                            sum += image.get(cx * k + dx, cy * k + dy, cz * k + dz) as f64;
                        }
                    }
                }
                data.push((sum * inv) as f32);
            }
        }
    }
    Volume::new(out_dims, data)
}

#[inline]
fn axis_interp(i: usize, k: usize, len: usize) -> (usize, usize, f64) {
    // Latent cell centers sit at image coordinate c*k + (k-1)/2; clamp at
    // the borders (replicate edge cells).
    let u = (i as f64 + 0.5) / k as f64 - 0.5;
    let u = u.clamp(0.0, (len - 1) as f64);
    let lo = u.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, u - lo as f64)
}

/// Trilinear upsampling by the codec factor.
pub fn decode(latent: &Volume, spec: &LatentCodecSpec) -> Result<Volume> {
    if latent.channels() != 1 {
        return Err(Error::Dim("codec expects single-channel volumes".into()));
    }
    let k = spec.k;
    if k == 1 {
        return Ok(latent.clone());
    }
    let ld = latent.dims();
    let out_dims = Dims::new(ld.nx * k, ld.ny * k, ld.nz * k)?;
    let mut data = Vec::with_capacity(out_dims.len());
    for z in 0..out_dims.nz {
        let (z0, z1, fz) = axis_interp(z, k, ld.nz);
        for y in 0..out_dims.ny {
            let (y0, y1, fy) = axis_interp(y, k, ld.ny);
            for x in 0..out_dims.nx {
                let (x0, x1, fx) = axis_interp(x, k, ld.nx);
                let c000 = latent.get(x0, y0, z0) as f64;
                let c100 = latent.get(x1, y0, z0) as f64;
                let c010 = latent.get(x0, y1, z0) as f64;
                let c110 = latent.get(x1, y1, z0) as f64;
                let c001 = latent.get(x0, y0, z1) as f64;
                let c101 = latent.get(x1, y0, z1) as f64;
                let c011 = latent.get(x0, y1, z1) as f64;
                let c111 = latent.get(x1, y1, z1) as f64;
                let c00 = c000 + (c100 - c000) * fx;
                let c10 = c010 + (c110 - c010) * fx;
                let c01 = c001 + (c101 - c001) * fx;
                let c11 = c011 + (c111 - c011) * fx;
                let c0 = c00 + (c10 - c00) * fy;
                let c1 = c01 + (c11 - c01) * fy;
                data.push((c0 + (c1 - c0) * fz) as f32);
            }
        }
    }
    Volume::new(out_dims, data)
}

/// Central-difference gradient magnitude with replicated borders, normalized
/// to [0, 1] by its own maximum (all-zero map when the input is constant).
pub fn edge_map(latent: &Volume) -> Result<Volume> {
    if latent.channels() != 1 {
        return Err(Error::Dim("edge map expects a single-channel volume".into()));
    }
    let d = latent.dims();
    if d.nx < 3 || d.ny < 3 || d.nz < 3 {
        return Err(Error::Dim(format!("edge map needs dims >= 3 per axis, got {d}")));
    }
    let mut mags = Vec::with_capacity(d.len());
    let mut max_mag = 0.0f64;
    for z in 0..d.nz {
        let zp = (z + 1).min(d.nz - 1);
        let zm = z.saturating_sub(1);
        for y in 0..d.ny {
            let yp = (y + 1).min(d.ny - 1);
            let ym = y.saturating_sub(1);
            for x in 0..d.nx {
                let xp = (x + 1).min(d.nx - 1);
                let xm = x.saturating_sub(1);
                let gx = (latent.get(xp, y, z) as f64 - latent.get(xm, y, z) as f64) / 2.0;
                let gy = (latent.get(x, yp, z) as f64 - latent.get(x, ym, z) as f64) / 2.0;
                let gz = (latent.get(x, y, zp) as f64 - latent.get(x, y, zm) as f64) / 2.0;
                let mag = (gx * gx + gy * gy + gz * gz).sqrt();
                max_mag = max_mag.max(mag);
                mags.push(mag);
            }
        }
    }
    let data: Vec<f32> = if max_mag == 0.0 {
        vec![0.0; d.len()]
    } else {
        mags.iter().map(|m| (m / max_mag) as f32).collect()
    };
    Volume::new(d, data)
}
