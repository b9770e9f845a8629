//! Conversions among the equivalent network outputs (v, epsilon, x0, score)
//! and the guided epsilon-hat assembly.
//!
//! All four parametrizations describe the same prediction at a fixed
//! `(x_t, t)`; conversions between them must commute. Per-voxel arithmetic
//! happens in f64 with one rounding to f32, so paths through different
//! intermediate kinds agree to well below the 1e-5 contract.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::volume::Volume;

fn check_t_with_zero(s: &NoiseSchedule, t: usize) -> Result<()> {
    if t > s.t_max() {
        return Err(Error::Domain(format!("timestep {t} out of range 0..={}", s.t_max())));
    }
    Ok(())
}

/// Reconstructed sample estimate `x0 = sqrt(ab)*x_t - sqrt(1-ab)*v`.
pub fn v_to_x0(x_t: &Volume, v: &Volume, s: &NoiseSchedule, t: usize) -> Result<Volume> {
    check_t_with_zero(s, t)?;
    let ab = s.alpha_bar(t);
    Volume::lincomb(ab.sqrt(), x_t, -(1.0 - ab).sqrt(), v)
}

/// Noise estimate from a v-prediction, written in the form
/// `(1/sqrt(ab))*v + sqrt(1/ab - 1)*(sqrt(ab)*x_t - sqrt(1-ab)*v)`.
///
/// This is the un-simplified guided-sampling expression; it reduces
/// algebraically to `sqrt(1-ab)*x_t + sqrt(ab)*v`.
pub fn v_to_epsilon(x_t: &Volume, v: &Volume, s: &NoiseSchedule, t: usize) -> Result<Volume> {
    check_t_with_zero(s, t)?;
    if x_t.dims() != v.dims() || x_t.channels() != v.channels() {
        return Err(Error::Dim(format!(
            "shape mismatch: {} vs {}",
            x_t.dims(),
            v.dims()
        )));
    }
    let ab = s.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Domain(format!("alpha_bar({t}) = {ab} must be positive")));
    }
    let inv_sqrt_ab = 1.0 / ab.sqrt();
    let spread = (1.0 / ab - 1.0).sqrt();
    let (sab, s1mab) = (ab.sqrt(), (1.0 - ab).sqrt());
    // The spread factor grows like 1/sqrt(ab); keeping the inner x0 term in
    // f64 avoids amplifying an intermediate f32 rounding at deep timesteps.
    let data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(v.data())
        .map(|(x, vv)| {
            let (x, vv) = (*x as f64, *vv as f64);
            (inv_sqrt_ab * vv + spread * (sab * x - s1mab * vv)) as f32
        })
        .collect();
    Volume::with_channels(x_t.dims(), x_t.channels(), data)
}

/// Score estimate `S = -eps / sqrt(1 - ab)`; needs `t >= 1` so sigma > 0.
pub fn epsilon_to_score(eps: &Volume, s: &NoiseSchedule, t: usize) -> Result<Volume> {
    s.check_step(t)?;
    let sigma = s.sigma(t);
    if sigma == 0.0 {
        return Err(Error::Domain(format!("sigma({t}) is zero; score undefined")));
    }
    eps.scale(-1.0 / sigma)
}

/// Inverse of [`epsilon_to_score`].
pub fn score_to_epsilon(score: &Volume, s: &NoiseSchedule, t: usize) -> Result<Volume> {
    s.check_step(t)?;
    score.scale(-s.sigma(t))
}

/// v-prediction equivalent of a noise estimate:
/// `v = (eps - sqrt(1-ab)*x_t) / sqrt(ab)`.
pub fn epsilon_to_v(x_t: &Volume, eps: &Volume, s: &NoiseSchedule, t: usize) -> Result<Volume> {
    check_t_with_zero(s, t)?;
    let ab = s.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Domain(format!("alpha_bar({t}) = {ab} must be positive")));
    }
    let inv = 1.0 / ab.sqrt();
    Volume::lincomb(inv, eps, -(1.0 - ab).sqrt() * inv, x_t)
}

/// Noise estimate implied by an x0 estimate:
/// `eps = (x_t - sqrt(ab)*x0) / sqrt(1-ab)`; needs `t >= 1`.
pub fn x0_to_epsilon(x_t: &Volume, x0: &Volume, s: &NoiseSchedule, t: usize) -> Result<Volume> {
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    let sig = (1.0 - ab).sqrt();
    Volume::lincomb(1.0 / sig, x_t, -ab.sqrt() / sig, x0)
}

/// Training target `v = sqrt(ab)*eps - sqrt(1-ab)*x0` for a known
/// clean-sample/noise pair.
pub fn v_target(x0: &Volume, eps: &Volume, s: &NoiseSchedule, t: usize) -> Result<Volume> {
    check_t_with_zero(s, t)?;
    let ab = s.alpha_bar(t);
    Volume::lincomb(ab.sqrt(), eps, -(1.0 - ab).sqrt(), x0)
}

/// Guided noise estimate `eps_hat = base_eps + nu * sigma_t * grad_g`.
pub fn assemble_guided_epsilon(
    base_eps: &Volume,
    grad_g: &Volume,
    nu: f64,
    s: &NoiseSchedule,
    t: usize,
) -> Result<Volume> {
    s.check_step(t)?;
    Volume::lincomb(1.0, base_eps, nu * s.sigma(t), grad_g)
}
