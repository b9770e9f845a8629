//! Reverse-process samplers: stochastic ancestral stepping and the two
//! deterministic probability-flow steppers D1 and D2, plus the
//! partial-noising reconstruction entry point.
//!
//! All three step rules share the drift `x_t - f(x_t, t) = x_t / sqrt(a_t)`
//! and differ only in the score coefficient and the presence of injected
//! noise:
//!
//! - ancestral: full coefficient `(1-ab_t)/(1-ab_{t-1}) * G1^2 / sqrt(a_t)`
//!   (algebraically `G2^2`) plus `G1 * eps` noise,
//! - D1: deterministic with `G1^2 / 2`,
//! - D2: deterministic with `G2^2 / 2`.
//!
//! D1 and D2 consume no randomness after the initial forward noising, so
//! reconstructions are bit-reproducible; ancestral is reproducible given
//! its seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoise::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::guide::{grad_g, GuidanceSpec};
use crate::parametrize::{assemble_guided_epsilon, epsilon_to_score, v_to_epsilon};
use crate::schedule::NoiseSchedule;
use crate::volume::Volume;

/// Which reverse-process stepper drives a reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ancestral,
    D1,
    D2,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerKind::Ancestral),
            "d1" => Ok(SamplerKind::D1),
            "d2" => Ok(SamplerKind::D2),
            other => Err(Error::Config(format!(
                "unknown sampler '{other}' (expected ancestral | d1 | d2)"
            ))),
        }
    }
}

/// Reconstruction settings: stepper, noising depth, seed for the forward
/// noising (and the ancestral noise stream), and optional guidance.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub t_start: usize,
    pub seed: u64,
    pub guidance: Option<GuidanceSpec>,
}

/// Seeded forward noising `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_noise(x0: &Volume, t: usize, s: &NoiseSchedule, seed: u64) -> Result<Volume> {
    s.check_step(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ab = s.alpha_bar(t);
    let (sab, s1mab) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data: Vec<f32> = x0
        .data()
        .iter()
        .map(|x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            (sab * *x as f64 + s1mab * e) as f32
        })
        .collect();
    Volume::with_channels(x0.dims(), x0.channels(), data)
}

/// Forward noising with caller-supplied noise; `t = 0` returns `x0`.
pub fn noised_with(x0: &Volume, eps: &Volume, s: &NoiseSchedule, t: usize) -> Result<Volume> {
    if t > s.t_max() {
        return Err(Error::Domain(format!("timestep {t} out of range 0..={}", s.t_max())));
    }
    let ab = s.alpha_bar(t);
    Volume::lincomb(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps)
}

/// Guided score used by all steppers: v prediction, optional classifier-free
/// mixing, the intensity-guidance term, then epsilon -> score.
fn guided_score(
    x_t: &Volume,
    t: usize,
    den: &dyn Denoiser,
    cond: &Condition,
    s: &NoiseSchedule,
    guidance: Option<&GuidanceSpec>,
) -> Result<Volume> {
    let v = den.predict_v(x_t, t, cond)?;
    let mut eps = v_to_epsilon(x_t, &v, s, t)?;
    if let Some(spec) = guidance {
        if spec.cfg_scale != 0.0 {
            let v_null = den.predict_v(x_t, t, &Condition::null())?;
            let eps_null = v_to_epsilon(x_t, &v_null, s, t)?;
            eps = Volume::lincomb(1.0 + spec.cfg_scale, &eps, -spec.cfg_scale, &eps_null)?;
        }
        if spec.nu != 0.0 {
            let g = grad_g(x_t, t, spec, den, cond, s)?;
            if !g.at_kink {
                eps = assemble_guided_epsilon(&eps, &g.grad, spec.nu, s, t)?;
            }
        }
    }
    epsilon_to_score(&eps, s, t)
}

/// Score coefficient of the exact ancestral mean,
/// `(1-ab_t)/(1-ab_{t-1}) * (1/sqrt(a_t)) * G1^2`. At t=1 the ratio is the
/// 0/0 limit of the same expression, which equals `G2^2`.
fn ancestral_score_coeff(s: &NoiseSchedule, t: usize) -> Result<f64> {
    if t == 1 {
        s.g2_sq(t)
    } else {
        Ok((1.0 - s.alpha_bar(t)) / (1.0 - s.alpha_bar(t - 1)) / s.alpha(t).sqrt()
            * s.g1_sq(t)?)
    }
}

/// One stochastic ancestral step; the noise term is omitted at t=1.
pub fn step_ancestral(
    x_t: &Volume,
    t: usize,
    den: &dyn Denoiser,
    cond: &Condition,
    s: &NoiseSchedule,
    guidance: Option<&GuidanceSpec>,
    rng: &mut ChaCha8Rng,
) -> Result<Volume> {
    s.check_step(t)?;
    let score = guided_score(x_t, t, den, cond, s, guidance)?;
    let mean = Volume::lincomb(
        1.0 / s.alpha(t).sqrt(),
        x_t,
        ancestral_score_coeff(s, t)?,
        &score,
    )?;
    if t == 1 {
        return Ok(mean);
    }
    let g1 = s.g1_sq(t)?.sqrt();
    let data: Vec<f32> = mean
        .data()
        .iter()
        .map(|m| {
            let e: f64 = StandardNormal.sample(rng);
            (*m as f64 + g1 * e) as f32
        })
        .collect();
    Volume::with_channels(mean.dims(), mean.channels(), data)
}

/// One deterministic step with the ancestral-derived coefficient:
/// `x_{t-1} = x_t/sqrt(a_t) + G1^2/2 * S`.
pub fn step_d1(
    x_t: &Volume,
    t: usize,
    den: &dyn Denoiser,
    cond: &Condition,
    s: &NoiseSchedule,
    guidance: Option<&GuidanceSpec>,
) -> Result<Volume> {
    s.check_step(t)?;
    let score = guided_score(x_t, t, den, cond, s, guidance)?;
    Volume::lincomb(1.0 / s.alpha(t).sqrt(), x_t, 0.5 * s.g1_sq(t)?, &score)
}

/// One deterministic step with the drift-derived coefficient:
/// `x_{t-1} = x_t/sqrt(a_t) + G2^2/2 * S`.
pub fn step_d2(
    x_t: &Volume,
    t: usize,
    den: &dyn Denoiser,
    cond: &Condition,
    s: &NoiseSchedule,
    guidance: Option<&GuidanceSpec>,
) -> Result<Volume> {
    s.check_step(t)?;
    let score = guided_score(x_t, t, den, cond, s, guidance)?;
    Volume::lincomb(1.0 / s.alpha(t).sqrt(), x_t, 0.5 * s.g2_sq(t)?, &score)
}

/// Pseudo-healthy reconstruction: noise the input to `t_start`, then run the
/// configured stepper down to t=0.
pub fn reconstruct(
    input: &Volume,
    cfg: &SamplerConfig,
    den: &dyn Denoiser,
    cond: &Condition,
    s: &NoiseSchedule,
) -> Result<Volume> {
    if cfg.t_start == 0 || cfg.t_start > s.t_max() {
        return Err(Error::Config(format!(
            "t_start {} out of range 1..={}",
            cfg.t_start,
            s.t_max()
        )));
    }
    let mut x = forward_noise(input, cfg.t_start, s, cfg.seed)?;
    // Separate stream for the ancestral per-step noise so the forward
    // noising and the reverse noise never alias.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let guidance = cfg.guidance.as_ref();
    for t in (1..=cfg.t_start).rev() {
        x = match cfg.kind {
            SamplerKind::Ancestral => step_ancestral(&x, t, den, cond, s, guidance, &mut rng)?,
            SamplerKind::D1 => step_d1(&x, t, den, cond, s, guidance)?,
            SamplerKind::D2 => step_d2(&x, t, den, cond, s, guidance)?,
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{MixtureModel, OracleDenoiser};
    use crate::volume::Dims;
    use rand::Rng;

    fn sched(t: usize) -> NoiseSchedule {
        let scale = 1000.0 / t as f64;
        NoiseSchedule::linear(t, 1e-4 * scale, 0.02 * scale).unwrap()
    }

    fn randv(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Denoiser that reports a fixed score, for coefficient plumbing tests.
    struct FixedScore {
        score: Volume,
        schedule: NoiseSchedule,
    }

    impl Denoiser for FixedScore {
        fn predict_v(&self, x_t: &Volume, t: usize, _c: &Condition) -> Result<Volume> {
            // v such that v_to_epsilon yields eps = -sigma * score.
            let eps = self.score.scale(-self.schedule.sigma(t)).unwrap();
            crate::parametrize::epsilon_to_v(x_t, &eps, &self.schedule, t)
        }

        fn x0_jacobian_mode(&self) -> crate::denoise::JacobianMode {
            crate::denoise::JacobianMode::StopGradient
        }

        fn vjp_x0(&self, _x: &Volume, t: usize, _c: &Condition, u: &Volume) -> Result<Volume> {
            u.scale(self.schedule.alpha_bar(t).sqrt())
        }
    }

    #[test]
    fn forward_noise_is_seed_deterministic() {
        let s = sched(100);
        let x0 = randv(Dims::cube(4).unwrap(), 1);
        let a = forward_noise(&x0, 40, &s, 7).unwrap();
        let b = forward_noise(&x0, 40, &s, 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c = forward_noise(&x0, 40, &s, 8).unwrap();
        assert_ne!(a.data(), c.data());
        assert!(forward_noise(&x0, 0, &s, 7).is_err());
        assert!(forward_noise(&x0, 101, &s, 7).is_err());
    }

    #[test]
    fn shallow_noising_stays_near_input() {
        let s = sched(1000);
        let x0 = randv(Dims::cube(6).unwrap(), 2);
        let x1 = forward_noise(&x0, 1, &s, 3).unwrap();
        let bound = (1.0 - s.alpha_bar(1)).sqrt() * 5.0 + 1e-4;
        for (a, b) in x1.data().iter().zip(x0.data()) {
            assert!((*a as f64 - *b as f64).abs() <= bound);
        }
    }

    #[test]
    fn forward_noise_variance_matches_schedule() {
        // Monte-Carlo variance oracle over many draws at a fixed voxel set.
        let s = sched(100);
        let dims = Dims::new(4, 4, 2).unwrap();
        let x0 = Volume::constant(dims, 0.7).unwrap();
        let t = 60;
        let n = 10_000usize;
        let mut mean = vec![0.0f64; dims.len()];
        let mut m2 = vec![0.0f64; dims.len()];
        for seed in 0..n {
            let x = forward_noise(&x0, t, &s, seed as u64).unwrap();
            for (i, v) in x.data().iter().enumerate() {
                let d = *v as f64 - mean[i];
                mean[i] += d / (seed + 1) as f64;
                m2[i] += d * (*v as f64 - mean[i]);
            }
        }
        let expect = 1.0 - s.alpha_bar(t);
        let avg_var = m2.iter().map(|v| v / (n - 1) as f64).sum::<f64>() / dims.len() as f64;
        assert!(
            (avg_var - expect).abs() / expect <= 0.05,
            "empirical {avg_var} vs {expect}"
        );
    }

    #[test]
    fn zero_score_steps_reduce_to_pure_drift() {
        let s = sched(100);
        let dims = Dims::cube(3).unwrap();
        let x = randv(dims, 5);
        let den = FixedScore { score: Volume::zeros(dims), schedule: s.clone() };
        let cond = Condition::null();
        let t = 50;
        let expect = x.scale(1.0 / s.alpha(t).sqrt()).unwrap();

        let d1 = step_d1(&x, t, &den, &cond, &s, None).unwrap();
        let d2 = step_d2(&x, t, &den, &cond, &s, None).unwrap();
        assert!(d1.max_abs_diff(&expect).unwrap() <= 1e-6);
        assert!(d2.max_abs_diff(&expect).unwrap() <= 1e-6);

        // Ancestral at t=1 omits noise entirely.
        let expect1 = x.scale(1.0 / s.alpha(1).sqrt()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a1 = step_ancestral(&x, 1, &den, &cond, &s, None, &mut rng).unwrap();
        assert!(a1.max_abs_diff(&expect1).unwrap() <= 1e-6);
    }

    #[test]
    fn d1_first_step_has_no_score_contribution() {
        // G1(1)^2 = 0, so even a wild score cannot move the t=1 D1 step.
        let s = sched(100);
        let dims = Dims::cube(3).unwrap();
        let x = randv(dims, 6);
        let den = FixedScore { score: randv(dims, 7).scale(10.0).unwrap(), schedule: s.clone() };
        let got = step_d1(&x, 1, &den, &Condition::null(), &s, None).unwrap();
        let expect = x.scale(1.0 / s.alpha(1).sqrt()).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() <= 1e-6);
    }

    #[test]
    fn d2_minus_d1_is_half_coefficient_gap_times_score() {
        let s = sched(100);
        let dims = Dims::cube(3).unwrap();
        let x = randv(dims, 8);
        let score = randv(dims, 9);
        let den = FixedScore { score: score.clone(), schedule: s.clone() };
        let cond = Condition::null();
        for &t in &[2usize, 30, 100] {
            let d1 = step_d1(&x, t, &den, &cond, &s, None).unwrap();
            let d2 = step_d2(&x, t, &den, &cond, &s, None).unwrap();
            let gap = 0.5 * (s.g2_sq(t).unwrap() - s.g1_sq(t).unwrap());
            let expect = score.scale(gap).unwrap();
            let diff = d2.sub(&d1).unwrap();
            assert!(diff.max_abs_diff(&expect).unwrap() <= 1e-6, "t={t}");
        }
    }

    #[test]
    fn ancestral_coefficient_equals_g2_sq() {
        let s = sched(257);
        for t in 2..=257 {
            let c = ancestral_score_coeff(&s, t).unwrap();
            assert!((c - s.g2_sq(t).unwrap()).abs() <= 1e-12, "t={t}");
        }
        assert!((ancestral_score_coeff(&s, 1).unwrap() - s.g2_sq(1).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn ancestral_step_mean_matches_posterior_mean_oracle() {
        // K=1 oracle; the Monte-Carlo mean over step noise must match the
        // independently coded DDPM posterior mean within 3 standard errors.
        let dims = Dims::cube(3).unwrap();
        let s = sched(100);
        let mu = randv(dims, 10);
        let model = MixtureModel::from_latents(vec![mu.clone()], 0.2).unwrap();
        let den = OracleDenoiser::new(model, s.clone());
        let cond = Condition::null();
        let t = 50;
        let x_t = forward_noise(&mu, t, &s, 11).unwrap();

        let runs = 1000usize;
        let mut acc = vec![0.0f64; dims.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..runs {
            let step = step_ancestral(&x_t, t, &den, &cond, &s, None, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(step.data()) {
                *a += *v as f64;
            }
        }
        for a in acc.iter_mut() {
            *a /= runs as f64;
        }

        // Oracle: posterior mean (1/sqrt(a)) (x - (1-a)/sqrt(1-ab) * eps_hat)
        // with the exact eps_hat implied by the mixture score.
        let score = den.score(&x_t, t).unwrap();
        let eps_hat = crate::parametrize::score_to_epsilon(&score, &s, t).unwrap();
        let a_t = s.alpha(t);
        let expect = Volume::lincomb(
            1.0 / a_t.sqrt(),
            &x_t,
            -(1.0 - a_t) / (a_t.sqrt() * (1.0 - s.alpha_bar(t)).sqrt()),
            &eps_hat,
        )
        .unwrap();

        let stderr = s.g1_sq(t).unwrap().sqrt() / (runs as f64).sqrt();
        for (got, want) in acc.iter().zip(expect.data()) {
            assert!(
                (got - *want as f64).abs() <= 3.0 * stderr + 1e-7,
                "{got} vs {want} (3se = {})",
                3.0 * stderr
            );
        }
    }

    #[test]
    fn deterministic_reconstructions_are_bit_identical() {
        let dims = Dims::cube(4).unwrap();
        let s = sched(50);
        let mu = randv(dims, 12);
        let den = OracleDenoiser::new(
            MixtureModel::from_latents(vec![mu.clone()], 0.1).unwrap(),
            s.clone(),
        );
        let cond = Condition::null();
        let input = randv(dims, 13);
        for kind in [SamplerKind::D1, SamplerKind::D2, SamplerKind::Ancestral] {
            let cfg = SamplerConfig { kind, t_start: 20, seed: 5, guidance: None };
            let a = reconstruct(&input, &cfg, &den, &cond, &s).unwrap();
            let b = reconstruct(&input, &cfg, &den, &cond, &s).unwrap();
            assert_eq!(a.data(), b.data(), "{kind:?}");
        }
    }

    #[test]
    fn shallow_reconstruction_stays_near_input() {
        let dims = Dims::cube(4).unwrap();
        let s = sched(1000);
        let mu = randv(dims, 14);
        let den = OracleDenoiser::new(
            MixtureModel::from_latents(vec![mu.clone()], 0.3).unwrap(),
            s.clone(),
        );
        let input = forward_noise(&mu, 1, &s, 40).unwrap(); // a mixture draw
        for kind in [SamplerKind::D1, SamplerKind::D2] {
            let cfg = SamplerConfig { kind, t_start: 1, seed: 6, guidance: None };
            let out = reconstruct(&input, &cfg, &den, &Condition::null(), &s).unwrap();
            let noise_floor = (1.0 - s.alpha_bar(1)).sqrt() * 6.0 + 2e-2;
            assert!(
                out.max_abs_diff(&input).unwrap() <= noise_floor,
                "{kind:?}: {} vs floor {noise_floor}",
                out.max_abs_diff(&input).unwrap()
            );
        }
    }

    #[test]
    fn oracle_reconstruction_error_is_small_for_healthy_inputs() {
        // Healthy draw from the K=1 mixture, reconstructed at 0.4 T. The
        // error has two parts: the population spread tau (noised-away detail
        // is resampled from the population) and the stepper discretization,
        // which needs T ~ 1000. Calibrated once: rel ~ 0.034 here.
        let dims = Dims::cube(6).unwrap();
        let s = sched(1000);
        let mu = randv(dims, 15).scale(0.5).unwrap()
            .add(&Volume::constant(dims, 1.0).unwrap())
            .unwrap();
        let den = OracleDenoiser::new(
            MixtureModel::from_latents(vec![mu.clone()], 2e-4).unwrap(),
            s.clone(),
        );
        let input = forward_noise(&mu, 1, &s, 41).unwrap();
        let cfg = SamplerConfig { kind: SamplerKind::D1, t_start: 400, seed: 42, guidance: None };
        let recon = reconstruct(&input, &cfg, &den, &Condition::null(), &s).unwrap();
        let rel = recon.l2_distance(&input).unwrap()
            / input.l2_distance(&Volume::zeros(dims)).unwrap();
        assert!(rel <= 0.05, "relative l2 error {rel}");
    }

    #[test]
    fn reconstruct_rejects_bad_t_start() {
        let dims = Dims::cube(3).unwrap();
        let s = sched(50);
        let den = OracleDenoiser::new(
            MixtureModel::from_latents(vec![randv(dims, 1)], 0.1).unwrap(),
            s.clone(),
        );
        let input = randv(dims, 2);
        for bad in [0usize, 51] {
            let cfg = SamplerConfig { kind: SamplerKind::D1, t_start: bad, seed: 0, guidance: None };
            assert!(reconstruct(&input, &cfg, &den, &Condition::null(), &s).is_err());
        }
    }

    #[test]
    fn samplers_preserve_dims_and_finiteness() {
        let dims = Dims::new(3, 4, 5).unwrap();
        let s = sched(40);
        let den = OracleDenoiser::new(
            MixtureModel::from_latents(vec![randv(dims, 3)], 0.2).unwrap(),
            s.clone(),
        );
        let input = randv(dims, 4);
        for kind in [SamplerKind::Ancestral, SamplerKind::D1, SamplerKind::D2] {
            let cfg = SamplerConfig { kind, t_start: 40, seed: 9, guidance: None };
            let out = reconstruct(&input, &cfg, &den, &Condition::null(), &s).unwrap();
            assert_eq!(out.dims(), dims);
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }
}
