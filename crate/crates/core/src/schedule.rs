//! Variance-preserving discrete noise schedule and the per-timestep
//! coefficients the samplers consume.
//!
//! Timesteps are 1-based: `t` runs over `1..=T`, and index 0 holds the
//! noise-free convention `alpha_bar[0] = 1`, which makes the t=1 reverse
//! step deterministic (its ancestral noise coefficient vanishes).

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end`, endpoints inclusive.
    pub fn linear(t_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {t_count}")));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta = Vec::with_capacity(t_count + 1);
        let mut alpha = Vec::with_capacity(t_count + 1);
        let mut alpha_bar = Vec::with_capacity(t_count + 1);
        let mut sigma = Vec::with_capacity(t_count + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        sigma.push(0.0);
        let step = (beta_end - beta_start) / (t_count - 1) as f64;
        for t in 1..=t_count {
            let b = beta_start + step * (t - 1) as f64;
            let a = 1.0 - b;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(alpha_bar[t - 1] * a);
            sigma.push((1.0 - alpha_bar[t]).sqrt());
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar, sigma })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len() - 1
    }

    /// Validates a sampling timestep `1 <= t <= T`.
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Domain(format!(
                "timestep {t} out of range 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Cumulative product of alphas; defined for `0..=T` with index 0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Squared ancestral noise coefficient
    /// `(1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * (1 - alpha[t])`.
    pub fn g1_sq(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok((1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * (1.0 - self.alpha[t]))
    }

    /// Squared drift-derived coefficient `(1 - alpha[t]) / sqrt(alpha[t])`.
    pub fn g2_sq(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok((1.0 - self.alpha[t]) / self.alpha[t].sqrt())
    }

    /// Discrete drift `f(x, t) = (1 - 1/sqrt(alpha[t])) * x`, chosen so that
    /// `x - f(x, t) = x / sqrt(alpha[t])` reproduces the DDPM posterior mean
    /// when combined with the ancestral coefficients.
    pub fn drift_disc(&self, t: usize, x: &Volume) -> Result<Volume> {
        self.check_step(t)?;
        x.scale(1.0 - 1.0 / self.alpha[t].sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn tiny_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn linear_schedule_endpoints_and_first_alpha() {
        let s = default_schedule();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 0.02).abs() < 1e-18);
        assert!((s.alpha(1) - 0.9999).abs() < 1e-12);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_schedule_by_hand() {
        let s = tiny_schedule();
        assert_eq!(s.beta(1), 0.1);
        assert_eq!(s.beta(2), 0.2);
        assert!((s.alpha_bar(2) - 0.72).abs() <= 1e-15);
    }

    #[test]
    fn invalid_beta_ranges_are_config_errors() {
        assert!(matches!(NoiseSchedule::linear(1, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.2, 0.1), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.0, 0.1), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn monotonicity_invariants_hold() {
        let s = default_schedule();
        for t in 2..=s.t_max() {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(s.alpha_bar(s.t_max()) < 0.05);
    }

    #[test]
    fn g1_sq_vanishes_at_first_step() {
        let s = default_schedule();
        assert_eq!(s.g1_sq(1).unwrap(), 0.0);
    }

    #[test]
    fn g1_sq_by_hand_on_two_step_schedule() {
        let s = tiny_schedule();
        // (1 - 0.9) / (1 - 0.72) * 0.2
        let expect = 0.1 / 0.28 * 0.2;
        assert!((s.g1_sq(2).unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn g2_sq_by_hand_on_two_step_schedule() {
        let s = tiny_schedule();
        let expect = 0.2 / 0.8f64.sqrt();
        assert!((s.g2_sq(2).unwrap() - expect).abs() <= 1e-12);
        assert!((expect - 0.2236067977).abs() < 1e-9);
    }

    #[test]
    fn coefficient_bounds_hold_for_random_schedules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t_count = rng.random_range(2..200);
            let b1 = rng.random_range(1e-5..5e-3);
            let bt = rng.random_range(0.01..0.5);
            let s = NoiseSchedule::linear(t_count, b1, bt).unwrap();
            for t in 1..=t_count {
                let g1 = s.g1_sq(t).unwrap();
                let g2 = s.g2_sq(t).unwrap();
                assert!(g1 <= 1.0 - s.alpha(t) + 1e-15, "g1_sq ratio must be <= 1");
                assert!(g2 >= 1.0 - s.alpha(t), "g2_sq >= 1 - alpha");
                assert!(g1 <= g2 + 1e-15);
            }
        }
    }

    #[test]
    fn ancestral_and_drift_coefficients_agree() {
        // The two sampler derivations use the same effective score weight:
        // (1-ab_t)/(1-ab_{t-1}) * (1/sqrt(a_t)) * G1^2 == G2^2.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let t_count = rng.random_range(2..500);
            let b1 = rng.random_range(1e-5..5e-3);
            let bt = rng.random_range(0.01..0.6);
            let s = NoiseSchedule::linear(t_count, b1, bt).unwrap();
            for t in 2..=t_count {
                let lhs = (1.0 - s.alpha_bar(t)) / (1.0 - s.alpha_bar(t - 1))
                    / s.alpha(t).sqrt()
                    * s.g1_sq(t).unwrap();
                assert!((lhs - s.g2_sq(t).unwrap()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dropped_ratio_approaches_one_as_t_grows() {
        // The approximation step in the sampler derivations drops the factor
        // (1-ab_t)/(1-ab_{t-1}) * 1/sqrt(a_t); its worst-case distance from 1
        // must shrink as the schedule is refined at a fixed continuous profile.
        let mut prev_worst = f64::INFINITY;
        for t_count in [100usize, 400, 1600] {
            let scale = 1000.0 / t_count as f64;
            let s = NoiseSchedule::linear(t_count, 1e-4 * scale, 0.02 * scale).unwrap();
            let mut worst: f64 = 0.0;
            for t in 2..=t_count {
                let ratio =
                    (1.0 - s.alpha_bar(t)) / (1.0 - s.alpha_bar(t - 1)) / s.alpha(t).sqrt();
                worst = worst.max((ratio - 1.0).abs());
            }
            assert!(worst < prev_worst, "worst ratio error must shrink with T");
            prev_worst = worst;
        }
    }

    #[test]
    fn drift_disc_trivial_cases() {
        let s = tiny_schedule();
        let zero = Volume::zeros(Dims::cube(3).unwrap());
        let f = s.drift_disc(1, &zero).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
        assert!(s.drift_disc(3, &zero).is_err());
    }

    #[test]
    fn ancestral_mean_matches_ddpm_posterior_mean() {
        // With f(x,t) = (1 - 1/sqrt(a))x and S = -eps/sqrt(1-ab), the mean
        // x - f + g2_sq * S must equal the independently coded posterior mean
        // (1/sqrt(a)) * (x - (1-a)/sqrt(1-ab) * eps).
        let dims = Dims::cube(4).unwrap();
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &t in &[1usize, 2, 137, 500, 1000] {
            let x = Volume::from_fn(dims, |_, _, _| rng.random_range(-2.0..2.0)).unwrap();
            let eps = Volume::from_fn(dims, |_, _, _| rng.random_range(-2.0..2.0)).unwrap();
            let score = eps.scale(-1.0 / (1.0 - s.alpha_bar(t)).sqrt()).unwrap();

            let minus_drift = x.sub(&s.drift_disc(t, &x).unwrap()).unwrap();
            let lhs = Volume::lincomb(1.0, &minus_drift, s.g2_sq(t).unwrap(), &score).unwrap();

            let a = s.alpha(t);
            let ab = s.alpha_bar(t);
            let rhs = Volume::lincomb(
                1.0 / a.sqrt(),
                &x,
                -(1.0 - a) / (a.sqrt() * (1.0 - ab).sqrt()),
                &eps,
            )
            .unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
        }
    }
}
