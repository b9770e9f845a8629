//! The pluggable v-prediction denoiser interface and its two concrete
//! implementations.
//!
//! [`OracleDenoiser`] wraps an isotropic Gaussian [`MixtureModel`] whose
//! noised marginal has a closed-form score, so predictions (and the Jacobian
//! of the implied x0 estimate) are exact. [`LocalLinearDenoiser`] is a
//! desk-scale learned model: one ridge-regressed 3x3x3 linear filter per
//! time bucket over the (x_t, edge) channels plus two schedule features.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::volume::{atomic_write, Dims, Volume};

/// Structural condition channel: a latent-space edge map, or the null
/// condition (treated as an all-zero edge volume).
#[derive(Debug, Clone)]
pub struct Condition {
    edge: Option<Volume>,
}

impl Condition {
    pub fn new(edge: Volume) -> Self {
        Condition { edge: Some(edge) }
    }

    /// The null condition.
    pub fn null() -> Self {
        Condition { edge: None }
    }

    pub fn edge(&self) -> Option<&Volume> {
        self.edge.as_ref()
    }

    fn check_dims(&self, dims: Dims) -> Result<()> {
        if let Some(e) = &self.edge {
            if e.dims() != dims || e.channels() != 1 {
                return Err(Error::Dim(format!(
                    "condition edge {} does not match latent {dims}",
                    e.dims()
                )));
            }
        }
        Ok(())
    }
}

/// How the x0-estimate Jacobian is made available to guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    /// Exact analytic Jacobian-transpose products.
    Full,
    /// Treat the prediction as constant: d(x0)/d(x_t) ~ sqrt(alpha_bar) * I.
    StopGradient,
}

/// A v-prediction model over latent volumes.
pub trait Denoiser {
    /// Predicts v at `(x_t, t)` under the given condition.
    fn predict_v(&self, x_t: &Volume, t: usize, cond: &Condition) -> Result<Volume>;

    /// Whether [`Denoiser::vjp_x0`] is analytic or must be approximated.
    fn x0_jacobian_mode(&self) -> JacobianMode;

    /// Product `(d x0_hat / d x_t)^T u` where `x0_hat` is the x0 estimate
    /// implied by `predict_v` at `(x_t, t)`.
    fn vjp_x0(&self, x_t: &Volume, t: usize, cond: &Condition, u: &Volume) -> Result<Volume>;
}

// ---------------------------------------------------------------------------
// Gaussian mixture oracle
// ---------------------------------------------------------------------------

/// Isotropic Gaussian mixture over clean latents:
/// `x0 ~ sum_k w_k N(mu_k, tau^2 I)`.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    weights: Vec<f64>,
    means: Vec<Volume>,
    tau_sq: f64,
}

impl MixtureModel {
    pub fn new(weights: Vec<f64>, means: Vec<Volume>, tau_sq: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::Config(format!(
                "mixture needs matching nonempty weights/means, got {}/{}",
                weights.len(),
                means.len()
            )));
        }
        if tau_sq <= 0.0 {
            return Err(Error::Config(format!("tau_sq must be positive, got {tau_sq}")));
        }
        if weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        let dims = means[0].dims();
        for m in &means {
            if m.dims() != dims || m.channels() != 1 {
                return Err(Error::Dim("mixture means must share single-channel dims".into()));
            }
        }
        Ok(MixtureModel { weights, means, tau_sq })
    }

    /// Equal-weight mixture over the given latents.
    pub fn from_latents(means: Vec<Volume>, tau_sq: f64) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one mean".into()));
        }
        MixtureModel::new(vec![1.0 / k as f64; k], means, tau_sq)
    }

    pub fn dims(&self) -> Dims {
        self.means[0].dims()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Marginal variance of the noised mixture components at time t.
    fn marginal_var(&self, ab: f64) -> f64 {
        ab * self.tau_sq + (1.0 - ab)
    }

    /// Posterior component responsibilities at `x_t`, via log-sum-exp.
    fn responsibilities(&self, x_t: &Volume, ab: f64) -> Vec<f64> {
        let s_sq = self.marginal_var(ab);
        let sqrt_ab = ab.sqrt();
        let mut logits = Vec::with_capacity(self.weights.len());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            let mut dist_sq = 0.0f64;
            for (x, m) in x_t.data().iter().zip(mu.data()) {
                let d = *x as f64 - sqrt_ab * *m as f64;
                dist_sq += d * d;
            }
            logits.push(w.ln() - dist_sq / (2.0 * s_sq));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in logits.iter_mut() {
            *l /= total;
        }
        logits
    }

    /// Exact score of the noised marginal, as per-voxel f64 values.
    fn score_f64(&self, x_t: &Volume, ab: f64) -> Vec<f64> {
        let gamma = self.responsibilities(x_t, ab);
        let s_sq = self.marginal_var(ab);
        let sqrt_ab = ab.sqrt();
        let n = x_t.data().len();
        let mut post_mean = vec![0.0f64; n];
        for (g, mu) in gamma.iter().zip(&self.means) {
            for (acc, m) in post_mean.iter_mut().zip(mu.data()) {
                *acc += g * sqrt_ab * *m as f64;
            }
        }
        post_mean
            .iter()
            .zip(x_t.data())
            .map(|(mbar, x)| (mbar - *x as f64) / s_sq)
            .collect()
    }

    /// Log density of the noised marginal at `x_t`; used by tests as the
    /// finite-difference target for the exact score.
    pub fn log_density(&self, x_t: &Volume, s: &NoiseSchedule, t: usize) -> Result<f64> {
        s.check_step(t)?;
        if x_t.dims() != self.dims() {
            return Err(Error::Dim("x_t does not match mixture dims".into()));
        }
        let ab = s.alpha_bar(t);
        let s_sq = self.marginal_var(ab);
        let sqrt_ab = ab.sqrt();
        let mut logits = Vec::with_capacity(self.weights.len());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            let mut dist_sq = 0.0f64;
            for (x, m) in x_t.data().iter().zip(mu.data()) {
                let d = *x as f64 - sqrt_ab * *m as f64;
                dist_sq += d * d;
            }
            logits.push(w.ln() - dist_sq / (2.0 * s_sq));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let n = x_t.data().len() as f64;
        Ok(lse - 0.5 * n * (2.0 * std::f64::consts::PI * s_sq).ln())
    }
}

/// Exact denoiser backed by the analytic mixture score. The condition is
/// accepted for interface parity and ignored: the oracle models the
/// unconditional healthy distribution.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    mixture: MixtureModel,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(mixture: MixtureModel, schedule: NoiseSchedule) -> Self {
        OracleDenoiser { mixture, schedule }
    }

    pub fn mixture(&self) -> &MixtureModel {
        &self.mixture
    }

    fn check(&self, x_t: &Volume, t: usize) -> Result<()> {
        self.schedule.check_step(t)?;
        if x_t.dims() != self.mixture.dims() || x_t.channels() != 1 {
            return Err(Error::Dim(format!(
                "x_t {} does not match mixture dims {}",
                x_t.dims(),
                self.mixture.dims()
            )));
        }
        Ok(())
    }

    /// Exact score as a volume; exposed for the reference ODE integrations.
    pub fn score(&self, x_t: &Volume, t: usize) -> Result<Volume> {
        self.check(x_t, t)?;
        let ab = self.schedule.alpha_bar(t);
        Volume::with_channels(
            x_t.dims(),
            1,
            self.mixture
                .score_f64(x_t, ab)
                .iter()
                .map(|v| *v as f32)
                .collect(),
        )
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_v(&self, x_t: &Volume, t: usize, _cond: &Condition) -> Result<Volume> {
        self.check(x_t, t)?;
        let ab = self.schedule.alpha_bar(t);
        let score = self.mixture.score_f64(x_t, ab);
        // eps = -sigma * S, then v = (eps - sqrt(1-ab) x) / sqrt(ab), fused
        // per voxel so only one rounding happens.
        let sig = (1.0 - ab).sqrt();
        let inv_sqrt_ab = 1.0 / ab.sqrt();
        let data: Vec<f32> = score
            .iter()
            .zip(x_t.data())
            .map(|(s_i, x)| ((-sig * s_i - sig * *x as f64) * inv_sqrt_ab) as f32)
            .collect();
        Volume::with_channels(x_t.dims(), 1, data)
    }

    fn x0_jacobian_mode(&self) -> JacobianMode {
        JacobianMode::Full
    }

    fn vjp_x0(&self, x_t: &Volume, t: usize, _cond: &Condition, u: &Volume) -> Result<Volume> {
        self.check(x_t, t)?;
        if u.dims() != x_t.dims() {
            return Err(Error::Dim("cotangent does not match x_t dims".into()));
        }
        let ab = self.schedule.alpha_bar(t);
        let sqrt_ab = ab.sqrt();
        let s_sq = self.mixture.marginal_var(ab);
        let gamma = self.mixture.responsibilities(x_t, ab);
        let n = x_t.data().len();

        // Posterior mean of the noised component centers and the inner
        // products m_k . u, for the softmax part of the score Jacobian.
        let mut m_bar = vec![0.0f64; n];
        let mut dots = vec![0.0f64; gamma.len()];
        for (k, (g, mu)) in gamma.iter().zip(&self.mixture.means).enumerate() {
            let mut dot = 0.0f64;
            for ((acc, m), uv) in m_bar.iter_mut().zip(mu.data()).zip(u.data()) {
                let mk = sqrt_ab * *m as f64;
                *acc += g * mk;
                dot += mk * *uv as f64;
            }
            dots[k] = dot;
        }

        // (J_S^T u)[j] = ( sum_k gamma_k dot_k (m_k[j] - m_bar[j]) / s_sq - u[j] ) / s_sq
        let mut js_u = vec![0.0f64; n];
        for (k, (g, mu)) in gamma.iter().zip(&self.mixture.means).enumerate() {
            let coeff = g * dots[k] / s_sq;
            for ((acc, m), mb) in js_u.iter_mut().zip(mu.data()).zip(&m_bar) {
                *acc += coeff * (sqrt_ab * *m as f64 - mb);
            }
        }
        let one_minus_ab = 1.0 - ab;
        let data: Vec<f32> = js_u
            .iter()
            .zip(u.data())
            .map(|(jsu, uv)| {
                let js = (*jsu - *uv as f64) / s_sq;
                ((*uv as f64 + one_minus_ab * js) / sqrt_ab) as f32
            })
            .collect();
        Volume::with_channels(x_t.dims(), 1, data)
    }
}

// ---------------------------------------------------------------------------
// Local-linear learned denoiser
// ---------------------------------------------------------------------------

const NEIGHBORHOOD: usize = 27;
const INPUT_CHANNELS: usize = 2; // x_t and the edge condition
const SCHEDULE_FEATURES: usize = 2; // sqrt(alpha_bar), sqrt(1 - alpha_bar)
/// Feature width: 27 * C_in + schedule features + bias.
pub const LOCAL_LINEAR_FEATURES: usize =
    NEIGHBORHOOD * INPUT_CHANNELS + SCHEDULE_FEATURES + 1;

const SAMPLES_PER_VOLUME: usize = 2;

/// Per-time-bucket linear v-predictor over a 3x3x3 neighborhood of
/// `(x_t, edge)` plus schedule features, fit by closed-form ridge regression.
#[derive(Debug, Clone)]
pub struct LocalLinearDenoiser {
    schedule: NoiseSchedule,
    lambda: f64,
    weights: Vec<Vec<f64>>,
}

#[inline]
fn clamp_add(v: usize, d: isize, hi: usize) -> usize {
    let w = v as isize + d;
    w.clamp(0, hi as isize - 1) as usize
}

fn neighbor_offsets() -> [(isize, isize, isize); NEIGHBORHOOD] {
    let mut out = [(0, 0, 0); NEIGHBORHOOD];
    let mut i = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                out[i] = (dx, dy, dz);
                i += 1;
            }
        }
    }
    out
}

fn gather_features(
    x_t: &[f32],
    edge: Option<&[f32]>,
    dims: Dims,
    (x, y, z): (usize, usize, usize),
    sqrt_ab: f64,
    sqrt_one_minus_ab: f64,
    offsets: &[(isize, isize, isize); NEIGHBORHOOD],
    out: &mut [f64; LOCAL_LINEAR_FEATURES],
) {
    for (i, (dx, dy, dz)) in offsets.iter().enumerate() {
        let idx = dims.index(
            clamp_add(x, *dx, dims.nx),
            clamp_add(y, *dy, dims.ny),
            clamp_add(z, *dz, dims.nz),
        );
        out[i] = x_t[idx] as f64;
        out[NEIGHBORHOOD + i] = edge.map_or(0.0, |e| e[idx] as f64);
    }
    out[2 * NEIGHBORHOOD] = sqrt_ab;
    out[2 * NEIGHBORHOOD + 1] = sqrt_one_minus_ab;
    out[2 * NEIGHBORHOOD + 2] = 1.0;
}

fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for part in parts {
        for b in *part {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn volume_bytes(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.data().len() * 4);
    for f in v.data() {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

struct NormalEquations {
    xtx: Vec<f64>, // row-major LOCAL_LINEAR_FEATURES^2
    xty: Vec<f64>,
    rows: usize,
}

impl NormalEquations {
    fn new() -> Self {
        NormalEquations {
            xtx: vec![0.0; LOCAL_LINEAR_FEATURES * LOCAL_LINEAR_FEATURES],
            xty: vec![0.0; LOCAL_LINEAR_FEATURES],
            rows: 0,
        }
    }

    fn push(&mut self, feats: &[f64; LOCAL_LINEAR_FEATURES], target: f64) {
        let n = LOCAL_LINEAR_FEATURES;
        for i in 0..n {
            let fi = feats[i];
            for j in i..n {
                self.xtx[i * n + j] += fi * feats[j];
            }
            self.xty[i] += fi * target;
        }
        self.rows += 1;
    }

    /// Row-normalized ridge system; the bias column is unpenalized so that
    /// lambda -> infinity degrades gracefully to a bias-only predictor.
    fn system(&self, lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
        let n = LOCAL_LINEAR_FEATURES;
        let rows = self.rows.max(1) as f64;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.xtx[i * n + j] / rows;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        for i in 0..n - 1 {
            a[(i, i)] += lambda;
        }
        let b = DVector::from_iterator(n, self.xty.iter().map(|v| v / rows));
        (a, b)
    }

    fn solve(&self, lambda: f64) -> Result<Vec<f64>> {
        let (a, b) = self.system(lambda);
        let chol = Cholesky::new(a)
            .ok_or_else(|| Error::Numeric("singular normal equations in local-linear fit".into()))?;
        Ok(chol.solve(&b).iter().cloned().collect())
    }
}

/// Fits the per-bucket ridge systems on noised healthy latents.
///
/// Noise draws are seeded per (bucket, training volume) from a content hash,
/// so the fit is deterministic, order-independent, and exactly invariant to
/// duplicating the training set.
pub fn fit_local_linear(
    latents: &[Volume],
    conds: &[Condition],
    schedule: &NoiseSchedule,
    buckets: usize,
    lambda: f64,
    seed: u64,
) -> Result<LocalLinearDenoiser> {
    if latents.len() < 2 {
        return Err(Error::Config(format!(
            "local-linear fit needs >= 2 training volumes, got {}",
            latents.len()
        )));
    }
    if conds.len() != latents.len() {
        return Err(Error::Config("conditions must align with training volumes".into()));
    }
    if buckets == 0 || buckets > schedule.t_max() {
        return Err(Error::Config(format!(
            "buckets must be in 1..={}, got {buckets}",
            schedule.t_max()
        )));
    }
    if lambda <= 0.0 {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let dims = latents[0].dims();
    for (lat, cond) in latents.iter().zip(conds) {
        if lat.dims() != dims || lat.channels() != 1 {
            return Err(Error::Dim("training latents must share single-channel dims".into()));
        }
        cond.check_dims(dims)?;
    }

    let t_count = schedule.t_max();
    let offsets = neighbor_offsets();
    let mut weights = Vec::with_capacity(buckets);
    let mut feats = [0.0f64; LOCAL_LINEAR_FEATURES];

    for bucket in 0..buckets {
        let t_lo = bucket * t_count / buckets + 1;
        let t_hi = (bucket + 1) * t_count / buckets;
        let mut eqs = NormalEquations::new();

        for (latent, cond) in latents.iter().zip(conds) {
            let edge_bytes = cond.edge().map(volume_bytes).unwrap_or_default();
            let stream = fnv1a64(&[
                &seed.to_le_bytes(),
                &(bucket as u64).to_le_bytes(),
                &volume_bytes(latent),
                &edge_bytes,
            ]);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            for _ in 0..SAMPLES_PER_VOLUME {
                let t = rng.random_range(t_lo..=t_hi);
                let ab = schedule.alpha_bar(t);
                let (sab, s1mab) = (ab.sqrt(), (1.0 - ab).sqrt());
                let n = dims.len();
                let mut x_t = vec![0.0f32; n];
                let mut target = vec![0.0f64; n];
                for i in 0..n {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let x0 = latent.data()[i] as f64;
                    x_t[i] = (sab * x0 + s1mab * e) as f32;
                    target[i] = sab * e - s1mab * x0;
                }
                let edge = cond.edge().map(|e| e.data());
                for z in 0..dims.nz {
                    for y in 0..dims.ny {
                        for x in 0..dims.nx {
                            gather_features(
                                &x_t,
                                edge,
                                dims,
                                (x, y, z),
                                sab,
                                s1mab,
                                &offsets,
                                &mut feats,
                            );
                            eqs.push(&feats, target[dims.index(x, y, z)]);
                        }
                    }
                }
            }
        }
        weights.push(eqs.solve(lambda)?);
    }

    Ok(LocalLinearDenoiser { schedule: schedule.clone(), lambda, weights })
}

impl LocalLinearDenoiser {
    pub fn buckets(&self) -> usize {
        self.weights.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self, bucket: usize) -> &[f64] {
        &self.weights[bucket]
    }

    fn bucket_of(&self, t: usize) -> usize {
        (t - 1) * self.weights.len() / self.schedule.t_max()
    }

    fn check(&self, x_t: &Volume, t: usize, cond: &Condition) -> Result<()> {
        self.schedule.check_step(t)?;
        if x_t.channels() != 1 {
            return Err(Error::Dim("local-linear denoiser expects single-channel x_t".into()));
        }
        cond.check_dims(x_t.dims())
    }
}

impl Denoiser for LocalLinearDenoiser {
    fn predict_v(&self, x_t: &Volume, t: usize, cond: &Condition) -> Result<Volume> {
        self.check(x_t, t, cond)?;
        let dims = x_t.dims();
        let ab = self.schedule.alpha_bar(t);
        let (sab, s1mab) = (ab.sqrt(), (1.0 - ab).sqrt());
        let w = &self.weights[self.bucket_of(t)];
        let offsets = neighbor_offsets();
        let edge = cond.edge().map(|e| e.data());
        let mut feats = [0.0f64; LOCAL_LINEAR_FEATURES];
        let mut out = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    gather_features(
                        x_t.data(),
                        edge,
                        dims,
                        (x, y, z),
                        sab,
                        s1mab,
                        &offsets,
                        &mut feats,
                    );
                    let mut acc = 0.0f64;
                    for (f, wi) in feats.iter().zip(w) {
                        acc += f * wi;
                    }
                    out.push(acc as f32);
                }
            }
        }
        Volume::with_channels(dims, 1, out)
    }

    fn x0_jacobian_mode(&self) -> JacobianMode {
        JacobianMode::Full
    }

    fn vjp_x0(&self, x_t: &Volume, t: usize, cond: &Condition, u: &Volume) -> Result<Volume> {
        self.check(x_t, t, cond)?;
        if u.dims() != x_t.dims() {
            return Err(Error::Dim("cotangent does not match x_t dims".into()));
        }
        let dims = x_t.dims();
        let ab = self.schedule.alpha_bar(t);
        let (sab, s1mab) = (ab.sqrt(), (1.0 - ab).sqrt());
        let w = &self.weights[self.bucket_of(t)];
        let offsets = neighbor_offsets();

        // (J_v^T u): the prediction at voxel i reads x_t[clamp(i+o)] with
        // weight w[o], so scatter w[o] * u[i] onto clamp(i+o).
        let mut jt_u = vec![0.0f64; dims.len()];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let uv = u.data()[dims.index(x, y, z)] as f64;
                    for (o, (dx, dy, dz)) in offsets.iter().enumerate() {
                        let idx = dims.index(
                            clamp_add(x, *dx, dims.nx),
                            clamp_add(y, *dy, dims.ny),
                            clamp_add(z, *dz, dims.nz),
                        );
                        jt_u[idx] += w[o] * uv;
                    }
                }
            }
        }
        // x0_hat = sqrt(ab) x_t - sqrt(1-ab) v(x_t)
        let data: Vec<f32> = u
            .data()
            .iter()
            .zip(&jt_u)
            .map(|(uv, j)| (sab * *uv as f64 - s1mab * j) as f32)
            .collect();
        Volume::with_channels(dims, 1, data)
    }
}

// ---------------------------------------------------------------------------
// TAUW serialization
// ---------------------------------------------------------------------------

const TAUW_MAGIC: [u8; 4] = *b"TAUW";
const TAUW_VERSION: u32 = 1;

pub fn tauw_bytes(den: &LocalLinearDenoiser) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&TAUW_MAGIC);
    out.extend_from_slice(&TAUW_VERSION.to_le_bytes());
    out.extend_from_slice(&(den.schedule.t_max() as u32).to_le_bytes());
    out.extend_from_slice(&(den.weights.len() as u32).to_le_bytes());
    out.extend_from_slice(&(LOCAL_LINEAR_FEATURES as u32).to_le_bytes());
    out.extend_from_slice(&den.lambda.to_le_bytes());
    for bucket in &den.weights {
        for w in bucket {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

pub fn tauw_from_bytes(bytes: &[u8], schedule: &NoiseSchedule) -> Result<LocalLinearDenoiser> {
    const HEADER: usize = 4 + 4 + 4 + 4 + 4 + 8;
    if bytes.len() < HEADER {
        return Err(Error::Io(format!("TAUW header truncated ({} bytes)", bytes.len())));
    }
    if bytes[0..4] != TAUW_MAGIC {
        return Err(Error::Io("bad TAUW magic".into()));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if read_u32(4) != TAUW_VERSION {
        return Err(Error::Io(format!("unsupported TAUW version {}", read_u32(4))));
    }
    let t_count = read_u32(8) as usize;
    let buckets = read_u32(12) as usize;
    let per_bucket = read_u32(16) as usize;
    let lambda = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    if t_count != schedule.t_max() {
        return Err(Error::Config(format!(
            "denoiser was fit for T={t_count} but schedule has T={}",
            schedule.t_max()
        )));
    }
    if per_bucket != LOCAL_LINEAR_FEATURES {
        return Err(Error::Io(format!(
            "unexpected weight width {per_bucket}, expected {LOCAL_LINEAR_FEATURES}"
        )));
    }
    if buckets == 0 || buckets > t_count {
        return Err(Error::Io(format!("invalid bucket count {buckets}")));
    }
    let expect = HEADER + buckets * per_bucket * 8;
    if bytes.len() != expect {
        return Err(Error::Io(format!(
            "TAUW payload length {} does not match header ({expect} expected)",
            bytes.len()
        )));
    }
    let mut weights = Vec::with_capacity(buckets);
    let mut off = HEADER;
    for _ in 0..buckets {
        let mut bucket = Vec::with_capacity(per_bucket);
        for _ in 0..per_bucket {
            bucket.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        weights.push(bucket);
    }
    Ok(LocalLinearDenoiser { schedule: schedule.clone(), lambda, weights })
}

pub fn write_tauw(path: &Path, den: &LocalLinearDenoiser) -> Result<()> {
    atomic_write(path, &tauw_bytes(den))
}

pub fn read_tauw(path: &Path, schedule: &NoiseSchedule) -> Result<LocalLinearDenoiser> {
    let bytes = fs::read(path).map_err(|e| Error::io_path(path, e))?;
    tauw_from_bytes(&bytes, schedule)
}
