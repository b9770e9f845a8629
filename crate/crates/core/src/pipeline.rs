//! End-to-end orchestration: synthetic cortical-shell phantoms, anomaly
//! maps, the pooled-feature classifier, subject scores and cohort-level
//! evaluation.
//!
//! Phantoms are ellipsoidal shells with smooth per-subject intensity
//! variability; anomalous subjects carry compact excess-intensity blobs
//! confined to the shell, with a known ground-truth mask (blob extent at a
//! tenth of peak, the usual lesion-extent convention) and a scalar injected
//! magnitude (the exact shell-mean shift the blobs cause).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode, edge_map, encode, LatentCodecSpec};
use crate::denoise::Condition;
use crate::error::{Error, Result};
use crate::stats::{pearson, welch_neglog_p};
use crate::volume::{Dims, Mask, Volume};

// ---------------------------------------------------------------------------
// Phantom generation
// ---------------------------------------------------------------------------

/// Geometry and randomness of a synthetic cohort.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    /// Cubic image edge length in voxels.
    pub dim: usize,
    /// Ellipsoid radii as fractions of dim/2.
    pub shell_radii: [f64; 3],
    /// Shell thickness as a fraction of the radius (inner boundary at
    /// `1 - thickness`).
    pub shell_thickness: f64,
    pub core_value: f32,
    pub shell_value: f32,
    /// Amplitude of the smooth per-subject healthy variability field.
    pub healthy_amplitude: f64,
    pub anomaly_count: (usize, usize),
    /// Blob radius range in voxels.
    pub anomaly_radius: (f64, f64),
    /// Blob peak-magnitude range; must be positive.
    pub anomaly_mag: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dim: 64,
            shell_radii: [0.85, 0.75, 0.8],
            shell_thickness: 0.4,
            core_value: 0.6,
            shell_value: 1.0,
            healthy_amplitude: 0.05,
            anomaly_count: (1, 3),
            anomaly_radius: (3.0, 6.0),
            anomaly_mag: (0.3, 1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupLabel {
    Healthy,
    Anomalous,
}

/// One synthetic subject: image, latent, condition, truth and label.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub image: Volume,
    pub latent: Volume,
    pub cond: Condition,
    pub truth: Option<Mask>,
    pub label: GroupLabel,
    /// Exact shell-mean shift injected by the blobs (0 for healthy).
    pub magnitude: f64,
}

/// A generated cohort plus the shared geometry: the cortical shell, the
/// full brain mask (core + shell, the scoring region) and the latent-space
/// shape mask (brain mask pooled and thresholded at 0.5).
#[derive(Debug, Clone)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub shell: Mask,
    pub brain: Mask,
    pub latent_shape: Mask,
}

fn normalized_radius(spec: &PhantomSpec, x: usize, y: usize, z: usize) -> f64 {
    let c = (spec.dim - 1) as f64 / 2.0;
    let half = spec.dim as f64 / 2.0;
    let dx = (x as f64 - c) / (spec.shell_radii[0] * half);
    let dy = (y as f64 - c) / (spec.shell_radii[1] * half);
    let dz = (z as f64 - c) / (spec.shell_radii[2] * half);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Smooth low-frequency variability field from seeded cosine modes.
fn variability_field(dims: Dims, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const MODES: usize = 6;
    let mut ks = [[0.0f64; 3]; MODES];
    let mut phases = [0.0f64; MODES];
    for m in 0..MODES {
        for k in ks[m].iter_mut() {
            *k = rng.random_range(-3..=3i32) as f64;
        }
        phases[m] = rng.random_range(0.0..std::f64::consts::TAU);
    }
    let norm = amplitude / (MODES as f64).sqrt();
    let mut field = Vec::with_capacity(dims.len());
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let mut v = 0.0;
                for m in 0..MODES {
                    let phase = std::f64::consts::TAU
                        * (ks[m][0] * x as f64 + ks[m][1] * y as f64 + ks[m][2] * z as f64)
                        / dims.nx as f64
                        + phases[m];
                    v += phase.cos();
                }
                field.push(v * norm);
            }
        }
    }
    field
}

struct BlobSet {
    added: Vec<f64>,
    truth: Vec<f32>,
    total_mass: f64,
}

fn inject_blobs(
    spec: &PhantomSpec,
    dims: Dims,
    shell: &Mask,
    shell_indices: &[(usize, usize, usize)],
    rng: &mut ChaCha8Rng,
) -> BlobSet {
    let count = rng.random_range(spec.anomaly_count.0..=spec.anomaly_count.1);
    let mut added = vec![0.0f64; dims.len()];
    let mut truth = vec![0.0f32; dims.len()];
    for _ in 0..count {
        let center = shell_indices[rng.random_range(0..shell_indices.len())];
        let radius = rng.random_range(spec.anomaly_radius.0..=spec.anomaly_radius.1);
        let mag = rng.random_range(spec.anomaly_mag.0..=spec.anomaly_mag.1);
        let r_ceil = radius.ceil() as isize;
        for dz in -r_ceil..=r_ceil {
            for dy in -r_ceil..=r_ceil {
                for dx in -r_ceil..=r_ceil {
                    let (x, y, z) = (
                        center.0 as isize + dx,
                        center.1 as isize + dy,
                        center.2 as isize + dz,
                    );
                    if x < 0 || y < 0 || z < 0 {
                        continue;
                    }
                    let (x, y, z) = (x as usize, y as usize, z as usize);
                    if x >= dims.nx || y >= dims.ny || z >= dims.nz || !shell.get(x, y, z) {
                        continue;
                    }
                    let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                    let bump = 1.0 - d2 / (radius * radius);
                    if bump > 0.0 {
                        let idx = dims.index(x, y, z);
                        added[idx] += mag * bump;
                        // Extent at a tenth of the peak.
                        if bump >= 0.1 {
                            truth[idx] = 1.0;
                        }
                    }
                }
            }
        }
    }
    let total_mass = added.iter().sum();
    BlobSet { added, truth, total_mass }
}

/// Generates a seeded, reproducible cohort of `n_healthy + n_anomalous`
/// subjects and the shared masks.
pub fn gen_phantoms(
    spec: &PhantomSpec,
    n_healthy: usize,
    n_anomalous: usize,
    codec: &LatentCodecSpec,
) -> Result<Cohort> {
    if n_healthy == 0 && n_anomalous == 0 {
        return Err(Error::Config("cohort needs at least one subject".into()));
    }
    if spec.anomaly_mag.0 <= 0.0 || spec.anomaly_mag.1 < spec.anomaly_mag.0 {
        return Err(Error::Config(format!(
            "anomaly magnitude range must be positive, got {:?}",
            spec.anomaly_mag
        )));
    }
    if spec.anomaly_radius.0 <= 0.0 || spec.anomaly_radius.1 < spec.anomaly_radius.0 {
        return Err(Error::Config(format!(
            "anomaly radius range invalid: {:?}",
            spec.anomaly_radius
        )));
    }
    if spec.anomaly_count.1 < spec.anomaly_count.0 || spec.anomaly_count.0 == 0 {
        return Err(Error::Config(format!(
            "anomaly count range invalid: {:?}",
            spec.anomaly_count
        )));
    }
    if !(spec.shell_thickness > 0.0 && spec.shell_thickness < 1.0) {
        return Err(Error::Config(format!(
            "shell thickness must be in (0, 1), got {}",
            spec.shell_thickness
        )));
    }
    let dims = Dims::cube(spec.dim)?;
    codec.latent_dims(dims)?;

    let inner = 1.0 - spec.shell_thickness;
    let shell = Mask::from_predicate(dims, |x, y, z| {
        let r = normalized_radius(spec, x, y, z);
        r <= 1.0 && r >= inner
    });
    if shell.nonzero_count() == 0 {
        return Err(Error::Config("phantom geometry yields an empty shell".into()));
    }
    let brain = Mask::from_predicate(dims, |x, y, z| normalized_radius(spec, x, y, z) <= 1.0);
    let shell_indices: Vec<(usize, usize, usize)> = {
        let mut v = Vec::with_capacity(shell.nonzero_count());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    if shell.get(x, y, z) {
                        v.push((x, y, z));
                    }
                }
            }
        }
        v
    };

    // Latent-space shape mask: pooled brain mask thresholded at 0.5.
    let latent_shape_vol = encode(&brain.to_volume(), codec)?;
    let latent_shape = Mask::from_predicate(latent_shape_vol.dims(), |x, y, z| {
        latent_shape_vol.get(x, y, z) >= 0.5
    });
    if latent_shape.nonzero_count() == 0 {
        return Err(Error::Config("latent shape mask is empty; increase dims or shrink k".into()));
    }

    let base = Volume::from_fn(dims, |x, y, z| {
        let r = normalized_radius(spec, x, y, z);
        if r > 1.0 {
            0.0
        } else if r >= inner {
            spec.shell_value
        } else {
            spec.core_value
        }
    })?;

    let mut subjects = Vec::with_capacity(n_healthy + n_anomalous);
    for i in 0..n_healthy + n_anomalous {
        let anomalous = i >= n_healthy;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);

        let field = variability_field(dims, spec.healthy_amplitude, &mut rng);
        let blobs = if anomalous {
            Some(inject_blobs(spec, dims, &shell, &shell_indices, &mut rng))
        } else {
            None
        };
        let mut data = Vec::with_capacity(dims.len());
        for (idx, b) in base.data().iter().enumerate() {
            let mut v = *b as f64;
            if brain.data()[idx] != 0.0 {
                v += field[idx];
            }
            if let Some(blobs) = &blobs {
                v += blobs.added[idx];
            }
            data.push(v as f32);
        }
        let image = Volume::new(dims, data)?;
        let latent = encode(&image, codec)?;
        let cond = Condition::new(edge_map(&latent)?);
        let (truth, magnitude, label, id) = match blobs {
            Some(b) => (
                Some(Mask::new(dims, b.truth)?),
                b.total_mass / shell.nonzero_count() as f64,
                GroupLabel::Anomalous,
                format!("a{:03}", i - n_healthy),
            ),
            None => (None, 0.0, GroupLabel::Healthy, format!("h{i:03}")),
        };
        subjects.push(Subject { id, image, latent, cond, truth, label, magnitude });
    }

    Ok(Cohort { subjects, shell, brain, latent_shape })
}

// ---------------------------------------------------------------------------
// Anomaly map and score
// ---------------------------------------------------------------------------

/// Signed anomaly map in image space: `decode(input - recon)`.
pub fn anomaly_map(
    input_latent: &Volume,
    recon_latent: &Volume,
    codec: &LatentCodecSpec,
) -> Result<Volume> {
    decode(&input_latent.sub(recon_latent)?, codec)
}

/// Subject-level anomaly score: geometric mean of the brain-mean intensity
/// and the classifier probability; negative means clamp to zero.
pub fn anomaly_score(m_suvr: f64, p_cls: f64) -> f64 {
    (m_suvr.max(0.0) * p_cls).sqrt()
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

pub const FEATURE_COUNT: usize = 4;
const GD_ITERATIONS: usize = 600;
const GD_LEARNING_RATE: f64 = 0.4;

/// Pooled anomaly-map features: shell mean, shell max, shell 95th
/// percentile, positive-voxel fraction.
pub fn map_features(map: &Volume, mask: &Mask) -> Result<[f64; FEATURE_COUNT]> {
    let mean = map.masked_mean(mask)?;
    let p95 = map.percentile(mask, 95.0)?;
    let max = map.percentile(mask, 100.0)?;
    let mut positive = 0usize;
    for (v, m) in map.data().iter().zip(mask.data()) {
        if *m != 0.0 && *v > 0.0 {
            positive += 1;
        }
    }
    let frac = positive as f64 / mask.nonzero_count() as f64;
    Ok([mean, max, p95, frac])
}

/// Logistic regression over standardized features, trained by fixed-step
/// full-batch gradient descent from a seeded init.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    /// `[bias, w_0 .. w_3]` over standardized features.
    pub weights: [f64; FEATURE_COUNT + 1],
    pub feat_mean: [f64; FEATURE_COUNT],
    pub feat_std: [f64; FEATURE_COUNT],
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn fit_classifier(
    features: &[[f64; FEATURE_COUNT]],
    labels: &[bool],
    seed: u64,
) -> Result<ClassifierModel> {
    if features.len() != labels.len() {
        return Err(Error::Config("features and labels must align".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Domain("classifier training needs both labels present".into()));
    }
    let n = features.len() as f64;
    let mut feat_mean = [0.0f64; FEATURE_COUNT];
    let mut feat_std = [0.0f64; FEATURE_COUNT];
    for f in features {
        for (m, v) in feat_mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in feat_mean.iter_mut() {
        *m /= n;
    }
    for f in features {
        for ((s, v), m) in feat_std.iter_mut().zip(f).zip(&feat_mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in feat_std.iter_mut() {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0; // constant feature contributes nothing
        }
    }

    let standardized: Vec<[f64; FEATURE_COUNT]> = features
        .iter()
        .map(|f| {
            let mut out = [0.0; FEATURE_COUNT];
            for i in 0..FEATURE_COUNT {
                out[i] = (f[i] - feat_mean[i]) / feat_std[i];
            }
            out
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = [0.0f64; FEATURE_COUNT + 1];
    for wi in w.iter_mut() {
        wi.clone_from(&(rng.random_range(-0.01..0.01)));
    }
    for _ in 0..GD_ITERATIONS {
        let mut grad = [0.0f64; FEATURE_COUNT + 1];
        for (f, y) in standardized.iter().zip(labels) {
            let mut z = w[0];
            for i in 0..FEATURE_COUNT {
                z += w[i + 1] * f[i];
            }
            let err = sigmoid(z) - if *y { 1.0 } else { 0.0 };
            grad[0] += err;
            for i in 0..FEATURE_COUNT {
                grad[i + 1] += err * f[i];
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= GD_LEARNING_RATE * g / n;
        }
    }
    Ok(ClassifierModel { weights: w, feat_mean, feat_std })
}

impl ClassifierModel {
    pub fn prob(&self, features: &[f64; FEATURE_COUNT]) -> f64 {
        let mut z = self.weights[0];
        for i in 0..FEATURE_COUNT {
            let f = (features[i] - self.feat_mean[i]) / self.feat_std[i];
            z += self.weights[i + 1] * f;
        }
        sigmoid(z)
    }

    pub fn predict(&self, features: &[f64; FEATURE_COUNT]) -> bool {
        self.prob(features) >= 0.5
    }
}

/// Per-subject report produced by the scoring stage.
#[derive(Debug, Clone)]
pub struct AnomalyReport {
    pub anomaly_map: Volume,
    pub m_suvr: f64,
    pub p_cls: f64,
    pub score: f64,
}

// ---------------------------------------------------------------------------
// Cohort evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RegionStat {
    pub name: String,
    pub r: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct GroupStat {
    pub n_positive: usize,
    pub n_negative: usize,
    pub neglog10_p: f64,
}

#[derive(Debug, Clone)]
pub struct EvaluationTable {
    pub regions: Vec<RegionStat>,
    pub group: GroupStat,
}

impl EvaluationTable {
    pub fn regions_csv(&self) -> String {
        let mut out = String::from("region,pearson_r,n\n");
        for r in &self.regions {
            out.push_str(&format!("{},{:.6},{}\n", r.name, r.r, r.n));
        }
        out
    }

    pub fn group_csv(&self) -> String {
        format!(
            "group_a_n,group_b_n,neglog10_p\n{},{},{:.6}\n",
            self.group.n_positive, self.group.n_negative, self.group.neglog10_p
        )
    }
}

/// Four fixed quadrant lobes of the shell mask (split on x and y around the
/// volume center), the synthetic stand-in for anatomical lobes.
pub fn octant_lobes(shell: &Mask) -> Vec<(String, Mask)> {
    let dims = shell.dims();
    let (cx, cy) = (dims.nx / 2, dims.ny / 2);
    let quads: [(&str, Box<dyn Fn(usize, usize) -> bool>); 4] = [
        ("lobe_xlo_ylo", Box::new(move |x, y| x < cx && y < cy)),
        ("lobe_xhi_ylo", Box::new(move |x, y| x >= cx && y < cy)),
        ("lobe_xlo_yhi", Box::new(move |x, y| x < cx && y >= cy)),
        ("lobe_xhi_yhi", Box::new(move |x, y| x >= cx && y >= cy)),
    ];
    quads
        .iter()
        .map(|(name, pred)| {
            let m = Mask::from_predicate(dims, |x, y, z| pred(x, y) && shell.get(x, y, z));
            (name.to_string(), m)
        })
        .collect()
}

/// Per-region Pearson between subject scores and regional mean intensities,
/// plus Welch group separation of the proxy scalar between predicted
/// positive/negative subjects. Degenerate regions are skipped with a warning.
pub fn evaluate_cohort(
    images: &[&Volume],
    scores: &[f64],
    predicted_positive: &[bool],
    proxy: &[f64],
    regions: &[(String, Mask)],
) -> Result<EvaluationTable> {
    let n = images.len();
    if scores.len() != n || predicted_positive.len() != n || proxy.len() != n {
        return Err(Error::Config("evaluation inputs must align".into()));
    }
    let mut table = Vec::new();
    for (name, mask) in regions {
        if mask.nonzero_count() == 0 {
            log::warn!("region {name} is empty; skipped");
            continue;
        }
        let mut means = Vec::with_capacity(n);
        for img in images {
            means.push(img.masked_mean(mask)?);
        }
        match pearson(scores, &means) {
            Ok(r) => table.push(RegionStat { name: clone_name(name), r, n }),
            Err(e) => log::warn!("region {name} degenerate ({e}); skipped"),
        }
    }
    let pos: Vec<f64> = proxy
        .iter()
        .zip(predicted_positive)
        .filter(|(_, p)| **p)
        .map(|(v, _)| *v)
        .collect();
    let neg: Vec<f64> = proxy
        .iter()
        .zip(predicted_positive)
        .filter(|(_, p)| !**p)
        .map(|(v, _)| *v)
        .collect();
    let neglog10_p = welch_neglog_p(&pos, &neg)?;
    Ok(EvaluationTable {
        regions: table,
        group: GroupStat { n_positive: pos.len(), n_negative: neg.len(), neglog10_p },
    })
}

fn clone_name(s: &str) -> String {
    s.to_string()
}
