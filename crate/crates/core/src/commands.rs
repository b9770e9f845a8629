//! Implementations of the CLI subcommands. Each command reads inputs from
//! directories produced by earlier stages, writes its outputs atomically,
//! and drops a `resolved-config.txt` snapshot so the run can be replayed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DenoiserKind, MSuvrSource, RunConfig};
use crate::denoise::{
    fit_local_linear, read_tauw, write_tauw, Condition, Denoiser, MixtureModel, OracleDenoiser,
};
use crate::error::{Error, Result};
use crate::guide::{build_template, GuidanceSpec};
use crate::pipeline::{
    anomaly_map, anomaly_score, fit_classifier, gen_phantoms, map_features, octant_lobes,
    evaluate_cohort, GroupLabel,
};
use crate::sample::{reconstruct, SamplerConfig};
use crate::volume::{atomic_write, read_tauv, write_axial_pgm, write_tauv, Mask, Volume};

fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    atomic_write(&out.join("resolved-config.txt"), cfg.snapshot().as_bytes())
}

fn subject_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Bounded worker pool for the subject-parallel stages.
fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

// ---------------------------------------------------------------------------
// Cohort on disk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiskSubject {
    pub id: String,
    pub label: GroupLabel,
    pub magnitude: f64,
}

#[derive(Debug, Clone)]
pub struct DiskCohort {
    pub dir: PathBuf,
    pub subjects: Vec<DiskSubject>,
    pub shell: Mask,
    pub brain: Mask,
    pub latent_shape: Mask,
}

impl DiskCohort {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest.csv"))
            .map_err(|e| Error::io_path(&dir.join("manifest.csv"), e))?;
        let mut subjects = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            if i == 0 {
                if line != "id,label,magnitude" {
                    return Err(Error::Io(format!("unexpected manifest header '{line}'")));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Io(format!("malformed manifest line '{line}'")));
            }
            let label = match fields[1] {
                "healthy" => GroupLabel::Healthy,
                "anomalous" => GroupLabel::Anomalous,
                other => return Err(Error::Io(format!("unknown label '{other}'"))),
            };
            let magnitude: f64 = fields[2]
                .parse()
                .map_err(|_| Error::Io(format!("bad magnitude '{}'", fields[2])))?;
            subjects.push(DiskSubject { id: fields[0].to_string(), label, magnitude });
        }
        if subjects.is_empty() {
            return Err(Error::Io("manifest lists no subjects".into()));
        }
        let shell = Mask::from_volume(&read_tauv(&dir.join("shell_mask.tauv"))?)?;
        let brain = Mask::from_volume(&read_tauv(&dir.join("brain_mask.tauv"))?)?;
        let latent_shape = Mask::from_volume(&read_tauv(&dir.join("latent_shape.tauv"))?)?;
        Ok(DiskCohort { dir: dir.to_path_buf(), subjects, shell, brain, latent_shape })
    }

    pub fn image(&self, id: &str) -> Result<Volume> {
        read_tauv(&self.dir.join("subjects").join(format!("{id}_image.tauv")))
    }

    pub fn latent(&self, id: &str) -> Result<Volume> {
        read_tauv(&self.dir.join("subjects").join(format!("{id}_latent.tauv")))
    }

    pub fn condition(&self, id: &str) -> Result<Condition> {
        Ok(Condition::new(read_tauv(
            &self.dir.join("subjects").join(format!("{id}_edge.tauv")),
        )?))
    }

    pub fn truth(&self, id: &str) -> Result<Mask> {
        Mask::from_volume(&read_tauv(&self.dir.join("subjects").join(format!("{id}_truth.tauv")))?)
    }

    pub fn healthy_latents(&self) -> Result<Vec<Volume>> {
        self.subjects
            .iter()
            .filter(|s| s.label == GroupLabel::Healthy)
            .map(|s| self.latent(&s.id))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// `phantom-gen`: generate the synthetic cohort and write it out.
pub fn cmd_phantom_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let codec = cfg.codec()?;
    let cohort = gen_phantoms(&cfg.phantom_spec(), cfg.n_healthy, cfg.n_anomalous, &codec)?;
    let subjects_dir = out.join("subjects");
    fs::create_dir_all(&subjects_dir).map_err(|e| Error::io_path(&subjects_dir, e))?;

    let mut manifest = String::from("id,label,magnitude\n");
    for s in &cohort.subjects {
        let label = match s.label {
            GroupLabel::Healthy => "healthy",
            GroupLabel::Anomalous => "anomalous",
        };
        manifest.push_str(&format!("{},{},{:.9}\n", s.id, label, s.magnitude));
        write_tauv(&subjects_dir.join(format!("{}_image.tauv", s.id)), &s.image)?;
        write_tauv(&subjects_dir.join(format!("{}_latent.tauv", s.id)), &s.latent)?;
        if let Some(edge) = s.cond.edge() {
            write_tauv(&subjects_dir.join(format!("{}_edge.tauv", s.id)), edge)?;
        }
        if let Some(truth) = &s.truth {
            write_tauv(&subjects_dir.join(format!("{}_truth.tauv", s.id)), &truth.to_volume())?;
        }
    }
    atomic_write(&out.join("manifest.csv"), manifest.as_bytes())?;
    write_tauv(&out.join("shell_mask.tauv"), &cohort.shell.to_volume())?;
    write_tauv(&out.join("brain_mask.tauv"), &cohort.brain.to_volume())?;
    write_tauv(&out.join("latent_shape.tauv"), &cohort.latent_shape.to_volume())?;
    write_snapshot(cfg, out)?;
    log::info!("wrote {} subjects to {}", cohort.subjects.len(), out.display());
    Ok(())
}

/// `template`: average the healthy latents into the guidance template.
pub fn cmd_template(cfg: &RunConfig, cohort_dir: &Path, out: &Path) -> Result<()> {
    let cohort = DiskCohort::load(cohort_dir)?;
    let healthy = cohort.healthy_latents()?;
    if healthy.is_empty() {
        return Err(Error::Config("cohort has no healthy subjects to average".into()));
    }
    let template = build_template(&healthy)?;
    fs::create_dir_all(out).map_err(|e| Error::io_path(out, e))?;
    write_tauv(&out.join("template.tauv"), &template)?;
    write_tauv(&out.join("shape.tauv"), &cohort.latent_shape.to_volume())?;
    write_snapshot(cfg, out)?;
    log::info!("template over {} healthy latents -> {}", healthy.len(), out.display());
    Ok(())
}

/// `fit-denoiser`: closed-form local-linear fit on the healthy latents.
pub fn cmd_fit_denoiser(cfg: &RunConfig, cohort_dir: &Path, out: &Path) -> Result<()> {
    let cohort = DiskCohort::load(cohort_dir)?;
    let schedule = cfg.schedule()?;
    let mut latents = Vec::new();
    let mut conds = Vec::new();
    for s in cohort.subjects.iter().filter(|s| s.label == GroupLabel::Healthy) {
        latents.push(cohort.latent(&s.id)?);
        conds.push(cohort.condition(&s.id)?);
    }
    let den = fit_local_linear(&latents, &conds, &schedule, cfg.buckets, cfg.lambda, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io_path(out, e))?;
    write_tauw(&out.join("denoiser.tauw"), &den)?;
    write_snapshot(cfg, out)?;
    log::info!("fit {} buckets on {} latents -> {}", cfg.buckets, latents.len(), out.display());
    Ok(())
}

fn load_guidance(cfg: &RunConfig, template_dir: &Path) -> Result<Option<GuidanceSpec>> {
    if cfg.nu == 0.0 && cfg.cfg_scale == 0.0 {
        return Ok(None);
    }
    let template_path = cfg
        .template_path
        .clone()
        .unwrap_or_else(|| template_dir.join("template.tauv"));
    let shape_path = cfg.shape_path.clone().unwrap_or_else(|| template_dir.join("shape.tauv"));
    let template = read_tauv(&template_path)?;
    let shape = Mask::from_volume(&read_tauv(&shape_path)?)?;
    let mut spec = GuidanceSpec::new(template, shape, cfg.nu, cfg.grad_mode)?;
    spec.cfg_scale = cfg.cfg_scale;
    Ok(Some(spec))
}

fn build_denoiser(
    cfg: &RunConfig,
    cohort: &DiskCohort,
    denoiser_path: Option<&Path>,
) -> Result<Box<dyn Denoiser + Sync>> {
    let schedule = cfg.schedule()?;
    match cfg.denoiser {
        DenoiserKind::Oracle => {
            let healthy = cohort.healthy_latents()?;
            if healthy.is_empty() {
                return Err(Error::Config("oracle denoiser needs healthy latents".into()));
            }
            let mixture = MixtureModel::from_latents(healthy, cfg.tau_sq)?;
            Ok(Box::new(OracleDenoiser::new(mixture, schedule)))
        }
        DenoiserKind::LocalLinear => {
            let path = denoiser_path.ok_or_else(|| {
                Error::Config("denoiser = local_linear requires --denoiser PATH".into())
            })?;
            Ok(Box::new(read_tauw(path, &schedule)?))
        }
    }
}

/// `reconstruct`: pseudo-healthy reconstruction of every subject latent.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    cohort_dir: &Path,
    template_dir: &Path,
    denoiser_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cohort = DiskCohort::load(cohort_dir)?;
    let schedule = cfg.schedule()?;
    let guidance = load_guidance(cfg, template_dir)?;
    let den = build_denoiser(cfg, &cohort, denoiser_path)?;
    fs::create_dir_all(out).map_err(|e| Error::io_path(out, e))?;

    let pool = thread_pool(cfg.jobs)?;
    let results: Vec<Result<()>> = pool.install(|| {
        cohort
            .subjects
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let latent = cohort.latent(&s.id)?;
                let cond = cohort.condition(&s.id)?;
                let sampler = SamplerConfig {
                    kind: cfg.sampler,
                    t_start: cfg.t_start,
                    seed: subject_seed(cfg.seed, i),
                    guidance: guidance.clone(),
                };
                let recon = reconstruct(&latent, &sampler, den.as_ref(), &cond, &schedule)?;
                write_tauv(&out.join(format!("{}_recon.tauv", s.id)), &recon)
            })
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    write_snapshot(cfg, out)?;
    log::info!("reconstructed {} subjects -> {}", cohort.subjects.len(), out.display());
    Ok(())
}

/// `anomaly`: signed anomaly maps from input and reconstructed latents.
pub fn cmd_anomaly(cfg: &RunConfig, cohort_dir: &Path, recon_dir: &Path, out: &Path) -> Result<()> {
    let cohort = DiskCohort::load(cohort_dir)?;
    let codec = cfg.codec()?;
    fs::create_dir_all(out).map_err(|e| Error::io_path(out, e))?;
    for s in &cohort.subjects {
        let latent = cohort.latent(&s.id)?;
        let recon = read_tauv(&recon_dir.join(format!("{}_recon.tauv", s.id)))?;
        let map = anomaly_map(&latent, &recon, &codec)?;
        write_tauv(&out.join(format!("{}_map.tauv", s.id)), &map)?;
    }
    write_snapshot(cfg, out)?;
    Ok(())
}

/// Deterministic train/holdout split: seeded shuffle, first part trains.
pub fn holdout_split(n: usize, holdout_frac: f64, seed: u64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xC0F0);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * (1.0 - holdout_frac)).round() as usize;
    let mut is_test = vec![true; n];
    for &i in idx.iter().take(n_train) {
        is_test[i] = false;
    }
    is_test
}

/// `score`: classifier fit on the training split, then per-subject
/// m_suvr, p_cls and the combined anomaly score.
pub fn cmd_score(cfg: &RunConfig, cohort_dir: &Path, anomaly_dir: &Path, out: &Path) -> Result<()> {
    let cohort = DiskCohort::load(cohort_dir)?;
    let n = cohort.subjects.len();
    let mut features = Vec::with_capacity(n);
    let mut m_suvrs = Vec::with_capacity(n);
    for s in &cohort.subjects {
        let map = read_tauv(&anomaly_dir.join(format!("{}_map.tauv", s.id)))?;
        features.push(map_features(&map, &cohort.brain)?);
        let m = match cfg.m_suvr_source {
            MSuvrSource::Input => cohort.image(&s.id)?.masked_mean(&cohort.brain)?,
            MSuvrSource::AnomalyMap => map.masked_mean(&cohort.brain)?,
        };
        m_suvrs.push(m);
    }
    let is_test = holdout_split(n, cfg.holdout_frac, cfg.seed);
    let mut train_feats = Vec::new();
    let mut train_labels = Vec::new();
    for i in 0..n {
        if !is_test[i] {
            train_feats.push(features[i]);
            train_labels.push(cohort.subjects[i].label == GroupLabel::Anomalous);
        }
    }
    let model = fit_classifier(&train_feats, &train_labels, cfg.seed)?;

    let mut csv = String::from("id,label,magnitude,split,m_suvr,p_cls,predicted,score\n");
    for (i, s) in cohort.subjects.iter().enumerate() {
        let p = model.prob(&features[i]);
        let score = anomaly_score(m_suvrs[i], p);
        let label = match s.label {
            GroupLabel::Healthy => "healthy",
            GroupLabel::Anomalous => "anomalous",
        };
        csv.push_str(&format!(
            "{},{},{:.9},{},{:.6},{:.6},{},{:.6}\n",
            s.id,
            label,
            s.magnitude,
            if is_test[i] { "test" } else { "train" },
            m_suvrs[i],
            p,
            if model.predict(&features[i]) { 1 } else { 0 },
            score,
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io_path(out, e))?;
    atomic_write(&out.join("scores.csv"), csv.as_bytes())?;
    write_snapshot(cfg, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub id: String,
    pub label: GroupLabel,
    pub magnitude: f64,
    pub is_test: bool,
    pub m_suvr: f64,
    pub p_cls: f64,
    pub predicted: bool,
    pub score: f64,
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_path(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Io(format!("malformed scores line '{line}'")));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Io(format!("bad number '{s}' in scores")))
        };
        rows.push(ScoreRow {
            id: f[0].to_string(),
            label: if f[1] == "anomalous" { GroupLabel::Anomalous } else { GroupLabel::Healthy },
            magnitude: parse_f(f[2])?,
            is_test: f[3] == "test",
            m_suvr: parse_f(f[4])?,
            p_cls: parse_f(f[5])?,
            predicted: f[6] == "1",
            score: parse_f(f[7])?,
        });
    }
    Ok(rows)
}

/// `evaluate`: per-lobe Pearson over all subjects plus Welch group
/// separation of the injected magnitude over the held-out split.
pub fn cmd_evaluate(cfg: &RunConfig, cohort_dir: &Path, scores_path: &Path, out: &Path) -> Result<()> {
    let cohort = DiskCohort::load(cohort_dir)?;
    let rows = read_scores(scores_path)?;
    if rows.len() != cohort.subjects.len() {
        return Err(Error::Config(format!(
            "scores has {} rows but cohort has {} subjects",
            rows.len(),
            cohort.subjects.len()
        )));
    }
    let images: Vec<Volume> =
        cohort.subjects.iter().map(|s| cohort.image(&s.id)).collect::<Result<_>>()?;
    let image_refs: Vec<&Volume> = images.iter().collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let regions = octant_lobes(&cohort.shell);

    // Group separation uses only held-out subjects.
    let held: Vec<&ScoreRow> = rows.iter().filter(|r| r.is_test).collect();
    if held.len() < 4 {
        return Err(Error::Config("held-out split too small for group comparison".into()));
    }
    let held_pred: Vec<bool> = held.iter().map(|r| r.predicted).collect();
    let held_proxy: Vec<f64> = held.iter().map(|r| r.magnitude).collect();
    let held_images: Vec<&Volume> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_test)
        .map(|(i, _)| image_refs[i])
        .collect();
    let held_scores: Vec<f64> = held.iter().map(|r| r.score).collect();
    let group_table =
        evaluate_cohort(&held_images, &held_scores, &held_pred, &held_proxy, &[])?;

    // Region correlations over the full cohort.
    let all_pred: Vec<bool> = rows.iter().map(|r| r.predicted).collect();
    let all_proxy: Vec<f64> = rows.iter().map(|r| r.magnitude).collect();
    let full_table = evaluate_cohort(&image_refs, &scores, &all_pred, &all_proxy, &regions)?;

    fs::create_dir_all(out).map_err(|e| Error::io_path(out, e))?;
    atomic_write(&out.join("evaluation.csv"), full_table.regions_csv().as_bytes())?;
    atomic_write(&out.join("group_pvalue.csv"), group_table.group_csv().as_bytes())?;
    write_snapshot(cfg, out)?;
    Ok(())
}

/// `render`: PGM export of an axial slice with its scaling sidecar.
pub fn cmd_render(_cfg: &RunConfig, volume_path: &Path, z: Option<usize>, out: &Path) -> Result<()> {
    let vol = read_tauv(volume_path)?;
    let z = z.unwrap_or(vol.dims().nz / 2);
    fs::create_dir_all(out).map_err(|e| Error::io_path(out, e))?;
    let stem = volume_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume");
    write_axial_pgm(&out.join(format!("{stem}_z{z}.pgm")), &vol, z)
}
