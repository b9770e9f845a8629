//! Flat `key = value` run configuration with `#` comments.
//!
//! Unknown keys are rejected, and every command writes the fully resolved
//! configuration next to its outputs so a run can be reproduced exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::LatentCodecSpec;
use crate::denoise::JacobianMode;
use crate::error::{Error, Result};
use crate::pipeline::PhantomSpec;
use crate::sample::SamplerKind;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    Oracle,
    LocalLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MSuvrSource {
    /// Shell-masked mean of the input image (default).
    Input,
    /// Shell-masked mean of the anomaly map.
    AnomalyMap,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // schedule
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    // codec
    pub k: usize,
    // sampler
    pub sampler: SamplerKind,
    pub t_start: usize,
    pub seed: u64,
    // guidance
    pub nu: f64,
    pub grad_mode: JacobianMode,
    pub cfg_scale: f64,
    pub template_path: Option<PathBuf>,
    pub shape_path: Option<PathBuf>,
    // denoiser
    pub denoiser: DenoiserKind,
    pub buckets: usize,
    pub lambda: f64,
    pub tau_sq: f64,
    // phantom cohort
    pub phantom_dim: usize,
    pub shell_rx: f64,
    pub shell_ry: f64,
    pub shell_rz: f64,
    pub shell_thickness: f64,
    pub core_value: f64,
    pub shell_value: f64,
    pub healthy_amplitude: f64,
    pub anomaly_count_min: usize,
    pub anomaly_count_max: usize,
    pub anomaly_radius_min: f64,
    pub anomaly_radius_max: f64,
    pub anomaly_mag_min: f64,
    pub anomaly_mag_max: f64,
    pub n_healthy: usize,
    pub n_anomalous: usize,
    // scoring / evaluation
    pub holdout_frac: f64,
    pub m_suvr_source: MSuvrSource,
    // runtime
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t_count: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            k: 4,
            sampler: SamplerKind::D1,
            t_start: 0, // resolved to 0.4 * T
            seed: 17,
            nu: 1.0,
            grad_mode: JacobianMode::Full,
            cfg_scale: 0.0,
            template_path: None,
            shape_path: None,
            denoiser: DenoiserKind::Oracle,
            buckets: 10,
            lambda: 1e-3,
            tau_sq: 0.01,
            phantom_dim: 64,
            shell_rx: 0.85,
            shell_ry: 0.75,
            shell_rz: 0.8,
            shell_thickness: 0.4,
            core_value: 0.6,
            shell_value: 1.0,
            healthy_amplitude: 0.05,
            anomaly_count_min: 1,
            anomaly_count_max: 3,
            anomaly_radius_min: 3.0,
            anomaly_radius_max: 6.0,
            anomaly_mag_min: 0.3,
            anomaly_mag_max: 1.0,
            n_healthy: 20,
            n_anomalous: 20,
            holdout_frac: 0.5,
            m_suvr_source: MSuvrSource::Input,
            jobs: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_path(path, e))?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "T" => self.t_count = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "sampler" => self.sampler = value.parse()?,
            "t_start" => self.t_start = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "nu" => self.nu = parse(key, value)?,
            "grad_mode" => {
                self.grad_mode = match value {
                    "full" => JacobianMode::Full,
                    "stop_gradient" => JacobianMode::StopGradient,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown grad_mode '{other}' (expected full | stop_gradient)"
                        )))
                    }
                }
            }
            "cfg_scale" => self.cfg_scale = parse(key, value)?,
            "template_path" => self.template_path = Some(PathBuf::from(value)),
            "shape_path" => self.shape_path = Some(PathBuf::from(value)),
            "denoiser" => {
                self.denoiser = match value {
                    "oracle" => DenoiserKind::Oracle,
                    "local_linear" => DenoiserKind::LocalLinear,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown denoiser '{other}' (expected oracle | local_linear)"
                        )))
                    }
                }
            }
            "buckets" => self.buckets = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau_sq" => self.tau_sq = parse(key, value)?,
            "phantom_dim" => self.phantom_dim = parse(key, value)?,
            "shell_rx" => self.shell_rx = parse(key, value)?,
            "shell_ry" => self.shell_ry = parse(key, value)?,
            "shell_rz" => self.shell_rz = parse(key, value)?,
            "shell_thickness" => self.shell_thickness = parse(key, value)?,
            "core_value" => self.core_value = parse(key, value)?,
            "shell_value" => self.shell_value = parse(key, value)?,
            "healthy_amplitude" => self.healthy_amplitude = parse(key, value)?,
            "anomaly_count_min" => self.anomaly_count_min = parse(key, value)?,
            "anomaly_count_max" => self.anomaly_count_max = parse(key, value)?,
            "anomaly_radius_min" => self.anomaly_radius_min = parse(key, value)?,
            "anomaly_radius_max" => self.anomaly_radius_max = parse(key, value)?,
            "anomaly_mag_min" => self.anomaly_mag_min = parse(key, value)?,
            "anomaly_mag_max" => self.anomaly_mag_max = parse(key, value)?,
            "n_healthy" => self.n_healthy = parse(key, value)?,
            "n_anomalous" => self.n_anomalous = parse(key, value)?,
            "holdout_frac" => self.holdout_frac = parse(key, value)?,
            "m_suvr_source" => {
                self.m_suvr_source = match value {
                    "input" => MSuvrSource::Input,
                    "anomaly_map" => MSuvrSource::AnomalyMap,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown m_suvr_source '{other}' (expected input | anomaly_map)"
                        )))
                    }
                }
            }
            "jobs" => self.jobs = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Resolves derived defaults and validates cross-field constraints.
    pub fn finalize(&mut self) -> Result<()> {
        if self.t_start == 0 {
            self.t_start = ((self.t_count as f64) * 0.4).round().max(1.0) as usize;
        }
        if self.t_start > self.t_count {
            return Err(Error::Config(format!(
                "t_start {} exceeds T {}",
                self.t_start, self.t_count
            )));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::Config(format!(
                "holdout_frac must be in (0, 1), got {}",
                self.holdout_frac
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        if self.nu < 0.0 {
            return Err(Error::Config(format!("nu must be >= 0, got {}", self.nu)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_count, self.beta_start, self.beta_end)
    }

    pub fn codec(&self) -> Result<LatentCodecSpec> {
        LatentCodecSpec::new(self.k)
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            dim: self.phantom_dim,
            shell_radii: [self.shell_rx, self.shell_ry, self.shell_rz],
            shell_thickness: self.shell_thickness,
            core_value: self.core_value as f32,
            shell_value: self.shell_value as f32,
            healthy_amplitude: self.healthy_amplitude,
            anomaly_count: (self.anomaly_count_min, self.anomaly_count_max),
            anomaly_radius: (self.anomaly_radius_min, self.anomaly_radius_max),
            anomaly_mag: (self.anomaly_mag_min, self.anomaly_mag_max),
            seed: self.seed,
        }
    }

    /// Fully resolved snapshot, parseable by [`RunConfig::from_str_contents`].
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "T = {}", self.t_count);
        let _ = writeln!(s, "beta_start = {}", self.beta_start);
        let _ = writeln!(s, "beta_end = {}", self.beta_end);
        let _ = writeln!(s, "k = {}", self.k);
        let sampler = match self.sampler {
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::D1 => "d1",
            SamplerKind::D2 => "d2",
        };
        let _ = writeln!(s, "sampler = {sampler}");
        let _ = writeln!(s, "t_start = {}", self.t_start);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "nu = {}", self.nu);
        let grad = match self.grad_mode {
            JacobianMode::Full => "full",
            JacobianMode::StopGradient => "stop_gradient",
        };
        let _ = writeln!(s, "grad_mode = {grad}");
        let _ = writeln!(s, "cfg_scale = {}", self.cfg_scale);
        if let Some(p) = &self.template_path {
            let _ = writeln!(s, "template_path = {}", p.display());
        }
        if let Some(p) = &self.shape_path {
            let _ = writeln!(s, "shape_path = {}", p.display());
        }
        let den = match self.denoiser {
            DenoiserKind::Oracle => "oracle",
            DenoiserKind::LocalLinear => "local_linear",
        };
        let _ = writeln!(s, "denoiser = {den}");
        let _ = writeln!(s, "buckets = {}", self.buckets);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "tau_sq = {}", self.tau_sq);
        let _ = writeln!(s, "phantom_dim = {}", self.phantom_dim);
        let _ = writeln!(s, "shell_rx = {}", self.shell_rx);
        let _ = writeln!(s, "shell_ry = {}", self.shell_ry);
        let _ = writeln!(s, "shell_rz = {}", self.shell_rz);
        let _ = writeln!(s, "shell_thickness = {}", self.shell_thickness);
        let _ = writeln!(s, "core_value = {}", self.core_value);
        let _ = writeln!(s, "shell_value = {}", self.shell_value);
        let _ = writeln!(s, "healthy_amplitude = {}", self.healthy_amplitude);
        let _ = writeln!(s, "anomaly_count_min = {}", self.anomaly_count_min);
        let _ = writeln!(s, "anomaly_count_max = {}", self.anomaly_count_max);
        let _ = writeln!(s, "anomaly_radius_min = {}", self.anomaly_radius_min);
        let _ = writeln!(s, "anomaly_radius_max = {}", self.anomaly_radius_max);
        let _ = writeln!(s, "anomaly_mag_min = {}", self.anomaly_mag_min);
        let _ = writeln!(s, "anomaly_mag_max = {}", self.anomaly_mag_max);
        let _ = writeln!(s, "n_healthy = {}", self.n_healthy);
        let _ = writeln!(s, "n_anomalous = {}", self.n_anomalous);
        let _ = writeln!(s, "holdout_frac = {}", self.holdout_frac);
        let src = match self.m_suvr_source {
            MSuvrSource::Input => "input",
            MSuvrSource::AnomalyMap => "anomaly_map",
        };
        let _ = writeln!(s, "m_suvr_source = {src}");
        let _ = writeln!(s, "jobs = {}", self.jobs);
        s
    }
}
