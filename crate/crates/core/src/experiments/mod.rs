//! Configuration-driven experiment runners and their on-disk artifacts.
//!
//! Every run writes CSV files plus a `manifest.json` [`RunRecord`] listing
//! each file with its size and SHA-256 digest. All randomness comes from
//! `(seed, stream)` pairs, so a rerun with the same config and seed
//! reproduces every CSV byte for byte.

pub mod bound;
pub mod linear;
pub mod nonlinear;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{Checkpoint, Hyper, Method, OptimizerState};

pub use bound::{run_bound_verify, BoundConfig};
pub use linear::{run_linear_experiment, LinearConfig};
pub use nonlinear::{run_nonlinear_experiment, NonlinearConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Linear,
    Nonlinear,
    BoundVerify,
}

/// Top-level config file. Only the section matching the command is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// When set, the command must match this kind.
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub linear: LinearConfig,
    pub nonlinear: NonlinearConfig,
    pub bound_verify: BoundConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Errors if the config declares a different kind.
    pub fn expect_kind(&self, kind: ExperimentKind) -> Result<()> {
        match self.kind {
            Some(k) if k != kind => Err(Error::InvalidConfig(format!(
                "config is for {k:?}, command runs {kind:?}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.output_dir.clone().ok_or_else(|| {
            Error::InvalidConfig("no output directory (set output_dir or pass --out)".into())
        })
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Optimizer section shared by the training experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub method: Method,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradient norm cap; `null` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let h = Hyper::default();
        OptimConfig {
            method: Method::Adam,
            lr: 1e-2,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    pub fn state(&self, n: usize) -> OptimizerState {
        let mut s = OptimizerState::adam(n, self.lr);
        s.method = self.method;
        s.hyper = Hyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        };
        s
    }
}

/// Training stopped on a numerical failure; carries the last good state.
#[derive(Debug)]
pub struct TrainingFailure {
    pub epoch: usize,
    pub last_good: Option<Checkpoint>,
    pub source: Error,
}

impl From<Error> for TrainingFailure {
    fn from(source: Error) -> Self {
        TrainingFailure {
            epoch: 0,
            last_good: None,
            source,
        }
    }
}

impl From<TrainingFailure> for Error {
    fn from(f: TrainingFailure) -> Self {
        match f.source {
            Error::NonFiniteValue(m) => Error::NonFiniteValue(format!("epoch {}: {m}", f.epoch)),
            other => other,
        }
    }
}

/// One written artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Summary of a run, written as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    /// ELBO per epoch, keyed by model.
    pub elbo: BTreeMap<String, Vec<f64>>,
    /// Per-sequence (or per-instance) errors, keyed by what they measure.
    pub errors: BTreeMap<String, Vec<f64>>,
    pub files: Vec<FileEntry>,
}

impl RunRecord {
    /// Checks every listed file against the disk.
    pub fn verify_files(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let bytes = fs::read(dir.join(&f.path))?;
            if bytes.is_empty()
                || bytes.len() as u64 != f.bytes
                || hex::encode(Sha256::digest(&bytes)) != f.sha256
            {
                return Err(Error::InvalidArgument(format!(
                    "manifest entry {} does not match disk",
                    f.path
                )));
            }
        }
        Ok(())
    }
}

pub fn version_string() -> String {
    format!("bvsmooth {}", env!("CARGO_PKG_VERSION"))
}

/// Output directory that remembers what it wrote.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn remember(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn write_csv<S: Serialize>(&mut self, name: &str, rows: &[S]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.remember(name);
        Ok(())
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        fs::write(self.path(name), serde_json::to_string_pretty(value)?)?;
        self.remember(name);
        Ok(())
    }

    /// Registers a file written by other means.
    pub fn register(&mut self, name: &str) -> Result<()> {
        if !self.path(name).is_file() {
            return Err(Error::InvalidArgument(format!("{name} was not written")));
        }
        self.remember(name);
        Ok(())
    }

    /// Writes `manifest.json` and returns the record.
    pub fn finish(
        self,
        kind: ExperimentKind,
        config: &ExperimentConfig,
        elbo: BTreeMap<String, Vec<f64>>,
        errors: BTreeMap<String, Vec<f64>>,
    ) -> Result<RunRecord> {
        let mut files = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let bytes = fs::read(self.path(name))?;
            if bytes.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} is empty")));
            }
            files.push(FileEntry {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let record = RunRecord {
            kind,
            config_hash: config.hash()?,
            version: version_string(),
            seed: config.seed,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            elbo,
            errors,
            files,
        };
        fs::write(
            self.path("manifest.json"),
            serde_json::to_string_pretty(&record)?,
        )?;
        Ok(record)
    }
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Mean over windows of the last `width` values (shorter at the start).
pub fn trailing_average(v: &[f64], width: usize) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(width);
            v[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
