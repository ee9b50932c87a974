//! Run configuration: one TOML document covering data, model dimensions,
//! training schedules, baselines and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::eval::{check_grid, default_grid};
use crate::numerics::AdamConfig;
use crate::predictor::PredictorConfig;
use crate::selfaware::SaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Used when `source = "csv"`.
    pub csv_path: Option<PathBuf>,
    /// Sampling rate of the CSV rows before resampling to 2 Hz.
    pub csv_rate_hz: f64,
    /// Fraction of records used for training; the rest is the test split.
    pub train_fraction: f64,
    /// Fraction of training samples held out for checkpoint selection.
    pub val_fraction: f64,
    /// Window start spacing in 2 Hz ticks.
    pub stride: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            csv_path: None,
            csv_rate_hz: 2.0,
            train_fraction: 0.8,
            val_fraction: 0.1,
            stride: 1,
            generator: GeneratorConfig::default(),
        }
    }
}

/// Epoch budget and Adam/StepLR schedule of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StageConfig {
    fn with_epochs(epochs: usize) -> StageConfig {
        StageConfig {
            epochs,
            lr: 1e-3,
            step_size: 10,
            gamma: 0.5,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::with_epochs(40)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Scenes per mini-batch.
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Single-stage weighted training of both modules.
    pub joint: StageConfig,
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            grad_clip: 5.0,
            adam: AdamConfig::default(),
            stage1: StageConfig::with_epochs(60),
            stage2: StageConfig::with_epochs(40),
            joint: StageConfig::with_epochs(60),
            lambda: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub mc_rate: f64,
    pub mc_samples: usize,
    pub ensemble_members: usize,
    /// Weight of the maneuver cross-entropy next to the trajectory loss.
    pub maneuver_weight: f64,
    /// Schedule for every baseline model (predictor variants and the
    /// reconstruction decoder).
    pub train: StageConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            mc_rate: crate::baselines::MC_RATE,
            mc_samples: crate::baselines::MC_SAMPLES,
            ensemble_members: crate::baselines::ENSEMBLE_MEMBERS,
            maneuver_weight: crate::baselines::MANEUVER_LOSS_WEIGHT,
            train: StageConfig::with_epochs(60),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Removal fractions of the cutoff curves.
    pub grid: Vec<f64>,
    /// Measure ms/frame. Off by default because wall-clock numbers make
    /// reports differ between runs.
    pub timing: bool,
    pub timing_frames: usize,
    pub timing_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid: default_grid(),
            timing: false,
            timing_frames: crate::eval::MIN_TIMED_FRAMES,
            timing_warmup: crate::eval::MIN_WARMUP_FRAMES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every other stream is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub predictor: PredictorConfig,
    pub selfaware: SaConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            predictor: PredictorConfig::default(),
            selfaware: SaConfig::default(),
            train: TrainConfig::default(),
            baselines: BaselineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: source.to_string(),
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        self.data.generator.validate()?;
        check_grid(&self.eval.grid)?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.lambda > 0.0) {
            return Err(Error::Config("train.lambda must be positive".into()));
        }
        if !(t.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be non-negative".into()));
        }
        for (name, s) in [
            ("stage1", &t.stage1),
            ("stage2", &t.stage2),
            ("joint", &t.joint),
            ("baselines.train", &self.baselines.train),
        ] {
            if !(s.lr > 0.0) || s.step_size == 0 || !(s.gamma > 0.0 && s.gamma <= 1.0) {
                return Err(Error::Config(format!(
                    "{name}: lr > 0, step_size >= 1 and gamma in (0, 1] required"
                )));
            }
        }
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config("data.train_fraction must lie in (0, 1)".into()));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Error::Config("data.val_fraction must lie in (0, 1)".into()));
        }
        if d.stride == 0 {
            return Err(Error::Config("data.stride must be positive".into()));
        }
        if d.source == DataSource::Csv && d.csv_path.is_none() {
            return Err(Error::Config(
                "data.csv_path is required when data.source = \"csv\"".into(),
            ));
        }
        let b = &self.baselines;
        if !(0.0..1.0).contains(&b.mc_rate) {
            return Err(Error::Config("baselines.mc_rate must lie in [0, 1)".into()));
        }
        if b.mc_samples == 0 || b.ensemble_members == 0 {
            return Err(Error::Config(
                "baselines.mc_samples and ensemble_members must be positive".into(),
            ));
        }
        if self.selfaware.hidden == 0 || self.selfaware.layers == 0 {
            return Err(Error::Config("selfaware.hidden and layers must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the serialized configuration.
    pub fn digest(&self) -> String {
        digest_of(&self.to_toml())
    }

    /// Digest of the settings a predictor checkpoint depends on.
    pub fn predictor_digest(&self) -> String {
        digest_of(&toml::to_string(&self.predictor).expect("serializable"))
    }

    /// Digest of the settings a self-awareness checkpoint depends on.
    pub fn selfaware_digest(&self) -> String {
        let text = toml::to_string(&self.predictor).expect("serializable")
            + &toml::to_string(&self.selfaware).expect("serializable");
        digest_of(&text)
    }
}

pub(crate) fn digest_of(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
