//! Orchestration: data preparation, two-stage and joint training, baseline
//! training, evaluation, reports and the ablation matrix.

mod ablation;
mod checkpoint;
mod config;
mod evaluate;
mod report;
mod train;

pub use ablation::{run_ablations, AblationReport, AblationRow};
pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use config::{BaselineConfig, DataConfig, DataSource, EvalConfig, RunConfig, StageConfig, TrainConfig};
pub use evaluate::{
    eval_autoencoder, eval_ensemble, eval_maneuver, eval_mc_dropout, eval_selfaware, MethodEval, METHODS,
};
pub use report::{comparison_table, method_report_json, write_method_outputs, JsonValue};
pub use train::{
    train_autoencoder, train_ensemble, train_joint, train_maneuver, train_mc_dropout, train_stage1, train_stage2,
    EpochLog, Fitted, StageOutcome,
};

use rayon::prelude::*;

use crate::data::{carve_validation, generate, load_csv, split_by_record, window_samples_all, Record, Sample};
use crate::error::{Error, Result};
use crate::numerics::rng::derive_seed;
use crate::numerics::{BufferSet, ParameterSet, Tensor};
use crate::predictor::{build_scene, Predictor, Scene, SceneBatch};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SATP_THREADS";

/// Scenes of the three splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    /// Record-level train/test split, windowing, validation carve-out and
    /// scene construction.
    pub fn from_records(records: &[Record], cfg: &RunConfig) -> Result<Dataset> {
        let (train_rec, test_rec) = split_by_record(records, cfg.data.train_fraction, derive_seed(cfg.seed, "split"))?;
        let p = &cfg.predictor;
        let windows = |recs: &[Record]| window_samples_all(recs, p.t_h, p.t_f, cfg.data.stride);
        let (train, val) = carve_validation(windows(&train_rec), cfg.data.val_fraction, derive_seed(cfg.seed, "val"));
        let test = windows(&test_rec);
        for (name, split) in [("train", &train), ("validation", &val), ("test", &test)] {
            if split.is_empty() {
                return Err(Error::Data(format!("{name} split has no complete windows")));
            }
        }
        let scenes =
            |s: Vec<Sample>| -> Result<Vec<Scene>> { s.iter().map(|x| build_scene(x, p.n_max, p.d_close_m)).collect() };
        Ok(Dataset {
            train: scenes(train)?,
            val: scenes(val)?,
            test: scenes(test)?,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Dataset> {
        Dataset::from_records(&load_records(cfg)?, cfg)
    }
}

/// Synthetic corpus for the run's seed, or the configured CSV file.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<Record>> {
    match cfg.data.source {
        DataSource::Synthetic => generate(&generator_config(cfg)),
        DataSource::Csv => {
            let path = cfg
                .data
                .csv_path
                .as_ref()
                .ok_or_else(|| Error::Config("data.csv_path is not set".into()))?;
            load_csv(path, cfg.data.csv_rate_hz)
        }
    }
}

/// Generator settings with the seed derived from the master seed.
pub fn generator_config(cfg: &RunConfig) -> crate::data::GeneratorConfig {
    let mut g = cfg.data.generator.clone();
    g.seed = derive_seed(cfg.seed, "corpus");
    g
}

/// Short dataset label for reports.
pub fn dataset_name(cfg: &RunConfig) -> String {
    match (&cfg.data.source, &cfg.data.csv_path) {
        (DataSource::Csv, Some(p)) => p
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string()),
        _ => "synthetic".to_string(),
    }
}

/// Thread pool sized by `SATP_THREADS` (all cores when unset or invalid).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Eval-mode outputs of a frozen predictor for every scene, each trimmed to
/// the scene's valid agents: graph feature `[1, n, t_h, C]` and positions
/// `[1, n, t_f, 2]`.
#[derive(Clone, Debug)]
pub struct FrozenPass {
    pub gf: Vec<Tensor>,
    pub positions: Vec<Tensor>,
}

impl FrozenPass {
    pub fn compute(
        model: &Predictor,
        params: &ParameterSet,
        buffers: &BufferSet,
        scenes: &[Scene],
    ) -> Result<FrozenPass> {
        let outs = scenes
            .par_iter()
            .map(|s| model.predict(params, buffers, &SceneBatch::new(&[s])?))
            .collect::<Result<Vec<_>>>()?;
        let (gf, positions) = outs.into_iter().unzip();
        Ok(FrozenPass { gf, positions })
    }

    /// Graph features and positions for `indices`, zero-padded to `n` agent
    /// slots like a [`SceneBatch`] of the same scenes.
    pub fn gather(&self, indices: &[usize], n: usize) -> Result<(Tensor, Tensor)> {
        Ok((
            pad_stack(&self.gf, indices, n)?,
            pad_stack(&self.positions, indices, n)?,
        ))
    }
}

fn pad_stack(items: &[Tensor], indices: &[usize], n: usize) -> Result<Tensor> {
    let first = &items[indices[0]];
    let inner: usize = first.shape()[2..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * n * inner);
    for &i in indices {
        let t = &items[i];
        let rows = t.shape()[1];
        if rows > n {
            return Err(Error::shape("pad_stack", t.shape(), &[1, n]));
        }
        data.extend_from_slice(t.data());
        data.resize(data.len() + (n - rows) * inner, 0.0);
    }
    let mut shape = vec![indices.len(), n];
    shape.extend_from_slice(&first.shape()[2..]);
    Tensor::new(shape, data)
}

/// Batch of the scenes at `indices`.
pub fn batch_of(scenes: &[Scene], indices: &[usize]) -> Result<SceneBatch> {
    let refs: Vec<&Scene> = indices.iter().map(|&i| &scenes[i]).collect();
    SceneBatch::new(&refs)
}
