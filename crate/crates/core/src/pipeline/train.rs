//! Training loops. Every stage shares one mini-batch loop: shuffled scene
//! batches, Adam with a step-decayed rate, optional gradient clipping and
//! best-validation snapshotting.

use rayon::prelude::*;

use crate::baselines::{history_offsets, Autoencoder, ManeuverModel};
use crate::error::{Error, Result};
use crate::numerics::rng::derive_seed;
use crate::numerics::{steplr, Adam, Bound, BufferSet, Mode, ParameterSet, Rng, Tape, Var};
use crate::pipeline::checkpoint::{Checkpoint, CheckpointMeta};
use crate::pipeline::config::{RunConfig, StageConfig, TrainConfig};
use crate::pipeline::{batch_of, thread_pool, Dataset, FrozenPass};
use crate::predictor::{tp_loss, Predictor, Scene, SceneBatch};
use crate::selfaware::{error_labels, sa_loss, SelfAware};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Best-validation weights of one fit.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub params: ParameterSet,
    pub buffers: BufferSet,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Train,
    Val,
}

/// Loss on the scenes at the given indices of a split, with the number of
/// valid agents it averages over.
type Objective<'a> =
    dyn FnMut(&mut Tape, &Bound, Split, &[usize], &mut Mode<'_>, Option<&mut Rng>) -> Result<(Var, f64)> + 'a;

fn with_context(e: Error, stage: &str, epoch: usize, batch: usize) -> Error {
    if e.is_divergence() {
        Error::Divergence {
            stage: stage.to_string(),
            epoch,
            batch,
        }
    } else {
        e
    }
}

#[allow(clippy::too_many_arguments)]
fn fit(
    stage: &str,
    sched: &StageConfig,
    tc: &TrainConfig,
    seed: u64,
    sizes: (usize, usize),
    mut params: ParameterSet,
    mut buffers: BufferSet,
    objective: &mut Objective<'_>,
) -> Result<Fitted> {
    let (n_train, n_val) = sizes;
    if n_train == 0 || n_val == 0 {
        return Err(Error::Data(format!("{stage}: empty training or validation split")));
    }
    let bs = tc.batch_size;
    let mut adam = Adam::new(tc.adam);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut shuffle = Rng::fork(seed, &format!("{stage}/shuffle"));
    let mut noise = Rng::fork(seed, &format!("{stage}/dropout"));
    let val_idx: Vec<usize> = (0..n_val).collect();
    let mut best = Fitted {
        params: params.clone(),
        buffers: buffers.clone(),
        best_epoch: 0,
        log: Vec::new(),
    };
    let mut best_val = f64::INFINITY;
    for epoch in 1..=sched.epochs {
        let lr = steplr(epoch - 1, sched.lr, sched.step_size, sched.gamma)?;
        shuffle.shuffle(&mut order);
        let (mut sum, mut weight) = (0.0, 0.0);
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let ctx = |e| with_context(e, stage, epoch, bi + 1);
            let mut tape = Tape::new();
            let p = params.bind(&mut tape)?;
            let (loss, w) = objective(
                &mut tape,
                &p,
                Split::Train,
                chunk,
                &mut Mode::Train(&mut buffers),
                Some(&mut noise),
            )
            .map_err(ctx)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(ctx(Error::NonFinite { op: "loss" }));
            }
            let grads = tape.backward(loss).map_err(ctx)?;
            params.zero_grads();
            params.accumulate_grads(&grads, &p);
            if tc.grad_clip > 0.0 {
                params.clip_grad_norm(tc.grad_clip);
            }
            adam.step(&mut params, lr)?;
            sum += value * w;
            weight += w;
        }
        let (mut vsum, mut vweight) = (0.0, 0.0);
        let mut frozen = params.clone();
        frozen.freeze();
        for (bi, chunk) in val_idx.chunks(bs).enumerate() {
            let mut tape = Tape::new();
            let p = frozen.bind(&mut tape)?;
            let (loss, w) = objective(&mut tape, &p, Split::Val, chunk, &mut Mode::Eval(&buffers), None)
                .map_err(|e| with_context(e, stage, epoch, bi + 1))?;
            vsum += tape.value(loss)[0] * w;
            vweight += w;
        }
        let val_loss = vsum / vweight;
        if !val_loss.is_finite() {
            return Err(with_context(Error::NonFinite { op: "validation" }, stage, epoch, 0));
        }
        best.log.push(EpochLog {
            epoch,
            lr,
            train_loss: sum / weight,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best.params = params.clone();
            best.buffers = buffers.clone();
            best.best_epoch = epoch;
        }
    }
    best.params.zero_grads();
    Ok(best)
}

fn outcome(fitted: Fitted, digest: String, stage: &str, seed: u64) -> StageOutcome {
    StageOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                config_digest: digest,
                stage: stage.to_string(),
                seed,
                epoch: fitted.best_epoch,
            },
            params: fitted.params,
            buffers: fitted.buffers,
        },
        log: fitted.log,
    }
}

fn split(data: &Dataset, s: Split) -> &[Scene] {
    match s {
        Split::Train => &data.train,
        Split::Val => &data.val,
    }
}

fn valid_weight(batch: &SceneBatch) -> f64 {
    batch.valid.iter().filter(|v| **v).count() as f64
}

/// Predictor trained on the trajectory loss, optionally with dropout active.
fn train_predictor(
    cfg: &RunConfig,
    data: &Dataset,
    stage: &str,
    seed: u64,
    dropout: Option<f64>,
    sched: &StageConfig,
) -> Result<StageOutcome> {
    let model = Predictor::new(cfg.predictor.clone());
    let (params, buffers) = model.init(derive_seed(seed, "init"))?;
    let mut objective =
        |tape: &mut Tape, p: &Bound, s: Split, idx: &[usize], mode: &mut Mode<'_>, rng: Option<&mut Rng>| {
            let batch = batch_of(split(data, s), idx)?;
            let drop = match (dropout, rng) {
                (Some(rate), Some(g)) if rate > 0.0 => Some((g, rate)),
                _ => None,
            };
            let out = model.forward(tape, p, &batch, mode, drop)?;
            let truth = tape.constant(&batch.truth)?;
            Ok((tp_loss(tape, out.positions, truth, &batch.valid)?, valid_weight(&batch)))
        };
    let sizes = (data.train.len(), data.val.len());
    let fitted = fit(stage, sched, &cfg.train, seed, sizes, params, buffers, &mut objective)?;
    Ok(outcome(fitted, cfg.predictor_digest(), stage, cfg.seed))
}

/// Stage 1: the trajectory predictor alone.
pub fn train_stage1(cfg: &RunConfig, data: &Dataset) -> Result<StageOutcome> {
    train_predictor(
        cfg,
        data,
        "stage1",
        derive_seed(cfg.seed, "stage1"),
        None,
        &cfg.train.stage1,
    )
}

/// Predictor trained with dropout active, for sampling at inference.
pub fn train_mc_dropout(cfg: &RunConfig, data: &Dataset) -> Result<StageOutcome> {
    let rate = cfg.baselines.mc_rate;
    train_predictor(
        cfg,
        data,
        "dropout",
        derive_seed(cfg.seed, "dropout"),
        Some(rate),
        &cfg.baselines.train,
    )
}

/// Independently initialized and shuffled predictors, trained concurrently.
pub fn train_ensemble(cfg: &RunConfig, data: &Dataset) -> Result<Vec<StageOutcome>> {
    thread_pool()?.install(|| {
        (0..cfg.baselines.ensemble_members)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(cfg.seed, &format!("ensemble/{i}"));
                train_predictor(cfg, data, &format!("ensemble{i}"), seed, None, &cfg.baselines.train)
            })
            .collect()
    })
}

/// Maneuver-conditioned predictor with its classification head.
pub fn train_maneuver(cfg: &RunConfig, data: &Dataset) -> Result<StageOutcome> {
    let seed = derive_seed(cfg.seed, "maneuver");
    let mut model = ManeuverModel::new(cfg.predictor.clone());
    model.loss_weight = cfg.baselines.maneuver_weight;
    let (params, buffers) = model.init(derive_seed(seed, "init"))?;
    let mut objective =
        |tape: &mut Tape, p: &Bound, s: Split, idx: &[usize], mode: &mut Mode<'_>, _: Option<&mut Rng>| {
            let batch = batch_of(split(data, s), idx)?;
            let (loss, _) = model.loss(tape, p, &batch, mode)?;
            Ok((loss, valid_weight(&batch)))
        };
    let sizes = (data.train.len(), data.val.len());
    let fitted = fit(
        "maneuver",
        &cfg.baselines.train,
        &cfg.train,
        seed,
        sizes,
        params,
        buffers,
        &mut objective,
    )?;
    Ok(outcome(fitted, cfg.predictor_digest(), "maneuver", cfg.seed))
}

/// Frozen-predictor outputs on the train and validation scenes, and a guard
/// that the predictor weights are untouched afterwards.
struct FrozenPredictor<'a> {
    ckpt: &'a Checkpoint,
    digest: (String, String),
    train: FrozenPass,
    val: FrozenPass,
}

impl<'a> FrozenPredictor<'a> {
    fn new(cfg: &RunConfig, data: &Dataset, ckpt: &'a Checkpoint) -> Result<FrozenPredictor<'a>> {
        let model = Predictor::new(cfg.predictor.clone());
        let digest = (ckpt.params.digest(), ckpt.buffers.digest());
        Ok(FrozenPredictor {
            train: FrozenPass::compute(&model, &ckpt.params, &ckpt.buffers, &data.train)?,
            val: FrozenPass::compute(&model, &ckpt.params, &ckpt.buffers, &data.val)?,
            digest,
            ckpt,
        })
    }

    fn pass(&self, s: Split) -> &FrozenPass {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    fn verify(&self) -> Result<()> {
        if self.ckpt.params.digest() != self.digest.0 {
            let name = self.ckpt.params.names().next().cloned().unwrap_or_default();
            return Err(Error::FreezeViolation(name));
        }
        if self.ckpt.buffers.digest() != self.digest.1 {
            return Err(Error::FreezeViolation("buffers".into()));
        }
        Ok(())
    }
}

/// Stage 2: the self-awareness module against a frozen predictor.
pub fn train_stage2(cfg: &RunConfig, data: &Dataset, predictor: &Checkpoint) -> Result<StageOutcome> {
    let seed = derive_seed(cfg.seed, "stage2");
    let frozen = FrozenPredictor::new(cfg, data, predictor)?;
    let sa = SelfAware::new(cfg.selfaware.clone(), &cfg.predictor)?;
    let params = sa.init(derive_seed(seed, "init"))?;
    let form = cfg.selfaware.label_form;
    let mut objective = |tape: &mut Tape, p: &Bound, s: Split, idx: &[usize], _: &mut Mode<'_>, _: Option<&mut Rng>| {
        let batch = batch_of(split(data, s), idx)?;
        let (gf, pos) = frozen.pass(s).gather(idx, batch.n)?;
        let labels = error_labels(&batch.truth, &pos, &batch.anchor, form)?;
        let gf = tape.constant(&gf)?;
        let pos = tape.constant(&pos)?;
        let z = sa.forward(tape, p, gf, pos, &batch.anchor)?;
        let labels = tape.constant(&labels)?;
        Ok((sa_loss(tape, labels, z, &batch.valid)?, valid_weight(&batch)))
    };
    let sizes = (data.train.len(), data.val.len());
    let fitted = fit(
        "stage2",
        &cfg.train.stage2,
        &cfg.train,
        seed,
        sizes,
        params,
        BufferSet::new(),
        &mut objective,
    )?;
    frozen.verify()?;
    Ok(outcome(fitted, cfg.selfaware_digest(), "stage2", cfg.seed))
}

/// History-reconstruction decoder against a frozen predictor.
pub fn train_autoencoder(cfg: &RunConfig, data: &Dataset, predictor: &Checkpoint) -> Result<StageOutcome> {
    let seed = derive_seed(cfg.seed, "autoencoder");
    let frozen = FrozenPredictor::new(cfg, data, predictor)?;
    let ae = Autoencoder::new(&cfg.predictor);
    let params = ae.init(derive_seed(seed, "init"))?;
    let mut objective = |tape: &mut Tape, p: &Bound, s: Split, idx: &[usize], _: &mut Mode<'_>, _: Option<&mut Rng>| {
        let batch = batch_of(split(data, s), idx)?;
        let (gf, _) = frozen.pass(s).gather(idx, batch.n)?;
        let gf = tape.constant(&gf)?;
        let recon = ae.reconstruct(tape, p, gf)?;
        let target = tape.constant(&history_offsets(&batch))?;
        Ok((tp_loss(tape, recon, target, &batch.valid)?, valid_weight(&batch)))
    };
    let sizes = (data.train.len(), data.val.len());
    let fitted = fit(
        "autoencoder",
        &cfg.baselines.train,
        &cfg.train,
        seed,
        sizes,
        params,
        BufferSet::new(),
        &mut objective,
    )?;
    frozen.verify()?;
    Ok(outcome(fitted, cfg.predictor_digest(), "autoencoder", cfg.seed))
}

/// `tp + lambda * sa`.
pub fn weighted_loss(tape: &mut Tape, tp: Var, sa: Var, lambda: f64) -> Result<Var> {
    let w = tape.scale(sa, lambda)?;
    tape.add(tp, w)
}

/// Single-stage alternative: predictor and self-awareness module optimized
/// together on the weighted loss. The checkpoint holds both parameter sets
/// (split them with [`ParameterSet::subset`]).
pub fn train_joint(cfg: &RunConfig, data: &Dataset) -> Result<StageOutcome> {
    let seed = derive_seed(cfg.seed, "joint");
    let model = Predictor::new(cfg.predictor.clone());
    let sa = SelfAware::new(cfg.selfaware.clone(), &cfg.predictor)?;
    let (mut params, buffers) = model.init(derive_seed(seed, "init"))?;
    params.absorb(sa.init(derive_seed(seed, "init-sa"))?)?;
    let form = cfg.selfaware.label_form;
    let lambda = cfg.train.lambda;
    let mut objective =
        |tape: &mut Tape, p: &Bound, s: Split, idx: &[usize], mode: &mut Mode<'_>, _: Option<&mut Rng>| {
            let batch = batch_of(split(data, s), idx)?;
            let out = model.forward(tape, p, &batch, mode, None)?;
            let truth = tape.constant(&batch.truth)?;
            let tp = tp_loss(tape, out.positions, truth, &batch.valid)?;
            let labels = error_labels(&batch.truth, &tape.to_tensor(out.positions), &batch.anchor, form)?;
            let labels = tape.constant(&labels)?;
            let z = sa.forward(tape, p, out.gf, out.positions, &batch.anchor)?;
            let sl = sa_loss(tape, labels, z, &batch.valid)?;
            Ok((weighted_loss(tape, tp, sl, lambda)?, valid_weight(&batch)))
        };
    let sizes = (data.train.len(), data.val.len());
    let fitted = fit(
        "joint",
        &cfg.train.joint,
        &cfg.train,
        seed,
        sizes,
        params,
        buffers,
        &mut objective,
    )?;
    Ok(outcome(fitted, cfg.selfaware_digest(), "joint", cfg.seed))
}
