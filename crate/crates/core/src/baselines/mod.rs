//! Comparison diagnostics: maneuver uncertainty, MC dropout, deep ensembles
//! and history reconstruction. Every diagnostic grows with expected error.

use std::f64::consts::{E, PI};

use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, Mode, Recurrent};
use crate::numerics::params::{Bound, BufferSet, ParameterSet};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::predictor::{bind_constants, Predictor, PredictorConfig, SceneBatch, INPUT_CHANNELS};

/// Left, straight, right.
pub const MANEUVERS: usize = 3;
pub const LEFT: usize = 0;
pub const STRAIGHT: usize = 1;
pub const RIGHT: usize = 2;
/// Heading change separating turns from straight driving.
pub const TURN_THRESHOLD_DEG: f64 = 15.0;
/// Displacements shorter than this (meters per step) carry no heading.
pub const MIN_STEP_M: f64 = 0.1;
/// Covariance regularizer for predictive entropy, m^2.
pub const ENTROPY_EPS: f64 = 1e-6;
pub const MC_RATE: f64 = 0.5;
pub const MC_SAMPLES: usize = 5;
pub const ENSEMBLE_MEMBERS: usize = 5;
/// Weight of the maneuver classification loss next to the trajectory loss.
pub const MANEUVER_LOSS_WEIGHT: f64 = 0.5;

/// Maneuver class from the heading change between two displacements;
/// counter-clockwise turns are left.
pub fn maneuver_from_steps(before: [f64; 2], after: [f64; 2]) -> usize {
    let nb = before[0].hypot(before[1]);
    let na = after[0].hypot(after[1]);
    if nb < MIN_STEP_M || na < MIN_STEP_M {
        return STRAIGHT;
    }
    let cross = before[0] * after[1] - before[1] * after[0];
    let dot = before[0] * after[0] + before[1] * after[1];
    let angle = cross.atan2(dot).to_degrees();
    if angle > TURN_THRESHOLD_DEG {
        LEFT
    } else if angle < -TURN_THRESHOLD_DEG {
        RIGHT
    } else {
        STRAIGHT
    }
}

/// Ground-truth maneuver per agent row: last observed step against the last
/// future step. Padded rows are labeled straight.
pub fn maneuver_labels(batch: &SceneBatch) -> Vec<usize> {
    let tf = batch.t_f;
    let last = batch.last_increment();
    let truth = batch.truth.data();
    (0..batch.rows())
        .map(|r| {
            if !batch.valid[r] {
                return STRAIGHT;
            }
            let o = (r * tf + tf - 1) * 2;
            let prev = if tf >= 2 {
                [truth[o - 2], truth[o - 1]]
            } else {
                batch.anchor[r]
            };
            maneuver_from_steps(last[r], [truth[o] - prev[0], truth[o + 1] - prev[1]])
        })
        .collect()
}

/// Negative maximum probability.
pub fn nmap(probs: &[f64]) -> f64 {
    -probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Gaussian differential entropy of a weighted 2-D point set.
pub fn predictive_entropy(points: &[[f64; 2]], weights: &[f64]) -> f64 {
    let mut mu = [0.0; 2];
    for (p, w) in points.iter().zip(weights) {
        mu[0] += w * p[0];
        mu[1] += w * p[1];
    }
    let d: Vec<[f64; 2]> = points.iter().map(|p| [p[0] - mu[0], p[1] - mu[1]]).collect();
    let trace: f64 = d
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v[0] * v[0] + v[1] * v[1]))
        .sum();
    // det of the weighted scatter as a sum of squared pairwise cross
    // products, which stays accurate for nearly collinear bundles.
    let mut det = 0.0;
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            let cross = d[i][0] * d[j][1] - d[i][1] * d[j][0];
            det += weights[i] * weights[j] * cross * cross;
        }
    }
    let det = det + ENTROPY_EPS * trace + ENTROPY_EPS * ENTROPY_EPS;
    0.5 * ((2.0 * PI * E).powi(2) * det).ln()
}

/// `M` candidate trajectories per agent row with per-row member weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBundle {
    /// `[M, rows, t_f, 2]`
    pub trajectories: Tensor,
    /// `[rows * M]`, each row sums to one.
    pub weights: Vec<f64>,
}

impl SampleBundle {
    pub fn uniform(members: Vec<Tensor>) -> Result<SampleBundle> {
        let m = members.len();
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("bundle needs at least one member".into()))?;
        let shape = first.shape().to_vec();
        let rows = shape[..shape.len() - 2].iter().product::<usize>();
        let tf = shape[shape.len() - 2];
        let mut data = Vec::with_capacity(m * first.numel());
        for t in &members {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("bundle", t.shape(), &shape));
            }
            data.extend_from_slice(t.data());
        }
        Ok(SampleBundle {
            trajectories: Tensor::new(vec![m, rows, tf, 2], data)?,
            weights: vec![1.0 / m as f64; rows * m],
        })
    }

    pub fn members(&self) -> usize {
        self.trajectories.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.trajectories.shape()[1]
    }

    pub fn t_f(&self) -> usize {
        self.trajectories.shape()[2]
    }

    fn point(&self, member: usize, row: usize, t: usize) -> [f64; 2] {
        let o = ((member * self.rows() + row) * self.t_f() + t) * 2;
        let d = self.trajectories.data();
        [d[o], d[o + 1]]
    }

    fn row_weights(&self, row: usize) -> &[f64] {
        let m = self.members();
        &self.weights[row * m..(row + 1) * m]
    }

    /// Weighted member mean `[rows, t_f, 2]`.
    pub fn average(&self) -> Tensor {
        let (m, rows, tf) = (self.members(), self.rows(), self.t_f());
        let mut out = Tensor::zeros(&[rows, tf, 2]);
        for r in 0..rows {
            let w = self.row_weights(r);
            for t in 0..tf {
                let mut acc = [0.0; 2];
                for (k, wk) in w.iter().enumerate().take(m) {
                    let p = self.point(k, r, t);
                    acc[0] += wk * p[0];
                    acc[1] += wk * p[1];
                }
                out.set(&[r, t, 0], acc[0]);
                out.set(&[r, t, 1], acc[1]);
            }
        }
        out
    }

    /// Trajectory of the highest-weight member per row (first on ties).
    pub fn most_likely(&self) -> Tensor {
        let (rows, tf) = (self.rows(), self.t_f());
        let mut out = Tensor::zeros(&[rows, tf, 2]);
        for r in 0..rows {
            let w = self.row_weights(r);
            let best = (0..w.len()).fold(0, |b, k| if w[k] > w[b] { k } else { b });
            for t in 0..tf {
                let p = self.point(best, r, t);
                out.set(&[r, t, 0], p[0]);
                out.set(&[r, t, 1], p[1]);
            }
        }
        out
    }

    pub fn entropy(&self, row: usize, t: usize) -> f64 {
        let pts: Vec<[f64; 2]> = (0..self.members()).map(|k| self.point(k, row, t)).collect();
        predictive_entropy(&pts, self.row_weights(row))
    }

    /// Average and final predictive entropy of one row.
    pub fn ape_fpe(&self, row: usize) -> (f64, f64) {
        let h: Vec<f64> = (0..self.t_f()).map(|t| self.entropy(row, t)).collect();
        ape_fpe(&h)
    }
}

/// Mean and last of a per-step entropy sequence.
pub fn ape_fpe(entropies: &[f64]) -> (f64, f64) {
    let ape = entropies.iter().sum::<f64>() / entropies.len() as f64;
    (ape, *entropies.last().unwrap_or(&f64::NAN))
}

/// Predictor whose decoder is conditioned on a maneuver, plus a classifier
/// on the time-pooled graph feature.
pub struct ManeuverModel {
    pub predictor: Predictor,
    /// Weight of the classification loss.
    pub loss_weight: f64,
    hidden: Linear,
    logits: Linear,
}

pub struct MuOutput {
    /// `[rows * K]` softmax probabilities.
    pub probs: Vec<f64>,
    pub bundle: SampleBundle,
}

impl ManeuverModel {
    pub fn new(cfg: PredictorConfig) -> ManeuverModel {
        let c = cfg.c_feat;
        let h = cfg.hidden;
        ManeuverModel {
            predictor: Predictor::with_condition(cfg, MANEUVERS),
            loss_weight: MANEUVER_LOSS_WEIGHT,
            hidden: Linear::new("maneuver/hidden", c, h),
            logits: Linear::new("maneuver/logits", h, MANEUVERS),
        }
    }

    pub fn init(&self, seed: u64) -> Result<(ParameterSet, BufferSet)> {
        let (mut ps, buffers) = self.predictor.init(seed)?;
        let mut rng = Rng::new(crate::numerics::rng::derive_seed(seed, "maneuver-head"));
        self.hidden.init(&mut ps, &mut rng)?;
        self.logits.init(&mut ps, &mut rng)?;
        Ok((ps, buffers))
    }

    /// Logits `[rows, K]` from a graph feature `[B, n, t_h, C]`.
    pub fn classify(&self, tape: &mut Tape, p: &Bound, gf: Var) -> Result<Var> {
        let s = tape.shape(gf).to_vec();
        let pooled = tape.mean_axis(gf, 2)?;
        let pooled = tape.reshape(pooled, &[s[0] * s[1], s[3]])?;
        let h = self.hidden.forward(tape, p, pooled)?;
        let h = tape.relu(h)?;
        self.logits.forward(tape, p, h)
    }

    /// Training loss: trajectory loss under the true maneuver plus the
    /// weighted classification cross-entropy. Returns `(total, logits)`.
    pub fn loss(&self, tape: &mut Tape, p: &Bound, batch: &SceneBatch, mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        let labels = maneuver_labels(batch);
        let gf = self.predictor.features(tape, p, batch, mode)?;
        let logits = self.classify(tape, p, gf)?;
        let pos = self.predictor.decode(tape, p, batch, gf, Some(&labels), None)?;
        let truth = tape.constant(&batch.truth)?;
        let tp = crate::predictor::tp_loss(tape, pos, truth, &batch.valid)?;
        let ce = cross_entropy(tape, logits, &labels, &batch.valid)?;
        let ce = tape.scale(ce, self.loss_weight)?;
        Ok((tape.add(tp, ce)?, logits))
    }

    /// Eval-mode forward: one trajectory per maneuver, weighted by the
    /// classifier's probabilities.
    pub fn predict(&self, params: &ParameterSet, buffers: &BufferSet, batch: &SceneBatch) -> Result<MuOutput> {
        let mut tape = Tape::new();
        let p = bind_constants(params, &mut tape)?;
        let gf = self
            .predictor
            .features(&mut tape, &p, batch, &mut Mode::Eval(buffers))?;
        let logits = self.classify(&mut tape, &p, gf)?;
        let probs_var = tape.softmax(logits, 1)?;
        let probs = tape.value(probs_var).to_vec();
        let rows = batch.rows();
        let mut members = Vec::with_capacity(MANEUVERS);
        for k in 0..MANEUVERS {
            let pos = self
                .predictor
                .decode(&mut tape, &p, batch, gf, Some(&vec![k; rows]), None)?;
            let t = tape.to_tensor(pos);
            members.push(t.reshape(&[rows, batch.t_f, 2])?);
        }
        let mut bundle = SampleBundle::uniform(members)?;
        bundle.weights = probs.clone();
        Ok(MuOutput { probs, bundle })
    }
}

/// Mean negative log-likelihood over valid rows.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], valid: &[bool]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[0] != valid.len() {
        return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
    }
    let k = s[1];
    let count = valid.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(Error::Data("cross_entropy: no valid rows".into()));
    }
    let mut pick = vec![0.0; s[0] * k];
    for (r, (&l, &v)) in labels.iter().zip(valid).enumerate() {
        if v {
            pick[r * k + l] = 1.0;
        }
    }
    let pick = tape.constant_from(s, pick)?;
    let logp = tape.log_softmax(logits, 1)?;
    let chosen = tape.mul(logp, pick)?;
    let total = tape.sum(chosen)?;
    tape.scale(total, -1.0 / count as f64)
}

/// `samples` stochastic forwards with dropout active at `rate`.
pub fn mc_dropout_predict(
    model: &Predictor,
    params: &ParameterSet,
    buffers: &BufferSet,
    batch: &SceneBatch,
    rate: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<SampleBundle> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let rows = batch.rows();
    let mut members = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut tape = Tape::new();
        let p = bind_constants(params, &mut tape)?;
        let out = model.forward(&mut tape, &p, batch, &mut Mode::Eval(buffers), Some((&mut *rng, rate)))?;
        members.push(tape.to_tensor(out.positions).reshape(&[rows, batch.t_f, 2])?);
    }
    SampleBundle::uniform(members)
}

/// One eval-mode forward per member.
pub fn ensemble_predict(
    model: &Predictor,
    members: &[(ParameterSet, BufferSet)],
    expected: usize,
    batch: &SceneBatch,
) -> Result<SampleBundle> {
    if members.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "ensemble has {} members, expected {expected}",
            members.len()
        )));
    }
    let rows = batch.rows();
    let outs = members
        .iter()
        .map(|(ps, buf)| {
            let (_, pos) = model.predict(ps, buf, batch)?;
            pos.reshape(&[rows, batch.t_f, 2])
        })
        .collect::<Result<Vec<_>>>()?;
    SampleBundle::uniform(outs)
}

/// Decoder reconstructing the observed history from the graph feature.
pub struct Autoencoder {
    gru: Recurrent,
    out: Linear,
    pos_scale: f64,
}

impl Autoencoder {
    pub fn new(cfg: &PredictorConfig) -> Autoencoder {
        Autoencoder {
            gru: Recurrent::gru("ae/decoder", cfg.c_feat, cfg.hidden, cfg.layers),
            out: Linear::new("ae/out", cfg.hidden, 2),
            pos_scale: cfg.pos_scale_m,
        }
    }

    pub fn init(&self, seed: u64) -> Result<ParameterSet> {
        let mut rng = Rng::new(seed);
        let mut ps = ParameterSet::new();
        self.gru.init(&mut ps, &mut rng)?;
        self.out.init(&mut ps, &mut rng)?;
        Ok(ps)
    }

    /// Reconstructed history offsets `[B, n, t_h, 2]`, meters.
    pub fn reconstruct(&self, tape: &mut Tape, p: &Bound, gf: Var) -> Result<Var> {
        let s = tape.shape(gf).to_vec();
        if s.len() != 4 || s[3] != self.gru.input {
            return Err(Error::shape("ae_reconstruct", &s, &[self.gru.input]));
        }
        let rows = s[0] * s[1];
        let seq = tape.reshape(gf, &[rows, s[2], s[3]])?;
        let (outs, _) = self.gru.run(tape, p, seq, None, None)?;
        let h = tape.stack(&outs, 1)?;
        let y = self.out.forward(tape, p, h)?;
        let y = tape.scale(y, self.pos_scale)?;
        tape.reshape(y, &[s[0], s[1], s[2], 2])
    }
}

/// Observed history offsets `[B, n, t_h, 2]`, meters.
pub fn history_offsets(batch: &SceneBatch) -> Tensor {
    let c = INPUT_CHANNELS;
    let data = batch.values.data().chunks(c).flat_map(|ch| [ch[0], ch[1]]).collect();
    Tensor::new(vec![batch.batch, batch.n, batch.t_h, 2], data).expect("shape follows the batch")
}

/// Mean per-step Euclidean distance for every row of two `[rows, T, 2]`
/// buffers.
pub fn recon_error(recon: &[f64], truth: &[f64], steps: usize) -> Vec<f64> {
    recon
        .chunks(steps * 2)
        .zip(truth.chunks(steps * 2))
        .map(|(a, b)| {
            a.chunks(2)
                .zip(b.chunks(2))
                .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
                .sum::<f64>()
                / steps as f64
        })
        .collect()
}
