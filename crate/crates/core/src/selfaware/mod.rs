//! Self-awareness module: estimates the predictor's per-step error from its
//! graph feature and predicted trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Conv1d, Linear, Recurrent};
use crate::numerics::params::{Bound, ParameterSet};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::predictor::PredictorConfig;

pub const PREFIX: &str = "sa";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Processed graph feature only.
    Gf,
    /// Processed feature projected to two channels plus the predicted increments.
    Add,
    /// Processed feature and predicted increments side by side.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    None,
    Mlp,
    Conv,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelForm {
    Velocity,
    PositionXy,
    Distance,
}

impl LabelForm {
    pub fn width(self) -> usize {
        match self {
            LabelForm::Distance => 1,
            _ => 2,
        }
    }
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Gf => "gf",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
        }
    }
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::None => "none",
            Estimator::Mlp => "mlp",
            Estimator::Conv => "conv",
            Estimator::Lstm => "lstm",
        }
    }
}

impl LabelForm {
    pub fn name(self) -> &'static str {
        match self {
            LabelForm::Velocity => "velocity",
            LabelForm::PositionXy => "position_xy",
            LabelForm::Distance => "distance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaConfig {
    pub fusion: Fusion,
    pub estimator: Estimator,
    pub label_form: LabelForm,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            fusion: Fusion::Concat,
            estimator: Estimator::Lstm,
            label_form: LabelForm::Distance,
            hidden: 64,
            layers: 2,
        }
    }
}

/// Width of the predicted-trajectory feature (per-step x/y increments).
pub const TRAJ_WIDTH: usize = 2;

enum Core {
    Mlp(Linear),
    Conv(Conv1d),
    Lstm(Recurrent),
}

enum Head {
    Readout(Linear),
    Full {
        enc: [Linear; 2],
        core: Core,
        dec: [Linear; 2],
    },
}

pub struct SelfAware {
    pub cfg: SaConfig,
    t_f: usize,
    pos_scale: f64,
    encoder: Recurrent,
    decoder: Recurrent,
    project: Option<Linear>,
    head: Head,
}

/// Estimated errors `[n, t_f, d]` for one scene (or `[B * n, t_f, d]` for a
/// batch) and the agents they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticSequence {
    pub z_hat: Tensor,
    pub valid: Vec<bool>,
}

impl DiagnosticSequence {
    /// `(ade_est, fde_est)` per valid row.
    pub fn integrate(&self) -> Vec<(usize, f64, f64)> {
        let s = self.z_hat.shape();
        let (tf, d) = (s[s.len() - 2], s[s.len() - 1]);
        integrate_diagnostics(self.z_hat.data(), tf, d)
            .into_iter()
            .enumerate()
            .filter(|(r, _)| self.valid[*r])
            .map(|(r, (a, f))| (r, a, f))
            .collect()
    }
}

impl SelfAware {
    pub fn new(cfg: SaConfig, predictor: &PredictorConfig) -> Result<SelfAware> {
        if cfg.hidden == 0 || cfg.layers == 0 {
            return Err(Error::Config("selfaware.hidden and layers must be positive".into()));
        }
        let h = cfg.hidden;
        let name = |s: &str| format!("{PREFIX}/{s}");
        let project = (cfg.fusion == Fusion::Add).then(|| Linear::new(name("project"), h, TRAJ_WIDTH));
        let fused = match cfg.fusion {
            Fusion::Gf => h,
            Fusion::Add => TRAJ_WIDTH,
            Fusion::Concat => h + TRAJ_WIDTH,
        };
        let d = cfg.label_form.width();
        let head = match cfg.estimator {
            Estimator::None => Head::Readout(Linear::new(name("readout"), fused, d)),
            est => Head::Full {
                enc: [Linear::new(name("enc0"), fused, h), Linear::new(name("enc1"), h, h)],
                core: match est {
                    Estimator::Mlp => Core::Mlp(Linear::new(name("core"), h, h)),
                    Estimator::Conv => Core::Conv(Conv1d::new(name("core"), h, h, 3)),
                    _ => Core::Lstm(Recurrent::lstm(name("core"), h, h, 2)),
                },
                dec: [Linear::new(name("dec0"), h, h), Linear::new(name("dec1"), h, d)],
            },
        };
        Ok(SelfAware {
            encoder: Recurrent::gru(name("gf_encoder"), predictor.c_feat, h, cfg.layers),
            decoder: Recurrent::gru(name("gf_decoder"), h, h, cfg.layers),
            project,
            head,
            t_f: predictor.t_f,
            pos_scale: predictor.pos_scale_m,
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParameterSet> {
        let mut rng = Rng::new(seed);
        let mut ps = ParameterSet::new();
        self.encoder.init(&mut ps, &mut rng)?;
        self.decoder.init(&mut ps, &mut rng)?;
        if let Some(p) = &self.project {
            p.init(&mut ps, &mut rng)?;
        }
        match &self.head {
            Head::Readout(l) => l.init(&mut ps, &mut rng)?,
            Head::Full { enc, core, dec } => {
                enc[0].init(&mut ps, &mut rng)?;
                enc[1].init(&mut ps, &mut rng)?;
                match core {
                    Core::Mlp(l) => l.init(&mut ps, &mut rng)?,
                    Core::Conv(c) => c.init(&mut ps, &mut rng)?,
                    Core::Lstm(r) => r.init(&mut ps, &mut rng)?,
                }
                dec[0].init(&mut ps, &mut rng)?;
                dec[1].init(&mut ps, &mut rng)?;
            }
        }
        Ok(ps)
    }

    /// Name of the first layer that sees the fused feature.
    pub fn first_fused_layer(&self) -> String {
        match &self.head {
            Head::Readout(l) => l.weight(),
            Head::Full { enc, .. } => enc[0].weight(),
        }
    }

    /// `gf: [B, n, t_h, C]`, `positions: [B, n, t_f, 2]` (meters), `anchor`
    /// one per agent row. Returns `[B, n, t_f, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, gf: Var, positions: Var, anchor: &[[f64; 2]]) -> Result<Var> {
        let gs = tape.shape(gf).to_vec();
        let ps = tape.shape(positions).to_vec();
        if gs.len() != 4 || ps.len() != 4 || gs[..2] != ps[..2] || ps[2] != self.t_f || ps[3] != 2 {
            return Err(Error::shape("sa_forward", &gs, &ps));
        }
        let (b, n, t_h, c) = (gs[0], gs[1], gs[2], gs[3]);
        let rows = b * n;
        if anchor.len() != rows || c != self.encoder.input {
            return Err(Error::shape("sa_forward", &gs, &[anchor.len(), self.encoder.input]));
        }
        let tf = self.t_f;
        let h = self.cfg.hidden;

        // graph feature processing
        let seq = tape.reshape(gf, &[rows, t_h, c])?;
        let (_, mut state) = self.encoder.run(tape, p, seq, None, None)?;
        let mut input = tape.constant(&Tensor::zeros(&[rows, h]))?;
        let mut steps = Vec::with_capacity(tf);
        for _ in 0..tf {
            state = self.decoder.step(tape, p, input, &state, None)?;
            input = state.top();
            steps.push(input);
        }
        let processed = tape.stack(&steps, 1)?;

        // fusion
        let fused = match self.cfg.fusion {
            Fusion::Gf => processed,
            Fusion::Add | Fusion::Concat => {
                let inc = self.increments(tape, positions, anchor)?;
                if self.cfg.fusion == Fusion::Add {
                    let proj = self.project.as_ref().expect("add fusion has a projection");
                    let proj = proj.forward(tape, p, processed)?;
                    if tape.shape(proj) != tape.shape(inc) {
                        return Err(Error::shape("sa_fusion_add", tape.shape(proj), tape.shape(inc)));
                    }
                    tape.add(proj, inc)?
                } else {
                    tape.concat(&[processed, inc], 2)?
                }
            }
        };

        // estimation
        let mut out = match &self.head {
            Head::Readout(l) => l.forward(tape, p, fused)?,
            Head::Full { enc, core, dec } => {
                let x = enc[0].forward(tape, p, fused)?;
                let x = tape.relu(x)?;
                let x = enc[1].forward(tape, p, x)?;
                let x = match core {
                    Core::Mlp(l) => {
                        let y = l.forward(tape, p, x)?;
                        tape.relu(y)?
                    }
                    Core::Conv(cv) => {
                        let y = cv.forward(tape, p, x)?;
                        tape.relu(y)?
                    }
                    Core::Lstm(r) => {
                        let (outs, _) = r.run(tape, p, x, None, None)?;
                        tape.stack(&outs, 1)?
                    }
                };
                let x = dec[0].forward(tape, p, x)?;
                let x = tape.relu(x)?;
                dec[1].forward(tape, p, x)?
            }
        };
        if self.cfg.label_form == LabelForm::Distance {
            out = tape.relu(out)?;
        }
        tape.reshape(out, &[b, n, tf, self.cfg.label_form.width()])
    }

    /// Per-step predicted displacement, scaled like the predictor's inputs.
    fn increments(&self, tape: &mut Tape, positions: Var, anchor: &[[f64; 2]]) -> Result<Var> {
        let rows = anchor.len();
        let tf = self.t_f;
        let pos = tape.reshape(positions, &[rows, tf, 2])?;
        let a = tape.constant_from(vec![rows, 1, 2], anchor.iter().flatten().copied().collect())?;
        let prev = if tf > 1 {
            let head = tape.slice(pos, 1, 0, tf - 1)?;
            tape.concat(&[a, head], 1)?
        } else {
            a
        };
        let d = tape.sub(pos, prev)?;
        tape.scale(d, 1.0 / self.pos_scale)
    }
}

/// Error labels `[rows, t_f, d]` from truth and prediction (both
/// `[rows, t_f, 2]`, meters). Velocity uses the 2 Hz sampling rate with the
/// anchor as position at `t = 0`.
pub fn error_labels(truth: &Tensor, pred: &Tensor, anchor: &[[f64; 2]], form: LabelForm) -> Result<Tensor> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape("error_labels", truth.shape(), pred.shape()));
    }
    let s = truth.shape();
    let tf = s[s.len() - 2];
    let rows = truth.numel() / (tf * 2).max(1);
    if anchor.len() != rows {
        return Err(Error::shape("error_labels", s, &[anchor.len()]));
    }
    let (t, p) = (truth.data(), pred.data());
    let d = form.width();
    let mut out = Vec::with_capacity(rows * tf * d);
    for r in 0..rows {
        for k in 0..tf {
            let o = (r * tf + k) * 2;
            let dx = t[o] - p[o];
            let dy = t[o + 1] - p[o + 1];
            match form {
                LabelForm::Distance => out.push((dx * dx + dy * dy).sqrt()),
                LabelForm::PositionXy => out.extend_from_slice(&[dx.abs(), dy.abs()]),
                LabelForm::Velocity => {
                    let prev = |v: &[f64], axis: usize| if k == 0 { anchor[r][axis] } else { v[o - 2 + axis] };
                    let rate = crate::data::RATE_HZ;
                    let vt = [(t[o] - prev(t, 0)) * rate, (t[o + 1] - prev(t, 1)) * rate];
                    let vp = [(p[o] - prev(p, 0)) * rate, (p[o + 1] - prev(p, 1)) * rate];
                    out.extend_from_slice(&[(vt[0] - vp[0]).abs(), (vt[1] - vp[1]).abs()]);
                }
            }
        }
    }
    let mut shape = s.to_vec();
    *shape.last_mut().expect("rank >= 2") = d;
    Tensor::new(shape, out)
}

/// Mean over valid rows of the per-step absolute error (d = 1) or error
/// vector norm (d = 2), averaged over the horizon.
pub fn sa_loss(tape: &mut Tape, labels: Var, z_hat: Var, valid: &[bool]) -> Result<Var> {
    let s = tape.shape(z_hat).to_vec();
    if s != tape.shape(labels) {
        return Err(Error::shape("sa_loss", &s, tape.shape(labels)));
    }
    let d = s[s.len() - 1];
    let tf = s[s.len() - 2];
    let rows: usize = s[..s.len() - 2].iter().product();
    if valid.len() != rows {
        return Err(Error::shape("sa_loss", &s, &[valid.len()]));
    }
    let count = valid.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(Error::Data("sa_loss: no valid agents".into()));
    }
    let diff = tape.sub(labels, z_hat)?;
    let diff = tape.reshape(diff, &[rows, tf, d])?;
    let per_step = if d == 1 {
        let a = tape.abs(diff)?;
        tape.reshape(a, &[rows, tf])?
    } else {
        tape.l2_norm_last(diff)?
    };
    let mask: Vec<f64> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, tf))
        .collect();
    let mask = tape.constant_from(vec![rows, tf], mask)?;
    let masked = tape.mul(per_step, mask)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / (count * tf) as f64)
}

/// `(ade_est, fde_est)` for every row of a `[rows, t_f, d]` buffer; for
/// d = 2 per-step vector norms are taken first.
pub fn integrate_diagnostics(z_hat: &[f64], t_f: usize, d: usize) -> Vec<(f64, f64)> {
    z_hat
        .chunks(t_f * d)
        .map(|row| {
            let steps: Vec<f64> = row
                .chunks(d)
                .map(|v| {
                    if d == 1 {
                        v[0]
                    } else {
                        v.iter().map(|x| x * x).sum::<f64>().sqrt()
                    }
                })
                .collect();
            let ade = steps.iter().sum::<f64>() / t_f as f64;
            (ade, *steps.last().unwrap_or(&0.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcfg() -> PredictorConfig {
        PredictorConfig {
            c_feat: 8,
            hidden: 8,
            ..PredictorConfig::default()
        }
    }

    fn inputs(tape: &mut Tape, seed: u64, n: usize) -> (Var, Var, Vec<[f64; 2]>) {
        let mut rng = Rng::new(seed);
        let mut gf = Tensor::zeros(&[1, n, 6, 8]);
        gf.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        let mut pos = Tensor::zeros(&[1, n, 6, 2]);
        pos.data_mut().iter_mut().for_each(|v| *v = 10.0 * rng.normal());
        let anchor = (0..n).map(|_| [rng.normal(), rng.normal()]).collect();
        (tape.constant(&gf).unwrap(), tape.constant(&pos).unwrap(), anchor)
    }

    fn all_configs() -> Vec<SaConfig> {
        let mut v = Vec::new();
        for fusion in [Fusion::Gf, Fusion::Add, Fusion::Concat] {
            for estimator in [Estimator::None, Estimator::Mlp, Estimator::Conv, Estimator::Lstm] {
                for label_form in [LabelForm::Velocity, LabelForm::PositionXy, LabelForm::Distance] {
                    v.push(SaConfig {
                        fusion,
                        estimator,
                        label_form,
                        hidden: 8,
                        layers: 2,
                    });
                }
            }
        }
        v
    }

    #[test]
    fn shapes_for_every_configuration() {
        for cfg in all_configs() {
            let sa = SelfAware::new(cfg.clone(), &pcfg()).unwrap();
            let ps = sa.init(1).unwrap();
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape).unwrap();
            let (gf, pos, anchor) = inputs(&mut tape, 2, 4);
            let z = sa.forward(&mut tape, &p, gf, pos, &anchor).unwrap();
            assert_eq!(tape.shape(z), &[1, 4, 6, cfg.label_form.width()], "{cfg:?}");
            if cfg.label_form == LabelForm::Distance {
                assert!(tape.value(z).iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn gf_fusion_ignores_the_prediction() {
        let cfg = SaConfig {
            fusion: Fusion::Gf,
            hidden: 8,
            ..SaConfig::default()
        };
        let sa = SelfAware::new(cfg, &pcfg()).unwrap();
        let ps = sa.init(3).unwrap();
        let run = |pos_seed: u64| {
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape).unwrap();
            let (gf, _, anchor) = inputs(&mut tape, 4, 3);
            let (_, pos, _) = inputs(&mut tape, pos_seed, 3);
            let z = sa.forward(&mut tape, &p, gf, pos, &anchor).unwrap();
            tape.value(z).to_vec()
        };
        assert_eq!(run(10), run(11));
    }

    #[test]
    fn concat_with_zeroed_trajectory_weights_matches_gf() {
        let gf_cfg = SaConfig {
            fusion: Fusion::Gf,
            hidden: 8,
            ..SaConfig::default()
        };
        let cat_cfg = SaConfig {
            fusion: Fusion::Concat,
            ..gf_cfg.clone()
        };
        let gf_sa = SelfAware::new(gf_cfg, &pcfg()).unwrap();
        let cat_sa = SelfAware::new(cat_cfg, &pcfg()).unwrap();
        let gf_ps = gf_sa.init(5).unwrap();
        let mut cat_ps = cat_sa.init(6).unwrap();
        let first = cat_sa.first_fused_layer();
        for (name, t) in gf_ps.iter() {
            let dst = cat_ps.get_mut(name).unwrap();
            if *name == first {
                let h = t.shape()[0];
                let cols = t.shape()[1];
                dst.data_mut().fill(0.0);
                dst.data_mut()[..h * cols].copy_from_slice(t.data());
            } else {
                dst.data_mut().copy_from_slice(t.data());
            }
        }
        let run = |sa: &SelfAware, ps: &ParameterSet| {
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape).unwrap();
            let (gf, pos, anchor) = inputs(&mut tape, 7, 3);
            let z = sa.forward(&mut tape, &p, gf, pos, &anchor).unwrap();
            tape.value(z).to_vec()
        };
        assert_eq!(run(&gf_sa, &gf_ps), run(&cat_sa, &cat_ps));
    }

    fn t(rows: usize, tf: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, tf, 2], data).unwrap()
    }

    #[test]
    fn label_examples() {
        let truth = t(1, 1, vec![3.0, 4.0]);
        let pred = t(1, 1, vec![0.0, 0.0]);
        let z = error_labels(&truth, &pred, &[[0.0, 0.0]], LabelForm::Distance).unwrap();
        assert_eq!(z.data(), &[5.0]);
        for form in [LabelForm::Distance, LabelForm::PositionXy, LabelForm::Velocity] {
            let z = error_labels(&truth, &truth, &[[1.0, 1.0]], form).unwrap();
            assert!(z.data().iter().all(|v| *v == 0.0));
        }
        let truth = t(1, 2, vec![1.0, 0.0, 2.0, 0.0]);
        let pred = t(1, 2, vec![0.0; 4]);
        let z = error_labels(&truth, &pred, &[[0.0, 0.0]], LabelForm::Velocity).unwrap();
        assert_eq!(z.data(), &[2.0, 0.0, 2.0, 0.0]);
        let z = error_labels(&truth, &pred, &[[0.0, 0.0]], LabelForm::PositionXy).unwrap();
        assert_eq!(z.data(), &[1.0, 0.0, 2.0, 0.0]);
    }

    fn loss(labels: Vec<f64>, est: Vec<f64>, tf: usize, d: usize) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(&Tensor::new(vec![1, tf, d], labels).unwrap()).unwrap();
        let e = tape.constant(&Tensor::new(vec![1, tf, d], est).unwrap()).unwrap();
        let v = sa_loss(&mut tape, l, e, &[true]).unwrap();
        tape.value(v)[0]
    }

    #[test]
    fn loss_examples() {
        let z: Vec<f64> = (1..=6).map(f64::from).collect();
        assert_eq!(loss(z.clone(), z, 6, 1), 0.0);
        assert_eq!(loss(vec![1.0, 2.0], vec![0.0, 0.0], 2, 1), 1.5);
        assert_eq!(loss(vec![3.0, 4.0], vec![0.0, 0.0], 1, 2), 5.0);
    }

    #[test]
    fn integration_examples() {
        let z: Vec<f64> = (1..=6).map(f64::from).collect();
        assert_eq!(integrate_diagnostics(&z, 6, 1), [(3.5, 6.0)]);
        assert_eq!(integrate_diagnostics(&[0.0; 6], 6, 1), [(0.0, 0.0)]);
        let xy: Vec<f64> = (0..6).flat_map(|_| [3.0, 4.0]).collect();
        assert_eq!(integrate_diagnostics(&xy, 6, 2), [(5.0, 5.0)]);
    }
}
