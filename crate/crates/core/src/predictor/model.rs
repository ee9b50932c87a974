//! Graph-convolutional feature extractor and GRU sequence-to-sequence decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{dropout, BatchNorm, Conv1d, Linear, Mode, Recurrent};
use crate::numerics::params::{Bound, BufferSet, ParameterSet};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::predictor::scene::{SceneBatch, INPUT_CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub t_h: usize,
    pub t_f: usize,
    /// Agent slots per scene.
    pub n_max: usize,
    /// Agents closer than this at `t = 0` are connected.
    pub d_close_m: f64,
    pub c_feat: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub layers: usize,
    /// Offsets and increments are divided by this inside the network.
    pub pos_scale_m: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            t_h: 6,
            t_f: 6,
            n_max: 32,
            d_close_m: 10.0,
            c_feat: 64,
            hidden: 64,
            blocks: 3,
            kernel: 3,
            layers: 2,
            pos_scale_m: 10.0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.t_h,
            self.t_f,
            self.n_max,
            self.c_feat,
            self.hidden,
            self.kernel,
            self.layers,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if self.t_h < 2 {
            return Err(Error::Config("predictor.t_h must be at least 2".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("predictor.kernel must be odd".into()));
        }
        if !(self.d_close_m > 0.0 && self.pos_scale_m > 0.0) {
            return Err(Error::Config(
                "predictor.d_close_m and pos_scale_m must be positive".into(),
            ));
        }
        Ok(())
    }
}

struct GraphBlock {
    mix: Linear,
    conv: Conv1d,
    bn: BatchNorm,
}

/// Architecture description. Weights live in a [`ParameterSet`] and batch
/// statistics in a [`BufferSet`].
pub struct Predictor {
    pub cfg: PredictorConfig,
    /// Width of an optional one-hot conditioning vector fed to the decoder.
    pub condition: usize,
    embed: Linear,
    blocks: Vec<GraphBlock>,
    encoder: Recurrent,
    decoder: Recurrent,
    head: Linear,
}

/// Graph feature `[B, n, t_h, C]` and absolute positions `[B, n, t_f, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictorOutput {
    pub gf: Var,
    pub positions: Var,
}

pub const PREFIX: &str = "predictor";

impl Predictor {
    pub fn new(cfg: PredictorConfig) -> Predictor {
        Predictor::with_condition(cfg, 0)
    }

    pub fn with_condition(cfg: PredictorConfig, condition: usize) -> Predictor {
        let c = cfg.c_feat;
        let h = cfg.hidden;
        let blocks = (0..cfg.blocks)
            .map(|b| GraphBlock {
                mix: Linear::new(format!("{PREFIX}/block{b}/mix"), c, c),
                conv: Conv1d::new(format!("{PREFIX}/block{b}/conv"), c, c, cfg.kernel).without_bias(),
                bn: BatchNorm::new(format!("{PREFIX}/block{b}/bn"), c),
            })
            .collect();
        Predictor {
            embed: Linear::new(format!("{PREFIX}/embed"), INPUT_CHANNELS, c),
            blocks,
            encoder: Recurrent::gru(format!("{PREFIX}/encoder"), c, h, cfg.layers),
            decoder: Recurrent::gru(format!("{PREFIX}/decoder"), 2 + condition, h, cfg.layers),
            head: Linear::new(format!("{PREFIX}/head"), h + 2, 2),
            condition,
            cfg,
        }
    }

    pub fn init(&self, seed: u64) -> Result<(ParameterSet, BufferSet)> {
        let mut rng = Rng::new(seed);
        let mut ps = ParameterSet::new();
        let mut buffers = BufferSet::new();
        self.embed.init(&mut ps, &mut rng)?;
        for b in &self.blocks {
            b.mix.init(&mut ps, &mut rng)?;
            b.conv.init(&mut ps, &mut rng)?;
            b.bn.init(&mut ps, &mut buffers)?;
        }
        self.encoder.init(&mut ps, &mut rng)?;
        self.decoder.init(&mut ps, &mut rng)?;
        self.head.init(&mut ps, &mut rng)?;
        Ok((ps, buffers))
    }

    /// Name of the decoder output layer's weight and bias.
    pub fn head_names(&self) -> [String; 2] {
        [self.head.weight(), self.head.bias_name()]
    }

    fn check(&self, batch: &SceneBatch) -> Result<()> {
        if batch.t_h != self.cfg.t_h || batch.t_f != self.cfg.t_f {
            return Err(Error::shape(
                "predictor",
                &[batch.t_h, batch.t_f],
                &[self.cfg.t_h, self.cfg.t_f],
            ));
        }
        Ok(())
    }

    /// Graph feature `[B, n, t_h, C]`; padded agent slots are exactly zero.
    pub fn features(&self, tape: &mut Tape, p: &Bound, batch: &SceneBatch, mode: &mut Mode<'_>) -> Result<Var> {
        self.check(batch)?;
        let (b, n, t, c) = (batch.batch, batch.n, batch.t_h, self.cfg.c_feat);
        let mut scaled = batch.values.clone();
        for (k, v) in scaled.data_mut().iter_mut().enumerate() {
            if k % INPUT_CHANNELS < 2 {
                *v /= self.cfg.pos_scale_m;
            }
        }
        let x = tape.constant(&scaled)?;
        let adj = tape.constant(&batch.adjacency)?;
        let mask_data: Vec<f64> = batch
            .valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, t * c))
            .collect();
        let mask = tape.constant_from(vec![b, n, t, c], mask_data)?;
        let stat_rows: Vec<bool> = batch.valid.iter().flat_map(|&v| std::iter::repeat_n(v, t)).collect();

        let emb = self.embed.forward(tape, p, x)?;
        let mut h = tape.mul(emb, mask)?;
        for blk in &self.blocks {
            let flat = tape.reshape(h, &[b, n, t * c])?;
            let g = tape.bmm(adj, flat)?;
            let g = tape.reshape(g, &[b, n, t, c])?;
            let g = blk.mix.forward(tape, p, g)?;
            let g = tape.reshape(g, &[b * n, t, c])?;
            let g = blk.conv.forward(tape, p, g)?;
            let g = tape.reshape(g, &[b * n * t, c])?;
            let g = blk.bn.forward(tape, p, g, Some(&stat_rows), mode)?;
            let g = tape.relu(g)?;
            let g = tape.reshape(g, &[b, n, t, c])?;
            let sum = tape.add(h, g)?;
            h = tape.mul(sum, mask)?;
        }
        Ok(h)
    }

    /// Decodes absolute positions `[B, n, t_f, 2]` from a graph feature.
    /// `condition` holds one class index per agent row when the decoder is
    /// conditioned. With `dropout = Some((rng, rate))` inverted dropout is
    /// applied to the encoder input and between recurrent layers.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SceneBatch,
        gf: Var,
        condition: Option<&[usize]>,
        dropout_rng: Option<(&mut Rng, f64)>,
    ) -> Result<Var> {
        let (b, n, t, c) = (batch.batch, batch.n, batch.t_h, self.cfg.c_feat);
        let rows = b * n;
        let scale = self.cfg.pos_scale_m;
        let (mut rng, rate) = match dropout_rng {
            Some((r, rate)) => (Some(r), rate),
            None => (None, 0.0),
        };
        let mut seq = tape.reshape(gf, &[rows, t, c])?;
        if let Some(r) = rng.as_deref_mut() {
            seq = dropout(tape, seq, rate, r)?;
        }
        let (_, mut state) = self
            .encoder
            .run(tape, p, seq, None, rng.as_deref_mut().map(|g| (g, rate)))?;

        let last: Vec<f64> = batch
            .last_increment()
            .iter()
            .flat_map(|d| [d[0] / scale, d[1] / scale])
            .collect();
        let mut inc = tape.constant_from(vec![rows, 2], last)?;
        let cond = match (self.condition, condition) {
            (0, _) => None,
            (k, Some(idx)) => {
                if idx.len() != rows || idx.iter().any(|&i| i >= k) {
                    return Err(Error::InvalidArgument(format!(
                        "decoder condition needs {rows} class indices below {k}"
                    )));
                }
                let mut one_hot = vec![0.0; rows * k];
                for (r, &i) in idx.iter().enumerate() {
                    one_hot[r * k + i] = 1.0;
                }
                Some(tape.constant_from(vec![rows, k], one_hot)?)
            }
            (_, None) => return Err(Error::InvalidArgument("conditioned decoder needs class indices".into())),
        };

        let mut outs = Vec::with_capacity(self.cfg.t_f);
        for _ in 0..self.cfg.t_f {
            let input = match cond {
                Some(oh) => tape.concat(&[inc, oh], 1)?,
                None => inc,
            };
            state = self
                .decoder
                .step(tape, p, input, &state, rng.as_deref_mut().map(|g| (g, rate)))?;
            let feat = tape.concat(&[state.top(), inc], 1)?;
            inc = self.head.forward(tape, p, feat)?;
            outs.push(inc);
        }
        let incs = tape.stack(&outs, 1)?;
        let incs = tape.scale(incs, scale)?;
        let offsets = tape.cumsum(incs, 1)?;
        let tf = self.cfg.t_f;
        let mut anchor = Vec::with_capacity(rows * tf * 2);
        let mut mask = Vec::with_capacity(rows * tf * 2);
        for (a, &v) in batch.anchor.iter().zip(&batch.valid) {
            for _ in 0..tf {
                anchor.extend_from_slice(a);
                let m = if v { 1.0 } else { 0.0 };
                mask.extend_from_slice(&[m, m]);
            }
        }
        let anchor = tape.constant_from(vec![rows, tf, 2], anchor)?;
        let mask = tape.constant_from(vec![rows, tf, 2], mask)?;
        let pos = tape.add(offsets, anchor)?;
        let pos = tape.mul(pos, mask)?;
        tape.reshape(pos, &[b, n, tf, 2])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &SceneBatch,
        mode: &mut Mode<'_>,
        dropout_rng: Option<(&mut Rng, f64)>,
    ) -> Result<PredictorOutput> {
        let gf = self.features(tape, p, batch, mode)?;
        let positions = self.decode(tape, p, batch, gf, None, dropout_rng)?;
        Ok(PredictorOutput { gf, positions })
    }

    /// Eval-mode forward without gradient tracking; returns
    /// `(graph feature, positions)` tensors.
    pub fn predict(&self, params: &ParameterSet, buffers: &BufferSet, batch: &SceneBatch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = bind_constants(params, &mut tape)?;
        let out = self.forward(&mut tape, &p, batch, &mut Mode::Eval(buffers), None)?;
        Ok((tape.to_tensor(out.gf), tape.to_tensor(out.positions)))
    }
}

/// Binds every tensor as a constant regardless of the set's frozen flag.
pub fn bind_constants(params: &ParameterSet, tape: &mut Tape) -> Result<Bound> {
    let mut frozen = params.clone();
    frozen.freeze();
    frozen.bind(tape)
}

/// Mean Euclidean distance over valid agents and every future step.
pub fn tp_loss(tape: &mut Tape, positions: Var, truth: Var, valid: &[bool]) -> Result<Var> {
    let shape = tape.shape(positions).to_vec();
    if shape != tape.shape(truth) {
        return Err(Error::shape("tp_loss", &shape, tape.shape(truth)));
    }
    let rows: usize = shape[..shape.len() - 2].iter().product();
    let tf = shape[shape.len() - 2];
    if valid.len() != rows {
        return Err(Error::shape("tp_loss", &shape, &[valid.len()]));
    }
    let count = valid.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(Error::Data("tp_loss: no valid agents".into()));
    }
    let diff = tape.sub(positions, truth)?;
    let diff = tape.reshape(diff, &[rows, tf, 2])?;
    let dist = tape.l2_norm_last(diff)?;
    let mask: Vec<f64> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, tf))
        .collect();
    let mask = tape.constant_from(vec![rows, tf], mask)?;
    let masked = tape.mul(dist, mask)?;
    let total = tape.sum(masked)?;
    tape.scale(total, 1.0 / (count * tf) as f64)
}

/// Per-step Euclidean errors of every valid agent: `(row, [e_1 .. e_tf])`.
pub fn step_errors(positions: &[f64], truth: &[f64], valid: &[bool], t_f: usize) -> Vec<(usize, Vec<f64>)> {
    valid
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(r, _)| {
            let e = (0..t_f)
                .map(|k| {
                    let o = (r * t_f + k) * 2;
                    ((positions[o] - truth[o]).powi(2) + (positions[o + 1] - truth[o + 1]).powi(2)).sqrt()
                })
                .collect();
            (r, e)
        })
        .collect()
}
