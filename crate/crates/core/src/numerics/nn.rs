//! Layer building blocks on top of the tape.
//!
//! A layer value only names its tensors and records its dimensions; the
//! weights themselves live in a [`ParameterSet`] (and a [`BufferSet`] for
//! batch-norm statistics), so several models can share one layer description.

use crate::error::{Error, Result};
use crate::numerics::params::{Bound, BufferSet, ParameterSet};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{BnStats, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Whether batch-norm layers use batch statistics (and update running
/// buffers) or the stored running statistics.
pub enum Mode<'a> {
    Train(&'a mut BufferSet),
    Eval(&'a BufferSet),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Train(b) => Mode::Train(b),
            Mode::Eval(b) => Mode::Eval(b),
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-a, a));
    t
}

/// Inverted dropout: zeroes entries with probability `rate` and rescales the
/// survivors by `1 / (1 - rate)`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
    let m = tape.constant_from(tape.shape(x).to_vec(), mask)?;
    tape.mul(x, m)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            name: name.into(),
            input,
            output,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut Rng) -> Result<()> {
        ps.insert(
            self.weight(),
            xavier(&[self.input, self.output], self.input, self.output, rng),
        )?;
        if self.bias {
            ps.insert(self.bias_name(), Tensor::zeros(&[self.output]))?;
        }
        Ok(())
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(Error::shape("linear", &shape, &[self.input, self.output]));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, self.input])?
        };
        let mut y = tape.matmul(flat, p.get(&self.weight())?)?;
        if self.bias {
            y = tape.bias_add(y, p.get(&self.bias_name())?)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty shape") = self.output;
        tape.reshape(y, &out_shape)
    }
}

/// Temporal convolution `[B, T, C_in] -> [B, T, C_out]`, odd kernel, zero padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub bias: bool,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, input: usize, output: usize, kernel: usize) -> Self {
        Conv1d {
            name: name.into(),
            input,
            output,
            kernel,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn weight(&self) -> String {
        format!("{}/weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut Rng) -> Result<()> {
        let w = xavier(
            &[self.kernel, self.input, self.output],
            self.kernel * self.input,
            self.kernel * self.output,
            rng,
        );
        ps.insert(self.weight(), w)?;
        if self.bias {
            ps.insert(self.bias_name(), Tensor::zeros(&[self.output]))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, p.get(&self.weight())?)?;
        if self.bias {
            tape.bias_add(y, p.get(&self.bias_name())?)
        } else {
            Ok(y)
        }
    }
}

/// Per-channel batch normalization over the rows of `[M, C]`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
        }
    }

    fn key(&self, part: &str) -> String {
        format!("{}/{part}", self.name)
    }

    pub fn init(&self, ps: &mut ParameterSet, buffers: &mut BufferSet) -> Result<()> {
        ps.insert(self.key("gamma"), Tensor::full(&[self.channels], 1.0))?;
        ps.insert(self.key("beta"), Tensor::zeros(&[self.channels]))?;
        buffers.insert(self.key("running_mean"), Tensor::zeros(&[self.channels]));
        buffers.insert(self.key("running_var"), Tensor::full(&[self.channels], 1.0));
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        stat_rows: Option<&[bool]>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let gamma = p.get(&self.key("gamma"))?;
        let beta = p.get(&self.key("beta"))?;
        let (mk, vk) = (self.key("running_mean"), self.key("running_var"));
        match mode {
            Mode::Train(buffers) => {
                let (rm, rv) = buffers.get_pair_mut(&mk, &vk)?;
                tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    stat_rows,
                    BnStats::Batch {
                        running_mean: rm.data_mut(),
                        running_var: rv.data_mut(),
                        momentum: BN_MOMENTUM,
                    },
                )
            }
            Mode::Eval(buffers) => {
                let mean = buffers.get(&mk)?.data();
                let var = buffers.get(&vk)?.data();
                tape.batch_norm(x, gamma, beta, stat_rows, BnStats::Running { mean, var })
            }
        }
    }
}

/// Which gated recurrent cell a [`Recurrent`] stack uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

/// Hidden (and, for LSTM, cell) state of every layer.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl RecurrentState {
    pub fn top(&self) -> Var {
        *self.h.last().expect("at least one layer")
    }
}

/// Multi-layer GRU or LSTM. Gate layout follows the usual
/// `x W_ih + b_ih + h W_hh + b_hh` convention, GRU gates ordered (r, z, n),
/// LSTM gates (i, f, g, o).
#[derive(Clone, Debug)]
pub struct Recurrent {
    pub name: String,
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Recurrent {
    pub fn gru(name: impl Into<String>, input: usize, hidden: usize, layers: usize) -> Self {
        Recurrent {
            name: name.into(),
            kind: CellKind::Gru,
            input,
            hidden,
            layers,
        }
    }

    pub fn lstm(name: impl Into<String>, input: usize, hidden: usize, layers: usize) -> Self {
        Recurrent {
            name: name.into(),
            kind: CellKind::Lstm,
            input,
            hidden,
            layers,
        }
    }

    fn key(&self, layer: usize, part: &str) -> String {
        format!("{}/l{layer}/{part}", self.name)
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut Rng) -> Result<()> {
        let g = self.kind.gates() * self.hidden;
        for l in 0..self.layers {
            let inp = if l == 0 { self.input } else { self.hidden };
            ps.insert(self.key(l, "w_ih"), xavier(&[inp, g], inp, self.hidden, rng))?;
            ps.insert(
                self.key(l, "w_hh"),
                xavier(&[self.hidden, g], self.hidden, self.hidden, rng),
            )?;
            ps.insert(self.key(l, "b_ih"), Tensor::zeros(&[g]))?;
            ps.insert(self.key(l, "b_hh"), Tensor::zeros(&[g]))?;
        }
        Ok(())
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> Result<RecurrentState> {
        let mut h = Vec::with_capacity(self.layers);
        let mut c = Vec::new();
        for _ in 0..self.layers {
            h.push(tape.constant(&Tensor::zeros(&[rows, self.hidden]))?);
            if self.kind == CellKind::Lstm {
                c.push(tape.constant(&Tensor::zeros(&[rows, self.hidden]))?);
            }
        }
        Ok(RecurrentState { h, c })
    }

    /// Advances every layer by one step on input `x: [N, input]`. With
    /// `dropout`, a fresh mask is applied to the input of each layer above
    /// the first.
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        state: &RecurrentState,
        mut dropout_rng: Option<(&mut Rng, f64)>,
    ) -> Result<RecurrentState> {
        let hsz = self.hidden;
        let mut input = x;
        let mut next = RecurrentState {
            h: Vec::with_capacity(self.layers),
            c: Vec::new(),
        };
        for l in 0..self.layers {
            if l > 0 {
                if let Some((rng, rate)) = dropout_rng.as_mut() {
                    input = dropout(tape, input, *rate, rng)?;
                }
            }
            let xi = tape.matmul(input, p.get(&self.key(l, "w_ih"))?)?;
            let gi = tape.bias_add(xi, p.get(&self.key(l, "b_ih"))?)?;
            let hh = tape.matmul(state.h[l], p.get(&self.key(l, "w_hh"))?)?;
            let gh = tape.bias_add(hh, p.get(&self.key(l, "b_hh"))?)?;
            match self.kind {
                CellKind::Gru => {
                    let i_r = tape.slice(gi, 1, 0, hsz)?;
                    let i_z = tape.slice(gi, 1, hsz, hsz)?;
                    let i_n = tape.slice(gi, 1, 2 * hsz, hsz)?;
                    let h_r = tape.slice(gh, 1, 0, hsz)?;
                    let h_z = tape.slice(gh, 1, hsz, hsz)?;
                    let h_n = tape.slice(gh, 1, 2 * hsz, hsz)?;
                    let r_pre = tape.add(i_r, h_r)?;
                    let r = tape.sigmoid(r_pre)?;
                    let z_pre = tape.add(i_z, h_z)?;
                    let z = tape.sigmoid(z_pre)?;
                    let rh = tape.mul(r, h_n)?;
                    let n_pre = tape.add(i_n, rh)?;
                    let n = tape.tanh(n_pre)?;
                    // h' = (1 - z) * n + z * h = n + z * (h - n)
                    let diff = tape.sub(state.h[l], n)?;
                    let zd = tape.mul(z, diff)?;
                    let h = tape.add(n, zd)?;
                    next.h.push(h);
                }
                CellKind::Lstm => {
                    let sum = tape.add(gi, gh)?;
                    let i_pre = tape.slice(sum, 1, 0, hsz)?;
                    let f_pre = tape.slice(sum, 1, hsz, hsz)?;
                    let g_pre = tape.slice(sum, 1, 2 * hsz, hsz)?;
                    let o_pre = tape.slice(sum, 1, 3 * hsz, hsz)?;
                    let i = tape.sigmoid(i_pre)?;
                    let f = tape.sigmoid(f_pre)?;
                    let g = tape.tanh(g_pre)?;
                    let o = tape.sigmoid(o_pre)?;
                    let fc = tape.mul(f, state.c[l])?;
                    let ig = tape.mul(i, g)?;
                    let c = tape.add(fc, ig)?;
                    let tc = tape.tanh(c)?;
                    let h = tape.mul(o, tc)?;
                    next.h.push(h);
                    next.c.push(c);
                }
            }
            input = next.h[l];
        }
        Ok(next)
    }

    /// Runs over `seq: [N, T, input]` from `init` (zeros when `None`);
    /// returns the top-layer output of every step and the final state.
    pub fn run(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seq: Var,
        init: Option<RecurrentState>,
        mut dropout_rng: Option<(&mut Rng, f64)>,
    ) -> Result<(Vec<Var>, RecurrentState)> {
        let shape = tape.shape(seq).to_vec();
        if shape.len() != 3 || shape[2] != self.input {
            return Err(Error::shape("recurrent", &shape, &[self.input, self.hidden]));
        }
        let mut state = match init {
            Some(s) => s,
            None => self.zero_state(tape, shape[0])?,
        };
        let mut outputs = Vec::with_capacity(shape[1]);
        for t in 0..shape[1] {
            let x = tape.select(seq, 1, t)?;
            let d = dropout_rng.as_mut().map(|(r, rate)| (&mut **r, *rate));
            state = self.step(tape, p, x, &state, d)?;
            outputs.push(state.top());
        }
        Ok((outputs, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_parameter_count() {
        let mut ps = ParameterSet::new();
        let mut rng = Rng::new(0);
        Linear::new("a", 4, 8).init(&mut ps, &mut rng).unwrap();
        Linear::new("b", 8, 2).init(&mut ps, &mut rng).unwrap();
        assert_eq!(ps.count(), 32 + 8 + 16 + 2);
    }

    #[test]
    fn linear_applies_to_last_axis() {
        let mut ps = ParameterSet::new();
        let mut rng = Rng::new(1);
        let lin = Linear::new("l", 3, 5);
        lin.init(&mut ps, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape).unwrap();
        let x = tape.constant(&Tensor::full(&[2, 4, 3], 0.5)).unwrap();
        let y = lin.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 5]);
    }

    #[test]
    fn gru_parameter_count_matches_formula() {
        let mut ps = ParameterSet::new();
        let mut rng = Rng::new(2);
        Recurrent::gru("g", 5, 7, 2).init(&mut ps, &mut rng).unwrap();
        let layer = |inp: usize| 3 * 7 * (inp + 7) + 6 * 7;
        assert_eq!(ps.count(), layer(5) + layer(7));
    }

    #[test]
    fn xavier_init_is_seeded() {
        let build = |seed| {
            let mut ps = ParameterSet::new();
            Recurrent::lstm("l", 3, 4, 2)
                .init(&mut ps, &mut Rng::new(seed))
                .unwrap();
            ps
        };
        assert_eq!(build(9), build(9));
        assert_ne!(build(9), build(10));
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_invalid_rate_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[10], 2.0)).unwrap();
        let mut rng = Rng::new(0);
        let y = dropout(&mut tape, x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(dropout(&mut tape, x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivors_are_rescaled() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1000], 1.0)).unwrap();
        let mut rng = Rng::new(4);
        let y = dropout(&mut tape, x, 0.5, &mut rng).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}
