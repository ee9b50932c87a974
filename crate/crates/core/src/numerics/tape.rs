//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every forward op appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse and returns gradients for every node that depends on a
//! gradient-tracked leaf.

use crate::error::{Error, Result};
use crate::numerics::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batch-normalization statistics source.
pub enum BnStats<'a> {
    /// Normalize with batch statistics and fold them into the running buffers.
    Batch {
        running_mean: &'a mut [f64],
        running_var: &'a mut [f64],
        momentum: f64,
    },
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BiasAdd(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis_lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Select {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        index: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        patches: Vec<f64>,
        batch: usize,
        steps: usize,
        c_in: usize,
        kernel: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        stat_rows: Option<Vec<bool>>,
        count: usize,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    L2NormLast(Var),
    Cumsum {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, `None` if `v` does not reach
    /// the loss (its gradient is identically zero).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = op(a) @ op(b) + beta * c` for row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the lengths implied by (m, k, n) and
    // the strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders `src` (shape `in_shape`) so output axis `i` is input axis
/// `perm[i]`. With `inverse`, `src` is in permuted order and is scattered
/// back to input order.
fn permute_data(src: &[f64], in_shape: &[usize], perm: &[usize], inverse: bool) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; src.len()];
    let mut idx = vec![0usize; out_shape.len()];
    for flat in 0..src.len() {
        let mut rem = flat;
        for d in (0..out_shape.len()).rev() {
            idx[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let off: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
        if inverse {
            out[off] = src[flat];
        } else {
            out[flat] = src[off];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that gradients flow into.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("constant", &shape, &[data.len()]));
        }
        self.push("constant", shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    /// `[B, m, k] @ [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("bmm", vec![bs, m, n], out, Op::BatchMatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, out, Op::AddScalar(x), rg)
    }

    /// Adds `b` (shape `[k]`) to every row of `x` (shape `[..., k]`).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("bias_add", &sx, &sb));
        }
        let k = sb[0];
        let bv = self.value(b).to_vec();
        let out = self
            .value(x)
            .chunks(k.max(1))
            .flat_map(|row| row.iter().zip(&bv).map(|(v, c)| v + c).collect::<Vec<_>>())
            .collect();
        let rg = self.rg(&[x, b]);
        self.push("bias_add", sx, out, Op::BiasAdd(x, b), rg)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, len) in inputs.iter().zip(&lens) {
                let chunk = len * inner;
                out.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis_lens: lens,
                outer,
                inner,
            },
            rg,
        )
    }

    /// Stacks equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(Error::InvalidArgument(format!(
                "stack axis {axis} out of range for {base:?}"
            )));
        }
        for v in inputs {
            if self.shape(*v) != base.as_slice() {
                return Err(Error::shape("stack", &base, self.shape(*v)));
            }
        }
        let mut view = base.clone();
        view.insert(axis, 1);
        let (outer, _, inner) = split_axis(&view, axis);
        let mut out = Vec::with_capacity(outer * inputs.len() * inner);
        for o in 0..outer {
            for v in inputs {
                out.extend_from_slice(&self.value(*v)[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, inputs.len());
        let rg = self.rg(inputs);
        let lens = vec![1; inputs.len()];
        self.push(
            "stack",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis_lens: lens,
                outer,
                inner,
            },
            rg,
        )
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::InvalidArgument(format!(
                "select index {index} on axis {axis} of {s:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&v[base..base + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push(
            "select",
            shape,
            out,
            Op::Select {
                x,
                outer,
                len,
                inner,
                index,
            },
            rg,
        )
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + count > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} on axis {axis} of {s:?}",
                start + count
            )));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&v[base..base + count * inner]);
        }
        let mut shape = s;
        shape[axis] = count;
        let rg = self.rg(&[x]);
        self.push(
            "slice",
            shape,
            out,
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), rg)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument(format!(
                "invalid permutation {perm:?} for {s:?}"
            )));
        }
        let out = permute_data(self.value(x), &s, perm, false);
        let shape = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[x]);
        self.push("permute", shape, out, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, f64::abs, Op::Abs(x))
    }

    fn axis_parts(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "{op}: axis {axis} out of range for {s:?}"
            )));
        }
        Ok(split_axis(s, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_parts("softmax", x, axis)?;
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| v[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (v[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax { x, outer, len, inner }, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_parts("log_softmax", x, axis)?;
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| v[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|k| (v[at(k)] - mx).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = v[at(k)] - lse;
                }
            }
        }
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax { x, outer, len, inner }, rg)
    }

    /// Temporal convolution of `x: [B, T, C_in]` with `w: [K, C_in, C_out]`,
    /// odd `K`, zero padding `K / 2` on both ends so `T` is preserved.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sw[0] % 2 == 0 {
            return Err(Error::shape("conv1d", &sx, &sw));
        }
        let (batch, steps, c_in) = (sx[0], sx[1], sx[2]);
        let (kernel, c_out) = (sw[0], sw[2]);
        let pad = kernel / 2;
        let width = kernel * c_in;
        let mut patches = vec![0.0; batch * steps * width];
        {
            let xv = self.value(x);
            for b in 0..batch {
                for t in 0..steps {
                    let row = (b * steps + t) * width;
                    for k in 0..kernel {
                        let src = t as isize + k as isize - pad as isize;
                        if src < 0 || src >= steps as isize {
                            continue;
                        }
                        let from = (b * steps + src as usize) * c_in;
                        patches[row + k * c_in..row + (k + 1) * c_in].copy_from_slice(&xv[from..from + c_in]);
                    }
                }
            }
        }
        let mut out = vec![0.0; batch * steps * c_out];
        gemm(
            batch * steps,
            width,
            c_out,
            &patches,
            false,
            self.value(w),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[x, w]);
        self.push(
            "conv1d",
            vec![batch, steps, c_out],
            out,
            Op::Conv1d {
                x,
                w,
                patches,
                batch,
                steps,
                c_in,
                kernel,
            },
            rg,
        )
    }

    /// Per-channel normalization of `x: [M, C]` (ε = 1e-5).
    ///
    /// With [`BnStats::Batch`] the statistics are computed over the rows whose
    /// `stat_rows` flag is set (all rows when `None`) and the running buffers
    /// are updated as `(1 - momentum) * running + momentum * batch`, using
    /// the unbiased batch variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stat_rows: Option<&[bool]>,
        stats: BnStats<'_>,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape("batch_norm", &sx, self.shape(gamma)));
        }
        let (m, c) = (sx[0], sx[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &sx, self.shape(gamma)));
        }
        if let Some(rows) = stat_rows {
            if rows.len() != m {
                return Err(Error::shape("batch_norm", &sx, &[rows.len()]));
            }
        }
        let included = |i: usize| stat_rows.is_none_or(|r| r[i]);
        let count = (0..m).filter(|&i| included(i)).count();
        let xv = self.value(x).to_vec();
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch {
                running_mean,
                running_var,
                momentum,
            } => {
                if count == 0 {
                    return Err(Error::InvalidArgument(
                        "batch_norm: no rows contribute statistics".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in (0..m).filter(|&i| included(i)) {
                    for j in 0..c {
                        mean[j] += xv[i * c + j];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= count as f64);
                for i in (0..m).filter(|&i| included(i)) {
                    for j in 0..c {
                        let d = xv[i * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                for j in 0..c {
                    running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mean[j];
                    running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var[j] * unbias;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; m * c];
        let mut out = vec![0.0; m * c];
        {
            let (gv, bv) = (self.value(gamma), self.value(beta));
            for i in 0..m {
                for j in 0..c {
                    let h = (xv[i * c + j] - mean[j]) * inv_std[j];
                    xhat[i * c + j] = h;
                    out[i * c + j] = gv[j] * h + bv[j];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "batch_norm",
            sx,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stat_rows: stat_rows.map(<[bool]>::to_vec),
                count,
                batch_stats,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Vec::new(), vec![m], Op::Mean(x), rg)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_parts("sum_axis", x, axis)?;
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push("sum_axis", shape, out, Op::SumAxis { x, outer, len, inner }, rg)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::InvalidArgument(format!("mean_axis: axis {axis} out of range")))?;
        if len == 0 {
            return Err(Error::InvalidArgument("mean over empty axis".into()));
        }
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Euclidean norm over the last axis, removing it. The gradient at the
    /// zero vector is taken as zero.
    pub fn l2_norm_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::InvalidArgument("l2_norm_last on a scalar".into()))?;
        let out = self
            .value(x)
            .chunks(d.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        self.push("l2_norm_last", s[..s.len() - 1].to_vec(), out, Op::L2NormLast(x), rg)
    }

    /// Inclusive running sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_parts("cumsum", x, axis)?;
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for k in 1..len {
                for i in 0..inner {
                    let prev = out[(o * len + k - 1) * inner + i];
                    out[(o * len + k) * inner + i] += prev;
                }
            }
        }
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("cumsum", shape, out, Op::Cumsum { x, outer, len, inner }, rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NotScalar(ln.shape.clone()));
        }
        if !ln.value[0].is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &nodes[b.0].value, true, &mut ga, 0.0);
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &nodes[a.0].value, true, g, false, &mut gb, 0.0);
                    acc(*b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::BiasAdd(x, b) => {
                acc(*x, g.to_vec());
                if wants(*b) {
                    let k = nodes[b.0].value.len();
                    let mut gb = vec![0.0; k];
                    for row in g.chunks(k.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    acc(*b, gb);
                }
            }
            Op::Concat {
                inputs,
                axis_lens,
                outer,
                inner,
            } => {
                let total: usize = axis_lens.iter().sum();
                let mut offset = 0;
                for (v, len) in inputs.iter().zip(axis_lens) {
                    if wants(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(*v, gv);
                    }
                    offset += len;
                }
            }
            Op::Select {
                x,
                outer,
                len,
                inner,
                index,
            } => {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    let base = (o * len + index) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                acc(*x, gx);
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            } => {
                let count = g.len() / (outer * inner).max(1);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    let base = (o * len + start) * inner;
                    gx[base..base + count * inner].copy_from_slice(&g[o * count * inner..(o + 1) * count * inner]);
                }
                acc(*x, gx);
            }
            Op::Permute { x, perm } => {
                acc(*x, permute_data(g, &nodes[x.0].shape, perm, true));
            }
            Op::Sigmoid(x) => acc(*x, g.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh(x) => acc(*x, g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(&nodes[x.0].value)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Abs(x) => acc(
                *x,
                g.iter()
                    .zip(&nodes[x.0].value)
                    .map(|(g, v)| {
                        if *v > 0.0 {
                            *g
                        } else if *v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..*len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..*len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let gs: f64 = (0..*len).map(|k| g[at(k)]).sum();
                        for k in 0..*len {
                            gx[at(k)] = g[at(k)] - y[at(k)].exp() * gs;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Conv1d {
                x,
                w,
                patches,
                batch,
                steps,
                c_in,
                kernel,
            } => {
                let c_out = nodes[w.0].shape[2];
                let width = kernel * c_in;
                let rows = batch * steps;
                if wants(*w) {
                    let mut gw = vec![0.0; width * c_out];
                    gemm(width, rows, c_out, patches, true, g, false, &mut gw, 0.0);
                    acc(*w, gw);
                }
                if wants(*x) {
                    let mut gp = vec![0.0; rows * width];
                    gemm(rows, c_out, width, g, false, &nodes[w.0].value, true, &mut gp, 0.0);
                    let pad = kernel / 2;
                    let mut gx = vec![0.0; batch * steps * c_in];
                    for b in 0..*batch {
                        for t in 0..*steps {
                            let row = (b * steps + t) * width;
                            for k in 0..*kernel {
                                let src = t as isize + k as isize - pad as isize;
                                if src < 0 || src >= *steps as isize {
                                    continue;
                                }
                                let to = (b * steps + src as usize) * c_in;
                                for ci in 0..*c_in {
                                    gx[to + ci] += gp[row + k * c_in + ci];
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stat_rows,
                count,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = g.len() / c.max(1);
                let gv = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let mut gg = vec![0.0; c];
                    for i in 0..m {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    acc(*gamma, gg);
                }
                if wants(*beta) {
                    let mut gb = vec![0.0; c];
                    for i in 0..m {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    acc(*beta, gb);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; m * c];
                    if *batch_stats {
                        // Sums run over every row: rows outside the statistic
                        // set still depend on the batch mean and variance.
                        let mut sum_gh = vec![0.0; c];
                        let mut sum_gh_xhat = vec![0.0; c];
                        for i in 0..m {
                            for j in 0..c {
                                let gh = g[i * c + j] * gv[j];
                                sum_gh[j] += gh;
                                sum_gh_xhat[j] += gh * xhat[i * c + j];
                            }
                        }
                        let cnt = *count as f64;
                        for i in 0..m {
                            let inside = stat_rows.as_ref().is_none_or(|r| r[i]);
                            for j in 0..c {
                                let gh = g[i * c + j] * gv[j];
                                let mut v = inv_std[j] * gh;
                                if inside {
                                    v -= inv_std[j] / cnt * (sum_gh[j] + xhat[i * c + j] * sum_gh_xhat[j]);
                                }
                                gx[i * c + j] = v;
                            }
                        }
                    } else {
                        for i in 0..m {
                            for j in 0..c {
                                gx[i * c + j] = g[i * c + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.len();
                acc(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, outer, len, inner } => {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for k in 0..*len {
                        let base = (o * len + k) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, gx);
            }
            Op::L2NormLast(x) => {
                let xv = &nodes[x.0].value;
                let d = xv.len() / node.value.len().max(1);
                let mut gx = vec![0.0; xv.len()];
                for (r, (norm, gr)) in node.value.iter().zip(g).enumerate() {
                    if *norm > 0.0 {
                        for k in 0..d {
                            gx[r * d + k] = gr * xv[r * d + k] / norm;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Cumsum { x, outer, len, inner } => {
                let mut gx = g.to_vec();
                for o in 0..*outer {
                    for k in (0..len.saturating_sub(1)).rev() {
                        for i in 0..*inner {
                            let next = gx[(o * len + k + 1) * inner + i];
                            gx[(o * len + k) * inner + i] += next;
                        }
                    }
                }
                acc(*x, gx);
            }
        }
    }
}
