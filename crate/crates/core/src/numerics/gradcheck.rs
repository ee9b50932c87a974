//! Central finite-difference gradient checking.
//!
//! The checked function maps input tensors to any output tensor; the output is
//! projected onto fixed pseudo-random weights so every output element
//! contributes to the scalar whose gradient is compared.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative errors are measured against `max(|a|, |n|, REL_FLOOR)` so
/// gradients that are zero up to rounding do not produce spurious failures.
pub const REL_FLOOR: f64 = 1e-3;

fn projected(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant_from(tape.shape(out).to_vec(), weights.to_vec())?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn evaluate<F>(inputs: &[Tensor], f: &F, weights: &mut Option<Vec<f64>>, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let w = weights.get_or_insert_with(|| {
        let mut rng = Rng::new(seed);
        (0..tape.value(out).len())
            .map(|_| rng.uniform_range(0.5, 1.5))
            .collect()
    });
    let loss = projected(&mut tape, out, w)?;
    Ok(tape.value(loss)[0])
}

/// Compares tape gradients of every input against central differences with
/// step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    evaluate(inputs, &f, &mut weights, seed)?;

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let loss = projected(&mut tape, out, weights.as_ref().expect("set by first evaluation"))?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fp = evaluate(&plus, &f, &mut weights, seed)?;
            let fm = evaluate(&minus, &f, &mut weights, seed)?;
            let numeric = (fp - fm) / (2.0 * h);
            let abs = (analytic[i] - numeric).abs();
            if !abs.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
