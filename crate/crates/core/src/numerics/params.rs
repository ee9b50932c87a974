use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Named learnable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
    frozen: bool,
}

/// Tape handles for every tensor of a [`ParameterSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Merges handles from another set; names must not collide.
    pub fn extend(&mut self, other: Bound) -> Result<()> {
        for (k, v) in other.vars {
            if self.vars.insert(k.clone(), v).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate bound parameter `{k}`")));
            }
        }
        Ok(())
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Mutable access for initialization and checkpoint loading; bypasses the
    /// freezing flag, which only governs optimizer updates.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Moves every tensor of `other` into this set; names must not collide.
    pub fn absorb(&mut self, other: ParameterSet) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// Copy of the tensors named `{prefix}/...`.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        let head = format!("{prefix}/");
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(&head))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
            frozen: false,
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Puts every tensor on the tape: gradient-tracked leaves when the set is
    /// trainable, constants when frozen.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if self.frozen { tape.constant(t)? } else { tape.leaf(t)? };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Adds the tape gradients of every bound tensor into its accumulator.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &Bound) {
        for (name, t) in &mut self.tensors {
            let Some(var) = bound.vars.get(name) else { continue };
            let Some(g) = grads.get(*var) else { continue };
            if let Some(acc) = t.grad_mut() {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .values()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in self.tensors.values_mut() {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        digest_tensors(self.tensors.iter())
    }
}

pub(crate) fn digest_tensors<'a>(items: impl Iterator<Item = (&'a String, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Non-learnable state such as batch-normalization running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferSet {
    tensors: BTreeMap<String, Tensor>,
}

impl BufferSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Two distinct entries borrowed mutably at once.
    pub fn get_pair_mut(&mut self, a: &str, b: &str) -> Result<(&mut Tensor, &mut Tensor)> {
        if a == b {
            return Err(Error::InvalidArgument(format!("buffer `{a}` requested twice")));
        }
        let mut first = None;
        let mut second = None;
        for (k, v) in self.tensors.iter_mut() {
            if k == a {
                first = Some(v);
            } else if k == b {
                second = Some(v);
            }
        }
        match (first, second) {
            (Some(x), Some(y)) => Ok((x, y)),
            (None, _) => Err(Error::UnknownParameter(a.to_string())),
            (_, None) => Err(Error::UnknownParameter(b.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn digest(&self) -> String {
        digest_tensors(self.tensors.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut ps = ParameterSet::new();
        ps.insert("b", Tensor::zeros(&[1])).unwrap();
        ps.insert("a", Tensor::zeros(&[1])).unwrap();
        ps.insert("c/x", Tensor::zeros(&[1])).unwrap();
        let names: Vec<_> = ps.names().cloned().collect();
        assert_eq!(names, ["a", "b", "c/x"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(ps.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn count_is_unchanged_by_freezing() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::zeros(&[4, 8])).unwrap();
        ps.insert("b", Tensor::zeros(&[8])).unwrap();
        let before = ps.count();
        ps.freeze();
        assert_eq!(before, ps.count());
        assert_eq!(before, 40);
    }

    #[test]
    fn frozen_bind_produces_constants() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(&[2], 1.0)).unwrap();
        ps.freeze();
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape).unwrap();
        assert!(!tape.requires_grad(b.get("w").unwrap()));
    }

    #[test]
    fn digest_detects_single_bit_change() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::full(&[3], 0.25)).unwrap();
        let d0 = ps.digest();
        let v = &mut ps.get_mut("w").unwrap().data_mut()[1];
        *v = f64::from_bits(v.to_bits() ^ 1);
        assert_ne!(d0, ps.digest());
    }
}
