use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Adam, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named tensors in canonical (sorted) order, optionally frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    frozen: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors,
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Hex SHA-256 over names, dims and little-endian data in canonical order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Puts every tensor on the tape: trainable leaves unless frozen, constants otherwise.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_as(tape, !self.frozen)
    }

    /// Binds every tensor as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        self.bind_as(tape, false)
    }

    fn bind_as(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound {
            vars,
            frozen: self.frozen,
        }
    }

    /// One Adam step on every tensor from the gradients of its bound variable.
    ///
    /// Refuses frozen sets. Tensors that received no gradient are left alone.
    pub fn apply_adam(
        &mut self,
        bound: &Bound,
        grads: &mut Gradients,
        adam: &mut Adam,
        lr: f32,
    ) -> Result<()> {
        if self.frozen {
            let first = self.tensors.keys().next().cloned().unwrap_or_default();
            return Err(Error::Frozen(first));
        }
        for (name, t) in self.tensors.iter_mut() {
            let var = bound.var(name)?;
            if let Some(g) = grads.take(var) {
                if !g.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for {name}")));
                }
                adam.update(name, t, &g, lr)?;
            }
        }
        Ok(())
    }
}

/// Tape variables of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter {name} is not bound")))
    }

    /// Points `name` at another variable, e.g. to differentiate with respect
    /// to a parameter supplied by a test harness.
    pub(crate) fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(())
            }
            None => Err(Error::Usage(format!("parameter {name} is not bound"))),
        }
    }

    /// Fails if any frozen variable picked up a gradient.
    pub fn check_no_grad(&self, grads: &Gradients) -> Result<()> {
        if !self.frozen {
            return Ok(());
        }
        for (name, &v) in &self.vars {
            if grads.get(v).is_some() {
                return Err(Error::Frozen(name.clone()));
            }
        }
        Ok(())
    }
}

/// He-normal `[cout, cin, k, k]` weights scaled by `gain`, plus zero bias.
pub(crate) fn conv_init(
    rng: &mut impl Rng,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f32,
) -> (Tensor, Tensor) {
    let fan_in = (cin * k * k) as f32;
    let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
    let w = Tensor::from_fn([cout, cin, k, k], |_| normal.sample(rng));
    (w, Tensor::zeros([cout]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;

    fn set() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::full([2], 1.0)).unwrap();
        p.insert("a", Tensor::full([1, 3], 2.0)).unwrap();
        p
    }

    #[test]
    fn checksum_tracks_bytes() {
        let p = set();
        assert_eq!(p.checksum().len(), 64);
        assert_eq!(p.checksum(), set().checksum());
        let mut q = ParamSet::new();
        q.insert("a", Tensor::full([1, 3], 2.0)).unwrap();
        q.insert("b", Tensor::full([2], 1.0 + f32::EPSILON))
            .unwrap();
        assert_ne!(p.checksum(), q.checksum());
        assert!(p.clone().insert("a", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn frozen_set_binds_constants_and_refuses_updates() {
        let mut p = set();
        p.freeze();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let a = bound.var("a").unwrap();
        assert!(!tape.requires_grad(a));
        let s = tape.sum(a);
        let mut grads = tape.backward(s).unwrap();
        bound.check_no_grad(&grads).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            p.apply_adam(&bound, &mut grads, &mut adam, 0.1),
            Err(Error::Frozen(_))
        ));
    }

    #[test]
    fn trainable_set_moves() {
        let mut p = set();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let s = tape.sum(bound.var("a").unwrap());
        let mut grads = tape.backward(s).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        p.apply_adam(&bound, &mut grads, &mut adam, 0.1).unwrap();
        assert!(p
            .get("a")
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.9).abs() < 1e-6));
        assert_eq!(p.get("b").unwrap().data(), &[1.0, 1.0]);
    }
}
