//! Named parameter storage, per-pass binding onto a tape, and gradient buffers.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initial values for a parameter.
#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `(-bound, bound)`.
    Uniform(f64),
    /// Glorot uniform with the given fans.
    Glorot { fan_in: usize, fan_out: usize },
    /// He uniform for ReLU layers.
    He { fan_in: usize },
    Values(Vec<f64>),
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Ordered, named parameter tensors. Insertion order is the stable order
/// used by the optimizer and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Registers a parameter. Random inits draw from a stream keyed by
    /// `(seed, name)`, so values do not depend on registration order.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let mut uniform = |bound: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => uniform(b),
            Init::Glorot { fan_in, fan_out } => uniform((6.0 / (fan_in + fan_out) as f64).sqrt()),
            Init::He { fan_in } => uniform((6.0 / fan_in as f64).sqrt()),
            Init::Values(v) => v,
        };
        let t = Tensor::new(shape, data)?;
        let id = ParamId(self.values.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.values.push(t);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a value by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Lazily binds store parameters as leaves on one tape. Only parameters a
/// pass actually touches are copied onto the tape.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    frozen: bool,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self { tape, store, bound: RefCell::new(vec![None; store.len()]), frozen: false }
    }

    /// Binds parameters as constants, so nothing is recorded for backward.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self { frozen: true, ..Self::new(tape, store) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), !self.frozen);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Collects gradients of every bound parameter.
    pub fn grads(&self, mut grads: Gradients) -> ParamGrads {
        let bound = self.bound.borrow();
        let g = bound
            .iter()
            .map(|slot| slot.and_then(|v| grads.take(v)))
            .collect();
        ParamGrads { grads: g }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; `None` means zero.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` in store order.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (acc, g) in self.grads.iter_mut().zip(&other.grads) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                None => *acc = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }

    /// Euclidean norm over all buffers, summed in store order.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Dense gradient for a parameter (zeros when absent).
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.grads[id.0].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::new(3);
        let x1 = a.add("x", &[4], Init::Uniform(1.0)).unwrap();
        a.add("y", &[4], Init::Uniform(1.0)).unwrap();
        let mut b = ParamStore::new(3);
        b.add("y", &[4], Init::Uniform(1.0)).unwrap();
        let x2 = b.add("x", &[4], Init::Uniform(1.0)).unwrap();
        assert_eq!(a.get(x1), b.get(x2));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.add("w", &[1], Init::Zeros).unwrap();
        assert!(s.add("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn binder_collects_only_used_params() {
        let mut s = ParamStore::new(0);
        let a = s.add("a", &[2], Init::Const(2.0)).unwrap();
        let b = s.add("b", &[2], Init::Const(1.0)).unwrap();
        let tape = Tape::new();
        let binder = Binder::new(&tape, &s);
        let loss = binder.var(a).square().sum();
        let g = binder.grads(tape.backward(loss).unwrap());
        assert_eq!(g.get(a).unwrap().data(), &[4.0, 4.0]);
        assert!(g.get(b).is_none());
        assert_eq!(g.dense(&s, b), Tensor::zeros(&[2]));
    }
}
