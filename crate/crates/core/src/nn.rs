//! Named parameter storage and the two layer shapes the model is built from.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named model parameters. Insertion order is the canonical order
/// used for optimizer state and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the one at the same position in `other`,
    /// requiring matching names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Validation(format!("expected {} parameters, got {}", self.len(), other.len())));
        }
        for i in 0..self.len() {
            if self.names[i] != other.names[i] || self.tensors[i].shape() != other.tensors[i].shape() {
                return Err(Error::Validation(format!(
                    "parameter {i}: expected {} {:?}, got {} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    other.names[i],
                    other.tensors[i].shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Registers every parameter as a leaf on `tape`; `trainable` selects
    /// whether they receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound(vars)
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl From<Vec<Var>> for Bound {
    fn from(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Glorot-uniform `fan_in x fan_out` matrix.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(alloc::vec![fan_in, fan_out], data).expect("positive fans")
}

/// `x · W (+ b)` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, d_in, d_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, d_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Stack of biased linear layers with ReLU between (not after) them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }
}
