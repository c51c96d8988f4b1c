use std::collections::BTreeMap;

use miga_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Named parameter tensors, ordered by path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
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

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Uniform in ±sqrt(1/fan_in).
    pub(crate) fn init_weight(&mut self, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
        self.init_uniform(rng, name, &[fan_in, fan_out], fan_in);
    }

    /// Uniform in ±sqrt(1/fan_in) for an arbitrary shape.
    pub(crate) fn init_uniform(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], fan_in: usize) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub(crate) fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub(crate) fn init_linear(&mut self, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
        self.init_weight(rng, &format!("{prefix}.W"), fan_in, fan_out);
        self.init_zeros(&format!("{prefix}.b"), &[fan_out]);
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Handle for `name`; the model always creates every parameter it reads.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("missing parameter {name}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// `x·W + b` using the parameters under `prefix`.
pub(crate) fn linear(tape: &mut Tape, p: &ParamVars, prefix: &str, x: Var) -> miga_tensor::Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.W")))?;
    tape.add(y, p.get(&format!("{prefix}.b")))
}
