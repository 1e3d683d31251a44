//! Parameter storage and the small layer vocabulary shared by the model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Free-standing weights for one affine map, `in x out` plus `out` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros([inputs, outputs]),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub(crate) fn constants(&self, tape: &mut Tape) -> (Var, Var) {
        (
            tape.constant(self.weight.clone()),
            tape.constant(self.bias.clone()),
        )
    }

    /// `x W + b` for a single row.
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let n = self.bias.len();
        let w = self.weight.data();
        let mut out = vec![0.0; n];
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..n {
                out[j] += xi * w[i * n + j];
            }
        }
        out.iter_mut().zip(self.bias.data()).for_each(|(o, b)| *o += b);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Named trainable tensors, addressed by [`ParamId`] in insertion order.
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Records every parameter as a constant (no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }
}

/// Tape handles for a whole [`ParamStore`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Affine layer stored in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(inputs)`, bias zero.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new([inputs, outputs], w).expect("shape"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([outputs]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn to_dense(&self, store: &ParamStore) -> Dense {
        Dense {
            weight: store.get(self.weight).clone(),
            bias: store.get(self.bias).clone(),
        }
    }

    pub fn inputs(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn outputs(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    /// Plain `x W + b` on row-major rows, off the tape.
    pub fn apply_rows(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut out = crate::tensor::matmul_nn(x, w.data(), x.len() / k, k, n);
        let b = store.get(self.bias).data();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}
