//! Flat registry of named parameter tensors with paired gradients.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.tensors.push(Tensor { name: name.into(), value, grad });
        ParamId(self.tensors.len() - 1)
    }

    /// Fan-in-scaled uniform init for affine and convolution weights.
    pub fn add_fan_in(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut value = ArrayD::zeros(IxDyn(shape));
        for v in value.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        self.add(name, value)
    }

    /// Small-uniform init used for the embedding tables.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let mut value = ArrayD::zeros(IxDyn(shape));
        for v in value.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id.0].grad
    }

    /// Value and gradient of one tensor at once (disjoint borrows).
    pub fn pair_mut(&mut self, id: ParamId) -> (&ArrayD<f64>, &mut ArrayD<f64>) {
        let t = &mut self.tensors[id.0];
        (&t.value, &mut t.grad)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.tensors.iter_mut().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }
}
