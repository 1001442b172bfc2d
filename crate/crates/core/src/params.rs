//! Named trainable tensors and dense gradient buffers aligned with them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.requires_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform(-bound, bound) initialisation.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("uniform init shape"))
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Writes `grads` into each tensor's gradient slot, replacing what was there.
    pub fn load_grads(&mut self, grads: &ParamGrads) -> Result<()> {
        if grads.bufs.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "gradient buffer has {} entries, store has {}",
                grads.bufs.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(&grads.bufs) {
            t.zero_grad();
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let tensors = tensors.into_iter().map(Tensor::requires_grad).collect();
        ParamStore { names, tensors }
    }
}

/// Dense gradient buffers, one per parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    bufs: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            bufs: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub(crate) fn add_into(&mut self, id: ParamId, g: &[f64]) {
        self.bufs[id.0]
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += b);
    }

    /// Elementwise `self += other`.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|v| v.is_finite())
    }
}
