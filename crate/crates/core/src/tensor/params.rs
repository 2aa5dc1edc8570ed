use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

/// Owned, ordered collection of a model's parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        if flat.len() != self.num_scalars() {
            return Err(super::shape_err(
                "unflatten",
                format!("expected {} values, got {}", self.num_scalars(), flat.len()),
            ));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copies values from a store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        if other.params.len() != self.params.len()
            || other
                .params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.value.shape() != b.value.shape())
        {
            return Err(super::shape_err("copy_from", "parameter layouts differ"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` for parameters the loss
/// did not touch.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Flattened gradient in store order, zeros for untouched parameters.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for (i, p) in store.iter().enumerate() {
            match self.grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(p.value.numel())),
            }
        }
        out
    }
}
