//! Small layer helpers shared by every network in the crate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Elu => tape.elu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Affine map over the last axis: `y = x·W + b`, `W: [in, out]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[in_dim, out_dim], std, rng), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]), false);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(x).to_vec();
        let rows = tape.value(x).numel() / self.in_dim;
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, self.in_dim])?
        };
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(flat, w)?;
        let y = tape.add_broadcast(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            tape.reshape(y, &out)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0), false);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[dim]), false);
        Self { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layernorm(x, g, b, self.eps)
    }
}

/// Stack of linear layers with an activation between consecutive layers
/// (none after the last).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`. Weights use `N(0, 1/fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = (1.0 / w[0] as f64).sqrt();
                Linear::new(store, &format!("{name}.{i}"), w[0], w[1], std, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var, TensorError> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i + 1 < n {
                x = self.activation.apply(tape, x);
            }
        }
        Ok(x)
    }

    /// Zeroes the last layer so the network initially outputs zero.
    pub fn zero_last(&self, store: &mut ParamStore) {
        if let Some(l) = self.layers.last() {
            store.get_mut(l.w).data_mut().fill(0.0);
            store.get_mut(l.b).data_mut().fill(0.0);
        }
    }
}
