//! Learnable components: a bounded MLP policy, an input-convex network with
//! a positive-definite Lyapunov wrapper, and a stable-by-construction linear
//! operator.

mod icnn;
mod mlp;
mod stable;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub use icnn::{Icnn, PdLyapunov, DEFAULT_DELTA};
pub use mlp::Mlp;
pub use stable::{eigenvalues, householder_orthogonal, spectral_radius, StableLinear, DEFAULT_SIGMA_BOUNDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softplus,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// A parameterised map whose parameters live outside the tape, so blocks
/// and optimisers can bind them as leaves or constants.
pub trait Module {
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut Vec<Tensor>;
    fn param_names(&self) -> Vec<String>;
    /// `x` is `[in]` or `[B, in]`.
    fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId>;

    /// Forward pass on plain values.
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p: Vec<NodeId> = self.params().iter().map(|t| tape.constant(t.clone())).collect();
        let xi = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xi)?;
        Ok(tape.value(y).clone())
    }
}

/// `W x + b` for `x` of shape `[in]` or `[B, in]`, with `W: [out, in]`.
pub fn affine(tape: &mut Tape, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
    if tape.value(x).rank() == 1 {
        let y = tape.matmul(w, x)?;
        return tape.add(y, b);
    }
    let y = linear_rows(tape, w, x)?;
    let rows = tape.value(x).shape()[0];
    let out = tape.value(b).numel();
    let ones = tape.constant(Tensor::ones(&[rows, 1]));
    let brow = tape.reshape(b, vec![1, out])?;
    let bias = tape.matmul(ones, brow)?;
    tape.add(y, bias)
}

/// `W x` applied row-wise: `[in] -> [out]`, `[B, in] -> [B, out]`.
pub fn linear_rows(tape: &mut Tape, w: NodeId, x: NodeId) -> Result<NodeId> {
    if tape.value(x).rank() == 1 {
        return tape.matmul(w, x);
    }
    let wt = tape.transpose(w)?;
    tape.matmul(x, wt)
}

pub(crate) fn check_input(tape: &Tape, x: NodeId, want: usize, what: &str) -> Result<()> {
    let v = tape.value(x);
    if v.rank() == 0 || v.rank() > 2 || v.last_dim() != want {
        return Err(Error::DimMismatch {
            from: format!("input {:?}", v.shape()),
            to: what.to_string(),
            from_dim: v.last_dim(),
            to_dim: want,
        });
    }
    Ok(())
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::LayerDims(format!("{dims:?}: need at least two positive sizes")));
    }
    Ok(())
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn uniform_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = 1.0 / (cols as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

/// A serialisable snapshot of a module's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub arch: serde_json::Value,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Copies the stored tensors into `m` after checking names and shapes.
    pub fn restore<M: Module>(&self, m: &mut M) -> Result<()> {
        if self.names != m.param_names() {
            return Err(Error::Config(format!(
                "checkpoint parameters {:?} do not match {:?}",
                self.names,
                m.param_names()
            )));
        }
        for (dst, src) in m.params_mut().iter_mut().zip(&self.params) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "checkpoint shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn checkpoint_of<M: Module>(kind: &str, arch: serde_json::Value, m: &M) -> Checkpoint {
    Checkpoint {
        kind: kind.to_string(),
        arch,
        names: m.param_names(),
        params: m.params().to_vec(),
    }
}
