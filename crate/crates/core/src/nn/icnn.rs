use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{affine, check_dims, check_input, checkpoint_of, linear_rows, uniform_weight, Checkpoint, Module};
use crate::error::{Error, Result};
use crate::tape::{ops::softplus, NodeId, Tape};
use crate::tensor::Tensor;

/// Weight of the quadratic term in the Lyapunov wrapper.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// Input-convex network with softplus activations:
/// `z_0 = sp(Wx_0 x + b_0)`, `z_{l+1} = sp(sp(Wz_l) z_l + Wx_l x + b_l)`,
/// and a final affine layer of the same form without activation. Latent
/// weights are stored unconstrained and made nonnegative through softplus.
#[derive(Clone, Debug)]
pub struct Icnn {
    /// `[in, h_1, ..., h_L, 1]`.
    pub dims: Vec<usize>,
    params: Vec<Tensor>,
}

impl Icnn {
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        if dims.len() < 3 || *dims.last().expect("nonempty") != 1 {
            return Err(Error::LayerDims(format!("{dims:?}: need a hidden layer and a scalar output")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nin = dims[0];
        let mut params = vec![uniform_weight(&mut rng, dims[1], nin), Tensor::zeros(&[dims[1]])];
        for w in dims[1..].windows(2) {
            params.push(uniform_weight(&mut rng, w[1], w[0]));
            params.push(uniform_weight(&mut rng, w[1], nin));
            params.push(Tensor::zeros(&[w[1]]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn checkpoint(&self) -> Checkpoint {
        checkpoint_of("icnn", json!({ "dims": self.dims }), self)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let dims: Vec<usize> = serde_json::from_value(c.arch["dims"].clone())?;
        let mut m = Self::new(&dims, 0)?;
        c.restore(&mut m)?;
        Ok(m)
    }
}

impl Module for Icnn {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["Wx0".to_string(), "b0".to_string()];
        for l in 1..self.dims.len() - 1 {
            names.extend([format!("Wz{l}"), format!("Wx{l}"), format!("b{l}")]);
        }
        names
    }

    /// Returns `[1]` or `[B, 1]`.
    fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        check_input(tape, x, self.input_dim(), "icnn input")?;
        let pre = affine(tape, params[0], params[1], x)?;
        let mut z = tape.softplus(pre)?;
        let layers = self.dims.len() - 2;
        for l in 0..layers {
            let p = &params[2 + 3 * l..5 + 3 * l];
            let wz = tape.softplus(p[0])?;
            let lat = linear_rows(tape, wz, z)?;
            let direct = affine(tape, p[1], p[2], x)?;
            let s = tape.add(lat, direct)?;
            z = if l + 1 < layers { tape.softplus(s)? } else { s };
        }
        Ok(z)
    }
}

/// `V(x) = softplus(h(x)) - softplus(0) + delta * |x|^2` with the
/// symmetrised convex offset `h(x) = g(x) + g(-x) - 2 g(0) >= 0`. Hence
/// `V(0) = 0` exactly and `V(x) >= delta * |x|^2`.
#[derive(Clone, Debug)]
pub struct PdLyapunov {
    pub inner: Icnn,
    pub delta: f64,
}

impl PdLyapunov {
    pub fn new(inner: Icnn, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {delta}")));
        }
        Ok(Self { inner, delta })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.inner.checkpoint();
        c.kind = "pd-lyapunov".into();
        c.arch["delta"] = json!(self.delta);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let delta = c.arch["delta"].as_f64().unwrap_or(DEFAULT_DELTA);
        Self::new(Icnn::from_checkpoint(c)?, delta)
    }
}

impl Module for PdLyapunov {
    fn params(&self) -> &[Tensor] {
        self.inner.params()
    }

    fn params_mut(&mut self) -> &mut Vec<Tensor> {
        self.inner.params_mut()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    /// Returns `[1]` or `[B, 1]`.
    fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        check_input(tape, x, self.inner.input_dim(), "lyapunov input")?;
        let shape = tape.value(x).shape().to_vec();
        let neg = tape.neg(x)?;
        let zero = tape.constant(Tensor::zeros(&shape));
        let gp = self.inner.forward(tape, params, x)?;
        let gm = self.inner.forward(tape, params, neg)?;
        let g0 = self.inner.forward(tape, params, zero)?;
        let s = tape.add(gp, gm)?;
        let g02 = tape.scale(g0, 2.0)?;
        let h = tape.sub(s, g02)?;
        let sp = tape.softplus(h)?;
        let v = tape.add_scalar(sp, -softplus(0.0))?;
        let sq = tape.square(x)?;
        let q = if shape.len() == 1 {
            let s = tape.sum(sq)?;
            tape.reshape(s, vec![1])?
        } else {
            let s = tape.sum_axis(sq, 1)?;
            tape.reshape(s, vec![shape[0], 1])?
        };
        let q = tape.scale(q, self.delta)?;
        tape.add(v, q)
    }
}
