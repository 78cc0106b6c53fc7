use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{affine, check_dims, check_input, checkpoint_of, uniform_weight, Activation, Checkpoint, Module};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Affine layers with a shared hidden activation. With `bound = (lo, hi)`
/// the output is `lo + (hi - lo) * sigmoid(pre)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub bound: Option<(f64, f64)>,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(dims: &[usize], hidden: Activation, bound: Option<(f64, f64)>, seed: u64) -> Result<Self> {
        check_dims(dims)?;
        if let Some((lo, hi)) = bound {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("output bounds [{lo}, {hi}] must be finite and ordered")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = dims
            .windows(2)
            .flat_map(|w| [uniform_weight(&mut rng, w[1], w[0]), Tensor::zeros(&[w[1]])])
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            bound,
            params,
        })
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(mut self) -> Self {
        for p in &mut self.params {
            *p = Tensor::zeros(p.shape());
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("checked at construction")
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let arch = json!({ "dims": self.dims, "hidden": self.hidden, "bound": self.bound });
        checkpoint_of("mlp", arch, self)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let dims: Vec<usize> = serde_json::from_value(c.arch["dims"].clone())?;
        let hidden: Activation = serde_json::from_value(c.arch["hidden"].clone())?;
        let bound: Option<(f64, f64)> = serde_json::from_value(c.arch["bound"].clone())?;
        let mut m = Self::new(&dims, hidden, bound, 0)?;
        c.restore(&mut m)?;
        Ok(m)
    }
}

impl Module for Mlp {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dims.len() - 1)
            .flat_map(|l| [format!("W{l}"), format!("b{l}")])
            .collect()
    }

    fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        check_input(tape, x, self.input_dim(), "mlp input")?;
        let layers = self.dims.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = affine(tape, params[2 * l], params[2 * l + 1], h)?;
            if l + 1 < layers {
                h = self.hidden.apply(tape, h)?;
            }
        }
        match self.bound {
            None => Ok(h),
            Some((lo, hi)) => {
                let s = tape.sigmoid(h)?;
                let s = tape.scale(s, hi - lo)?;
                tape.add_scalar(s, lo)
            }
        }
    }
}
