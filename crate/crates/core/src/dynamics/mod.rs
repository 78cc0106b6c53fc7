//! The concrete block library: static arithmetic blocks, the scalar plant
//! and its disturbance source, the RK4-discretised Van der Pol plant, and
//! network-backed blocks, plus the JSON registry that builds diagrams.

mod data;
mod library;
mod registry;

use crate::blocks::rk4_nodes;
use crate::error::Result;
use crate::tape::{NodeId, Tape};

pub use data::{dataset_from_csv, dataset_to_csv, vdp_trajectories};
pub use library::{
    const_source, disturbance, disturbance_value, gain, icnn_lyapunov, koopman_decoder, koopman_encoder,
    koopman_operator, mlp_policy, saturate, scalar_plant, sum, vdp_rk4, ScalarPlantParams, VdpParams,
};
pub use registry::{
    build_block, load_diagram, BlockEntry, ConnectionEntry, ContractEntry, DiagramFile, InputEntry, LoadedDiagram,
    BLOCK_TYPES,
};

/// One classical RK4 step of `dx = f(x, u)` over `h`, `u` held.
pub fn rk4_step<F>(tape: &mut Tape, mut f: F, x: NodeId, u: NodeId, h: f64) -> Result<NodeId>
where
    F: FnMut(&mut Tape, NodeId, NodeId) -> Result<NodeId>,
{
    let mut field = |tape: &mut Tape, s: &[NodeId]| Ok(vec![f(tape, s[0], u)?]);
    Ok(rk4_nodes(tape, &mut field, &[x], h)?[0])
}

/// Van der Pol field `(x2, mu (1 - x1^2) x2 - x1 + u)` for `x` of shape
/// `[2]` or `[B, 2]` and `u` of shape `[1]` or `[B, 1]`; `mu` is a scalar
/// node.
pub fn vdp_rhs(tape: &mut Tape, x: NodeId, u: NodeId, mu: NodeId) -> Result<NodeId> {
    let x1 = tape.slice_last(x, 0, 1)?;
    let x2 = tape.slice_last(x, 1, 1)?;
    let sq = tape.square(x1)?;
    let damp = tape.rsub_scalar(1.0, sq)?;
    let damp = tape.mul(mu, damp)?;
    let d2 = tape.mul(damp, x2)?;
    let d2 = tape.sub(d2, x1)?;
    let d2 = tape.add(d2, u)?;
    tape.concat_last(&[x2, d2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rhs(x: [f64; 2], u: f64, mu: f64) -> Vec<f64> {
        let mut t = Tape::new();
        let xi = t.constant(Tensor::vector(x.to_vec()));
        let ui = t.constant(Tensor::vector(vec![u]));
        let m = t.scalar(mu);
        let d = vdp_rhs(&mut t, xi, ui, m).unwrap();
        t.value(d).data().to_vec()
    }

    #[test]
    fn vdp_examples() {
        assert_eq!(rhs([0.0, 0.0], 0.0, 1.0), vec![0.0, 0.0]);
        assert_eq!(rhs([1.0, 1.0], 0.0, 1.0), vec![1.0, -1.0]);
        assert_eq!(rhs([0.0, 1.0], 0.5, 2.0), vec![1.0, 2.5]);
    }

    fn rk4_exp(a: f64, h: f64) -> f64 {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0]));
        let u = t.constant(Tensor::vector(vec![0.0]));
        let y = rk4_step(&mut t, |t, x, _| t.scale(x, a), x, u, h).unwrap();
        t.value(y).item()
    }

    #[test]
    fn rk4_scalar_exponential() {
        let h: f64 = 0.1;
        let want = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((rk4_exp(1.0, h) - want).abs() < 1e-15);
        assert_eq!(rk4_exp(0.0, h), 1.0);
    }

    #[test]
    fn rk4_local_error_is_fifth_order() {
        let err = |h: f64| (rk4_exp(-1.3, h) - (-1.3 * h).exp()).abs();
        let ratio = err(0.2) / err(0.1);
        assert!((ratio - 32.0).abs() < 3.0, "{ratio}");
    }
}
