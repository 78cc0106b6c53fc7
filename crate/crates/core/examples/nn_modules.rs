//! The network building blocks: a bounded MLP, a positive-definite ICNN
//! Lyapunov candidate, and a spectrally constrained linear operator.

use dcbd::nn::{spectral_radius, Activation, Icnn, Mlp, Module, PdLyapunov, StableLinear, DEFAULT_DELTA};
use dcbd::Tensor;

fn main() -> dcbd::Result<()> {
    let policy = Mlp::new(&[2, 16, 1], Activation::Tanh, Some((-5.0, 5.0)), 0)?;
    let x = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, -1.0, 50.0, 50.0]);
    println!("policy u(x) = {:?}", policy.eval(&x)?.data());

    let v = PdLyapunov::new(Icnn::new(&[2, 16, 16, 1], 1)?, DEFAULT_DELTA)?;
    println!("V(x) = {:?} (zero only at the origin)", v.eval(&x)?.data());

    let k = StableLinear::new(4, (0.05, 0.95), 2)?;
    let m = k.matrix()?;
    println!("K = {:?}", m.data());
    println!("spectral radius {:.4}", spectral_radius(&m)?);
    Ok(())
}
