use nalgebra::{DMatrix, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{check_input, checkpoint_of, linear_rows, Checkpoint, Module};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Singular value bounds `(lo, hi)` used unless configured otherwise.
pub const DEFAULT_SIGMA_BOUNDS: (f64, f64) = (0.01, 0.99);

const MIN_DIRECTION_NORM: f64 = 1e-12;

/// `Q = H_1 ... H_n` with `H_i = I - 2 v_i v_i^T / |v_i|^2`, where `v_i` is
/// row `i` of `dirs` (`[m, n]`).
pub fn householder_orthogonal(tape: &mut Tape, dirs: NodeId) -> Result<NodeId> {
    let d = tape.value(dirs).clone();
    if d.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "householder",
            detail: format!("directions must be [m, n], got {:?}", d.shape()),
        });
    }
    let (m, n) = (d.shape()[0], d.shape()[1]);
    for i in 0..m {
        if d.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() <= MIN_DIRECTION_NORM {
            return Err(Error::DegenerateDirection(i));
        }
    }
    let mut q = tape.constant(Tensor::eye(n));
    for i in 0..m {
        let row = tape.slice(dirs, 0, i, 1)?;
        let v = tape.reshape(row, vec![n])?;
        let nrm = tape.squared_norm(v)?;
        let qv = tape.matmul(q, v)?;
        let col = tape.reshape(qv, vec![n, 1])?;
        let outer = tape.matmul(col, row)?;
        let outer = tape.div(outer, nrm)?;
        let outer = tape.scale(outer, 2.0)?;
        q = tape.sub(q, outer)?;
    }
    Ok(q)
}

/// Eigenvalues `(re, im)` of a square matrix via a real Schur
/// decomposition, sorted by decreasing modulus.
pub fn eigenvalues(k: &Tensor) -> Result<Vec<(f64, f64)>> {
    let s = k.shape();
    if k.rank() != 2 || s[0] != s[1] {
        return Err(Error::ShapeMismatch {
            op: "eigenvalues",
            detail: format!("expected a square matrix, got {:?}", s),
        });
    }
    if k.max_abs() == 0.0 {
        return Ok(vec![(0.0, 0.0); s[0]]);
    }
    let m = DMatrix::from_row_slice(s[0], s[1], k.data());
    let schur = Schur::try_new(m, f64::EPSILON, 10_000).ok_or(Error::NoConvergence)?;
    let mut ev: Vec<(f64, f64)> = schur.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
    ev.sort_by(|a, b| b.0.hypot(b.1).total_cmp(&a.0.hypot(a.1)).then(b.0.total_cmp(&a.0)).then(b.1.total_cmp(&a.1)));
    Ok(ev)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(k: &Tensor) -> Result<f64> {
    Ok(eigenvalues(k)?.iter().map(|(re, im)| re.hypot(*im)).fold(0.0, f64::max))
}

/// `K = U diag(sigma) V^T` with Householder `U`, `V` and
/// `sigma_i = lo + (hi - lo) * sigmoid(s_i)`, so `|K|_2 <= hi < 1`.
#[derive(Clone, Debug)]
pub struct StableLinear {
    pub n: usize,
    pub bounds: (f64, f64),
    params: Vec<Tensor>,
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = loop {
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nrm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-3 {
                break r.into_iter().map(|x| x / nrm).collect();
            }
        };
        data.extend(row);
    }
    Tensor::matrix(n, n, data)
}

impl StableLinear {
    /// Random unit Householder directions and `s = 0`.
    pub fn new(n: usize, bounds: (f64, f64), seed: u64) -> Result<Self> {
        let (lo, hi) = bounds;
        if n == 0 {
            return Err(Error::LayerDims("stable linear map needs n > 0".into()));
        }
        if !(0.0 <= lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!("singular value bounds ({lo}, {hi}) must satisfy 0 <= lo < hi < 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_unit_rows(&mut rng, n);
        let v = random_unit_rows(&mut rng, n);
        Ok(Self {
            n,
            bounds,
            params: vec![u, v, Tensor::zeros(&[n])],
        })
    }

    /// The operator as a tape node.
    pub fn materialize(&self, tape: &mut Tape, params: &[NodeId]) -> Result<NodeId> {
        let (lo, hi) = self.bounds;
        let u = householder_orthogonal(tape, params[0])?;
        let v = householder_orthogonal(tape, params[1])?;
        let sg = tape.sigmoid(params[2])?;
        let sg = tape.scale(sg, hi - lo)?;
        let sigma = tape.add_scalar(sg, lo)?;
        let ones = tape.constant(Tensor::ones(&[self.n, 1]));
        let srow = tape.reshape(sigma, vec![1, self.n])?;
        let cols = tape.matmul(ones, srow)?;
        let us = tape.mul(u, cols)?;
        let vt = tape.transpose(v)?;
        tape.matmul(us, vt)
    }

    pub fn matrix(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p: Vec<NodeId> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        let k = self.materialize(&mut tape, &p)?;
        Ok(tape.value(k).clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        checkpoint_of("stable-linear", json!({ "n": self.n, "bounds": self.bounds }), self)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let n: usize = serde_json::from_value(c.arch["n"].clone())?;
        let bounds: (f64, f64) = serde_json::from_value(c.arch["bounds"].clone())?;
        let mut m = Self::new(n, bounds, 0)?;
        c.restore(&mut m)?;
        Ok(m)
    }
}

impl Module for StableLinear {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        vec!["U_dirs".into(), "V_dirs".into(), "s".into()]
    }

    /// `K z` for `z` of shape `[n]` or `[B, n]`.
    fn forward(&self, tape: &mut Tape, params: &[NodeId], z: NodeId) -> Result<NodeId> {
        check_input(tape, z, self.n, "stable linear input")?;
        let k = self.materialize(tape, params)?;
        linear_rows(tape, k, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::check_gradient;

    fn orth_error(q: &Tensor) -> f64 {
        let n = q.shape()[0];
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q.data()[k * n + i] * q.data()[k * n + j]).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    fn householder_value(d: Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let id = t.constant(d);
        let q = householder_orthogonal(&mut t, id)?;
        Ok(t.value(q).clone())
    }

    #[test]
    fn one_dimensional_reflection() {
        assert_eq!(householder_value(Tensor::matrix(1, 1, vec![1.0])).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn orthogonal_for_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [2, 4, 9, 32] {
            let d = Tensor::matrix(n, n, (0..n * n).map(|_| rng.gen_range(-2.0..2.0)).collect());
            assert!(orth_error(&householder_value(d).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn degenerate_direction() {
        let d = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(householder_value(d), Err(Error::DegenerateDirection(1))));
    }

    #[test]
    fn householder_gradient() {
        let d = Tensor::matrix(3, 3, vec![0.3, -1.0, 0.5, 0.9, 0.2, -0.4, 0.1, 0.7, 1.1]);
        let w = Tensor::matrix(3, 3, (0..9).map(|i| (i as f64 * 0.37).sin()).collect());
        let r = check_gradient(
            |t, ids| {
                let q = householder_orthogonal(t, ids[0])?;
                let m = t.mul(q, ids[1])?;
                t.sum(m)
            },
            &[d, w],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn half_sigmas_at_zero_preactivation() {
        let m = StableLinear::new(4, (0.0, 0.999_999), 3).unwrap();
        let k = m.matrix().unwrap();
        let kk = DMatrix::from_row_slice(4, 4, k.data());
        let sv = kk.singular_values();
        for s in sv.iter() {
            assert!((s - 0.4999995).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_negative_gives_zero() {
        let mut m = StableLinear::new(3, (0.0, 0.9), 3).unwrap();
        m.params_mut()[2] = Tensor::filled(&[3], -800.0);
        assert!(m.matrix().unwrap().max_abs() < 1e-300);
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&Tensor::matrix(2, 2, vec![0.3, 0.0, 0.0, -0.9])).unwrap() - 0.9).abs() < 1e-12);
        let th: f64 = 0.8;
        let r = Tensor::matrix(2, 2, vec![th.cos(), -th.sin(), th.sin(), th.cos()]).map(|x| 0.7 * x);
        assert!((spectral_radius(&r).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(spectral_radius(&Tensor::zeros(&[3, 3])).unwrap(), 0.0);
        let ev = eigenvalues(&r).unwrap();
        assert!((ev[0].1.abs() - 0.7 * th.sin()).abs() < 1e-12 && (ev[0].0 - 0.7 * th.cos()).abs() < 1e-12);
        assert!(matches!(spectral_radius(&Tensor::zeros(&[2, 3])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn stable_by_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..100 {
            let mut m = StableLinear::new(8, DEFAULT_SIGMA_BOUNDS, seed).unwrap();
            m.params_mut()[2] = Tensor::vector((0..8).map(|_| rng.gen_range(-10.0..10.0)).collect());
            assert!(spectral_radius(&m.matrix().unwrap()).unwrap() < DEFAULT_SIGMA_BOUNDS.1);
        }
    }
}
