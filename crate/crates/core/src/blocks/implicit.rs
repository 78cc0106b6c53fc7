//! Implicit outputs `Y = Phi(Y; X, U)`: Picard iteration forward, implicit
//! function theorem backward.

use nalgebra::DMatrix;

use super::{Env, PhiFn, SignalSpec};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub value: Vec<f64>,
    pub iterations: usize,
    /// `max |Y - Phi(Y)|` at `value`.
    pub residual: f64,
}

/// Picard iteration `Y <- Phi(Y)` until `max |Y - Phi(Y)| <= tol`.
pub fn fixed_point_solve<F>(phi: F, init: &[f64], tol: f64, max_iter: usize) -> Result<FixedPoint>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config(format!("fixed-point tolerance must be positive, got {tol}")));
    }
    let mut y = init.to_vec();
    let mut residual = f64::INFINITY;
    for it in 0..=max_iter {
        let next = match phi(&y) {
            Err(Error::NonFiniteValue { .. }) => break,
            r => r?,
        };
        if next.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "fixed_point",
                detail: format!("Phi returned {} values for {}", next.len(), y.len()),
            });
        }
        residual = y
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(FixedPoint {
                value: y,
                iterations: it,
                residual,
            });
        }
        y = next;
    }
    Err(Error::ImplicitSolveDiverged {
        iterations: max_iter,
        residual,
    })
}

fn output_shapes(specs: &[SignalSpec], batch: Option<usize>) -> Vec<Vec<usize>> {
    specs
        .iter()
        .map(|s| match batch {
            Some(b) => vec![b, s.dim],
            None => vec![s.dim],
        })
        .collect()
}

fn env_ids(env: &Env) -> Vec<NodeId> {
    env.x.iter().chain(env.u).chain(env.p).copied().collect()
}

/// Records `env` values and `y` on a scratch tape and applies `phi`,
/// returning the flattened concatenation of its outputs.
fn scratch_phi(
    scratch: &mut Tape,
    phi: &PhiFn,
    shapes: &[Vec<usize>],
    env: &Env,
    env_vals: &[Tensor],
    y: &[f64],
    leaves: bool,
) -> Result<(Vec<NodeId>, Vec<NodeId>, NodeId)> {
    let mk = |t: &mut Tape, v: Tensor| if leaves { t.leaf(v) } else { t.constant(v) };
    let mut ys = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        ys.push(mk(scratch, Tensor::from_raw(s.clone(), y[off..off + n].to_vec())));
        off += n;
    }
    let ids: Vec<NodeId> = env_vals.iter().map(|v| mk(scratch, v.clone())).collect();
    let (nx, nu) = (env.x.len(), env.u.len());
    let senv = Env {
        t: env.t,
        x: &ids[..nx],
        u: &ids[nx..nx + nu],
        p: &ids[nx + nu..],
        batch: env.batch,
    };
    let outs = phi(scratch, &ys, &senv)?;
    if outs.len() != shapes.len() {
        return Err(Error::ShapeMismatch {
            op: "implicit_output",
            detail: format!("Phi returned {} signals for {}", outs.len(), shapes.len()),
        });
    }
    let mut flat = Vec::with_capacity(outs.len());
    for (o, s) in outs.iter().zip(shapes) {
        if scratch.value(*o).shape() != s.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "implicit_output",
                detail: format!("Phi output {:?}, expected {s:?}", scratch.value(*o).shape()),
            });
        }
        let n = s.iter().product();
        flat.push(scratch.reshape(*o, vec![n])?);
    }
    let cat = if flat.len() == 1 { flat[0] } else { scratch.concat(&flat, 0)? };
    Ok((ys, ids, cat))
}

/// Jacobians `dY*/d(env node)` from `(I - dPhi/dY) J = dPhi/d(env node)`,
/// one dense `[n, numel]` matrix per node of `x ++ u ++ p`.
pub fn implicit_sensitivity(
    tape: &Tape,
    phi: &PhiFn,
    specs: &[SignalSpec],
    env: &Env,
    y_star: &[f64],
) -> Result<Vec<Tensor>> {
    let shapes = output_shapes(specs, env.batch);
    let env_vals: Vec<Tensor> = env_ids(env).iter().map(|i| tape.value(*i).clone()).collect();
    let mut scratch = Tape::new();
    let (ys, ids, cat) = scratch_phi(&mut scratch, phi, &shapes, env, &env_vals, y_star, true)?;
    let n = y_star.len();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut rhs: Vec<DMatrix<f64>> = env_vals.iter().map(|v| DMatrix::zeros(n, v.numel())).collect();
    for r in 0..n {
        let mut seed = vec![0.0; n];
        seed[r] = 1.0;
        let g = scratch.vjp(cat, Tensor::from_raw(vec![n], seed))?;
        let mut col = 0;
        for y in &ys {
            if let Some(gy) = g.get(*y) {
                for (c, v) in gy.data().iter().enumerate() {
                    a[(r, col + c)] -= v;
                }
            }
            col += scratch.value(*y).numel();
        }
        for (j, id) in ids.iter().enumerate() {
            if let Some(gj) = g.get(*id) {
                for (c, v) in gj.data().iter().enumerate() {
                    rhs[j][(r, c)] = *v;
                }
            }
        }
    }
    let lu = a.lu();
    if !lu.is_invertible() {
        return Err(Error::SingularJacobian);
    }
    rhs.iter()
        .zip(&env_vals)
        .map(|(b, v)| {
            let mut out = Vec::with_capacity(n * v.numel());
            let sol = if b.ncols() == 0 {
                DMatrix::zeros(n, 0)
            } else {
                lu.solve(b).ok_or(Error::SingularJacobian)?
            };
            for r in 0..n {
                for c in 0..v.numel() {
                    out.push(sol[(r, c)]);
                }
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::SingularJacobian);
            }
            Ok(Tensor::from_raw(vec![n, v.numel()], out))
        })
        .collect()
}

/// Solves `Y = Phi(Y)` from zero and records `Y*` as one linearised node whose
/// backward rule is the implicit-function-theorem Jacobian.
pub fn implicit_output(
    tape: &mut Tape,
    phi: &PhiFn,
    specs: &[SignalSpec],
    env: &Env,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<NodeId>> {
    let shapes = output_shapes(specs, env.batch);
    let inputs = env_ids(env);
    let env_vals: Vec<Tensor> = inputs.iter().map(|i| tape.value(*i).clone()).collect();
    let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let solved = fixed_point_solve(
        |y| {
            let mut scratch = Tape::new();
            let (_, _, cat) = scratch_phi(&mut scratch, phi, &shapes, env, &env_vals, y, false)?;
            Ok(scratch.value(cat).data().to_vec())
        },
        &vec![0.0; n],
        tol,
        max_iter,
    )?;
    let jac = implicit_sensitivity(tape, phi, specs, env, &solved.value)?;
    let flat = tape.linearized(Tensor::from_raw(vec![n], solved.value), &inputs, jac)?;
    let mut outs = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        let len: usize = s.iter().product();
        let piece = if len == n { flat } else { tape.slice(flat, 0, off, len)? };
        outs.push(tape.reshape(piece, s)?);
        off += len;
    }
    Ok(outs)
}
