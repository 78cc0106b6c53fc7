//! Uncontrolled Van der Pol trajectories as training data, with the
//! `traj_id,k,x1,x2` CSV format.

use std::fmt::Write as _;

use super::library::{vdp_rk4, VdpParams};
use crate::blocks::{execute_block, Bindings, InputSignal};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::time::Time;

/// Trajectories of `m` initial conditions: one `[m, 2]` tensor per step
/// `k = 0..=n_steps`, `u = 0`.
pub fn vdp_trajectories(p: VdpParams, x0: &Tensor, n_steps: usize) -> Result<Vec<Tensor>> {
    if x0.rank() != 2 || x0.shape()[1] != 2 {
        return Err(Error::InvalidSignal(format!("initial conditions must be [m, 2], got {:?}", x0.shape())));
    }
    if n_steps == 0 {
        return Ok(vec![x0.clone()]);
    }
    let m = x0.shape()[0];
    let block = vdp_rk4(p, [0.0, 0.0])?;
    let mut tape = Tape::new();
    let bind = Bindings {
        init: vec![tape.constant(x0.clone())],
        params: block.params.iter().map(|q| tape.constant(q.value.clone())).collect(),
    };
    let zero = InputSignal::Constant(Tensor::zeros(&[m, 1]));
    let tf = p.tau * Time::from_integer(n_steps as i64);
    let ex = execute_block(&mut tape, &block, &bind, &[zero], tf)?;
    Ok(ex.outputs.iter().map(|o| tape.value(o[0]).clone()).collect())
}

pub fn dataset_to_csv(traj: &[Tensor]) -> String {
    let mut s = String::from("traj_id,k,x1,x2\n");
    let m = traj.first().map_or(0, |t| t.shape()[0]);
    for i in 0..m {
        for (k, t) in traj.iter().enumerate() {
            let r = t.row(i);
            let _ = writeln!(s, "{i},{k},{:?},{:?}", r[0], r[1]);
        }
    }
    s
}

/// Parses [`dataset_to_csv`] output; every trajectory must have the same
/// length and rows must be ordered by `(traj_id, k)`.
pub fn dataset_from_csv(text: &str) -> Result<Vec<Tensor>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("traj_id,k,x1,x2") {
        return Err(Error::Parse("dataset header must be `traj_id,k,x1,x2`".into()));
    }
    let mut per: Vec<Vec<[f64; 2]>> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("dataset line {}: `{line}`", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let i: usize = f[0].trim().parse().map_err(|_| bad())?;
        let k: usize = f[1].trim().parse().map_err(|_| bad())?;
        let x1: f64 = f[2].trim().parse().map_err(|_| bad())?;
        let x2: f64 = f[3].trim().parse().map_err(|_| bad())?;
        if i == per.len() {
            per.push(Vec::new());
        }
        if i + 1 != per.len() || k != per[i].len() {
            return Err(bad());
        }
        per[i].push([x1, x2]);
    }
    let len = per.first().map_or(0, Vec::len);
    if len == 0 || per.iter().any(|t| t.len() != len) {
        return Err(Error::Parse("dataset trajectories must be nonempty and of equal length".into()));
    }
    Ok((0..len)
        .map(|k| Tensor::matrix(per.len(), 2, per.iter().flat_map(|t| t[k]).collect()))
        .collect())
}
