//! Residual contracts: differentiable maps over an execution whose
//! non-positivity certifies a guarantee.

use std::fmt;
use std::sync::Arc;

use serde_json::{Map, Value};

use super::report::{ContractLevel, ContractReport, Location, SATISFACTION_TOL};
use crate::blocks::{BlockDef, Execution};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::time::Time;

/// Where a signal of the contract's home block lives in the block it is
/// currently attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PortRef {
    State(usize),
    Input(usize),
    Output(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PortMap {
    pub states: Vec<PortRef>,
    pub inputs: Vec<PortRef>,
    pub outputs: Vec<PortRef>,
    pub params: Vec<usize>,
}

impl PortMap {
    pub fn identity(states: usize, inputs: usize, outputs: usize, params: usize) -> Self {
        Self {
            states: (0..states).map(PortRef::State).collect(),
            inputs: (0..inputs).map(PortRef::Input).collect(),
            outputs: (0..outputs).map(PortRef::Output).collect(),
            params: (0..params).collect(),
        }
    }

    pub fn for_block(b: &BlockDef) -> Self {
        Self::identity(b.states.len(), b.inputs.len(), b.outputs.len(), b.params.len())
    }

    /// Rewrites every reference through `f` and shifts parameter indices.
    pub fn remap(&self, f: impl Fn(PortRef) -> PortRef, param_offset: usize) -> Self {
        Self {
            states: self.states.iter().map(|r| f(*r)).collect(),
            inputs: self.inputs.iter().map(|r| f(*r)).collect(),
            outputs: self.outputs.iter().map(|r| f(*r)).collect(),
            params: self.params.iter().map(|p| p + param_offset).collect(),
        }
    }
}

/// The contract's view of an execution, in its home block's indexing.
pub struct SignalView<'a> {
    exec: &'a Execution,
    map: &'a PortMap,
}

impl<'a> SignalView<'a> {
    pub fn new(exec: &'a Execution, map: &'a PortMap) -> Self {
        Self { exec, map }
    }

    pub fn len(&self) -> usize {
        self.exec.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exec.grid.is_empty()
    }

    pub fn times(&self) -> &[Time] {
        &self.exec.grid
    }

    pub fn batch(&self) -> Option<usize> {
        self.exec.batch
    }

    fn resolve(&self, r: PortRef, k: usize) -> NodeId {
        match r {
            PortRef::State(j) => self.exec.states[k][j],
            PortRef::Input(j) => self.exec.inputs[k][j],
            PortRef::Output(j) => self.exec.outputs[k][j],
        }
    }

    pub fn state(&self, i: usize, k: usize) -> NodeId {
        self.resolve(self.map.states[i], k)
    }

    pub fn input(&self, i: usize, k: usize) -> NodeId {
        self.resolve(self.map.inputs[i], k)
    }

    pub fn output(&self, i: usize, k: usize) -> NodeId {
        self.resolve(self.map.outputs[i], k)
    }

    pub fn param(&self, i: usize) -> NodeId {
        self.exec.bindings.params[self.map.params[i]]
    }
}

/// A residual vector (rank 1) plus one location per component.
#[derive(Clone, Debug)]
pub struct ResidualOut {
    pub value: NodeId,
    pub locations: Vec<Location>,
}

pub type ResidualFn = Arc<dyn Fn(&mut Tape, &SignalView) -> Result<ResidualOut> + Send + Sync>;

#[derive(Clone)]
pub struct ResidualContract {
    pub name: String,
    pub level: ContractLevel,
    pub eval: ResidualFn,
}

impl fmt::Debug for ResidualContract {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResidualContract")
            .field("name", &self.name)
            .field("level", &self.level)
            .finish_non_exhaustive()
    }
}

impl ResidualContract {
    pub fn new<F>(name: impl Into<String>, level: ContractLevel, f: F) -> Self
    where
        F: Fn(&mut Tape, &SignalView) -> Result<ResidualOut> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            level,
            eval: Arc::new(f),
        }
    }
}

/// A residual contract attached to a block through a port map.
#[derive(Clone, Debug)]
pub struct BoundResidual {
    pub contract: ResidualContract,
    pub ports: PortMap,
}

fn check_grid(exec: &Execution) -> Result<()> {
    let n = exec.grid.len();
    for (what, len) in [("states", exec.states.len()), ("inputs", exec.inputs.len()), ("outputs", exec.outputs.len())] {
        if len != n {
            return Err(Error::GridMismatch(format!("{len} {what} rows for {n} grid instants")));
        }
    }
    if exec.grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::GridMismatch("grid is not strictly ascending".into()));
    }
    Ok(())
}

/// Evaluates one bound residual on an execution; the value is flattened to
/// rank 1.
pub fn eval_residual(tape: &mut Tape, r: &BoundResidual, exec: &Execution) -> Result<ResidualOut> {
    check_grid(exec)?;
    let view = SignalView::new(exec, &r.ports);
    let out = (r.contract.eval)(tape, &view)?;
    let n = tape.value(out.value).numel();
    if out.locations.len() != n {
        return Err(Error::ShapeMismatch {
            op: "residual",
            detail: format!("{} locations for {n} components", out.locations.len()),
        });
    }
    let value = if tape.value(out.value).rank() == 1 {
        out.value
    } else {
        tape.reshape(out.value, vec![n])?
    };
    Ok(ResidualOut {
        value,
        locations: out.locations,
    })
}

/// The block's full residual vector: the concatenation of all attached
/// residuals, in attachment order.
pub fn eval_block_residuals(tape: &mut Tape, block: &BlockDef, exec: &Execution) -> Result<Option<ResidualOut>> {
    let mut values = Vec::new();
    let mut locations = Vec::new();
    for r in &block.residuals {
        let out = eval_residual(tape, r, exec)?;
        values.push(out.value);
        locations.extend(out.locations);
    }
    Ok(match values.len() {
        0 => None,
        1 => Some(ResidualOut {
            value: values[0],
            locations,
        }),
        _ => Some(ResidualOut {
            value: tape.concat(&values, 0)?,
            locations,
        }),
    })
}

/// One report per attached residual.
pub fn check_block_contracts(tape: &mut Tape, block: &BlockDef, exec: &Execution) -> Result<Vec<ContractReport>> {
    block
        .residuals
        .iter()
        .map(|r| {
            let out = eval_residual(tape, r, exec)?;
            Ok(ContractReport::from_values(
                r.contract.name.clone(),
                r.contract.level,
                tape.value(out.value).data(),
                &out.locations,
                SATISFACTION_TOL,
            ))
        })
        .collect()
}

/// `|a - b*kappa| - (1 - eps)` with `kappa` the home block's first parameter.
pub fn stability_residual(a: f64, b: f64, eps: f64) -> ResidualContract {
    ResidualContract::new("stability", ContractLevel::Parameter, move |tape, v| {
        let kappa = v.param(0);
        let bk = tape.scale(kappa, b)?;
        let d = tape.rsub_scalar(a, bk)?;
        let d = tape.abs(d)?;
        let r = tape.add_scalar(d, -(1.0 - eps))?;
        let r = tape.reshape(r, vec![1])?;
        Ok(ResidualOut {
            value: r,
            locations: vec![Location::new("kappa", None, 0)],
        })
    })
}

/// Stacks output `i` over time: `[N+1]` for a scalar signal, `[B, N+1]`
/// for a batch.
fn stack_scalar_output(tape: &mut Tape, v: &SignalView, i: usize) -> Result<NodeId> {
    let cols: Vec<NodeId> = (0..v.len()).map(|k| v.output(i, k)).collect();
    let first = tape.value(cols[0]).clone();
    if first.last_dim() != 1 {
        return Err(Error::ShapeMismatch {
            op: "lyapunov",
            detail: format!("Lyapunov output must be scalar, got {:?}", first.shape()),
        });
    }
    tape.concat(&cols, first.rank() - 1)
}

/// `V(x_{k+1}) - V(x_k) + eps` stacked as `[N]` or `[B, N]`.
fn lyapunov_steps(tape: &mut Tape, v: &SignalView, i: usize, eps: f64) -> Result<NodeId> {
    let n = v.len();
    if n < 2 {
        return Err(Error::GridMismatch("Lyapunov residual needs at least two instants".into()));
    }
    let stacked = stack_scalar_output(tape, v, i)?;
    let axis = tape.value(stacked).rank() - 1;
    let next = tape.slice(stacked, axis, 1, n - 1)?;
    let prev = tape.slice(stacked, axis, 0, n - 1)?;
    let d = tape.sub(next, prev)?;
    tape.add_scalar(d, eps)
}

/// `max_k (V(x_{k+1}) - V(x_k) + eps)` over the output `V` (index `i`);
/// one component per batch element.
pub fn lyapunov_residual(eps: f64, i: usize) -> ResidualContract {
    ResidualContract::new("lyapunov", ContractLevel::Trajectory, move |tape, v| {
        let steps = lyapunov_steps(tape, v, i, eps)?;
        let val = tape.value(steps).clone();
        let (value, rows) = if val.rank() == 1 {
            (tape.max(steps)?, 1)
        } else {
            (tape.max_axis(steps, 1)?, val.shape()[0])
        };
        let n = val.last_dim();
        let locations = (0..rows)
            .map(|b| {
                let row = &val.data()[b * n..(b + 1) * n];
                let mut k = 0;
                for (j, x) in row.iter().enumerate() {
                    if *x > row[k] {
                        k = j;
                    }
                }
                Location::new("V", Some(k), b)
            })
            .collect();
        let value = tape.reshape(value, vec![rows])?;
        Ok(ResidualOut { value, locations })
    })
}

/// Every step `V(x_{k+1}) - V(x_k) + eps`, flattened batch-major.
pub fn lyapunov_stepwise_residual(eps: f64, i: usize) -> ResidualContract {
    ResidualContract::new("lyapunov-stepwise", ContractLevel::Trajectory, move |tape, v| {
        let steps = lyapunov_steps(tape, v, i, eps)?;
        let val = tape.value(steps);
        let n = val.last_dim();
        let rows = if val.rank() == 1 { 1 } else { val.shape()[0] };
        let locations = (0..rows)
            .flat_map(|b| (0..n).map(move |k| Location::new("V", Some(k), b)))
            .collect();
        let value = tape.reshape(steps, vec![rows * n])?;
        Ok(ResidualOut { value, locations })
    })
}

/// `|y_k| - c` for every instant and component of output `i`.
pub fn bound_residual(c: f64, i: usize) -> ResidualContract {
    ResidualContract::new("bound", ContractLevel::Trajectory, move |tape, v| {
        let mut parts = Vec::with_capacity(v.len());
        let mut locations = Vec::new();
        for k in 0..v.len() {
            let y = v.output(i, k);
            let n = tape.value(y).numel();
            let a = tape.abs(y)?;
            let r = tape.add_scalar(a, -c)?;
            parts.push(tape.reshape(r, vec![n])?);
            locations.extend((0..n).map(|j| Location::new(format!("y{i}"), Some(k), j)));
        }
        let value = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        Ok(ResidualOut { value, locations })
    })
}

fn num(params: &Map<String, Value>, key: &str, default: Option<f64>) -> Result<f64> {
    match params.get(key) {
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::Config(format!("contract parameter `{key}` must be a number"))),
        None => default.ok_or_else(|| Error::Config(format!("contract parameter `{key}` is required"))),
    }
}

/// Looks up a registered residual by name (`stability`, `lyapunov`,
/// `lyapunov-stepwise`, `bound`).
pub fn registered_residual(name: &str, params: &Map<String, Value>) -> Result<ResidualContract> {
    let output = num(params, "output", Some(0.0))? as usize;
    match name {
        "stability" => Ok(stability_residual(
            num(params, "a", None)?,
            num(params, "b", None)?,
            num(params, "eps", None)?,
        )),
        "lyapunov" => Ok(lyapunov_residual(num(params, "eps", None)?, output)),
        "lyapunov-stepwise" => Ok(lyapunov_stepwise_residual(num(params, "eps", None)?, output)),
        "bound" => Ok(bound_residual(num(params, "bound", None)?, output)),
        other => Err(Error::UnknownContract(other.to_string())),
    }
}
