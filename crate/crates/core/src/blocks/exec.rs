use std::collections::HashMap;
use std::sync::Arc;

use num_traits::Zero;

use super::implicit::implicit_output;
use super::trajectory::{SignalSeries, Trajectory};
use super::{BlockDef, Env, MapFn, OutputMap, SignalSpec};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::time::{is_multiple, time_grid, to_f64, Time};

/// An input signal over the execution horizon.
#[derive(Clone)]
pub enum InputSignal {
    Constant(Tensor),
    /// One value per grid instant.
    Samples(Vec<Tensor>),
    Function(Arc<dyn Fn(Time) -> Tensor + Send + Sync>),
    /// One tape node per grid instant; gradients flow back into them.
    Nodes(Vec<NodeId>),
}

impl InputSignal {
    pub fn scalar(v: f64) -> Self {
        InputSignal::Constant(Tensor::vector(vec![v]))
    }

    pub fn function<F: Fn(Time) -> Tensor + Send + Sync + 'static>(f: F) -> Self {
        InputSignal::Function(Arc::new(f))
    }
}

/// Tape nodes standing for the initial states and parameters of one run.
#[derive(Clone, Debug)]
pub struct Bindings {
    pub init: Vec<NodeId>,
    pub params: Vec<NodeId>,
}

impl Bindings {
    /// Initial states and parameters as differentiable leaves.
    pub fn leaves(tape: &mut Tape, block: &BlockDef) -> Self {
        Self {
            init: block.init.iter().map(|x| tape.leaf(x.clone())).collect(),
            params: block.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Leaves with overridden initial states, e.g. a `[batch, dim]` batch.
    pub fn with_init(tape: &mut Tape, block: &BlockDef, init: &[Tensor]) -> Self {
        Self {
            init: init.iter().map(|x| tape.leaf(x.clone())).collect(),
            params: block.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Everything frozen; for plain simulation.
    pub fn constants(tape: &mut Tape, block: &BlockDef) -> Self {
        Self {
            init: block.init.iter().map(|x| tape.constant(x.clone())).collect(),
            params: block.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }
}

/// A recorded execution: per grid instant, the tape nodes of every state,
/// input and output.
#[derive(Clone, Debug)]
pub struct Execution {
    pub grid: Vec<Time>,
    pub batch: Option<usize>,
    pub states: Vec<Vec<NodeId>>,
    pub inputs: Vec<Vec<NodeId>>,
    pub outputs: Vec<Vec<NodeId>>,
    pub bindings: Bindings,
}

impl Execution {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    fn series(&self, tape: &Tape, specs: &[SignalSpec], rows: &[Vec<NodeId>]) -> Trajectory {
        let signals = specs
            .iter()
            .enumerate()
            .map(|(i, s)| SignalSeries {
                name: s.name.clone(),
                values: rows.iter().map(|r| tape.value(r[i]).clone()).collect(),
            })
            .collect();
        Trajectory {
            times: self.grid.clone(),
            signals,
        }
    }

    pub fn state_trajectory(&self, tape: &Tape, block: &BlockDef) -> Trajectory {
        self.series(tape, &block.states, &self.states)
    }

    pub fn input_trajectory(&self, tape: &Tape, block: &BlockDef) -> Trajectory {
        self.series(tape, &block.inputs, &self.inputs)
    }

    pub fn output_trajectory(&self, tape: &Tape, block: &BlockDef) -> Trajectory {
        self.series(tape, &block.outputs, &self.outputs)
    }
}

/// The block's execution grid up to `tf`.
pub fn block_grid(block: &BlockDef, tf: Time) -> Result<Vec<Time>> {
    time_grid(&block.periods, &block.steps, tf)
}

fn memo_key(ptr: usize, env: &Env) -> crate::tape::MemoKey {
    let mut ids = Vec::with_capacity(env.x.len() + env.u.len() + env.p.len());
    ids.extend_from_slice(env.x);
    ids.extend_from_slice(env.u);
    ids.extend_from_slice(env.p);
    let batch = env.batch.map_or(-1, |b| b as i64);
    (ptr, [*env.t.numer(), *env.t.denom(), batch], ids)
}

fn arc_addr<T: ?Sized>(a: &Arc<T>) -> usize {
    Arc::as_ptr(a) as *const () as usize
}

/// `Y = g(X, U)` at one instant. Evaluations are memoised on the tape, so
/// repeated calls with the same nodes share one subgraph.
pub fn eval_output(tape: &mut Tape, block: &BlockDef, env: &Env) -> Result<Vec<NodeId>> {
    let ptr = match &block.output {
        OutputMap::Explicit(f) => arc_addr(f),
        OutputMap::Implicit { phi, .. } => arc_addr(phi),
    };
    let key = memo_key(ptr, env);
    if let Some(hit) = tape.memo_get(&key) {
        return Ok(hit);
    }
    let ys = match &block.output {
        OutputMap::Explicit(f) => f(tape, env)?,
        OutputMap::Implicit { phi, tol, max_iter } => {
            implicit_output(tape, phi, &block.outputs, env, *tol, *max_iter)?
        }
    };
    if ys.len() != block.outputs.len() {
        return Err(Error::InvalidBlock(format!(
            "{}: output map returned {} signals for {} outputs",
            block.name,
            ys.len(),
            block.outputs.len()
        )));
    }
    tape.memo_put(key, ys.clone());
    Ok(ys)
}

/// One classical Runge-Kutta step over a list of state nodes.
pub fn rk4_nodes<F>(tape: &mut Tape, f: &mut F, x: &[NodeId], h: f64) -> Result<Vec<NodeId>>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<Vec<NodeId>>,
{
    let axpy = |tape: &mut Tape, x: &[NodeId], k: &[NodeId], c: f64| -> Result<Vec<NodeId>> {
        x.iter()
            .zip(k)
            .map(|(xi, ki)| {
                let s = tape.scale(*ki, c)?;
                tape.add(*xi, s)
            })
            .collect()
    };
    let k1 = f(tape, x)?;
    let x2 = axpy(tape, x, &k1, h / 2.0)?;
    let k2 = f(tape, &x2)?;
    let x3 = axpy(tape, x, &k2, h / 2.0)?;
    let k3 = f(tape, &x3)?;
    let x4 = axpy(tape, x, &k3, h)?;
    let k4 = f(tape, &x4)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let a = tape.scale(k2[i], 2.0)?;
        let b = tape.scale(k3[i], 2.0)?;
        let s = tape.add(k1[i], a)?;
        let s = tape.add(s, b)?;
        let s = tape.add(s, k4[i])?;
        let s = tape.scale(s, h / 6.0)?;
        out.push(tape.add(x[i], s)?);
    }
    Ok(out)
}

pub(crate) fn check_dim(tape: &Tape, id: NodeId, spec: &SignalSpec) -> Result<()> {
    let v = tape.value(id);
    if v.last_dim() != spec.dim || v.rank() > 2 || v.rank() == 0 {
        return Err(Error::InvalidSignal(format!(
            "`{}` expects trailing dimension {}, got shape {:?}",
            spec.name,
            spec.dim,
            v.shape()
        )));
    }
    Ok(())
}

pub(crate) fn detect_batch(tape: &Tape, ids: impl IntoIterator<Item = NodeId>) -> Option<usize> {
    ids.into_iter().find_map(|id| {
        let v = tape.value(id);
        (v.rank() == 2).then(|| v.shape()[0])
    })
}

/// Samples every input on the grid, zero-order holding discrete inputs at
/// their own period.
pub(crate) fn sample_inputs(
    tape: &mut Tape,
    block: &BlockDef,
    inputs: &[InputSignal],
    grid: &[Time],
) -> Result<Vec<Vec<NodeId>>> {
    if let Some(missing) = block.inputs.get(inputs.len()) {
        return Err(Error::MissingInput(missing.name.clone()));
    }
    let mut rows = vec![Vec::with_capacity(block.inputs.len()); grid.len()];
    for (spec, sig) in block.inputs.iter().zip(inputs) {
        for (row, id) in rows.iter_mut().zip(sample_signal(tape, spec, sig, grid)?) {
            row.push(id);
        }
    }
    Ok(rows)
}

/// One input sampled on the grid.
pub(crate) fn sample_signal(
    tape: &mut Tape,
    spec: &SignalSpec,
    sig: &InputSignal,
    grid: &[Time],
) -> Result<Vec<NodeId>> {
    let n = grid.len();
    let held = |t: Time| {
        if spec.period.is_zero() {
            t
        } else {
            (t / spec.period).floor() * spec.period
        }
    };
    let index_of = |t: Time| grid.binary_search(&held(t)).expect("held instant lies on the grid");
    let column: Vec<NodeId> = match sig {
        InputSignal::Constant(v) => {
            let id = tape.constant(v.clone());
            vec![id; n]
        }
        InputSignal::Function(f) => {
            let mut cache: HashMap<Time, NodeId> = HashMap::new();
            grid.iter()
                .map(|t| {
                    let th = held(*t);
                    *cache.entry(th).or_insert_with(|| tape.constant(f(th)))
                })
                .collect()
        }
        InputSignal::Samples(_) | InputSignal::Nodes(_) if sig_len(sig) != n => {
            return Err(Error::InvalidSignal(format!(
                "`{}` has {} samples for {} grid instants",
                spec.name,
                sig_len(sig),
                n
            )));
        }
        InputSignal::Samples(vs) => {
            let ids: Vec<NodeId> = vs.iter().map(|v| tape.constant(v.clone())).collect();
            grid.iter().map(|t| ids[index_of(*t)]).collect()
        }
        InputSignal::Nodes(ids) => grid.iter().map(|t| ids[index_of(*t)]).collect(),
    };
    check_dim(tape, column[0], spec)?;
    Ok(column)
}

fn sig_len(sig: &InputSignal) -> usize {
    match sig {
        InputSignal::Samples(v) => v.len(),
        InputSignal::Nodes(v) => v.len(),
        _ => 0,
    }
}

pub(crate) fn run_group(tape: &mut Tape, f: &MapFn, env: &Env, want: usize, block: &str) -> Result<Vec<NodeId>> {
    let out = f(tape, env)?;
    if out.len() != want {
        return Err(Error::InvalidBlock(format!(
            "{block}: transition returned {} signals for {want} states",
            out.len()
        )));
    }
    Ok(out)
}

/// Executes one block over `[0, tf]`, recording everything on `tape`.
///
/// Discrete updates computed at `k*tau` take effect at `(k+1)*tau`;
/// sample-and-hold groups take effect at `k*tau` itself. At an
/// instant shared by several rates the discrete updates land first, then
/// the continuous states are integrated with RK4 over the next grid
/// interval, inputs held constant.
pub fn execute_block(
    tape: &mut Tape,
    block: &BlockDef,
    bindings: &Bindings,
    inputs: &[InputSignal],
    tf: Time,
) -> Result<Execution> {
    if bindings.init.len() != block.states.len() || bindings.params.len() != block.params.len() {
        return Err(Error::InvalidBlock(format!(
            "{}: bindings have {} states and {} params, block has {} and {}",
            block.name,
            bindings.init.len(),
            bindings.params.len(),
            block.states.len(),
            block.params.len()
        )));
    }
    for (id, spec) in bindings.init.iter().zip(&block.states) {
        check_dim(tape, *id, spec)?;
    }
    let grid = block_grid(block, tf)?;
    let u_rows = sample_inputs(tape, block, inputs, &grid)?;
    let batch = detect_batch(
        tape,
        bindings.init.iter().copied().chain(u_rows.first().into_iter().flatten().copied()),
    );

    let discrete: Vec<usize> = (0..block.groups.len())
        .filter(|g| !block.groups[*g].period.is_zero() && !block.groups[*g].sample)
        .collect();
    let sampled: Vec<usize> = (0..block.groups.len()).filter(|g| block.groups[*g].sample).collect();
    let continuous = block.groups.iter().find(|g| g.period.is_zero());
    let mut pending: Vec<Option<(Time, Vec<NodeId>)>> = vec![None; block.groups.len()];

    let p = bindings.params.clone();
    let mut x = bindings.init.clone();
    let n = grid.len();
    let mut states = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    for k in 0..n {
        let t = grid[k];
        for &gi in &discrete {
            if matches!(&pending[gi], Some((due, _)) if *due == t) {
                let (_, vals) = pending[gi].take().expect("checked above");
                for (s, v) in block.groups[gi].states.iter().zip(vals) {
                    x[*s] = v;
                }
            }
        }
        for &gi in &sampled {
            let g = &block.groups[gi];
            if is_multiple(t, g.period) {
                let env = Env {
                    t,
                    x: &x,
                    u: &u_rows[k],
                    p: &p,
                    batch,
                };
                let vals = run_group(tape, &g.f, &env, g.states.len(), &block.name)?;
                for (s, v) in g.states.iter().zip(vals) {
                    x[*s] = v;
                }
            }
        }
        states.push(x.clone());
        let env = Env {
            t,
            x: &x,
            u: &u_rows[k],
            p: &p,
            batch,
        };
        outputs.push(eval_output(tape, block, &env)?);
        if k + 1 == n {
            break;
        }
        for &gi in &discrete {
            let g = &block.groups[gi];
            if is_multiple(t, g.period) {
                let vals = run_group(tape, &g.f, &env, g.states.len(), &block.name)?;
                pending[gi] = Some((t + g.period, vals));
            }
        }
        if let Some(g) = continuous {
            let h = to_f64(grid[k + 1] - t);
            let xc: Vec<NodeId> = g.states.iter().map(|s| x[*s]).collect();
            let mut field = |tape: &mut Tape, stage: &[NodeId]| {
                let mut xs = x.clone();
                for (s, v) in g.states.iter().zip(stage) {
                    xs[*s] = *v;
                }
                let env = Env {
                    t,
                    x: &xs,
                    u: &u_rows[k],
                    p: &p,
                    batch,
                };
                run_group(tape, &g.f, &env, g.states.len(), &block.name)
            };
            let next = rk4_nodes(tape, &mut field, &xc, h)?;
            for (s, v) in g.states.iter().zip(next) {
                x[*s] = v;
            }
        }
    }
    Ok(Execution {
        grid,
        batch,
        states,
        inputs: u_rows,
        outputs,
        bindings: bindings.clone(),
    })
}

/// Plain numeric simulation: returns (state, output) trajectories.
pub fn simulate(block: &BlockDef, inputs: &[InputSignal], tf: Time) -> Result<(Trajectory, Trajectory)> {
    let mut tape = Tape::new();
    let b = Bindings::constants(&mut tape, block);
    let ex = execute_block(&mut tape, block, &b, inputs, tf)?;
    Ok((ex.state_trajectory(&tape, block), ex.output_trajectory(&tape, block)))
}
