//! Compilation to a per-instant schedule and a reference interpreter that
//! steps a diagram directly along it.

use std::fmt::Write as _;

use num_traits::Zero;

use super::composite::placeholder;
use super::loops::{levels, Wiring};
use super::{needs_hold, Diagram};
use crate::blocks::{
    detect_batch, eval_output, rk4_nodes, run_group, sample_signal, Bindings, BlockDef, Env, Execution,
    InputSignal,
};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::time::{format_time, hyperperiod, is_multiple, time_grid, to_f64, Time};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Evaluate a block's outputs in the given feedthrough pass.
    Output { block: usize, pass: usize },
    /// Evaluate a discrete rate group; the result lands one period later.
    Transition { block: usize, group: usize },
    /// Evaluate a sample-and-hold group; the result lands at once.
    Sample { block: usize, group: usize },
    /// One RK4 step of every continuous state to the next instant.
    Integrate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub k: usize,
    pub t: Time,
    pub kind: StepKind,
}

/// The unrolled schedule over `grid`. Steps are ordered so every data
/// dependency precedes its consumer; state carries feedback across instants.
#[derive(Clone, Debug)]
pub struct ExecutionGraph {
    pub grid: Vec<Time>,
    pub hyperperiod: Time,
    /// Number of grid intervals.
    pub horizon: usize,
    pub steps: Vec<Step>,
    names: Vec<String>,
}

impl ExecutionGraph {
    pub fn output_steps(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s.kind, StepKind::Output { .. })).count()
    }

    pub fn transition_steps(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s.kind, StepKind::Transition { .. })).count()
    }

    /// One line per step.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "hyperperiod {} horizon {} steps {}\n",
            format_time(self.hyperperiod),
            self.horizon,
            self.steps.len()
        );
        for st in &self.steps {
            let what = match st.kind {
                StepKind::Output { block, pass } => format!("output {} (pass {pass})", self.names[block]),
                StepKind::Transition { block, group } => format!("transition {} (group {group})", self.names[block]),
                StepKind::Sample { block, group } => format!("sample {} (group {group})", self.names[block]),
                StepKind::Integrate => "integrate".to_string(),
            };
            let _ = writeln!(s, "k={} t={} {what}", st.k, format_time(st.t));
        }
        s
    }
}

fn block_passes(blocks: &[BlockDef], wiring: &Wiring) -> Result<Vec<Vec<usize>>> {
    let lv = levels(blocks, wiring)?;
    let depth = lv.iter().flatten().copied().max().map_or(0, |m| m + 1);
    Ok((0..depth)
        .map(|p| (0..blocks.len()).filter(|b| lv[*b].contains(&p)).collect())
        .collect())
}

/// Unrolls `d` over `[0, tf]`.
pub fn compile(d: &Diagram, tf: Time) -> Result<ExecutionGraph> {
    let wiring = d.wiring()?;
    let passes = block_passes(&d.blocks, &wiring)?;
    let mut periods = Vec::new();
    let mut steps_h = Vec::new();
    for b in &d.blocks {
        periods.extend(b.periods.iter().copied());
        steps_h.extend(b.steps.iter().copied());
    }
    let grid = time_grid(&periods, &steps_h, tf)?;
    let bases: Vec<Time> = periods.iter().chain(&steps_h).copied().filter(|p| !p.is_zero()).collect();
    let hp = hyperperiod(&bases)?;
    let continuous = d.blocks.iter().any(|b| b.has_continuous_states());
    let n = grid.len();
    let mut steps = Vec::new();
    for (k, &t) in grid.iter().enumerate() {
        for (block, b) in d.blocks.iter().enumerate() {
            for (group, g) in b.groups.iter().enumerate() {
                if g.sample && is_multiple(t, g.period) {
                    steps.push(Step {
                        k,
                        t,
                        kind: StepKind::Sample { block, group },
                    });
                }
            }
        }
        for (pass, blocks) in passes.iter().enumerate() {
            for &block in blocks {
                steps.push(Step {
                    k,
                    t,
                    kind: StepKind::Output { block, pass },
                });
            }
        }
        if k + 1 == n {
            break;
        }
        for (block, b) in d.blocks.iter().enumerate() {
            for (group, g) in b.groups.iter().enumerate() {
                if !g.period.is_zero() && !g.sample && is_multiple(t, g.period) {
                    steps.push(Step {
                        k,
                        t,
                        kind: StepKind::Transition { block, group },
                    });
                }
            }
        }
        if continuous {
            steps.push(Step {
                k,
                t,
                kind: StepKind::Integrate,
            });
        }
    }
    Ok(ExecutionGraph {
        horizon: n - 1,
        grid,
        hyperperiod: hp,
        steps,
        names: d.blocks.iter().map(|b| b.name.clone()).collect(),
    })
}

/// Schedule of a single block.
pub fn compile_block(b: &BlockDef, tf: Time) -> Result<ExecutionGraph> {
    let d = Diagram {
        blocks: vec![b.clone()],
        connections: Vec::new(),
    };
    compile(&d, tf)
}

/// Per-block executions of a diagram on the common grid.
#[derive(Clone, Debug)]
pub struct DiagramExecution {
    pub grid: Vec<Time>,
    pub batch: Option<usize>,
    pub blocks: Vec<Execution>,
}

/// One node list per block.
type PerBlock = Vec<Vec<NodeId>>;
/// A discrete update and the instant it lands.
type Pending = Option<(Time, Vec<NodeId>)>;

struct Ctx<'a> {
    d: &'a Diagram,
    wiring: Wiring,
    /// Sampling period of each wired input that holds its driver.
    held: Vec<Vec<Option<Time>>>,
    grid: &'a [Time],
    /// Column of each external input, keyed by (block, input).
    ext: Vec<Vec<Option<Vec<NodeId>>>>,
    params: Vec<Vec<NodeId>>,
    batch: Option<usize>,
}

impl Ctx<'_> {
    /// Inputs of block `b` at instant `k`; a held input between its
    /// sampling instants reads its driver's recorded output in `past`.
    fn inputs(
        &self,
        tape: &mut Tape,
        b: usize,
        k: usize,
        outs: &[Option<Vec<NodeId>>],
        past: &[Vec<Vec<NodeId>>],
    ) -> Vec<NodeId> {
        let t = self.grid[k];
        self.d.blocks[b]
            .inputs
            .iter()
            .enumerate()
            .map(|(i, spec)| match self.wiring[b][i] {
                None => self.ext[b][i].as_ref().expect("sampled")[k],
                Some((sb, so)) if self.held[b][i].is_some_and(|p| !is_multiple(t, p)) => {
                    let p = self.held[b][i].expect("checked");
                    let at = (t / p).floor() * p;
                    let j = self.grid.binary_search(&at).expect("sampling instant lies on the grid");
                    past[sb][j][so]
                }
                Some((sb, so)) => match &outs[sb] {
                    Some(o) => o[so],
                    None => placeholder(tape, spec.dim, self.batch),
                },
            })
            .collect()
    }

    /// Output steps of one instant; returns outputs and resolved inputs.
    fn outputs(
        &self,
        tape: &mut Tape,
        steps: &[Step],
        k: usize,
        x: &[Vec<NodeId>],
        past: &[Vec<Vec<NodeId>>],
    ) -> Result<(PerBlock, PerBlock)> {
        let n = self.d.blocks.len();
        let mut outs: Vec<Option<Vec<NodeId>>> = vec![None; n];
        for st in steps {
            if let StepKind::Output { block, .. } = st.kind {
                let u = self.inputs(tape, block, k, &outs, past);
                let env = Env {
                    t: st.t,
                    x: &x[block],
                    u: &u,
                    p: &self.params[block],
                    batch: self.batch,
                };
                outs[block] = Some(eval_output(tape, &self.d.blocks[block], &env)?);
            }
        }
        let ins = (0..n).map(|b| self.inputs(tape, b, k, &outs, past)).collect();
        Ok((outs.into_iter().map(Option::unwrap_or_default).collect(), ins))
    }
}

/// Executes `d` block by block along its schedule. `inputs` drive the
/// external inputs in diagram order; `bindings` hold each block's initial
/// state and parameter nodes.
pub fn interpret(
    tape: &mut Tape,
    d: &Diagram,
    bindings: &[Bindings],
    inputs: &[InputSignal],
    tf: Time,
) -> Result<DiagramExecution> {
    if bindings.len() != d.blocks.len() {
        return Err(Error::InvalidBlock(format!(
            "{} bindings for {} blocks",
            bindings.len(),
            d.blocks.len()
        )));
    }
    let g = compile(d, tf)?;
    let ext_ports = d.external_inputs()?;
    if let Some(&(b, i)) = ext_ports.get(inputs.len()) {
        return Err(Error::MissingInput(format!("{}.{}", d.blocks[b].name, d.blocks[b].inputs[i].name)));
    }
    let mut ext: Vec<Vec<Option<Vec<NodeId>>>> = d.blocks.iter().map(|b| vec![None; b.inputs.len()]).collect();
    for (&(b, i), sig) in ext_ports.iter().zip(inputs) {
        ext[b][i] = Some(sample_signal(tape, &d.blocks[b].inputs[i], sig, &g.grid)?);
    }
    let batch = detect_batch(
        tape,
        bindings
            .iter()
            .flat_map(|bd| bd.init.iter().copied())
            .chain(ext.iter().flatten().flatten().map(|c| c[0])),
    );
    let wiring = d.wiring()?;
    let held = d
        .blocks
        .iter()
        .zip(&wiring)
        .map(|(blk, row)| {
            row.iter()
                .zip(&blk.inputs)
                .map(|(src, inp)| {
                    src.filter(|(sb, so)| needs_hold(&d.blocks[*sb].outputs[*so], inp)).map(|_| inp.period)
                })
                .collect()
        })
        .collect();
    let ctx = Ctx {
        d,
        wiring,
        held,
        grid: &g.grid,
        ext,
        params: bindings.iter().map(|b| b.params.clone()).collect(),
        batch,
    };

    let nb = d.blocks.len();
    let mut x: Vec<Vec<NodeId>> = bindings.iter().map(|b| b.init.clone()).collect();
    let mut pending: Vec<Vec<Pending>> =
        d.blocks.iter().map(|b| vec![None; b.groups.len()]).collect();
    let mut states: Vec<Vec<Vec<NodeId>>> = vec![Vec::new(); nb];
    let mut ins_rec: Vec<Vec<Vec<NodeId>>> = vec![Vec::new(); nb];
    let mut outs_rec: Vec<Vec<Vec<NodeId>>> = vec![Vec::new(); nb];

    let mut start = 0;
    for (k, &t) in g.grid.iter().enumerate() {
        let end = start + g.steps[start..].iter().take_while(|s| s.k == k).count();
        let steps = &g.steps[start..end];
        start = end;

        for (b, blk) in d.blocks.iter().enumerate() {
            for (gi, grp) in blk.groups.iter().enumerate() {
                if matches!(&pending[b][gi], Some((due, _)) if *due == t) {
                    let (_, vals) = pending[b][gi].take().expect("checked above");
                    for (s, v) in grp.states.iter().zip(vals) {
                        x[b][*s] = v;
                    }
                }
            }
        }
        for st in steps {
            if let StepKind::Sample { block, group } = st.kind {
                let blk = &d.blocks[block];
                let grp = &blk.groups[group];
                let (_, ins) = ctx.outputs(tape, steps, k, &x, &outs_rec)?;
                let env = Env {
                    t,
                    x: &x[block],
                    u: &ins[block],
                    p: &ctx.params[block],
                    batch,
                };
                let vals = run_group(tape, &grp.f, &env, grp.states.len(), &blk.name)?;
                for (s, v) in grp.states.iter().zip(vals) {
                    x[block][*s] = v;
                }
            }
        }
        let (outs, ins) = ctx.outputs(tape, steps, k, &x, &outs_rec)?;
        for b in 0..nb {
            states[b].push(x[b].clone());
            ins_rec[b].push(ins[b].clone());
            outs_rec[b].push(outs[b].clone());
        }

        for st in steps {
            match st.kind {
                StepKind::Output { .. } | StepKind::Sample { .. } => {}
                StepKind::Transition { block, group } => {
                    let blk = &d.blocks[block];
                    let grp = &blk.groups[group];
                    let env = Env {
                        t,
                        x: &x[block],
                        u: &ins[block],
                        p: &ctx.params[block],
                        batch,
                    };
                    let vals = run_group(tape, &grp.f, &env, grp.states.len(), &blk.name)?;
                    pending[block][group] = Some((t + grp.period, vals));
                }
                StepKind::Integrate => {
                    let h = to_f64(g.grid[k + 1] - t);
                    let cont: Vec<(usize, usize)> = d
                        .blocks
                        .iter()
                        .enumerate()
                        .flat_map(|(b, blk)| {
                            blk.groups
                                .iter()
                                .enumerate()
                                .filter(|(_, g)| g.period.is_zero())
                                .map(move |(gi, _)| (b, gi))
                        })
                        .collect();
                    let xc: Vec<NodeId> = cont
                        .iter()
                        .flat_map(|(b, gi)| d.blocks[*b].groups[*gi].states.iter().map(|s| x[*b][*s]))
                        .collect();
                    let place = |stage: &[NodeId]| {
                        let mut xs = x.clone();
                        let mut it = stage.iter();
                        for (b, gi) in &cont {
                            for s in &d.blocks[*b].groups[*gi].states {
                                xs[*b][*s] = *it.next().expect("stage covers continuous states");
                            }
                        }
                        xs
                    };
                    let mut field = |tape: &mut Tape, stage: &[NodeId]| -> Result<Vec<NodeId>> {
                        let xs = place(stage);
                        let (_, ins) = ctx.outputs(tape, steps, k, &xs, &outs_rec)?;
                        let mut out = Vec::with_capacity(stage.len());
                        for (b, gi) in &cont {
                            let blk = &d.blocks[*b];
                            let grp = &blk.groups[*gi];
                            let env = Env {
                                t,
                                x: &xs[*b],
                                u: &ins[*b],
                                p: &ctx.params[*b],
                                batch,
                            };
                            out.extend(run_group(tape, &grp.f, &env, grp.states.len(), &blk.name)?);
                        }
                        Ok(out)
                    };
                    let next = rk4_nodes(tape, &mut field, &xc, h)?;
                    x = place(&next);
                }
            }
        }
    }

    let blocks = (0..nb)
        .map(|b| Execution {
            grid: g.grid.clone(),
            batch,
            states: std::mem::take(&mut states[b]),
            inputs: std::mem::take(&mut ins_rec[b]),
            outputs: std::mem::take(&mut outs_rec[b]),
            bindings: bindings[b].clone(),
        })
        .collect();
    Ok(DiagramExecution {
        grid: g.grid,
        batch,
        blocks,
    })
}
