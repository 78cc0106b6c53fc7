//! A composite block: sub-blocks plus internal wiring, evaluated in
//! feedthrough levels so each output is computed from exact inputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::loops::{levels, Wiring};
use super::{check_port_pair, needs_hold, qualify};
use crate::blocks::{eval_output, BlockDef, Env, OutputMap, RateGroup, SignalSpec};
use crate::contracts::{check_ag_compatibility, AgContract, BoundResidual, PortBox, PortRef};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::time::{is_multiple, Time};

/// Where a sub-block input is driven from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    External(usize),
    Internal { block: usize, output: usize },
}

/// An internal wire `(block, output) -> (block, input)` by index.
pub type Wire = ((usize, usize), (usize, usize));

pub(crate) struct Layout {
    pub blocks: Vec<BlockDef>,
    pub wiring: Vec<Vec<Source>>,
    x_off: Vec<usize>,
    p_off: Vec<usize>,
    /// Blocks evaluated in each feedthrough pass.
    passes: Vec<Vec<usize>>,
    /// Composite output index of each (block, output).
    out_index: Vec<Vec<usize>>,
    n_out: usize,
    /// Sampling period and hold state of each held (block, input).
    held: Vec<Vec<Option<(Time, usize)>>>,
    /// Held wires as (block, input), in hold-state order.
    holds: Vec<(usize, usize)>,
}

/// Every sub-block's outputs and fully resolved inputs at one instant.
pub(crate) struct Signals {
    pub outputs: Vec<Vec<NodeId>>,
    pub inputs: Vec<Vec<NodeId>>,
}

pub(crate) fn placeholder(tape: &mut Tape, dim: usize, batch: Option<usize>) -> NodeId {
    match batch {
        Some(b) => tape.constant(Tensor::zeros(&[b, dim])),
        None => tape.constant(Tensor::zeros(&[dim])),
    }
}

impl Layout {
    fn new(blocks: Vec<BlockDef>, wiring: Vec<Vec<Source>>) -> Result<Self> {
        let mut x_off = Vec::with_capacity(blocks.len());
        let mut p_off = Vec::with_capacity(blocks.len());
        let (mut xo, mut po) = (0, 0);
        for b in &blocks {
            x_off.push(xo);
            p_off.push(po);
            xo += b.states.len();
            po += b.params.len();
        }
        let lv = levels(&blocks, &as_wiring(&wiring))?;
        let depth = lv.iter().flatten().copied().max().map_or(0, |m| m + 1);
        let passes = (0..depth)
            .map(|p| (0..blocks.len()).filter(|b| lv[*b].contains(&p)).collect())
            .collect();
        let mut out_index = Vec::with_capacity(blocks.len());
        let mut n_out = 0;
        for b in &blocks {
            out_index.push((n_out..n_out + b.outputs.len()).collect());
            n_out += b.outputs.len();
        }
        let mut held: Vec<Vec<Option<(Time, usize)>>> = blocks.iter().map(|b| vec![None; b.inputs.len()]).collect();
        let mut holds = Vec::new();
        for (b, row) in wiring.iter().enumerate() {
            for (i, src) in row.iter().enumerate() {
                if let Source::Internal { block, output } = *src {
                    let inp = &blocks[b].inputs[i];
                    if needs_hold(&blocks[block].outputs[output], inp) {
                        held[b][i] = Some((inp.period, xo + holds.len()));
                        holds.push((b, i));
                    }
                }
            }
        }
        Ok(Self {
            blocks,
            wiring,
            x_off,
            p_off,
            passes,
            out_index,
            n_out,
            held,
            holds,
        })
    }

    fn sub_env<'a>(&self, b: usize, env: &Env<'a>, u: &'a [NodeId]) -> Env<'a> {
        let blk = &self.blocks[b];
        Env {
            t: env.t,
            x: &env.x[self.x_off[b]..self.x_off[b] + blk.states.len()],
            u,
            p: &env.p[self.p_off[b]..self.p_off[b] + blk.params.len()],
            batch: env.batch,
        }
    }

    fn resolve_inputs(
        &self,
        tape: &mut Tape,
        b: usize,
        env: &Env,
        outs: &[Option<Vec<NodeId>>],
        zeros: &mut HashMap<usize, NodeId>,
    ) -> Vec<NodeId> {
        self.wiring[b]
            .iter()
            .zip(&self.blocks[b].inputs)
            .enumerate()
            .map(|(i, (src, spec))| match *src {
                Source::External(j) => env.u[j],
                Source::Internal { .. } if self.held[b][i].is_some_and(|(p, _)| !is_multiple(env.t, p)) => {
                    env.x[self.held[b][i].expect("checked").1]
                }
                Source::Internal { block, output } => match &outs[block] {
                    Some(o) => o[output],
                    None => *zeros
                        .entry(spec.dim)
                        .or_insert_with(|| placeholder(tape, spec.dim, env.batch)),
                },
            })
            .collect()
    }

    fn compute(&self, tape: &mut Tape, env: &Env) -> Result<Signals> {
        let mut outs: Vec<Option<Vec<NodeId>>> = vec![None; self.blocks.len()];
        let mut zeros = HashMap::new();
        for pass in &self.passes {
            for &b in pass {
                let u = self.resolve_inputs(tape, b, env, &outs, &mut zeros);
                let sub = self.sub_env(b, env, &u);
                outs[b] = Some(eval_output(tape, &self.blocks[b], &sub)?);
            }
        }
        let mut inputs = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            inputs.push(self.resolve_inputs(tape, b, env, &outs, &mut zeros));
        }
        Ok(Signals {
            outputs: outs.into_iter().map(Option::unwrap_or_default).collect(),
            inputs,
        })
    }

    /// Memoised per (layout, instant, nodes).
    pub fn signals(self: &Arc<Self>, tape: &mut Tape, env: &Env) -> Result<Signals> {
        let mut ids = Vec::with_capacity(env.x.len() + env.u.len() + env.p.len());
        ids.extend_from_slice(env.x);
        ids.extend_from_slice(env.u);
        ids.extend_from_slice(env.p);
        let key = (
            Arc::as_ptr(self) as usize,
            [*env.t.numer(), *env.t.denom(), env.batch.map_or(-1, |b| b as i64)],
            ids,
        );
        let shape_in: Vec<usize> = self.blocks.iter().map(|b| b.inputs.len()).collect();
        if let Some(flat) = tape.memo_get(&key) {
            let (o, i) = flat.split_at(self.n_out);
            return Ok(Signals {
                outputs: split(o, self.blocks.iter().map(|b| b.outputs.len())),
                inputs: split(i, shape_in.into_iter()),
            });
        }
        let s = self.compute(tape, env)?;
        let flat: Vec<NodeId> = s.outputs.iter().flatten().chain(s.inputs.iter().flatten()).copied().collect();
        tape.memo_put(key, flat);
        Ok(s)
    }
}

fn split(flat: &[NodeId], lens: impl Iterator<Item = usize>) -> Vec<Vec<NodeId>> {
    let mut off = 0;
    lens.map(|n| {
        let v = flat[off..off + n].to_vec();
        off += n;
        v
    })
    .collect()
}

pub(crate) fn as_wiring(w: &[Vec<Source>]) -> Wiring {
    w.iter()
        .map(|row| {
            row.iter()
                .map(|s| match s {
                    Source::External(_) => None,
                    Source::Internal { block, output } => Some((*block, *output)),
                })
                .collect()
        })
        .collect()
}

fn dedup_names(names: Vec<String>) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    names
        .into_iter()
        .map(|n| {
            let c = seen.entry(n.clone()).or_insert(0);
            *c += 1;
            if *c == 1 {
                n
            } else {
                format!("{n}~{c}")
            }
        })
        .collect()
}

/// Builds the composite block of `blocks` with the given internal wires.
/// Unwired inputs become external inputs (ordered by block, then input);
/// every sub-block output is exposed.
pub fn compose(name: impl Into<String>, blocks: Vec<BlockDef>, wires: &[Wire]) -> Result<BlockDef> {
    let name = name.into();
    let mut driven: Vec<Vec<Option<(usize, usize)>>> =
        blocks.iter().map(|b| vec![None; b.inputs.len()]).collect();
    for &((sb, so), (db, di)) in wires {
        let src = blocks.get(sb).ok_or_else(|| Error::InvalidConnection(format!("no block {sb}")))?;
        let dst = blocks.get(db).ok_or_else(|| Error::InvalidConnection(format!("no block {db}")))?;
        let out = src
            .outputs
            .get(so)
            .ok_or_else(|| Error::InvalidConnection(format!("{} has no output {so}", src.name)))?;
        let inp = dst
            .inputs
            .get(di)
            .ok_or_else(|| Error::InvalidConnection(format!("{} has no input {di}", dst.name)))?;
        check_port_pair(&qualify(src, &out.name), out, &qualify(dst, &inp.name), inp)?;
        if driven[db][di].is_some() {
            return Err(Error::InputAlreadyDriven(qualify(dst, &inp.name)));
        }
        driven[db][di] = Some((sb, so));
    }
    let mut n_ext = 0;
    let mut ext_specs = Vec::new();
    let wiring: Vec<Vec<Source>> = blocks
        .iter()
        .zip(&driven)
        .map(|(b, row)| {
            row.iter()
                .zip(&b.inputs)
                .map(|(d, spec)| match d {
                    Some((block, output)) => Source::Internal {
                        block: *block,
                        output: *output,
                    },
                    None => {
                        ext_specs.push(spec.renamed(qualify(b, &spec.name)));
                        n_ext += 1;
                        Source::External(n_ext - 1)
                    }
                })
                .collect()
        })
        .collect();
    let layout = Arc::new(Layout::new(blocks, wiring)?);
    let blocks = &layout.blocks;

    let rename = |specs: Vec<SignalSpec>| -> Vec<SignalSpec> {
        let names = dedup_names(specs.iter().map(|s| s.name.clone()).collect());
        specs.iter().zip(names).map(|(s, n)| s.renamed(n)).collect()
    };
    let inputs = rename(ext_specs);
    let outputs = rename(
        blocks
            .iter()
            .flat_map(|b| b.outputs.iter().map(move |s| s.renamed(qualify(b, &s.name))))
            .collect(),
    );
    let hold_specs = layout.holds.iter().map(|&(b, i)| {
        let inp = &blocks[b].inputs[i];
        inp.renamed(format!("{}.hold", qualify(&blocks[b], &inp.name)))
    });
    let states = rename(
        blocks
            .iter()
            .flat_map(|b| b.states.iter().map(move |s| s.renamed(qualify(b, &s.name))))
            .chain(hold_specs)
            .collect(),
    );
    let param_names = dedup_names(
        blocks
            .iter()
            .flat_map(|b| b.params.iter().map(move |p| qualify(b, &p.name)))
            .collect(),
    );
    let params = blocks
        .iter()
        .flat_map(|b| b.params.iter())
        .zip(param_names)
        .map(|(p, n)| crate::blocks::Param {
            name: n,
            value: p.value.clone(),
        })
        .collect();
    let init = blocks
        .iter()
        .flat_map(|b| b.init.iter().cloned())
        .chain(layout.holds.iter().map(|&(b, i)| Tensor::zeros(&[blocks[b].inputs[i].dim])))
        .collect();

    let mut periods: Vec<Time> = Vec::new();
    let mut steps: Vec<Time> = Vec::new();
    for b in blocks {
        for p in &b.periods {
            if !periods.contains(p) {
                periods.push(*p);
            }
        }
        for s in &b.steps {
            if !steps.contains(s) {
                steps.push(*s);
            }
        }
    }

    let mut by_period: BTreeMap<(Time, bool), Vec<(usize, usize)>> = BTreeMap::new();
    for (bi, b) in blocks.iter().enumerate() {
        for (gi, g) in b.groups.iter().enumerate() {
            by_period.entry((g.period, g.sample)).or_default().push((bi, gi));
        }
    }
    let mut groups: Vec<RateGroup> = by_period
        .into_iter()
        .map(|((period, sample), members)| {
            let states = members
                .iter()
                .flat_map(|(bi, gi)| {
                    blocks[*bi].groups[*gi].states.iter().map(|s| s + layout.x_off[*bi])
                })
                .collect();
            let lay = Arc::clone(&layout);
            let f = move |tape: &mut Tape, env: &Env| -> Result<Vec<NodeId>> {
                let sig = lay.signals(tape, env)?;
                let mut out = Vec::new();
                for (bi, gi) in &members {
                    let sub = lay.sub_env(*bi, env, &sig.inputs[*bi]);
                    let g = &lay.blocks[*bi].groups[*gi];
                    let vals = (g.f)(tape, &sub)?;
                    if vals.len() != g.states.len() {
                        return Err(Error::InvalidBlock(format!(
                            "{}: transition returned {} signals for {} states",
                            lay.blocks[*bi].name,
                            vals.len(),
                            g.states.len()
                        )));
                    }
                    out.extend(vals);
                }
                Ok(out)
            };
            RateGroup {
                period,
                states,
                f: Arc::new(f),
                sample,
            }
        })
        .collect();
    for &(b, i) in &layout.holds {
        let (period, state) = layout.held[b][i].expect("hold registered");
        let lay = Arc::clone(&layout);
        // At a multiple of the period the input reads its driver directly.
        let f = move |tape: &mut Tape, env: &Env| -> Result<Vec<NodeId>> {
            Ok(vec![lay.signals(tape, env)?.inputs[b][i]])
        };
        if !periods.contains(&period) {
            periods.push(period);
        }
        groups.push(RateGroup {
            period,
            states: vec![state],
            f: Arc::new(f),
            sample: true,
        });
    }

    let lay = Arc::clone(&layout);
    let output = OutputMap::Explicit(Arc::new(move |tape: &mut Tape, env: &Env| {
        let sig = lay.signals(tape, env)?;
        Ok(sig.outputs.into_iter().flatten().collect())
    }));

    let feedthrough = composite_feedthrough(&layout, n_ext);
    let residuals = remap_residuals(&layout);
    let ag = compose_ag_boxes(&layout, &inputs, &outputs);

    let def = BlockDef {
        name,
        inputs,
        states,
        outputs,
        periods,
        groups,
        output,
        init,
        params,
        feedthrough,
        steps,
        residuals,
        ag,
        composite: true,
    };
    def.validate()?;
    Ok(def)
}

/// `feedthrough[e][o]`: some chain of same-instant dependencies links
/// external input `e` to composite output `o`.
fn composite_feedthrough(layout: &Layout, n_ext: usize) -> Vec<Vec<bool>> {
    let blocks = &layout.blocks;
    // deps[b][o] = external inputs reaching (b, o), filled in pass order so
    // drivers are complete before their consumers.
    let mut deps: Vec<Vec<Vec<bool>>> = blocks.iter().map(|b| vec![vec![false; n_ext]; b.outputs.len()]).collect();
    let lv = levels(blocks, &as_wiring(&layout.wiring)).expect("checked at construction");
    let mut order: Vec<(usize, usize, usize)> = lv
        .iter()
        .enumerate()
        .flat_map(|(b, ls)| ls.iter().enumerate().map(move |(o, l)| (*l, b, o)))
        .collect();
    order.sort();
    for (_, b, o) in order {
        let mut acc = vec![false; n_ext];
        for (i, src) in layout.wiring[b].iter().enumerate() {
            if !blocks[b].feedthrough[i][o] {
                continue;
            }
            match *src {
                Source::External(e) => acc[e] = true,
                Source::Internal { block, output } => {
                    for (a, d) in acc.iter_mut().zip(&deps[block][output]) {
                        *a |= d;
                    }
                }
            }
        }
        deps[b][o] = acc;
    }
    let mut ft = vec![vec![false; layout.n_out]; n_ext];
    for (b, outs) in deps.iter().enumerate() {
        for (o, d) in outs.iter().enumerate() {
            for (e, hit) in d.iter().enumerate() {
                ft[e][layout.out_index[b][o]] = *hit;
            }
        }
    }
    ft
}

fn remap_residuals(layout: &Layout) -> Vec<BoundResidual> {
    let mut out = Vec::new();
    for (b, blk) in layout.blocks.iter().enumerate() {
        let map = |r: PortRef| match r {
            PortRef::State(j) => PortRef::State(layout.x_off[b] + j),
            PortRef::Output(o) => PortRef::Output(layout.out_index[b][o]),
            PortRef::Input(i) => match layout.wiring[b][i] {
                Source::External(e) => PortRef::Input(e),
                Source::Internal { block, output } => PortRef::Output(layout.out_index[block][output]),
            },
        };
        for r in &blk.residuals {
            out.push(BoundResidual {
                contract: r.contract.clone(),
                ports: r.ports.remap(map, layout.p_off[b]),
            });
        }
    }
    out
}

pub(crate) fn ag_or_trivial(b: &BlockDef) -> AgContract {
    b.ag.clone().unwrap_or_else(|| {
        AgContract::trivial(
            &b.inputs.iter().map(|s| (s.name.clone(), s.dim)).collect::<Vec<_>>(),
            &b.outputs.iter().map(|s| (s.name.clone(), s.dim)).collect::<Vec<_>>(),
        )
    })
}

/// Interval composition over the whole layout; `None` when no sub-block
/// carries an A-G contract or an internal wire is incompatible.
fn compose_ag_boxes(layout: &Layout, inputs: &[SignalSpec], outputs: &[SignalSpec]) -> Option<AgContract> {
    if layout.blocks.iter().all(|b| b.ag.is_none()) {
        return None;
    }
    let cs: Vec<AgContract> = layout.blocks.iter().map(ag_or_trivial).collect();
    let mut assume = Vec::new();
    let mut guarantee_inputs = Vec::new();
    for (b, row) in layout.wiring.iter().enumerate() {
        for (i, src) in row.iter().enumerate() {
            match *src {
                Source::External(_) => {
                    let n = &inputs[assume.len()].name;
                    assume.push(PortBox::new(n.clone(), cs[b].assume[i].bounds.clone()));
                    guarantee_inputs.push(PortBox::new(n.clone(), cs[b].guarantee_inputs[i].bounds.clone()));
                }
                Source::Internal { block, output } => {
                    let ok = check_ag_compatibility(&cs[block], &cs[b], &[(output, i)])
                        .map(|r| r.satisfied)
                        .unwrap_or(false);
                    if !ok {
                        log::warn!(
                            "A-G contracts of {} and {} are incompatible; composite carries none",
                            layout.blocks[block].name,
                            layout.blocks[b].name
                        );
                        return None;
                    }
                }
            }
        }
    }
    let guarantee_outputs = cs
        .iter()
        .flat_map(|c| c.guarantee_outputs.iter())
        .zip(outputs)
        .map(|(g, s)| PortBox::new(s.name.clone(), g.bounds.clone()))
        .collect();
    Some(AgContract {
        assume,
        guarantee_inputs,
        guarantee_outputs,
    })
}

fn resolve_pairs(src: &BlockDef, dst: &BlockDef, sigma: &[(&str, &str)]) -> Result<Vec<(usize, usize)>> {
    sigma
        .iter()
        .map(|(o, i)| Ok((src.output_index(o)?, dst.input_index(i)?)))
        .collect()
}

/// `b1 || b2`.
pub fn parallel(b1: BlockDef, b2: BlockDef) -> Result<BlockDef> {
    let name = format!("({} || {})", b1.name, b2.name);
    compose(name, vec![b1, b2], &[])
}

/// `b1 ; b2` with `sigma` naming (output of b1, input of b2) pairs.
pub fn serial(b1: BlockDef, b2: BlockDef, sigma: &[(&str, &str)]) -> Result<BlockDef> {
    if sigma.is_empty() {
        return Err(Error::InvalidConnection("serial composition needs at least one connection".into()));
    }
    let pairs = resolve_pairs(&b1, &b2, sigma)?;
    let wires: Vec<Wire> = pairs.into_iter().map(|(o, i)| ((0, o), (1, i))).collect();
    let name = format!("({} ; {})", b1.name, b2.name);
    compose(name, vec![b1, b2], &wires)
}

/// Feeds outputs of `b` back into its own inputs. Fails with
/// `AlgebraicLoop` when a fed-back output depends on its input at the same
/// instant.
pub fn feedback(b: BlockDef, sigma: &[(&str, &str)]) -> Result<BlockDef> {
    if sigma.is_empty() {
        return Err(Error::InvalidConnection("feedback composition needs at least one connection".into()));
    }
    let pairs = resolve_pairs(&b, &b, sigma)?;
    let wires: Vec<Wire> = pairs.into_iter().map(|(o, i)| ((0, o), (0, i))).collect();
    let name = format!("fb({})", b.name);
    compose(name, vec![b], &wires)
}
