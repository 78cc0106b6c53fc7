//! Folding a diagram into one block with serial, parallel and feedback.

use std::sync::Arc;

use super::{feedback, parallel, serial, Diagram};
use crate::blocks::{BlockDef, Env, MapFn, OutputMap, PhiFn};
use crate::contracts::PortRef;
use crate::error::{Error, Result};
use crate::tape::NodeId;

/// Block order for folding: Kahn's algorithm on block-level wires, lowest
/// index first; when only cycles remain, the lowest remaining index.
fn fold_order(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut indeg = vec![0usize; n];
    for &(a, b) in edges {
        if a != b {
            indeg[b] += 1;
        }
    }
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n)
            .find(|v| !done[*v] && indeg[*v] == 0)
            .or_else(|| (0..n).find(|v| !done[*v]))
            .expect("some block remains");
        done[next] = true;
        order.push(next);
        for &(a, b) in edges {
            if a == next && b != next && !done[b] {
                indeg[b] -= 1;
            }
        }
    }
    order
}

/// Port bookkeeping for the folded block: output offset of each placed
/// diagram block and the diagram input behind each external input.
struct Acc {
    block: BlockDef,
    out_off: Vec<Option<usize>>,
    ext: Vec<(usize, usize)>,
}

impl Acc {
    fn out_name(&self, b: usize, o: usize) -> String {
        self.block.outputs[self.out_off[b].expect("placed") + o].name.clone()
    }

    fn in_name(&self, b: usize, i: usize) -> String {
        let pos = self.ext.iter().position(|e| *e == (b, i)).expect("still external");
        self.block.inputs[pos].name.clone()
    }
}

/// Reorders inputs so that new input `j` is old input `order[j]`.
fn permute_inputs(mut b: BlockDef, order: &[usize]) -> BlockDef {
    if order.iter().enumerate().all(|(j, i)| j == *i) {
        return b;
    }
    let mut inv = vec![0; order.len()];
    for (j, i) in order.iter().enumerate() {
        inv[*i] = j;
    }
    let inv: Arc<[usize]> = inv.into();
    let old_u = |inv: &[usize], u: &[NodeId]| inv.iter().map(|j| u[*j]).collect::<Vec<_>>();
    let wrap = |f: MapFn| -> MapFn {
        let inv = inv.clone();
        Arc::new(move |tape, env| {
            let u = old_u(&inv, env.u);
            f(tape, &Env { u: &u, ..*env })
        })
    };
    b.output = match b.output {
        OutputMap::Explicit(f) => OutputMap::Explicit(wrap(f)),
        OutputMap::Implicit { phi, tol, max_iter } => {
            let inv = inv.clone();
            let phi: PhiFn = Arc::new(move |tape, y, env| {
                let u = old_u(&inv, env.u);
                phi(tape, y, &Env { u: &u, ..*env })
            });
            OutputMap::Implicit { phi, tol, max_iter }
        }
    };
    for g in &mut b.groups {
        g.f = wrap(g.f.clone());
    }
    b.inputs = order.iter().map(|i| b.inputs[*i].clone()).collect();
    b.feedthrough = order.iter().map(|i| b.feedthrough[*i].clone()).collect();
    for r in &mut b.residuals {
        r.ports = r.ports.remap(
            |p| match p {
                PortRef::Input(i) => PortRef::Input(inv[i]),
                other => other,
            },
            0,
        );
    }
    if let Some(ag) = &mut b.ag {
        ag.assume = order.iter().map(|i| ag.assume[*i].clone()).collect();
        ag.guarantee_inputs = order.iter().map(|i| ag.guarantee_inputs[*i].clone()).collect();
    }
    b
}

/// One block with the diagram's execution semantics: the blocks in fold
/// order composed serially where wired and in parallel otherwise, then one
/// feedback over every wire pointing backwards. External inputs are the
/// unconnected inputs, in diagram order; all block outputs are exposed.
pub fn flatten(d: &Diagram) -> Result<BlockDef> {
    if d.blocks.is_empty() {
        return Err(Error::InvalidBlock("cannot flatten an empty diagram".into()));
    }
    let conns = d.indexed_connections()?;
    let cycles = super::detect_algebraic_loops(d)?;
    if !cycles.is_empty() {
        return Err(Error::AlgebraicLoop(cycles));
    }
    let edges: Vec<(usize, usize)> = conns.iter().map(|((a, _), (b, _))| (*a, *b)).collect();
    let order = fold_order(d.blocks.len(), &edges);

    let first = order[0];
    let mut acc = Acc {
        block: d.blocks[first].clone(),
        out_off: vec![None; d.blocks.len()],
        ext: (0..d.blocks[first].inputs.len()).map(|i| (first, i)).collect(),
    };
    acc.out_off[first] = Some(0);
    let mut used = vec![false; conns.len()];
    for &b in &order[1..] {
        let blk = d.blocks[b].clone();
        let mut names = Vec::new();
        let mut fed = Vec::new();
        for (ci, ((sb, so), (db, di))) in conns.iter().enumerate() {
            if *db == b && *sb != b && acc.out_off[*sb].is_some() {
                names.push((acc.out_name(*sb, *so), blk.inputs[*di].name.clone()));
                fed.push(*di);
                used[ci] = true;
            }
        }
        let n_out = acc.block.outputs.len();
        acc.block = if names.is_empty() {
            parallel(acc.block, blk)?
        } else {
            let sigma: Vec<(&str, &str)> = names.iter().map(|(a, c)| (a.as_str(), c.as_str())).collect();
            serial(acc.block, blk, &sigma)?
        };
        acc.out_off[b] = Some(n_out);
        acc.ext.extend((0..d.blocks[b].inputs.len()).filter(|i| !fed.contains(i)).map(|i| (b, i)));
    }

    let back: Vec<(String, String)> = conns
        .iter()
        .zip(&used)
        .filter(|(_, u)| !**u)
        .map(|(((sb, so), (db, di)), _)| (acc.out_name(*sb, *so), acc.in_name(*db, *di)))
        .collect();
    let folded = if back.is_empty() {
        acc.block
    } else {
        let sigma: Vec<(&str, &str)> = back.iter().map(|(a, c)| (a.as_str(), c.as_str())).collect();
        feedback(acc.block, &sigma)?
    };
    // Feedback drops the fed-back inputs and keeps the rest in order.
    let remaining: Vec<(usize, usize)> = acc
        .ext
        .iter()
        .copied()
        .filter(|e| !conns.iter().any(|(_, to)| to == e))
        .collect();
    let mut order: Vec<usize> = (0..remaining.len()).collect();
    order.sort_by_key(|k| remaining[*k]);
    Ok(permute_inputs(folded, &order))
}
