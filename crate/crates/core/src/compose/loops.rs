//! Same-instant dependency analysis over output ports.

use crate::blocks::BlockDef;
use crate::error::{Error, Result};

/// Per block, per input: the driving `(block, output)`, if internal.
pub type Wiring = Vec<Vec<Option<(usize, usize)>>>;

/// Output-port dependency graph: `(b, o) -> (b', o')` when `(b, o)` drives an
/// input of `b'` that feeds through to `o'`. Nodes are numbered block-major.
struct PortGraph {
    nodes: Vec<(usize, usize)>,
    succ: Vec<Vec<usize>>,
}

impl PortGraph {
    fn new(blocks: &[BlockDef], wiring: &Wiring) -> Self {
        let mut base = Vec::with_capacity(blocks.len());
        let mut nodes = Vec::new();
        for (b, blk) in blocks.iter().enumerate() {
            base.push(nodes.len());
            nodes.extend((0..blk.outputs.len()).map(|o| (b, o)));
        }
        let mut succ = vec![Vec::new(); nodes.len()];
        for (b, row) in wiring.iter().enumerate() {
            for (i, src) in row.iter().enumerate() {
                let Some((sb, so)) = *src else { continue };
                for o in 0..blocks[b].outputs.len() {
                    if blocks[b].feedthrough[i][o] {
                        let (from, to) = (base[sb] + so, base[b] + o);
                        if !succ[from].contains(&to) {
                            succ[from].push(to);
                        }
                    }
                }
            }
        }
        for s in &mut succ {
            s.sort_unstable();
        }
        Self { nodes, succ }
    }

    /// Every elementary cycle, each listed from its smallest node.
    fn cycles(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        let mut on_path = vec![false; self.nodes.len()];
        for s in 0..self.nodes.len() {
            self.extend(s, s, &mut path, &mut on_path, &mut out);
        }
        out
    }

    fn extend(&self, start: usize, v: usize, path: &mut Vec<usize>, on: &mut [bool], out: &mut Vec<Vec<usize>>) {
        path.push(v);
        on[v] = true;
        for &w in &self.succ[v] {
            if w == start {
                out.push(path.clone());
            } else if w > start && !on[w] {
                self.extend(start, w, path, on, out);
            }
        }
        on[v] = false;
        path.pop();
    }
}

/// Elementary algebraic loops, each as the list of output ports on it.
pub fn find_cycles(blocks: &[BlockDef], wiring: &Wiring) -> Vec<Vec<String>> {
    let g = PortGraph::new(blocks, wiring);
    g.cycles()
        .into_iter()
        .map(|c| {
            c.into_iter()
                .map(|n| {
                    let (b, o) = g.nodes[n];
                    format!("{}.{}", blocks[b].name, blocks[b].outputs[o].name)
                })
                .collect()
        })
        .collect()
}

/// Longest same-instant dependency chain ending at each output port, or
/// `AlgebraicLoop` listing every loop.
pub fn levels(blocks: &[BlockDef], wiring: &Wiring) -> Result<Vec<Vec<usize>>> {
    let g = PortGraph::new(blocks, wiring);
    let n = g.nodes.len();
    let mut indeg = vec![0usize; n];
    for s in &g.succ {
        for &w in s {
            indeg[w] += 1;
        }
    }
    let mut level = vec![0usize; n];
    let mut ready: Vec<usize> = (0..n).filter(|v| indeg[*v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = ready.pop() {
        seen += 1;
        for &w in &g.succ[v] {
            level[w] = level[w].max(level[v] + 1);
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(w);
            }
        }
    }
    if seen < n {
        return Err(Error::AlgebraicLoop(find_cycles(blocks, wiring)));
    }
    let mut out: Vec<Vec<usize>> = blocks.iter().map(|b| vec![0; b.outputs.len()]).collect();
    for (v, (b, o)) in g.nodes.iter().enumerate() {
        out[*b][*o] = level[v];
    }
    Ok(out)
}
