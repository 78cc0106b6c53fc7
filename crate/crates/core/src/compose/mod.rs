//! Connections, diagrams, the three composition operators, algebraic-loop
//! detection, flattening and compilation to an instant-by-instant schedule.

mod composite;
mod flatten;
mod loops;
mod schedule;

use std::fmt;
use std::str::FromStr;

use num_traits::Zero;

use crate::blocks::{BlockDef, SignalSpec, TimeKind};
use crate::error::{Error, Result};
use crate::time::{format_time, is_multiple};

pub(crate) use composite::ag_or_trivial;
pub use composite::{compose, feedback, parallel, serial, Source, Wire};
pub use flatten::flatten;
pub use loops::{find_cycles, levels, Wiring};
pub use schedule::{
    compile, compile_block, interpret, DiagramExecution, ExecutionGraph, Step, StepKind,
};

/// Port name as seen from a composite: atomic blocks prefix their name,
/// composites already carry qualified names.
pub fn qualify(b: &BlockDef, port: &str) -> String {
    if b.composite {
        port.to_string()
    } else {
        format!("{}.{}", b.name, port)
    }
}

/// A discrete input driven by a signal of another rate samples it at the
/// input's own period and holds the sample in between.
pub(crate) fn needs_hold(out: &SignalSpec, inp: &SignalSpec) -> bool {
    !inp.period.is_zero() && out.period != inp.period
}

/// Checks that an output may drive an input: equal dimensions, and a
/// discrete input only samples a discrete output at a multiple of the
/// output's period.
pub(crate) fn check_port_pair(from: &str, out: &SignalSpec, to: &str, inp: &SignalSpec) -> Result<()> {
    if out.dim != inp.dim {
        return Err(Error::DimMismatch {
            from: from.to_string(),
            to: to.to_string(),
            from_dim: out.dim,
            to_dim: inp.dim,
        });
    }
    if out.kind() == TimeKind::Discrete
        && inp.kind() == TimeKind::Discrete
        && !is_multiple(inp.period, out.period)
    {
        return Err(Error::KindMismatch {
            from: format!("{from} (period {})", format_time(out.period)),
            to: format!("{to} (period {})", format_time(inp.period)),
        });
    }
    Ok(())
}

/// `block.port`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PortPath {
    pub block: String,
    pub port: String,
}

impl PortPath {
    pub fn new(block: impl Into<String>, port: impl Into<String>) -> Self {
        Self {
            block: block.into(),
            port: port.into(),
        }
    }
}

impl fmt::Display for PortPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.port)
    }
}

impl FromStr for PortPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('.') {
            Some((b, p)) if !b.is_empty() && !p.is_empty() => Ok(Self::new(b, p)),
            _ => Err(Error::UnknownPort(s.to_string())),
        }
    }
}

/// One unilateral wire from an output to an input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Connection {
    pub from: PortPath,
    pub to: PortPath,
}

/// Resolved connection: `(block, output) -> (block, input)` by index.
pub type IndexedConnection = ((usize, usize), (usize, usize));

/// Named blocks plus connections. Unconnected inputs are the external
/// inputs, in block then port order.
#[derive(Clone, Default)]
pub struct Diagram {
    pub blocks: Vec<BlockDef>,
    pub connections: Vec<Connection>,
}

impl Diagram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `block` under `name`; returns its index.
    pub fn add_block(&mut self, name: impl Into<String>, mut block: BlockDef) -> Result<usize> {
        let name = name.into();
        if name.is_empty() || name.contains('.') {
            return Err(Error::InvalidBlock(format!("block name `{name}` must be non-empty and contain no '.'")));
        }
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::InvalidBlock(format!("duplicate block name `{name}`")));
        }
        block.name = name;
        self.blocks.push(block);
        Ok(self.blocks.len() - 1)
    }

    pub fn block_index(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::UnknownPort(name.to_string()))
    }

    fn resolve(&self, c: &Connection) -> Result<IndexedConnection> {
        let sb = self.block_index(&c.from.block)?;
        let db = self.block_index(&c.to.block)?;
        let so = self.blocks[sb]
            .outputs
            .iter()
            .position(|s| s.name == c.from.port)
            .ok_or_else(|| Error::UnknownPort(c.from.to_string()))?;
        let di = self.blocks[db]
            .inputs
            .iter()
            .position(|s| s.name == c.to.port)
            .ok_or_else(|| Error::UnknownPort(c.to.to_string()))?;
        Ok(((sb, so), (db, di)))
    }

    /// Adds the wire `from -> to` (both `block.port`).
    pub fn connect(&mut self, from: &str, to: &str) -> Result<()> {
        let c = Connection {
            from: from.parse()?,
            to: to.parse()?,
        };
        let ((sb, so), (db, di)) = self.resolve(&c)?;
        check_port_pair(from, &self.blocks[sb].outputs[so], to, &self.blocks[db].inputs[di])?;
        if self.connections.iter().any(|e| e.to == c.to) {
            return Err(Error::InputAlreadyDriven(c.to.to_string()));
        }
        self.connections.push(c);
        Ok(())
    }

    pub fn indexed_connections(&self) -> Result<Vec<IndexedConnection>> {
        self.connections.iter().map(|c| self.resolve(c)).collect()
    }

    pub fn wiring(&self) -> Result<Wiring> {
        let mut w: Wiring = self.blocks.iter().map(|b| vec![None; b.inputs.len()]).collect();
        for ((sb, so), (db, di)) in self.indexed_connections()? {
            w[db][di] = Some((sb, so));
        }
        Ok(w)
    }

    /// Unconnected inputs as `(block, input)`.
    pub fn external_inputs(&self) -> Result<Vec<(usize, usize)>> {
        let w = self.wiring()?;
        Ok(w.iter()
            .enumerate()
            .flat_map(|(b, row)| {
                row.iter().enumerate().filter(|(_, s)| s.is_none()).map(move |(i, _)| (b, i))
            })
            .collect())
    }

    /// Qualified names of the external inputs.
    pub fn external_input_names(&self) -> Result<Vec<String>> {
        Ok(self
            .external_inputs()?
            .into_iter()
            .map(|(b, i)| format!("{}.{}", self.blocks[b].name, self.blocks[b].inputs[i].name))
            .collect())
    }
}

/// Returns `diagram` with the wire `from -> to` added.
pub fn connect(mut diagram: Diagram, from: &str, to: &str) -> Result<Diagram> {
    diagram.connect(from, to)?;
    Ok(diagram)
}

/// Every elementary cycle of same-instant dependencies, each as the list of
/// output ports on it. Empty iff the diagram is free of algebraic loops.
pub fn detect_algebraic_loops(diagram: &Diagram) -> Result<Vec<Vec<String>>> {
    Ok(find_cycles(&diagram.blocks, &diagram.wiring()?))
}

#[cfg(test)]
mod tests;
