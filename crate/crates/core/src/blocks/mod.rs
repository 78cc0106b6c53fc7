//! Blocks: typed ports, time semantics, transition and output maps, and the
//! single-block execution algorithm.

mod exec;
mod implicit;
mod trajectory;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use num_traits::Zero;
use serde::{Deserialize, Serialize};

pub use exec::{
    block_grid, eval_output, execute_block, rk4_nodes, simulate, Bindings, Execution, InputSignal,
};
pub(crate) use exec::{detect_batch, run_group, sample_signal};
pub use implicit::{fixed_point_solve, implicit_output, implicit_sensitivity, FixedPoint};
pub use trajectory::{SignalSeries, Trajectory};

use crate::contracts::{AgContract, BoundResidual, PortMap, ResidualContract};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::time::{format_time, Time};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeKind {
    Continuous,
    Discrete,
}

/// A named port or state. `period == 0` marks a continuous-time signal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignalSpec {
    pub name: String,
    pub dim: usize,
    pub period: Time,
}

impl SignalSpec {
    pub fn continuous(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            period: Time::zero(),
        }
    }

    pub fn discrete(name: impl Into<String>, dim: usize, period: Time) -> Self {
        Self {
            name: name.into(),
            dim,
            period,
        }
    }

    pub fn kind(&self) -> TimeKind {
        if self.period.is_zero() {
            TimeKind::Continuous
        } else {
            TimeKind::Discrete
        }
    }

    pub fn renamed(&self, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidSignal(format!("`{}` has dimension 0", self.name)));
        }
        if self.period < Time::zero() {
            return Err(Error::InvalidSignal(format!(
                "`{}` has negative period {}",
                self.name,
                format_time(self.period)
            )));
        }
        Ok(())
    }
}

/// What a map sees at one instant: states, inputs and parameters as tape
/// nodes. Values are `[dim]` or, for batched runs, `[batch, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct Env<'a> {
    pub t: Time,
    pub x: &'a [NodeId],
    pub u: &'a [NodeId],
    pub p: &'a [NodeId],
    pub batch: Option<usize>,
}

pub type MapFn = Arc<dyn Fn(&mut Tape, &Env) -> Result<Vec<NodeId>> + Send + Sync>;

/// `Phi(Y; X, U, p)` for implicit outputs `Y = Phi(Y)`.
pub type PhiFn = Arc<dyn Fn(&mut Tape, &[NodeId], &Env) -> Result<Vec<NodeId>> + Send + Sync>;

#[derive(Clone)]
pub enum OutputMap {
    Explicit(MapFn),
    Implicit { phi: PhiFn, tol: f64, max_iter: usize },
}

/// A transition map owning a subset of the states. For `period > 0` it
/// returns next values; for `period == 0` it returns time derivatives.
///
/// A `sample` group is a sample-and-hold: at each multiple of its period it
/// runs before the outputs and its values take effect at that same instant.
#[derive(Clone)]
pub struct RateGroup {
    pub period: Time,
    pub states: Vec<usize>,
    pub f: MapFn,
    pub sample: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone)]
pub struct BlockDef {
    pub name: String,
    pub inputs: Vec<SignalSpec>,
    pub states: Vec<SignalSpec>,
    pub outputs: Vec<SignalSpec>,
    /// The set T of periods (0 for the continuous part).
    pub periods: Vec<Time>,
    pub groups: Vec<RateGroup>,
    pub output: OutputMap,
    pub init: Vec<Tensor>,
    pub params: Vec<Param>,
    /// `feedthrough[i][j]`: output j depends on input i at the same instant.
    pub feedthrough: Vec<Vec<bool>>,
    /// Integration steps for the continuous part.
    pub steps: Vec<Time>,
    pub residuals: Vec<BoundResidual>,
    pub ag: Option<AgContract>,
    /// Composite blocks keep their (already qualified) port names when
    /// composed again.
    pub composite: bool,
}

impl fmt::Debug for BlockDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = |s: &[SignalSpec]| s.iter().map(|x| x.name.clone()).collect::<Vec<_>>();
        f.debug_struct("BlockDef")
            .field("name", &self.name)
            .field("inputs", &names(&self.inputs))
            .field("states", &names(&self.states))
            .field("outputs", &names(&self.outputs))
            .field("periods", &self.periods.iter().map(|p| format_time(*p)).collect::<Vec<_>>())
            .field("params", &self.params.iter().map(|p| &p.name).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl BlockDef {
    pub fn builder(name: impl Into<String>) -> BlockBuilder {
        BlockBuilder::new(name.into())
    }

    pub fn input_index(&self, name: &str) -> Result<usize> {
        self.inputs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownPort(format!("{}.{name}", self.name)))
    }

    pub fn output_index(&self, name: &str) -> Result<usize> {
        self.outputs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownPort(format!("{}.{name}", self.name)))
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::UnknownPort(format!("{}.{name}", self.name)))
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces parameter values by position.
    pub fn with_params(mut self, values: &[Tensor]) -> Result<Self> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidBlock(format!(
                "{} parameter values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::InvalidBlock(format!(
                    "parameter `{}` shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(self)
    }

    /// Attaches a residual contract written against this block's ports.
    pub fn with_residual(mut self, contract: ResidualContract) -> Self {
        let ports = PortMap::for_block(&self);
        self.residuals.push(BoundResidual { contract, ports });
        self
    }

    pub fn with_ag(mut self, contract: AgContract) -> Self {
        self.ag = Some(contract);
        self
    }

    pub fn has_continuous_states(&self) -> bool {
        self.groups.iter().any(|g| g.period.is_zero())
    }

    /// Checks the well-formedness conditions of a block.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidBlock(format!("{}: {msg}", self.name)));
        if self.inputs.is_empty() && self.outputs.is_empty() {
            return bad("inputs and outputs cannot both be empty".into());
        }
        for s in self.inputs.iter().chain(&self.states).chain(&self.outputs) {
            s.validate()?;
        }
        if self.periods.is_empty() {
            return bad("the period set is empty".into());
        }
        let periods: BTreeSet<Time> = self.periods.iter().copied().collect();
        if periods.len() != self.periods.len() {
            return bad("duplicate periods".into());
        }
        let mut owner = vec![None; self.states.len()];
        for (gi, g) in self.groups.iter().enumerate() {
            if !periods.contains(&g.period) {
                return bad(format!("transition period {} not in T", format_time(g.period)));
            }
            if g.states.is_empty() {
                return bad(format!("transition {gi} owns no states"));
            }
            for &s in &g.states {
                match owner.get_mut(s) {
                    None => return bad(format!("transition {gi} names missing state {s}")),
                    Some(Some(_)) => return bad(format!("state {s} owned twice")),
                    Some(slot) => *slot = Some(gi),
                }
                if self.states[s].period != g.period {
                    return bad(format!(
                        "state `{}` has period {}, its transition {}",
                        self.states[s].name,
                        format_time(self.states[s].period),
                        format_time(g.period)
                    ));
                }
            }
        }
        if let Some(s) = owner.iter().position(|o| o.is_none()) {
            return bad(format!("state `{}` has no transition", self.states[s].name));
        }
        if self.groups.iter().any(|g| g.sample && g.period.is_zero()) {
            return bad("a sample-and-hold group needs a positive period".into());
        }
        if self.groups.iter().filter(|g| g.period.is_zero()).count() > 1 {
            return bad("more than one continuous transition".into());
        }
        if self.groups.iter().any(|g| g.period.is_zero()) && self.steps.is_empty() {
            return bad("continuous states need an integration step".into());
        }
        if self.init.len() != self.states.len() {
            return bad(format!("{} initial values for {} states", self.init.len(), self.states.len()));
        }
        for (s, x0) in self.states.iter().zip(&self.init) {
            if x0.shape() != [s.dim] {
                return bad(format!("initial value of `{}` has shape {:?}", s.name, x0.shape()));
            }
        }
        if self.feedthrough.len() != self.inputs.len()
            || self.feedthrough.iter().any(|r| r.len() != self.outputs.len())
        {
            return bad("feedthrough mask must be inputs x outputs".into());
        }
        Ok(())
    }
}

/// Incremental construction of a [`BlockDef`].
pub struct BlockBuilder {
    name: String,
    inputs: Vec<SignalSpec>,
    states: Vec<SignalSpec>,
    outputs: Vec<SignalSpec>,
    periods: Vec<Time>,
    groups: Vec<RateGroup>,
    output: Option<OutputMap>,
    init: Vec<Tensor>,
    params: Vec<Param>,
    feedthrough: Option<Vec<Vec<bool>>>,
    steps: Vec<Time>,
    residuals: Vec<ResidualContract>,
    ag: Option<AgContract>,
}

impl BlockBuilder {
    fn new(name: String) -> Self {
        Self {
            name,
            inputs: Vec::new(),
            states: Vec::new(),
            outputs: Vec::new(),
            periods: Vec::new(),
            groups: Vec::new(),
            output: None,
            init: Vec::new(),
            params: Vec::new(),
            feedthrough: None,
            steps: Vec::new(),
            residuals: Vec::new(),
            ag: None,
        }
    }

    pub fn input(mut self, spec: SignalSpec) -> Self {
        self.inputs.push(spec);
        self
    }

    pub fn output(mut self, spec: SignalSpec) -> Self {
        self.outputs.push(spec);
        self
    }

    pub fn state(mut self, spec: SignalSpec, init: Tensor) -> Self {
        self.states.push(spec);
        self.init.push(init);
        self
    }

    pub fn param(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self
    }

    pub fn period(mut self, period: Time) -> Self {
        self.periods.push(period);
        self
    }

    /// Declares an integration step for the continuous part.
    pub fn step(mut self, h: Time) -> Self {
        self.steps.push(h);
        self
    }

    pub fn transition<F>(mut self, period: Time, states: &[usize], f: F) -> Self
    where
        F: Fn(&mut Tape, &Env) -> Result<Vec<NodeId>> + Send + Sync + 'static,
    {
        self.periods.push(period);
        self.groups.push(RateGroup {
            period,
            states: states.to_vec(),
            f: Arc::new(f),
            sample: false,
        });
        self
    }

    pub fn output_map<F>(mut self, f: F) -> Self
    where
        F: Fn(&mut Tape, &Env) -> Result<Vec<NodeId>> + Send + Sync + 'static,
    {
        self.output = Some(OutputMap::Explicit(Arc::new(f)));
        self
    }

    pub fn implicit_output<F>(mut self, phi: F, tol: f64, max_iter: usize) -> Self
    where
        F: Fn(&mut Tape, &[NodeId], &Env) -> Result<Vec<NodeId>> + Send + Sync + 'static,
    {
        self.output = Some(OutputMap::Implicit {
            phi: Arc::new(phi),
            tol,
            max_iter,
        });
        self
    }

    pub fn feedthrough(mut self, mask: Vec<Vec<bool>>) -> Self {
        self.feedthrough = Some(mask);
        self
    }

    /// Outputs depend on states only.
    pub fn no_feedthrough(mut self) -> Self {
        self.feedthrough = Some(vec![vec![false; self.outputs.len()]; self.inputs.len()]);
        self
    }

    pub fn residual(mut self, r: ResidualContract) -> Self {
        self.residuals.push(r);
        self
    }

    pub fn ag(mut self, c: AgContract) -> Self {
        self.ag = Some(c);
        self
    }

    pub fn build(self) -> Result<BlockDef> {
        let mut periods: Vec<Time> = self.periods;
        periods.extend(self.inputs.iter().chain(&self.states).chain(&self.outputs).map(|s| s.period));
        let mut seen = BTreeSet::new();
        periods.retain(|p| seen.insert(*p));
        let n_out = self.outputs.len();
        let output = self.output.unwrap_or_else(|| {
            OutputMap::Explicit(Arc::new(|_: &mut Tape, _: &Env| Ok(Vec::new())))
        });
        let feedthrough = self
            .feedthrough
            .unwrap_or_else(|| vec![vec![true; n_out]; self.inputs.len()]);
        let mut def = BlockDef {
            name: self.name,
            inputs: self.inputs,
            states: self.states,
            outputs: self.outputs,
            periods,
            groups: self.groups,
            output,
            init: self.init,
            params: self.params,
            feedthrough,
            steps: self.steps,
            residuals: Vec::new(),
            ag: self.ag,
            composite: false,
        };
        for r in self.residuals {
            def = def.with_residual(r);
        }
        def.validate()?;
        Ok(def)
    }
}
