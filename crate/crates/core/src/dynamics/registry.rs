//! Diagram description files: blocks by registered type name, connections
//! by `block.port` paths, external inputs, and contract declarations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::library::*;
use crate::blocks::{BlockDef, InputSignal};
use crate::compose::Diagram;
use crate::contracts::{registered_residual, AgContract, Interval, PortBox};
use crate::error::{Error, Result};
use crate::nn::{Activation, Checkpoint, Icnn, Mlp, PdLyapunov, StableLinear, DEFAULT_DELTA, DEFAULT_SIGMA_BOUNDS};
use crate::tensor::Tensor;
use crate::time::{parse_time, Time};

pub const BLOCK_TYPES: [&str; 12] = [
    "gain",
    "sum",
    "saturate",
    "scalar_plant",
    "disturbance",
    "vdp_rk4",
    "mlp_policy",
    "icnn_lyapunov",
    "koopman_encoder",
    "koopman_operator",
    "koopman_decoder",
    "const_source",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractEntry {
    /// `"ag-box"` or `"residual:<name>"`.
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(flatten)]
    pub params: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    /// Sampling period as `"p/q"`; defaults to 1.
    #[serde(default)]
    pub period: Option<String>,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub contracts: Vec<ContractEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionEntry {
    pub from: String,
    pub to: String,
}

/// A constant (number or vector) or one vector per grid instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputEntry {
    Scalar(f64),
    Vector(Vec<f64>),
    Samples { samples: Vec<Vec<f64>> },
}

impl InputEntry {
    fn signal(&self) -> InputSignal {
        match self {
            InputEntry::Scalar(v) => InputSignal::scalar(*v),
            InputEntry::Vector(v) => InputSignal::Constant(Tensor::vector(v.clone())),
            InputEntry::Samples { samples } => {
                InputSignal::Samples(samples.iter().map(|s| Tensor::vector(s.clone())).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagramFile {
    pub blocks: Vec<BlockEntry>,
    #[serde(default)]
    pub connections: Vec<ConnectionEntry>,
    /// External inputs keyed by `block.port`.
    #[serde(default)]
    pub inputs: BTreeMap<String, InputEntry>,
    /// Horizon as `"p/q"`.
    #[serde(default)]
    pub tf: Option<String>,
}

pub struct LoadedDiagram {
    pub diagram: Diagram,
    /// One signal per external input, in diagram order.
    pub inputs: Vec<InputSignal>,
    pub tf: Option<Time>,
}

fn num(p: &Map<String, Value>, key: &str, default: Option<f64>) -> Result<f64> {
    match p.get(key) {
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::Config(format!("parameter `{key}` must be a number"))),
        None => default.ok_or_else(|| Error::Config(format!("parameter `{key}` is required"))),
    }
}

fn uint(p: &Map<String, Value>, key: &str, default: u64) -> Result<u64> {
    match p.get(key) {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Error::Config(format!("parameter `{key}` must be a nonnegative integer"))),
        None => Ok(default),
    }
}

fn field<T: for<'de> Deserialize<'de>>(p: &Map<String, Value>, key: &str, default: Option<T>) -> Result<T> {
    match p.get(key) {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Config(format!("parameter `{key}`: {e}"))),
        None => default.ok_or_else(|| Error::Config(format!("parameter `{key}` is required"))),
    }
}

fn load_checkpoint(p: &Map<String, Value>) -> Result<Option<Checkpoint>> {
    match p.get("checkpoint").and_then(Value::as_str) {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{path}: {e}")))?;
            Ok(Some(Checkpoint::from_json(&text)?))
        }
        None => Ok(None),
    }
}

fn mlp_from(p: &Map<String, Value>, default_bound: Option<(f64, f64)>) -> Result<Mlp> {
    if let Some(c) = load_checkpoint(p)? {
        return Mlp::from_checkpoint(&c);
    }
    let dims: Vec<usize> = field(p, "dims", None)?;
    let hidden: Activation = field(p, "hidden", Some(Activation::Tanh))?;
    let bound: Option<(f64, f64)> = field(p, "bound", Some(default_bound))?;
    Mlp::new(&dims, hidden, bound, uint(p, "seed", 0)?)
}

/// Builds one registered block type from its parameters.
pub fn build_block(kind: &str, p: &Map<String, Value>, period: Time) -> Result<BlockDef> {
    match kind {
        "gain" => gain(num(p, "k", Some(1.0))?, period),
        "sum" => sum(uint(p, "dim", 1)? as usize, period),
        "saturate" => saturate(uint(p, "dim", 1)? as usize, num(p, "lo", None)?, num(p, "hi", None)?, period),
        "scalar_plant" => scalar_plant(
            ScalarPlantParams {
                a: num(p, "a", None)?,
                b: num(p, "b", None)?,
                w_max: num(p, "w_max", Some(0.0))?,
            },
            num(p, "x0", Some(0.0))?,
            period,
        ),
        "disturbance" => disturbance(num(p, "w_max", None)?, uint(p, "seed", 0)?, period),
        "vdp_rk4" => vdp_rk4(
            VdpParams {
                mu: num(p, "mu", Some(1.0))?,
                tau: period,
                substeps: uint(p, "substeps", 1)? as usize,
            },
            field(p, "x0", Some([0.0, 0.0]))?,
        ),
        "mlp_policy" => mlp_policy(mlp_from(p, None)?, period),
        "icnn_lyapunov" => {
            let v = match load_checkpoint(p)? {
                Some(c) => PdLyapunov::from_checkpoint(&c)?,
                None => {
                    let dims: Vec<usize> = field(p, "dims", None)?;
                    let inner = Icnn::new(&dims, uint(p, "seed", 0)?)?;
                    PdLyapunov::new(inner, num(p, "delta", Some(DEFAULT_DELTA))?)?
                }
            };
            icnn_lyapunov(v, period)
        }
        "koopman_encoder" => koopman_encoder(mlp_from(p, None)?, period),
        "koopman_decoder" => koopman_decoder(mlp_from(p, None)?, period),
        "koopman_operator" => {
            let k = match load_checkpoint(p)? {
                Some(c) => StableLinear::from_checkpoint(&c)?,
                None => StableLinear::new(
                    uint(p, "n", 0)? as usize,
                    field(p, "bounds", Some(DEFAULT_SIGMA_BOUNDS))?,
                    uint(p, "seed", 0)?,
                )?,
            };
            koopman_operator(k, period)
        }
        "const_source" => {
            let v: Vec<f64> = match p.get("value") {
                Some(Value::Number(n)) => vec![n.as_f64().unwrap_or(0.0)],
                _ => field(p, "value", None)?,
            };
            const_source(Tensor::vector(v), period)
        }
        other => Err(Error::Config(format!(
            "unknown block type `{other}`; known types: {}",
            BLOCK_TYPES.join(", ")
        ))),
    }
}

fn bound_value(v: &Value) -> Result<f64> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| Error::Config("bad bound".into())),
        Value::String(s) if s == "inf" => Ok(f64::INFINITY),
        Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
        other => Err(Error::Config(format!("interval bound must be a number or \"inf\"/\"-inf\", got {other}"))),
    }
}

fn boxes(
    spec: Option<&Value>,
    ports: &[(String, usize)],
    what: &str,
) -> Result<Vec<PortBox>> {
    let map = match spec {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(Error::Config(format!("`{what}` must map port names to interval lists"))),
    };
    for k in map.keys() {
        if !ports.iter().any(|(n, _)| n == k) {
            return Err(Error::UnknownPort(format!("{what}: {k}")));
        }
    }
    ports
        .iter()
        .map(|(name, dim)| match map.get(name) {
            None => Ok(PortBox::unbounded(name.clone(), *dim)),
            Some(Value::Array(ivs)) if ivs.len() == *dim => {
                let bounds = ivs
                    .iter()
                    .map(|iv| match iv {
                        Value::Array(pair) if pair.len() == 2 => Interval::new(bound_value(&pair[0])?, bound_value(&pair[1])?),
                        _ => Err(Error::Config(format!("{what}.{name}: each interval is [lo, hi]"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PortBox::new(name.clone(), bounds))
            }
            Some(_) => Err(Error::Config(format!("{what}.{name}: expected {dim} intervals"))),
        })
        .collect()
}

fn attach_contract(block: BlockDef, c: &ContractEntry) -> Result<BlockDef> {
    if c.kind == "ag-box" {
        let ins: Vec<(String, usize)> = block.inputs.iter().map(|s| (s.name.clone(), s.dim)).collect();
        let outs: Vec<(String, usize)> = block.outputs.iter().map(|s| (s.name.clone(), s.dim)).collect();
        let assume = boxes(c.params.get("assume"), &ins, "assume")?;
        let guarantee = boxes(c.params.get("guarantee"), &outs, "guarantee")?;
        let ag = AgContract::new(assume, guarantee);
        ag.validate()?;
        return Ok(block.with_ag(ag));
    }
    match c.kind.strip_prefix("residual:") {
        Some(name) => Ok(block.with_residual(registered_residual(name, &c.params)?)),
        None => Err(Error::UnknownContract(c.kind.clone())),
    }
}

impl DiagramFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn build(&self) -> Result<LoadedDiagram> {
        let mut d = Diagram::new();
        for e in &self.blocks {
            let period = match &e.period {
                Some(s) => parse_time(s)?,
                None => Time::from_integer(1),
            };
            let mut b = build_block(&e.kind, &e.params, period)?;
            for c in &e.contracts {
                b = attach_contract(b, c)?;
            }
            d.add_block(e.name.clone(), b)?;
        }
        for c in &self.connections {
            d.connect(&c.from, &c.to)?;
        }
        let names = d.external_input_names()?;
        for k in self.inputs.keys() {
            if !names.contains(k) {
                return Err(Error::UnknownPort(format!("{k} is not an unconnected input")));
            }
        }
        let inputs = names
            .iter()
            .map(|n| {
                self.inputs
                    .get(n)
                    .map(InputEntry::signal)
                    .ok_or_else(|| Error::MissingInput(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let tf = self.tf.as_deref().map(parse_time).transpose()?;
        Ok(LoadedDiagram { diagram: d, inputs, tf })
    }
}

/// Parses and builds a diagram description.
pub fn load_diagram(text: &str) -> Result<LoadedDiagram> {
    DiagramFile::parse(text)?.build()
}
