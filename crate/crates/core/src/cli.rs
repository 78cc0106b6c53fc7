//! The `dcbd` command line: simulate and differentiate JSON diagrams, run
//! the example studies, and generate Van der Pol datasets.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::blocks::{execute_block, Bindings, BlockDef, Execution, Trajectory};
use crate::compose::{ag_or_trivial, detect_algebraic_loops, flatten, Diagram};
use crate::contracts::{check_ag_compatibility, check_block_contracts, ContractReport};
use crate::dynamics::{dataset_to_csv, load_diagram, vdp_trajectories, LoadedDiagram, VdpParams};
use crate::error::{Error, Result};
use crate::optimize::{
    data_initial_conditions, run_example1, run_example2, run_example3, Example1Config, Example2Config,
    Example3Config,
};
use crate::tape::{GradCheck, NodeId, Tape};
use crate::tensor::Tensor;
use crate::time::{format_time, parse_time, time, Time};

#[derive(Debug, Parser)]
#[command(name = "dcbd", version, about = "Differentiable causal block diagrams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a diagram; write per-signal CSVs and a contract report.
    Run(RunArgs),
    /// Differentiate a scalar loss of a diagram w.r.t. all parameters.
    Grad(GradArgs),
    /// Run example study 1, 2 or 3 end to end.
    Example(ExampleArgs),
    /// Sample uncontrolled Van der Pol trajectories to CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Diagram JSON file.
    #[arg(long)]
    pub config: PathBuf,
    /// Final time as `p/q`; overrides the diagram's `tf`.
    #[arg(long)]
    pub tf: Option<String>,
    #[arg(long, default_value = "dcbd-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    /// Diagram JSON file.
    #[arg(long)]
    pub config: PathBuf,
    /// `[sumsq|sum|final:]<block.port>`; `sumsq` when no reduction is given.
    #[arg(long)]
    pub loss: String,
    #[arg(long)]
    pub tf: Option<String>,
    #[arg(long, default_value = "dcbd-out")]
    pub out: PathBuf,
    /// Compare against central differences and fail on mismatch.
    #[arg(long)]
    pub check: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ExampleArgs {
    #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
    pub which: u8,
    /// Example config JSON; unspecified fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "dcbd-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the number of training iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset config JSON (`vdp`, `region`, `n_traj`, `n_steps`, `seed`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_traj: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "dcbd-out")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub vdp: VdpParams,
    pub region: f64,
    pub n_traj: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            vdp: VdpParams {
                mu: 1.0,
                tau: time(1, 10),
                substeps: 1,
            },
            region: 2.0,
            n_traj: 20,
            n_steps: 100,
            seed: 0,
        }
    }
}

/// Exit status for an error: 1 config or usage, 2 model, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    use Error::*;
    match e {
        Parse(_) | Config(_) | Io(_) | MissingInput(_) | UnknownPort(_) | UnknownContract(_) | UnknownOp(_)
        | InvalidSignal(_) | NonScalarLoss(_) | EmptyInterval { .. } => 1,
        Tensor(crate::error::TensorError::NonFinite { .. })
        | NonFiniteValue { .. }
        | NonFiniteLoss { .. }
        | ImplicitSolveDiverged { .. }
        | SingularJacobian
        | NoConvergence
        | DegenerateDirection(_)
        | BarrierInfeasible { .. }
        | GradientCheckFailed { .. } => 3,
        _ => 2,
    }
}

/// Logging filter from `DCBD_LOG` (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("DCBD_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Executes a parsed command; returns lines for standard output.
pub fn execute(cli: &Cli) -> Result<Vec<String>> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Grad(a) => cmd_grad(a),
        Command::Example(a) => cmd_example(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_files(dir: &Path, files: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    for (name, text) in files {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn load(path: &Path, tf: Option<&str>) -> Result<(LoadedDiagram, Time)> {
    let loaded = load_diagram(&read(path)?)?;
    let tf = match (tf, loaded.tf) {
        (Some(s), _) => parse_time(s)?,
        (None, Some(t)) => t,
        (None, None) => return Err(Error::Config("no final time: pass --tf or set `tf` in the diagram".into())),
    };
    if tf <= Time::from_integer(0) {
        return Err(Error::Config(format!("final time must be positive, got {}", format_time(tf))));
    }
    let cycles = detect_algebraic_loops(&loaded.diagram)?;
    if !cycles.is_empty() {
        return Err(Error::AlgebraicLoop(cycles));
    }
    Ok((loaded, tf))
}

/// Compatibility of every wire with an A-G contract on either end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgFinding {
    pub from: String,
    pub to: String,
    pub report: ContractReport,
}

pub fn ag_findings(d: &Diagram) -> Result<Vec<AgFinding>> {
    let mut out = Vec::new();
    for ((sb, so), (db, di)) in d.indexed_connections()? {
        let (src, dst) = (&d.blocks[sb], &d.blocks[db]);
        if src.ag.is_none() && dst.ag.is_none() {
            continue;
        }
        let report = check_ag_compatibility(&ag_or_trivial(src), &ag_or_trivial(dst), &[(so, di)])?;
        out.push(AgFinding {
            from: format!("{}.{}", src.name, src.outputs[so].name),
            to: format!("{}.{}", dst.name, dst.inputs[di].name),
            report,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tf: String,
    pub satisfied: bool,
    /// Largest residual component over all residual contracts.
    pub worst_residual: Option<f64>,
    pub residual_contracts: Vec<ContractReport>,
    pub ag_compatibility: Vec<AgFinding>,
}

/// `block.port` names; a one-block diagram flattens to the bare block.
fn qualified(block: &BlockDef, name: &str) -> String {
    if block.composite {
        name.to_string()
    } else {
        format!("{}.{name}", block.name)
    }
}

fn qualify_all(block: &BlockDef, mut traj: Trajectory) -> Trajectory {
    for s in &mut traj.signals {
        s.name = qualified(block, &s.name);
    }
    traj
}

fn signal_files(prefix: &str, traj: &Trajectory) -> Vec<(String, String)> {
    traj.signals
        .iter()
        .map(|s| {
            let one = Trajectory {
                times: traj.times.clone(),
                signals: vec![s.clone()],
            };
            (format!("{prefix}{}.csv", s.name), one.to_csv())
        })
        .collect()
}

fn run_block(block: &BlockDef, loaded: &LoadedDiagram, tf: Time) -> Result<(Tape, Execution)> {
    let mut tape = Tape::new();
    let b = Bindings::constants(&mut tape, block);
    let ex = execute_block(&mut tape, block, &b, &loaded.inputs, tf)?;
    Ok((tape, ex))
}

/// Simulates the diagram and writes `<signal>.csv` per output,
/// `state.<name>.csv` per state, `outputs.csv` and `report.json`.
/// Incompatible A-G wires are reported, then fail with exit status 2.
pub fn cmd_run(a: &RunArgs) -> Result<Vec<String>> {
    let (loaded, tf) = load(&a.config, a.tf.as_deref())?;
    let ag = ag_findings(&loaded.diagram)?;
    let block = flatten(&loaded.diagram)?;
    let (mut tape, ex) = run_block(&block, &loaded, tf)?;
    let outputs = qualify_all(&block, ex.output_trajectory(&tape, &block));
    let states = qualify_all(&block, ex.state_trajectory(&tape, &block));
    let residual_contracts = check_block_contracts(&mut tape, &block, &ex)?;
    let worst_residual = residual_contracts
        .iter()
        .map(|r| r.worst)
        .filter(|w| !w.is_infinite())
        .reduce(f64::max);
    let report = RunReport {
        tf: format_time(tf),
        satisfied: residual_contracts.iter().all(|r| r.satisfied) && ag.iter().all(|f| f.report.satisfied),
        worst_residual,
        residual_contracts,
        ag_compatibility: ag,
    };

    let mut files = signal_files("", &outputs);
    files.extend(signal_files("state.", &states));
    files.push(("outputs.csv".into(), outputs.to_csv()));
    files.push(("report.json".into(), serde_json::to_string_pretty(&report)? + "\n"));
    write_files(&a.out, &files)?;

    let mut lines = vec![format!(
        "simulated {} instants to t = {}; wrote {} files to {}",
        outputs.times.len(),
        format_time(tf),
        files.len(),
        a.out.display()
    )];
    for r in &report.residual_contracts {
        lines.push(format!("contract {}: satisfied={} worst={:e}", r.contract, r.satisfied, r.worst));
    }
    let bad: Vec<&AgFinding> = report.ag_compatibility.iter().filter(|f| !f.report.satisfied).collect();
    if let Some(f) = bad.first() {
        let witness = f.report.witness.clone().unwrap_or_default();
        return Err(Error::Incompatible(format!("{} -> {}: {witness}", f.from, f.to)));
    }
    Ok(lines)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    SumSq,
    Sum,
    Final,
}

/// Parses `[sumsq|sum|final:]<block.port>`.
pub fn parse_loss(spec: &str) -> Result<(Reduction, String)> {
    let (red, sig) = match spec.split_once(':') {
        Some(("sumsq", s)) => (Reduction::SumSq, s),
        Some(("sum", s)) => (Reduction::Sum, s),
        Some(("final", s)) => (Reduction::Final, s),
        Some((r, _)) => return Err(Error::Config(format!("unknown loss reduction `{r}`"))),
        None => (Reduction::SumSq, spec),
    };
    if sig.is_empty() {
        return Err(Error::Config("loss needs a signal name".into()));
    }
    Ok((red, sig.to_string()))
}

/// Builds the loss of output `signal` over the run on `tape`.
pub fn diagram_loss(
    tape: &mut Tape,
    block: &BlockDef,
    params: &[NodeId],
    loaded: &LoadedDiagram,
    tf: Time,
    reduction: Reduction,
    signal: &str,
) -> Result<NodeId> {
    let j = block
        .outputs
        .iter()
        .position(|o| qualified(block, &o.name) == signal)
        .ok_or_else(|| Error::UnknownPort(signal.to_string()))?;
    let dim = block.outputs[j].dim;
    if reduction != Reduction::SumSq && dim != 1 {
        return Err(Error::NonScalarLoss(vec![dim]));
    }
    let bind = Bindings {
        init: block.init.iter().map(|x| tape.constant(x.clone())).collect(),
        params: params.to_vec(),
    };
    let ex = execute_block(tape, block, &bind, &loaded.inputs, tf)?;
    let ys: Vec<NodeId> = ex.outputs.iter().map(|o| o[j]).collect();
    match reduction {
        Reduction::Final => tape.sum(*ys.last().expect("grid has at least one instant")),
        Reduction::Sum => {
            let y = tape.concat(&ys, 0)?;
            tape.sum(y)
        }
        Reduction::SumSq => {
            let y = tape.concat(&ys, 0)?;
            tape.squared_norm(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGradient {
    pub param: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub gradient: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub loss: String,
    pub tf: String,
    pub value: f64,
    pub gradients: Vec<ParamGradient>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rel_error: Option<f64>,
}

/// Writes `gradients.json` and, with `--check`, `fd_check.csv`.
pub fn cmd_grad(a: &GradArgs) -> Result<Vec<String>> {
    let (loaded, tf) = load(&a.config, a.tf.as_deref())?;
    let (red, sig) = parse_loss(&a.loss)?;
    let block = flatten(&loaded.diagram)?;
    let point: Vec<Tensor> = block.param_values();
    let f = |t: &mut Tape, p: &[NodeId]| diagram_loss(t, &block, p, &loaded, tf, red, &sig);

    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = point.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let gradients: Vec<ParamGradient> = block
        .params
        .iter()
        .zip(&leaves)
        .map(|(p, id)| ParamGradient {
            param: qualified(&block, &p.name),
            shape: p.value.shape().to_vec(),
            value: p.value.data().to_vec(),
            gradient: grads.get_or_zeros(*id, &p.value).data().to_vec(),
        })
        .collect();

    let mut lines = vec![format!("loss {} = {value:e} over {} parameters", a.loss, gradients.len())];
    let mut files = Vec::new();
    let mut report = GradReport {
        loss: a.loss.clone(),
        tf: format_time(tf),
        value,
        gradients,
        max_rel_error: None,
    };
    let mut failure = None;
    if a.check {
        let chk = GradCheck::new(a.step, a.tolerance).run(f, &point)?;
        let mut csv = String::from("param,index,ad,fd,rel_error,kink\n");
        for e in &chk.entries {
            csv.push_str(&format!(
                "{},{},{:?},{:?},{:?},{}\n",
                qualified(&block, &block.params[e.leaf].name),
                e.index, e.ad, e.fd, e.rel_error, e.kink
            ));
        }
        files.push(("fd_check.csv".into(), csv));
        report.max_rel_error = Some(chk.max_rel_error);
        lines.push(format!(
            "finite differences: {} checked, {} kinks, max relative error {:e}, {}",
            chk.checked,
            chk.kinks.len(),
            chk.max_rel_error,
            if chk.passed() { "PASS" } else { "FAIL" }
        ));
        if !chk.passed() {
            failure = Some(Error::GradientCheckFailed {
                max_rel_error: chk.max_rel_error,
                failing: chk.failing.len(),
            });
        }
    }
    files.push(("gradients.json".into(), serde_json::to_string_pretty(&report)? + "\n"));
    write_files(&a.out, &files)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(lines),
    }
}

fn config<T: Default + for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&read(p)?)?),
        None => Ok(T::default()),
    }
}

/// Runs one example study and writes its files to `--out`.
pub fn cmd_example(a: &ExampleArgs) -> Result<Vec<String>> {
    let path = a.config.as_deref();
    let (files, summary) = match a.which {
        1 => {
            let mut cfg: Example1Config = config(path)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            let out = run_example1(&cfg)?;
            let m = &out.metrics;
            let s = format!(
                "kappa* = {:.6}, pole = {:.6}, max iterate residual = {:e}, ultimate bound holds = {}, untuned diverges = {}",
                m.kappa_star, m.closed_loop_pole, m.max_iterate_residual, m.ultimate_bound_holds, m.untuned_diverges
            );
            (out.files, s)
        }
        2 => {
            let mut cfg: Example2Config = config(path)?;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            let out = run_example2(&cfg)?;
            let m = &out.metrics;
            let s = format!(
                "final batch worst residual = {:e}, max |u| = {:.4}, held-out dV<0 fraction = {:.4}, median contraction = {:.4}",
                m.final_batch_worst_residual,
                m.held_out_max_abs_u,
                m.held_out_dv_negative_fraction,
                m.held_out_median_contraction
            );
            (out.files, s)
        }
        _ => {
            let mut cfg: Example3Config = config(path)?;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            let out = run_example3(&cfg)?;
            let m = &out.metrics;
            let s = format!(
                "max spectral radius = {:.6}, eigenvalues inside unit disk = {}, rollout MSE = [{:.4e}, {:.4e}]",
                m.max_spectral_radius, m.all_eigenvalues_inside_unit_disk, m.rollout_mse[0], m.rollout_mse[1]
            );
            (out.files, s)
        }
    };
    write_files(&a.out, &files)?;
    Ok(vec![
        format!("example {}: {summary}", a.which),
        format!("wrote {} files to {}", files.len(), a.out.display()),
    ])
}

/// Writes `dataset.csv` (`traj_id,k,x1,x2`) to `--out`. Unlike the
/// examples this admits `mu = 0`.
pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Vec<String>> {
    let mut cfg: GenDataConfig = config(a.config.as_deref())?;
    cfg.n_traj = a.n_traj.unwrap_or(cfg.n_traj);
    cfg.n_steps = a.n_steps.unwrap_or(cfg.n_steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let v = cfg.vdp;
    if !(v.mu >= 0.0 && v.mu.is_finite()) || v.tau <= Time::from_integer(0) || v.substeps == 0 {
        return Err(Error::Config(format!("need mu >= 0, tau > 0, substeps >= 1, got {v:?}")));
    }
    if cfg.n_traj == 0 || !(cfg.region > 0.0 && cfg.region.is_finite()) {
        return Err(Error::Config("need n_traj >= 1 and a positive finite region".into()));
    }
    let x0 = data_initial_conditions(cfg.seed, cfg.n_traj, cfg.region);
    let data = vdp_trajectories(cfg.vdp, &x0, cfg.n_steps)?;
    write_files(&a.out, &[("dataset.csv".into(), dataset_to_csv(&data))])?;
    Ok(vec![format!(
        "wrote {} trajectories of {} steps to {}",
        cfg.n_traj,
        cfg.n_steps,
        a.out.join("dataset.csv").display()
    )])
}
