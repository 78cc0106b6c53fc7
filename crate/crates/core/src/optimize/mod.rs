//! Verifiable optimisation: penalty and barrier aggregation of contract
//! residuals, box projections, first-order optimisers, the training loop,
//! and the three example problems.

mod example1;
mod example2;
mod example3;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub use example1::{closed_loop, example1_problem, run_example1, Example1, Example1Config, Example1Metrics, Example1Problem};
pub use example2::{
    example2_problem, run_example2, vdp_closed_loop, Example2, Example2Config, Example2Metrics, Example2Problem, Rollout,
};
pub use example3::{
    data_initial_conditions, example3_data, example3_problem, run_example3, Eigenvalue, Example3, Example3Config, Example3Metrics,
    Example3Problem, Linearity,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    SquaredHinge,
    LogBarrier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    /// Weight of the contract penalty.
    pub w_contract: f64,
    /// Weight of `R(theta) = sum |theta_i|^2`.
    pub w_reg: f64,
    /// Barrier sharpness.
    pub beta: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::SquaredHinge,
            w_contract: 1.0,
            w_reg: 0.0,
            beta: 1.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_contract > 0.0
            && self.w_contract.is_finite()
            && self.w_reg >= 0.0
            && self.w_reg.is_finite()
            && self.beta > 0.0
            && self.beta.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid penalty settings {self:?}")));
        }
        Ok(())
    }
}

/// `Phi(r)`: `sum max(0, r_i)^2` or `-(1/beta) sum log(-r_i)`.
pub fn penalty(tape: &mut Tape, r: NodeId, cfg: &PenaltyConfig) -> Result<NodeId> {
    match cfg.kind {
        PenaltyKind::SquaredHinge => {
            let h = tape.max_const(r, 0.0)?;
            let sq = tape.square(h)?;
            tape.sum(sq)
        }
        PenaltyKind::LogBarrier => {
            if let Some((index, value)) = tape.value(r).data().iter().copied().enumerate().find(|(_, v)| !(*v < 0.0)) {
                return Err(Error::BarrierInfeasible { index, value });
            }
            let neg = tape.neg(r)?;
            let l = tape.log(neg)?;
            let s = tape.sum(l)?;
            tape.scale(s, -1.0 / cfg.beta)
        }
    }
}

/// `J + w_reg R + w_C Phi(r)`; absent terms contribute nothing.
pub fn total_loss(
    tape: &mut Tape,
    objective: NodeId,
    regularizer: Option<NodeId>,
    residuals: Option<NodeId>,
    cfg: &PenaltyConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let shape = tape.value(objective).shape().to_vec();
    if tape.value(objective).numel() != 1 {
        return Err(Error::NonScalarLoss(shape));
    }
    let mut loss = objective;
    if let (Some(r), true) = (regularizer, cfg.w_reg > 0.0) {
        let t = tape.scale(r, cfg.w_reg)?;
        loss = tape.add(loss, t)?;
    }
    if let Some(r) = residuals {
        let p = penalty(tape, r, cfg)?;
        let p = tape.scale(p, cfg.w_contract)?;
        loss = tape.add(loss, p)?;
    }
    Ok(loss)
}

/// Componentwise clamp of `theta` into `[lo, hi]`.
pub fn project_box(theta: &mut Tensor, lo: f64, hi: f64) -> Result<()> {
    if !(lo <= hi) {
        return Err(Error::EmptyInterval { lo, hi });
    }
    *theta = theta.map(|v| v.clamp(lo, hi));
    Ok(())
}

/// The admissible gain interval `|a - b k| <= 1 - eps`, for `b > 0`.
pub fn stability_interval(a: f64, b: f64, eps: f64) -> Result<(f64, f64)> {
    if !(b > 0.0) {
        return Err(Error::Config(format!("b must be positive, got {b}")));
    }
    let lo = (a - (1.0 - eps)) / b;
    let hi = (a + (1.0 - eps)) / b;
    if !(lo <= hi) {
        return Err(Error::EmptyInterval { lo, hi });
    }
    Ok((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainGradient,
    AdaptiveMoment { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::AdaptiveMoment {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimiser state for one list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let mut data = p.data().to_vec();
            match self.kind {
                OptimizerKind::PlainGradient => {
                    for (x, d) in data.iter_mut().zip(g.data()) {
                        *x -= self.lr * d;
                    }
                }
                OptimizerKind::AdaptiveMoment { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    for (j, (x, d)) in data.iter_mut().zip(g.data()).enumerate() {
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub iterations: usize,
    /// Initial conditions per iteration, for problems that sample them.
    pub batch_size: usize,
    pub seed: u64,
    pub penalty: PenaltyConfig,
    /// Keep every iterate's parameters in the report (small models only).
    pub record_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::adam(),
            lr: 1e-3,
            iterations: 100,
            batch_size: 64,
            seed: 0,
            penalty: PenaltyConfig::default(),
            record_params: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "training needs lr > 0, iterations > 0 and batch_size > 0, got lr={} iterations={} batch_size={}",
                self.lr, self.iterations, self.batch_size
            )));
        }
        self.penalty.validate()
    }
}

/// What a problem records on the tape for one iteration.
#[derive(Clone, Copy, Debug)]
pub struct Terms {
    pub objective: NodeId,
    /// Flat residual vector; satisfied where `<= 0`.
    pub residuals: Option<NodeId>,
}

/// A differentiable training problem over a list of parameter tensors.
pub trait Problem {
    fn param_names(&self) -> Vec<String>;
    fn initial_params(&self) -> Vec<Tensor>;
    /// Records objective and residuals for iteration `iter`, whose batch
    /// the problem may sample deterministically from `iter`.
    fn evaluate(&self, tape: &mut Tape, params: &[NodeId], iter: usize) -> Result<Terms>;
    /// Projection hook applied after every update and to the initial point.
    fn project(&self, _params: &mut [Tensor]) -> Result<()> {
        Ok(())
    }
    /// A scalar tracked per iterate (a gain, a spectral radius, ...).
    fn monitor(&self, _params: &[Tensor]) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub objective: f64,
    /// Largest residual component, if the problem has residuals.
    pub worst_residual: Option<f64>,
    pub monitor: Option<f64>,
    /// SHA-256 of the iterate's parameters.
    pub params_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<Tensor>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub param_names: Vec<String>,
    /// One record per iteration, evaluated at the iterate before its update.
    pub history: Vec<IterRecord>,
    /// The final iterate, evaluated on the last iteration's batch.
    pub final_eval: IterRecord,
    pub final_params: Vec<Tensor>,
    /// Excluded from serialised output so reports are reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl TrainReport {
    /// `iter,loss,objective,worst_residual`, one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,objective,worst_residual\n");
        for r in &self.history {
            let w = r.worst_residual.map(|v| format!("{v:?}")).unwrap_or_default();
            s.push_str(&format!("{},{:?},{:?},{}\n", r.iter, r.loss, r.objective, w));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// SHA-256 over shapes and little-endian values.
pub fn params_hash(params: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for d in p.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Step {
    record: IterRecord,
    grads: Vec<Tensor>,
}

fn evaluate_at<P: Problem + ?Sized>(
    problem: &P,
    params: &[Tensor],
    iter: usize,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<Step> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let terms = problem.evaluate(&mut tape, &ids, iter)?;
    let reg = if cfg.penalty.w_reg > 0.0 {
        let mut acc = None;
        for id in &ids {
            let s = tape.squared_norm(*id)?;
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
        acc
    } else {
        None
    };
    let loss = total_loss(&mut tape, terms.objective, reg, terms.residuals, &cfg.penalty)?;
    let loss_v = tape.value(loss).item();
    let worst = terms
        .residuals
        .map(|r| tape.value(r).data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let record = IterRecord {
        iter,
        loss: loss_v,
        objective: tape.value(terms.objective).item(),
        worst_residual: worst,
        monitor: problem.monitor(params)?,
        params_hash: params_hash(params),
        params: cfg.record_params.then(|| params.to_vec()),
    };
    if !loss_v.is_finite() {
        log::error!(
            "non-finite loss at iteration {iter}: loss={loss_v} objective={} params={}",
            record.objective,
            record.params_hash
        );
        return Err(Error::NonFiniteLoss { iteration: iter });
    }
    let grads = if with_grad {
        let g = tape.backward(loss)?;
        params.iter().zip(&ids).map(|(p, id)| g.get_or_zeros(*id, p)).collect()
    } else {
        Vec::new()
    };
    Ok(Step { record, grads })
}

/// Projected first-order training. Each iteration evaluates the current
/// (projected) iterate, backpropagates the total loss, updates and projects.
pub fn train<P: Problem + ?Sized>(problem: &P, cfg: &TrainConfig) -> Result<(Vec<Tensor>, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = problem.initial_params();
    problem.project(&mut params)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &params);
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let step = evaluate_at(problem, &params, iter, cfg, true)?;
        if iter % 100 == 0 {
            log::debug!(
                "iter {iter}: loss {:.6e} objective {:.6e} worst residual {:?}",
                step.record.loss,
                step.record.objective,
                step.record.worst_residual
            );
        }
        history.push(step.record);
        opt.update(&mut params, &step.grads)?;
        problem.project(&mut params)?;
    }
    let final_eval = evaluate_at(problem, &params, cfg.iterations - 1, cfg, false)?.record;
    let report = TrainReport {
        param_names: problem.param_names(),
        history,
        final_eval,
        final_params: params.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// A CSV table with shortest round-trip float formatting.
pub(crate) fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// `n` points uniform in `[lo, hi]^dim` as an `[n, dim]` matrix; stream
/// `stream` of a generator seeded with `seed`.
pub fn uniform_points(seed: u64, stream: u64, n: usize, dim: usize, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.gen_range(lo..=hi)).collect())
}
