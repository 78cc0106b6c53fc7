//! Joint learning of a bounded neural policy and an ICNN Lyapunov
//! certificate for the RK4-sampled Van der Pol oscillator.

use serde::{Deserialize, Serialize};

use super::{csv_table, train, uniform_points, PenaltyConfig, Problem, Terms, TrainConfig, TrainReport};
use crate::blocks::{execute_block, BlockDef, Bindings};
use crate::compose::{flatten, Diagram};
use crate::contracts::{eval_block_residuals, lyapunov_stepwise_residual};
use crate::dynamics::{icnn_lyapunov, mlp_policy, vdp_rk4, VdpParams};
use crate::error::{Error, Result};
use crate::nn::{Activation, Icnn, Mlp, PdLyapunov};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::time::{time, Time};

/// Generator stream for held-out initial conditions; training batches use
/// the iteration index.
const HELD_OUT_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Example2Config {
    pub vdp: VdpParams,
    pub horizon: usize,
    /// Initial conditions are drawn from `[-region, region]^2`.
    pub region: f64,
    pub u_bounds: (f64, f64),
    pub eps: f64,
    pub policy_hidden: Vec<usize>,
    pub lyapunov_hidden: Vec<usize>,
    pub delta: f64,
    pub held_out: usize,
    pub train: TrainConfig,
}

impl Default for Example2Config {
    fn default() -> Self {
        Self {
            vdp: VdpParams {
                mu: 1.0,
                tau: time(1, 10),
                substeps: 1,
            },
            horizon: 50,
            region: 3.0,
            u_bounds: (-5.0, 5.0),
            eps: 1e-3,
            policy_hidden: vec![32, 32],
            lyapunov_hidden: vec![32, 32],
            delta: crate::nn::DEFAULT_DELTA,
            held_out: 20,
            train: TrainConfig {
                lr: 1e-3,
                iterations: 2000,
                batch_size: 64,
                penalty: PenaltyConfig {
                    w_contract: 1e3,
                    ..PenaltyConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

/// `fb(pi ; P ; V)` with the Lyapunov residual attached to `V`.
pub fn vdp_closed_loop(cfg: &Example2Config) -> Result<BlockDef> {
    cfg.vdp.validate()?;
    let seed = cfg.train.seed;
    let tau = cfg.vdp.tau;
    let dims = |hidden: &[usize], out: usize| [&[2][..], hidden, &[out]].concat();
    let policy = Mlp::new(&dims(&cfg.policy_hidden, 1), Activation::Tanh, Some(cfg.u_bounds), seed)?;
    let icnn = Icnn::new(&dims(&cfg.lyapunov_hidden, 1), seed.wrapping_add(1))?;
    let v = PdLyapunov::new(icnn, cfg.delta)?;
    let mut d = Diagram::new();
    d.add_block("pi", mlp_policy(policy, tau)?)?;
    d.add_block("P", vdp_rk4(cfg.vdp, [0.0, 0.0])?)?;
    d.add_block("V", icnn_lyapunov(v, tau)?.with_residual(lyapunov_stepwise_residual(cfg.eps, 0)))?;
    d.connect("P.y", "pi.x")?;
    d.connect("pi.u", "P.u")?;
    d.connect("P.y", "V.x")?;
    flatten(&d)
}

pub struct Example2Problem {
    pub cfg: Example2Config,
    pub block: BlockDef,
    /// Composite parameter indices that are trained (all but `mu`).
    trainable: Vec<usize>,
    x: usize,
    u: usize,
    v: usize,
}

pub fn example2_problem(cfg: &Example2Config) -> Result<Example2Problem> {
    cfg.train.validate()?;
    let (lo, hi) = cfg.u_bounds;
    if !(cfg.eps > 0.0) || !(cfg.region > 0.0) || cfg.horizon == 0 || !(lo < hi) {
        return Err(Error::Config(format!(
            "need eps > 0, region > 0, horizon > 0, u_min < u_max; got eps={} region={} horizon={} u_bounds={:?}",
            cfg.eps, cfg.region, cfg.horizon, cfg.u_bounds
        )));
    }
    let block = vdp_closed_loop(cfg)?;
    let mu = block.param_index("P.mu")?;
    Ok(Example2Problem {
        trainable: (0..block.params.len()).filter(|i| *i != mu).collect(),
        x: block.output_index("P.y")?,
        u: block.output_index("pi.u")?,
        v: block.output_index("V.V")?,
        block,
        cfg: cfg.clone(),
    })
}

/// Per instant, `[B, dim]` values of state, input and Lyapunov value.
pub struct Rollout {
    pub x: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Example2Problem {
    fn tf(&self) -> Time {
        self.cfg.vdp.tau * Time::from_integer(self.cfg.horizon as i64)
    }

    fn bind(&self, tape: &mut Tape, params: &[NodeId], x0: &Tensor) -> Bindings {
        let b = &self.block;
        let mut p: Vec<NodeId> = b.params.iter().map(|q| tape.constant(q.value.clone())).collect();
        for (slot, id) in self.trainable.iter().zip(params) {
            p[*slot] = *id;
        }
        Bindings {
            init: vec![tape.constant(x0.clone())],
            params: p,
        }
    }

    pub fn batch(&self, iter: usize) -> Tensor {
        let c = &self.cfg;
        uniform_points(c.train.seed, iter as u64, c.train.batch_size, 2, -c.region, c.region)
    }

    pub fn held_out(&self) -> Tensor {
        let c = &self.cfg;
        uniform_points(c.train.seed, HELD_OUT_STREAM, c.held_out, 2, -c.region, c.region)
    }

    /// Closed-loop simulation from a `[B, 2]` batch with fixed parameters.
    pub fn rollout(&self, params: &[Tensor], x0: &Tensor) -> Result<Rollout> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let bind = self.bind(&mut tape, &ids, x0);
        let ex = execute_block(&mut tape, &self.block, &bind, &[], self.tf())?;
        let col = |i: usize| ex.outputs.iter().map(|o| tape.value(o[i]).clone()).collect();
        Ok(Rollout {
            x: col(self.x),
            u: col(self.u),
            v: col(self.v),
        })
    }
}

impl Problem for Example2Problem {
    fn param_names(&self) -> Vec<String> {
        self.trainable.iter().map(|i| self.block.params[*i].name.clone()).collect()
    }

    fn initial_params(&self) -> Vec<Tensor> {
        self.trainable.iter().map(|i| self.block.params[*i].value.clone()).collect()
    }

    /// `J = mean_b sum_k |x_k|^2` over the iteration's batch; residuals
    /// are every step's `V(x_{k+1}) - V(x_k) + eps`.
    fn evaluate(&self, tape: &mut Tape, params: &[NodeId], iter: usize) -> Result<Terms> {
        let x0 = self.batch(iter);
        let bind = self.bind(tape, params, &x0);
        let ex = execute_block(tape, &self.block, &bind, &[], self.tf())?;
        let mut objective = None;
        for o in &ex.outputs {
            let s = tape.squared_norm(o[self.x])?;
            objective = Some(match objective {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
        let objective = objective.expect("grid has at least one instant");
        let objective = tape.scale(objective, 1.0 / x0.shape()[0] as f64)?;
        let residuals = eval_block_residuals(tape, &self.block, &ex)?.map(|r| r.value);
        Ok(Terms {
            objective,
            residuals,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example2Metrics {
    pub config: Example2Config,
    /// Largest `V(x_{k+1}) - V(x_k) + eps` on the final training batch.
    pub final_batch_worst_residual: f64,
    pub final_batch_contract_satisfied: bool,
    pub final_batch_max_abs_u: f64,
    pub held_out_max_abs_u: f64,
    pub inputs_within_bounds: bool,
    /// Fraction of held-out steps with `V(x_{k+1}) < V(x_k)`.
    pub held_out_dv_negative_fraction: f64,
    /// Median of `|x_N| / |x_0|` over held-out initial conditions.
    pub held_out_median_contraction: f64,
    pub final_objective: f64,
}

pub struct Example2 {
    pub metrics: Example2Metrics,
    pub report: TrainReport,
    pub files: Vec<(String, String)>,
}

fn within(u: &[Tensor], (lo, hi): (f64, f64)) -> (bool, f64) {
    let vals = u.iter().flat_map(|t| t.data().iter().copied());
    let mut ok = true;
    let mut m: f64 = 0.0;
    for v in vals {
        ok &= lo <= v && v <= hi;
        m = m.max(v.abs());
    }
    (ok, m)
}

fn row_norm(t: &Tensor, b: usize) -> f64 {
    t.row(b).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Trains policy and certificate, then evaluates on held-out initial
/// conditions.
pub fn run_example2(cfg: &Example2Config) -> Result<Example2> {
    let problem = example2_problem(cfg)?;
    let (params, report) = train(&problem, &cfg.train)?;
    let last = problem.rollout(&params, &problem.batch(cfg.train.iterations - 1))?;
    let x0 = problem.held_out();
    let held = problem.rollout(&params, &x0)?;

    let (ok_train, max_train) = within(&last.u, cfg.u_bounds);
    let (ok_held, max_held) = within(&held.u, cfg.u_bounds);
    let n = cfg.horizon;
    let mut negative = 0usize;
    let mut ratios = Vec::with_capacity(cfg.held_out);
    let mut rows = Vec::new();
    for b in 0..cfg.held_out {
        for k in 0..=n {
            let dv = if k < n {
                let d = held.v[k + 1].data()[b] - held.v[k].data()[b];
                negative += usize::from(d < 0.0);
                d
            } else {
                f64::NAN
            };
            let x = held.x[k].row(b);
            rows.push(vec![b as f64, k as f64, x[0], x[1], held.u[k].data()[b], held.v[k].data()[b], dv]);
        }
        ratios.push(row_norm(&held.x[n], b) / row_norm(&held.x[0], b));
    }
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    let median = if m % 2 == 1 {
        ratios[m / 2]
    } else {
        0.5 * (ratios[m / 2 - 1] + ratios[m / 2])
    };
    let worst = report.final_eval.worst_residual.unwrap_or(f64::NAN);
    let metrics = Example2Metrics {
        config: cfg.clone(),
        final_batch_worst_residual: worst,
        final_batch_contract_satisfied: worst <= 0.0,
        final_batch_max_abs_u: max_train,
        held_out_max_abs_u: max_held,
        inputs_within_bounds: ok_train && ok_held,
        held_out_dv_negative_fraction: negative as f64 / (cfg.held_out * n) as f64,
        held_out_median_contraction: median,
        final_objective: report.final_eval.objective,
    };
    let files = vec![
        ("metrics.json".into(), serde_json::to_string_pretty(&metrics)? + "\n"),
        ("report.json".into(), report.to_json()? + "\n"),
        ("training.csv".into(), report.to_csv()),
        (
            "held_out.csv".into(),
            csv_table(&["traj", "k", "x1", "x2", "u", "V", "dV"], rows),
        ),
    ];
    Ok(Example2 { metrics, report, files })
}
