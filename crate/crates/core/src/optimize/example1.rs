//! Stability-certified tuning of a scalar feedback gain: the closed loop
//! `fb((sum ; C) ; P)` driven by a bounded disturbance, with the gain
//! projected onto `|a - b k| <= 1 - eps` after every step.

use serde::{Deserialize, Serialize};

use super::{csv_table, project_box, stability_interval, train, OptimizerKind, Problem, Terms, TrainConfig, TrainReport};
use crate::blocks::{execute_block, simulate, BlockDef, Bindings, InputSignal};
use crate::compose::{flatten, Diagram};
use crate::contracts::{eval_block_residuals, stability_residual};
use crate::dynamics::{disturbance, gain, scalar_plant, sum, ScalarPlantParams};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::time::Time;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Example1Config {
    pub a: f64,
    pub b: f64,
    pub w_max: f64,
    pub eps: f64,
    pub lambda_u: f64,
    /// Horizon `N`; the trajectory has `N + 1` samples.
    pub horizon: usize,
    pub x0: f64,
    /// Untuned gain, also the (pre-projection) starting point.
    pub kappa0: f64,
    /// Seeds the disturbance realisation.
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for Example1Config {
    fn default() -> Self {
        Self {
            a: 1.02,
            b: 1.0,
            w_max: 0.1,
            eps: 0.05,
            lambda_u: 0.01,
            horizon: 100,
            x0: 1.0,
            kappa0: 0.0,
            seed: 0,
            train: TrainConfig {
                optimizer: OptimizerKind::PlainGradient,
                lr: 1e-2,
                iterations: 200,
                batch_size: 1,
                record_params: true,
                ..TrainConfig::default()
            },
        }
    }
}

/// The closed loop for a given gain; the stability residual rides on `C`.
pub fn closed_loop(cfg: &Example1Config, kappa: f64) -> Result<BlockDef> {
    let one = Time::from_integer(1);
    let plant = ScalarPlantParams {
        a: cfg.a,
        b: cfg.b,
        w_max: cfg.w_max,
    };
    let mut d = Diagram::new();
    d.add_block("sum", sum(1, one)?)?;
    d.add_block("C", gain(kappa, one)?.with_residual(stability_residual(cfg.a, cfg.b, cfg.eps)))?;
    d.add_block("P", scalar_plant(plant, cfg.x0, one)?)?;
    d.add_block("W", disturbance(cfg.w_max, cfg.seed, one)?)?;
    d.connect("sum.e", "C.u")?;
    d.connect("C.y", "P.u")?;
    d.connect("P.y", "sum.y")?;
    d.connect("W.w", "P.w")?;
    flatten(&d)
}

pub struct Example1Problem {
    pub cfg: Example1Config,
    pub block: BlockDef,
    pub interval: (f64, f64),
    kappa: usize,
    y: usize,
    u: usize,
}

pub fn example1_problem(cfg: &Example1Config) -> Result<Example1Problem> {
    cfg.train.validate()?;
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) || !(cfg.lambda_u >= 0.0) || cfg.horizon == 0 {
        return Err(Error::Config(format!(
            "need 0 < eps < 1, lambda_u >= 0, horizon > 0; got eps={} lambda_u={} horizon={}",
            cfg.eps, cfg.lambda_u, cfg.horizon
        )));
    }
    let block = closed_loop(cfg, cfg.kappa0)?;
    Ok(Example1Problem {
        interval: stability_interval(cfg.a, cfg.b, cfg.eps)?,
        kappa: block.param_index("C.k")?,
        y: block.output_index("P.y")?,
        u: block.output_index("C.y")?,
        block,
        cfg: cfg.clone(),
    })
}

impl Problem for Example1Problem {
    fn param_names(&self) -> Vec<String> {
        vec!["kappa".into()]
    }

    fn initial_params(&self) -> Vec<Tensor> {
        vec![Tensor::scalar(self.cfg.kappa0)]
    }

    fn evaluate(&self, tape: &mut Tape, params: &[NodeId], _iter: usize) -> Result<Terms> {
        let b = &self.block;
        let bind = Bindings {
            init: b.init.iter().map(|x| tape.constant(x.clone())).collect(),
            params: (0..b.params.len())
                .map(|i| {
                    if i == self.kappa {
                        params[0]
                    } else {
                        tape.constant(b.params[i].value.clone())
                    }
                })
                .collect(),
        };
        let tf = Time::from_integer(self.cfg.horizon as i64);
        let ex = execute_block(tape, b, &bind, &[InputSignal::scalar(0.0)], tf)?;
        let ys: Vec<NodeId> = ex.outputs.iter().map(|o| o[self.y]).collect();
        let us: Vec<NodeId> = ex.outputs.iter().map(|o| o[self.u]).collect();
        let y = tape.concat(&ys, 0)?;
        let u = tape.concat(&us, 0)?;
        let jy = tape.squared_norm(y)?;
        let ju = tape.squared_norm(u)?;
        let ju = tape.scale(ju, self.cfg.lambda_u)?;
        let objective = tape.add(jy, ju)?;
        let residuals = eval_block_residuals(tape, b, &ex)?.map(|r| r.value);
        Ok(Terms { objective, residuals })
    }

    fn project(&self, params: &mut [Tensor]) -> Result<()> {
        project_box(&mut params[0], self.interval.0, self.interval.1)
    }

    fn monitor(&self, params: &[Tensor]) -> Result<Option<f64>> {
        Ok(Some(params[0].data()[0]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example1Metrics {
    pub config: Example1Config,
    pub interval: (f64, f64),
    pub kappa_initial: f64,
    pub kappa_star: f64,
    /// `a - b k*`.
    pub closed_loop_pole: f64,
    /// Largest stability residual over all iterates, final included.
    pub max_iterate_residual: f64,
    pub all_iterates_feasible: bool,
    pub final_objective: f64,
    /// `w_max / (1 - |a - b k*|)`.
    pub iss_bound: f64,
    /// First index from which `|a - b k*|^k |y_0| < 1e-9`.
    pub transient_k0: usize,
    pub max_tail_abs_y: f64,
    pub ultimate_bound_holds: bool,
    pub untuned_kappa: f64,
    pub untuned_y0: f64,
    pub untuned_y_final: f64,
    pub untuned_diverges: bool,
}

pub struct Example1 {
    pub metrics: Example1Metrics,
    pub report: TrainReport,
    /// `(file name, contents)` pairs.
    pub files: Vec<(String, String)>,
}

fn closed_loop_outputs(cfg: &Example1Config, kappa: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = closed_loop(cfg, kappa)?;
    let (_, out) = simulate(&b, &[InputSignal::scalar(0.0)], Time::from_integer(cfg.horizon as i64))?;
    let col = |n: &str| out.column(n, 0).ok_or_else(|| Error::UnknownPort(n.into()));
    Ok((col("P.y")?, col("C.y")?))
}

/// Trains the gain and evaluates tuned against untuned closed loops.
pub fn run_example1(cfg: &Example1Config) -> Result<Example1> {
    let problem = example1_problem(cfg)?;
    let (params, report) = train(&problem, &cfg.train)?;
    let kappa_star = params[0].data()[0];
    let max_iterate_residual = report
        .history
        .iter()
        .chain(std::iter::once(&report.final_eval))
        .filter_map(|r| r.worst_residual)
        .fold(f64::NEG_INFINITY, f64::max);

    let pole = cfg.a - cfg.b * kappa_star;
    let rate = pole.abs();
    let iss_bound = cfg.w_max / (1.0 - rate);
    let (y_t, u_t) = closed_loop_outputs(cfg, kappa_star)?;
    let (y_u, u_u) = closed_loop_outputs(cfg, cfg.kappa0)?;
    let y0 = y_t[0].abs();
    let mut k0 = 0;
    while k0 < y_t.len() && rate.powi(k0 as i32) * y0 >= 1e-9 {
        k0 += 1;
    }
    let max_tail = y_t[k0.min(y_t.len())..].iter().fold(0.0f64, |m, y| m.max(y.abs()));

    let metrics = Example1Metrics {
        config: cfg.clone(),
        interval: problem.interval,
        kappa_initial: report.history[0].monitor.unwrap_or(f64::NAN),
        kappa_star,
        closed_loop_pole: pole,
        max_iterate_residual,
        all_iterates_feasible: max_iterate_residual <= 0.0,
        final_objective: report.final_eval.objective,
        iss_bound,
        transient_k0: k0,
        max_tail_abs_y: max_tail,
        ultimate_bound_holds: max_tail <= iss_bound + 1e-9,
        untuned_kappa: cfg.kappa0,
        untuned_y0: y_u[0],
        untuned_y_final: *y_u.last().expect("nonempty"),
        untuned_diverges: y_u.last().expect("nonempty").abs() > 10.0 * y_u[0].abs(),
    };

    let trajectories = csv_table(
        &["k", "y_untuned", "u_untuned", "y_tuned", "u_tuned", "iss_bound"],
        (0..y_t.len()).map(|k| vec![k as f64, y_u[k], u_u[k], y_t[k], u_t[k], iss_bound]),
    );
    let gain_curve = csv_table(
        &["iter", "kappa", "residual"],
        report
            .history
            .iter()
            .map(|r| vec![r.iter as f64, r.monitor.unwrap_or(f64::NAN), r.worst_residual.unwrap_or(f64::NAN)]),
    );
    let files = vec![
        ("metrics.json".into(), serde_json::to_string_pretty(&metrics)? + "\n"),
        ("report.json".into(), report.to_json()? + "\n"),
        ("training.csv".into(), report.to_csv()),
        ("gain.csv".into(), gain_curve),
        ("trajectories.csv".into(), trajectories),
    ];
    Ok(Example1 { metrics, report, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_loop_is_the_geometric_recursion() {
        let cfg = Example1Config {
            w_max: 0.1,
            horizon: 30,
            ..Example1Config::default()
        };
        let kappa = 0.6;
        let (y, _) = closed_loop_outputs(&cfg, kappa).unwrap();
        let mut want = cfg.x0;
        for (k, yk) in y.iter().enumerate() {
            assert!((yk - want).abs() <= 1e-12 * want.abs().max(1.0), "k={k}");
            want = (cfg.a - cfg.b * kappa) * want + crate::dynamics::disturbance_value(cfg.w_max, cfg.seed, 0, k as u64);
        }
    }

    #[test]
    fn initial_gain_projects_to_interval_edge() {
        let cfg = Example1Config {
            train: TrainConfig {
                iterations: 3,
                ..Example1Config::default().train
            },
            ..Example1Config::default()
        };
        let out = run_example1(&cfg).unwrap();
        assert!((out.metrics.kappa_initial - 0.07).abs() < 1e-15);
        assert!(out.metrics.all_iterates_feasible);
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let cfg = Example1Config {
            horizon: 20,
            ..Example1Config::default()
        };
        let p = example1_problem(&cfg).unwrap();
        let r = crate::tape::check_gradient(
            |t, ids| Ok(p.evaluate(t, ids, 0)?.objective),
            &[Tensor::scalar(0.8)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
