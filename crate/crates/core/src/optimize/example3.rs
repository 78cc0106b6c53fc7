//! Deep Koopman identification of the Van der Pol oscillator with a latent
//! operator that is stable by construction.

use serde::{Deserialize, Serialize};

use super::{csv_table, train, uniform_points, Problem, Terms, TrainConfig, TrainReport};
use crate::blocks::{eval_output, BlockDef, Env};
use crate::compose::{flatten, Diagram};
use crate::dynamics::{
    dataset_from_csv, dataset_to_csv, koopman_decoder, koopman_encoder, koopman_operator, vdp_trajectories, VdpParams,
};
use crate::error::{Error, Result};
use crate::nn::{eigenvalues, spectral_radius, Activation, Mlp, Module, StableLinear, DEFAULT_SIGMA_BOUNDS};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::time::{time, Time};

const HELD_OUT_STREAM: u64 = 1 << 40;
const DATA_STREAM: u64 = 1 << 41;

/// How the latent linearity loss pairs encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linearity {
    /// `|enc(y_{k+1}) - K enc(y_k)|^2`.
    OneStep,
    /// `|enc(y_{k+1}) - K^{k+1} enc(y_0)|^2`.
    KStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Example3Config {
    pub vdp: VdpParams,
    pub n_traj: usize,
    pub n_steps: usize,
    /// Initial conditions are drawn from `[-region, region]^2`.
    pub region: f64,
    /// Optional `traj_id,k,x1,x2` file used instead of generated data.
    pub dataset: Option<String>,
    pub latent: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub sigma_bounds: (f64, f64),
    pub q_y: f64,
    pub q_x: f64,
    pub q_recon: f64,
    pub linearity: Linearity,
    pub rollout_steps: usize,
    pub train: TrainConfig,
}

impl Default for Example3Config {
    fn default() -> Self {
        Self {
            vdp: VdpParams {
                mu: 1.0,
                tau: time(1, 10),
                substeps: 1,
            },
            n_traj: 20,
            n_steps: 100,
            region: 2.0,
            dataset: None,
            latent: 8,
            encoder_hidden: vec![32, 32],
            decoder_hidden: vec![32, 32],
            activation: Activation::Tanh,
            sigma_bounds: DEFAULT_SIGMA_BOUNDS,
            q_y: 1.0,
            q_x: 1.0,
            q_recon: 1.0,
            linearity: Linearity::OneStep,
            rollout_steps: 500,
            train: TrainConfig {
                lr: 1e-3,
                iterations: 2000,
                batch_size: 20,
                ..TrainConfig::default()
            },
        }
    }
}

pub struct Example3Problem {
    pub cfg: Example3Config,
    /// `enc ; K ; dec` as one block.
    pub block: BlockDef,
    pub encoder: Mlp,
    pub operator: StableLinear,
    pub decoder: Mlp,
    /// One `[m, 2]` tensor per step.
    pub data: Vec<Tensor>,
    /// All samples, step-major: row `k * m + i`.
    stacked: Tensor,
    n_enc: usize,
    z: usize,
    zn: usize,
    y: usize,
}

/// Training data: the configured file, or seeded trajectories.
/// Training initial conditions: `n` points uniform on `[-region, region]^2`.
pub fn data_initial_conditions(seed: u64, n: usize, region: f64) -> Tensor {
    uniform_points(seed, DATA_STREAM, n, 2, -region, region)
}

pub fn example3_data(cfg: &Example3Config) -> Result<Vec<Tensor>> {
    match &cfg.dataset {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{path}: {e}")))?;
            dataset_from_csv(&text)
        }
        None => vdp_trajectories(cfg.vdp, &data_initial_conditions(cfg.train.seed, cfg.n_traj, cfg.region), cfg.n_steps),
    }
}

pub fn example3_problem(cfg: &Example3Config) -> Result<Example3Problem> {
    cfg.train.validate()?;
    cfg.vdp.validate()?;
    if cfg.latent == 0 || cfg.n_traj == 0 || cfg.n_steps == 0 || !(cfg.region > 0.0) {
        return Err(Error::Config("latent, n_traj, n_steps and region must be positive".into()));
    }
    if [cfg.q_y, cfg.q_x, cfg.q_recon].iter().any(|q| !(*q >= 0.0 && q.is_finite())) {
        return Err(Error::Config("loss weights must be finite and nonnegative".into()));
    }
    let data = example3_data(cfg)?;
    if data.len() < 2 {
        return Err(Error::Config("need trajectories with at least two samples".into()));
    }
    let seed = cfg.train.seed;
    let enc_dims = [&[2][..], &cfg.encoder_hidden, &[cfg.latent]].concat();
    let dec_dims = [&[cfg.latent][..], &cfg.decoder_hidden, &[2]].concat();
    let encoder = Mlp::new(&enc_dims, cfg.activation, None, seed)?;
    let operator = StableLinear::new(cfg.latent, cfg.sigma_bounds, seed.wrapping_add(1))?;
    let decoder = Mlp::new(&dec_dims, cfg.activation, None, seed.wrapping_add(2))?;
    let tau = cfg.vdp.tau;
    let mut d = Diagram::new();
    d.add_block("enc", koopman_encoder(encoder.clone(), tau)?)?;
    d.add_block("K", koopman_operator(operator.clone(), tau)?)?;
    d.add_block("dec", koopman_decoder(decoder.clone(), tau)?)?;
    d.connect("enc.z", "K.z")?;
    d.connect("K.zn", "dec.z")?;
    let block = flatten(&d)?;
    let m = data[0].shape()[0];
    let stacked = Tensor::matrix(m * data.len(), 2, data.iter().flat_map(|t| t.data().to_vec()).collect());
    Ok(Example3Problem {
        n_enc: encoder.params().len(),
        z: block.output_index("enc.z")?,
        zn: block.output_index("K.zn")?,
        y: block.output_index("dec.y")?,
        block,
        encoder,
        operator,
        decoder,
        data,
        stacked,
        cfg: cfg.clone(),
    })
}

impl Example3Problem {
    fn split<'a, T>(&self, p: &'a [T]) -> (&'a [T], &'a [T], &'a [T]) {
        let (e, rest) = p.split_at(self.n_enc);
        let (k, d) = rest.split_at(3);
        (e, k, d)
    }

    /// The three modules carrying the given parameters.
    pub fn modules(&self, params: &[Tensor]) -> (Mlp, StableLinear, Mlp) {
        let (e, k, d) = self.split(params);
        let mut enc = self.encoder.clone();
        let mut op = self.operator.clone();
        let mut dec = self.decoder.clone();
        *enc.params_mut() = e.to_vec();
        *op.params_mut() = k.to_vec();
        *dec.params_mut() = d.to_vec();
        (enc, op, dec)
    }

    /// Predicted observables `dec(K^k enc(y_0))` for `k = 0..=steps`.
    pub fn rollout(&self, params: &[Tensor], y0: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
        let (enc, op, dec) = self.modules(params);
        let mut z = enc.eval(y0)?;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(dec.eval(&z)?);
        for _ in 0..steps {
            z = op.eval(&z)?;
            out.push(dec.eval(&z)?);
        }
        Ok(out)
    }
}

fn sq_diff(tape: &mut Tape, a: NodeId, b: NodeId, w: f64) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    let s = tape.squared_norm(d)?;
    tape.scale(s, w)
}

impl Problem for Example3Problem {
    fn param_names(&self) -> Vec<String> {
        self.block.params.iter().map(|p| p.name.clone()).collect()
    }

    fn initial_params(&self) -> Vec<Tensor> {
        self.block.param_values()
    }

    /// Executes `enc ; K ; dec` on every sample at once and sums the
    /// prediction, linearity and reconstruction losses over trajectories.
    fn evaluate(&self, tape: &mut Tape, params: &[NodeId], _iter: usize) -> Result<Terms> {
        let m = self.data[0].shape()[0];
        let n = self.data.len() - 1;
        let rows = self.stacked.shape()[0];
        let y = tape.constant(self.stacked.clone());
        let env = Env {
            t: Time::from_integer(0),
            x: &[],
            u: &[y],
            p: params,
            batch: Some(rows),
        };
        let out = eval_output(tape, &self.block, &env)?;
        let (z, zn, yhat) = (out[self.z], out[self.zn], out[self.y]);

        let y_next = tape.slice(y, 0, m, m * n)?;
        let pred = tape.slice(yhat, 0, 0, m * n)?;
        let l_y = sq_diff(tape, pred, y_next, self.cfg.q_y)?;

        let z_next = tape.slice(z, 0, m, m * n)?;
        let l_lin = match self.cfg.linearity {
            Linearity::OneStep => {
                let adv = tape.slice(zn, 0, 0, m * n)?;
                sq_diff(tape, z_next, adv, self.cfg.q_x)?
            }
            Linearity::KStep => {
                let (_, kp, _) = self.split(params);
                let mut zk = tape.slice(z, 0, 0, m)?;
                let mut preds = Vec::with_capacity(n);
                for _ in 0..n {
                    zk = self.operator.forward(tape, kp, zk)?;
                    preds.push(zk);
                }
                let adv = tape.concat(&preds, 0)?;
                sq_diff(tape, z_next, adv, self.cfg.q_x)?
            }
        };

        let (_, _, dp) = self.split(params);
        let z0 = tape.slice(z, 0, 0, m)?;
        let y0 = tape.slice(y, 0, 0, m)?;
        let recon = self.decoder.forward(tape, dp, z0)?;
        let l_rec = sq_diff(tape, y0, recon, self.cfg.q_recon)?;

        let s = tape.add(l_y, l_lin)?;
        let objective = tape.add(s, l_rec)?;
        Ok(Terms {
            objective,
            residuals: None,
        })
    }

    fn monitor(&self, params: &[Tensor]) -> Result<Option<f64>> {
        let (_, op, _) = self.modules(params);
        Ok(Some(spectral_radius(&op.matrix()?)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example3Metrics {
    pub config: Example3Config,
    pub initial_spectral_radius: f64,
    /// Largest spectral radius over all iterates, final included.
    pub max_spectral_radius: f64,
    pub eigenvalues: Vec<Eigenvalue>,
    pub all_eigenvalues_inside_unit_disk: bool,
    pub held_out_initial_condition: [f64; 2],
    /// Mean squared rollout error per state over steps `1..=rollout_steps`.
    pub rollout_mse: [f64; 2],
    pub final_objective: f64,
}

pub struct Example3 {
    pub metrics: Example3Metrics,
    pub report: TrainReport,
    pub files: Vec<(String, String)>,
}

/// Trains the Koopman model, then dumps its spectrum and a held-out
/// rollout against the true trajectory.
pub fn run_example3(cfg: &Example3Config) -> Result<Example3> {
    let problem = example3_problem(cfg)?;
    let (params, report) = train(&problem, &cfg.train)?;
    let (_, op, _) = problem.modules(&params);
    let eig: Vec<Eigenvalue> = eigenvalues(&op.matrix()?)?
        .into_iter()
        .map(|(re, im)| Eigenvalue {
            re,
            im,
            modulus: re.hypot(im),
        })
        .collect();

    let x0 = uniform_points(cfg.train.seed, HELD_OUT_STREAM, 1, 2, -cfg.region, cfg.region);
    let truth = vdp_trajectories(cfg.vdp, &x0, cfg.rollout_steps)?;
    let pred = problem.rollout(&params, &x0, cfg.rollout_steps)?;
    let mut mse = [0.0; 2];
    let mut rows = Vec::with_capacity(truth.len());
    for (k, (t, p)) in truth.iter().zip(&pred).enumerate() {
        let (t, p) = (t.data(), p.data());
        if k > 0 {
            for j in 0..2 {
                mse[j] += (t[j] - p[j]).powi(2);
            }
        }
        rows.push(vec![k as f64, t[0], t[1], p[0], p[1]]);
    }
    let steps = cfg.rollout_steps.max(1) as f64;
    mse.iter_mut().for_each(|v| *v /= steps);

    let radii = report
        .history
        .iter()
        .chain(std::iter::once(&report.final_eval))
        .filter_map(|r| r.monitor);
    let metrics = Example3Metrics {
        config: cfg.clone(),
        initial_spectral_radius: report.history[0].monitor.unwrap_or(f64::NAN),
        max_spectral_radius: radii.fold(f64::NEG_INFINITY, f64::max),
        all_eigenvalues_inside_unit_disk: eig.iter().all(|e| e.modulus < 1.0),
        eigenvalues: eig.clone(),
        held_out_initial_condition: [x0.data()[0], x0.data()[1]],
        rollout_mse: mse,
        final_objective: report.final_eval.objective,
    };
    let files = vec![
        ("metrics.json".into(), serde_json::to_string_pretty(&metrics)? + "\n"),
        ("report.json".into(), report.to_json()? + "\n"),
        ("training.csv".into(), report.to_csv()),
        ("dataset.csv".into(), dataset_to_csv(&problem.data)),
        ("rollout.csv".into(), csv_table(&["k", "x1_true", "x2_true", "x1_pred", "x2_pred"], rows)),
        (
            "spectrum.csv".into(),
            csv_table(&["re", "im", "modulus"], eig.iter().map(|e| vec![e.re, e.im, e.modulus])),
        ),
    ];
    Ok(Example3 { metrics, report, files })
}
