use std::sync::Arc;

use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rk4_step, vdp_rhs};
use crate::blocks::{BlockDef, SignalSpec};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Module, PdLyapunov, StableLinear};
use crate::tensor::Tensor;
use crate::time::Time;

/// `y = k u`.
pub fn gain(k: f64, period: Time) -> Result<BlockDef> {
    BlockDef::builder("gain")
        .input(SignalSpec::discrete("u", 1, period))
        .output(SignalSpec::discrete("y", 1, period))
        .param("k", Tensor::scalar(k))
        .output_map(|t, e| Ok(vec![t.mul(e.p[0], e.u[0])?]))
        .build()
}

/// `e = r - y`.
pub fn sum(dim: usize, period: Time) -> Result<BlockDef> {
    BlockDef::builder("sum")
        .input(SignalSpec::discrete("r", dim, period))
        .input(SignalSpec::discrete("y", dim, period))
        .output(SignalSpec::discrete("e", dim, period))
        .output_map(|t, e| Ok(vec![t.sub(e.u[0], e.u[1])?]))
        .build()
}

/// Componentwise clamp to `[lo, hi]`.
pub fn saturate(dim: usize, lo: f64, hi: f64, period: Time) -> Result<BlockDef> {
    if !(lo <= hi) {
        return Err(Error::EmptyInterval { lo, hi });
    }
    BlockDef::builder("saturate")
        .input(SignalSpec::discrete("u", dim, period))
        .output(SignalSpec::discrete("y", dim, period))
        .output_map(move |t, e| Ok(vec![t.clamp(e.u[0], lo, hi)?]))
        .build()
}

/// A constant output.
pub fn const_source(value: Tensor, period: Time) -> Result<BlockDef> {
    if value.rank() != 1 {
        return Err(Error::InvalidSignal(format!("constant must be a vector, got {:?}", value.shape())));
    }
    let dim = value.numel();
    BlockDef::builder("const")
        .output(SignalSpec::discrete("y", dim, period))
        .output_map(move |t, e| {
            let v = match e.batch {
                Some(b) => Tensor::matrix(b, dim, (0..b).flat_map(|_| value.data().to_vec()).collect()),
                None => value.clone(),
            };
            Ok(vec![t.constant(v)])
        })
        .build()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarPlantParams {
    pub a: f64,
    pub b: f64,
    pub w_max: f64,
}

impl ScalarPlantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) || !(self.w_max >= 0.0) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::Config(format!(
                "scalar plant needs finite a, b > 0 and w_max >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `x+ = a x + b u + w`, `y = x`; no feedthrough.
pub fn scalar_plant(p: ScalarPlantParams, x0: f64, period: Time) -> Result<BlockDef> {
    p.validate()?;
    BlockDef::builder("plant")
        .input(SignalSpec::discrete("u", 1, period))
        .input(SignalSpec::discrete("w", 1, period))
        .state(SignalSpec::discrete("x", 1, period), Tensor::vector(vec![x0]))
        .output(SignalSpec::discrete("y", 1, period))
        .param("a", Tensor::scalar(p.a))
        .param("b", Tensor::scalar(p.b))
        .transition(period, &[0], |t, e| {
            let ax = t.mul(e.p[0], e.x[0])?;
            let bu = t.mul(e.p[1], e.u[0])?;
            let s = t.add(ax, bu)?;
            Ok(vec![t.add(s, e.u[1])?])
        })
        .output_map(|_, e| Ok(vec![e.x[0]]))
        .no_feedthrough()
        .build()
}

/// Sample `k` of batch element `row`: uniform in `[-w_max, w_max]`, drawn
/// from stream `row` of a ChaCha generator at word position `2k`, so values
/// depend only on `(seed, row, k)`.
pub fn disturbance_value(w_max: f64, seed: u64, row: u64, k: u64) -> f64 {
    if w_max == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row);
    rng.set_word_pos(2 * k as u128);
    rng.gen_range(-w_max..=w_max)
}

/// i.i.d. uniform disturbance held over each period.
pub fn disturbance(w_max: f64, seed: u64, period: Time) -> Result<BlockDef> {
    if !(w_max >= 0.0 && w_max.is_finite()) {
        return Err(Error::Config(format!("w_max must be finite and nonnegative, got {w_max}")));
    }
    BlockDef::builder("disturbance")
        .output(SignalSpec::discrete("w", 1, period))
        .output_map(move |t, e| {
            let k = (e.t / period).floor().to_integer().to_u64().unwrap_or(0);
            let v = match e.batch {
                Some(b) => Tensor::matrix(
                    b,
                    1,
                    (0..b as u64).map(|r| disturbance_value(w_max, seed, r, k)).collect(),
                ),
                None => Tensor::vector(vec![disturbance_value(w_max, seed, 0, k)]),
            };
            Ok(vec![t.constant(v)])
        })
        .build()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VdpParams {
    pub mu: f64,
    #[serde(with = "crate::time::serde_time")]
    pub tau: Time,
    pub substeps: usize,
}

impl VdpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) || self.tau <= Time::from_integer(0) || self.substeps == 0 {
            return Err(Error::Config(format!("Van der Pol needs mu > 0, tau > 0, substeps >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Van der Pol sampled every `tau` with `substeps` RK4 steps and `u` held.
/// Output is the state. `mu = 0` is accepted here for the harmonic limit.
pub fn vdp_rk4(p: VdpParams, x0: [f64; 2]) -> Result<BlockDef> {
    if !(p.mu >= 0.0) || p.tau <= Time::from_integer(0) || p.substeps == 0 {
        return Err(Error::Config(format!("Van der Pol needs mu >= 0, tau > 0, substeps >= 1, got {p:?}")));
    }
    let h = crate::time::to_f64(p.tau) / p.substeps as f64;
    let n = p.substeps;
    BlockDef::builder("vdp")
        .input(SignalSpec::discrete("u", 1, p.tau))
        .state(SignalSpec::discrete("x", 2, p.tau), Tensor::vector(x0.to_vec()))
        .output(SignalSpec::discrete("y", 2, p.tau))
        .param("mu", Tensor::scalar(p.mu))
        .transition(p.tau, &[0], move |t, e| {
            let mut x = e.x[0];
            let mu = e.p[0];
            for _ in 0..n {
                x = rk4_step(t, |t, x, u| vdp_rhs(t, x, u, mu), x, e.u[0], h)?;
            }
            Ok(vec![x])
        })
        .output_map(|_, e| Ok(vec![e.x[0]]))
        .no_feedthrough()
        .build()
}

fn module_block<M: Module + Send + Sync + 'static>(
    name: &str,
    m: M,
    input: SignalSpec,
    output: SignalSpec,
) -> Result<BlockDef> {
    let names = m.param_names();
    let values = m.params().to_vec();
    let m = Arc::new(m);
    let mut b = BlockDef::builder(name).input(input).output(output);
    for (n, v) in names.into_iter().zip(values) {
        b = b.param(n, v);
    }
    b.output_map(move |t, e| Ok(vec![m.forward(t, e.p, e.u[0])?])).build()
}

/// `u = pi(x)` through an MLP.
pub fn mlp_policy(m: Mlp, period: Time) -> Result<BlockDef> {
    let (i, o) = (m.input_dim(), m.output_dim());
    module_block("policy", m, SignalSpec::discrete("x", i, period), SignalSpec::discrete("u", o, period))
}

/// `V(x)` through the positive-definite ICNN wrapper.
pub fn icnn_lyapunov(v: PdLyapunov, period: Time) -> Result<BlockDef> {
    let i = v.inner.input_dim();
    module_block("lyapunov", v, SignalSpec::discrete("x", i, period), SignalSpec::discrete("V", 1, period))
}

/// `z = enc(y)`.
pub fn koopman_encoder(m: Mlp, period: Time) -> Result<BlockDef> {
    let (i, o) = (m.input_dim(), m.output_dim());
    module_block("encoder", m, SignalSpec::discrete("y", i, period), SignalSpec::discrete("z", o, period))
}

/// `z+ = K z` as a static map.
pub fn koopman_operator(k: StableLinear, period: Time) -> Result<BlockDef> {
    let n = k.n;
    module_block("koopman", k, SignalSpec::discrete("z", n, period), SignalSpec::discrete("zn", n, period))
}

/// `y = dec(z)`.
pub fn koopman_decoder(m: Mlp, period: Time) -> Result<BlockDef> {
    let (i, o) = (m.input_dim(), m.output_dim());
    module_block("decoder", m, SignalSpec::discrete("z", i, period), SignalSpec::discrete("y", o, period))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{simulate, InputSignal};
    use crate::compose::{flatten, Diagram};
    use crate::time::time;

    fn one() -> Time {
        time(1, 1)
    }

    #[test]
    fn plant_iteration() {
        let p = ScalarPlantParams { a: 1.02, b: 1.0, w_max: 0.0 };
        let blk = scalar_plant(p, 1.0, one()).unwrap();
        let (_, y) = simulate(&blk, &[InputSignal::scalar(0.0), InputSignal::scalar(0.0)], time(2, 1)).unwrap();
        let ys = y.column("y", 0).unwrap();
        assert_eq!(ys[0], 1.0);
        assert_eq!(ys[1], 1.02);
        assert!((ys[2] - 1.0404).abs() < 1e-15);
    }

    #[test]
    fn disturbance_is_bounded_and_deterministic() {
        let a: Vec<f64> = (0..10_000).map(|k| disturbance_value(0.1, 7, 0, k)).collect();
        let b: Vec<f64> = (0..10_000).map(|k| disturbance_value(0.1, 7, 0, k)).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|w| w.abs() <= 0.1));
        assert!(a.iter().any(|w| *w != a[0]));
        assert_eq!(disturbance_value(0.0, 7, 0, 3), 0.0);
        assert_ne!(disturbance_value(0.1, 7, 1, 3), disturbance_value(0.1, 7, 0, 3));
    }

    #[test]
    fn disturbance_block_rows_are_stable_under_batching() {
        let blk = disturbance(0.1, 3, one()).unwrap();
        let (_, y) = simulate(&blk, &[], time(4, 1)).unwrap();
        let w = y.column("w", 0).unwrap();
        for (k, v) in w.iter().enumerate() {
            assert_eq!(*v, disturbance_value(0.1, 3, 0, k as u64));
        }
    }

    #[test]
    fn deadbeat_loop_settles() {
        let p = ScalarPlantParams { a: 1.02, b: 1.0, w_max: 0.0 };
        let mut d = Diagram::new();
        d.add_block("sum", sum(1, one()).unwrap()).unwrap();
        d.add_block("C", gain(1.02, one()).unwrap()).unwrap();
        d.add_block("P", scalar_plant(p, 1.0, one()).unwrap()).unwrap();
        d.add_block("W", disturbance(0.0, 0, one()).unwrap()).unwrap();
        d.connect("sum.e", "C.u").unwrap();
        d.connect("C.y", "P.u").unwrap();
        d.connect("P.y", "sum.y").unwrap();
        d.connect("W.w", "P.w").unwrap();
        let flat = flatten(&d).unwrap();
        let (_, y) = simulate(&flat, &[InputSignal::scalar(0.0)], time(5, 1)).unwrap();
        let ys = y.column("P.y", 0).unwrap();
        assert_eq!(ys[0], 1.0);
        assert!(ys[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn saturation_clamps() {
        let blk = saturate(1, -1.0, 1.0, one()).unwrap();
        let (_, y) = simulate(&blk, &[InputSignal::scalar(3.0)], one()).unwrap();
        assert_eq!(y.column("y", 0).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(saturate(1, 1.0, -1.0, one()), Err(Error::EmptyInterval { .. })));
    }

    #[test]
    fn vdp_harmonic_limit_conserves_energy() {
        let p = VdpParams { mu: 0.0, tau: time(1, 1000), substeps: 1 };
        let blk = vdp_rk4(p, [1.0, 0.0]).unwrap();
        let steps = (2.0 * std::f64::consts::PI * 1000.0).round() as i64;
        let (x, _) = simulate(&blk, &[InputSignal::scalar(0.0)], time(steps, 1000)).unwrap();
        let x1 = x.column("x", 0).unwrap();
        let x2 = x.column("x", 1).unwrap();
        for (a, b) in x1.iter().zip(&x2) {
            assert!((a * a + b * b - 1.0).abs() < 1e-6);
        }
    }
}
