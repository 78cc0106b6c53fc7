//! Assume-guarantee contracts over axis-aligned interval boxes.

use serde::{Deserialize, Serialize};

use super::report::{ContractLevel, ContractReport, Location};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "crate::serde_ext")]
    pub lo: f64,
    #[serde(with = "crate::serde_ext")]
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::EmptyInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    /// How far `self` sticks out of `outer`; `<= 0` iff contained.
    pub fn excess_over(&self, outer: &Interval) -> f64 {
        let up = if self.hi == outer.hi { 0.0 } else { self.hi - outer.hi };
        let down = if self.lo == outer.lo { 0.0 } else { outer.lo - self.lo };
        up.max(down)
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.lo.max(other.lo) <= self.hi.min(other.hi)
    }
}

/// One box per port, one interval per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortBox {
    pub name: String,
    pub bounds: Vec<Interval>,
}

impl PortBox {
    pub fn new(name: impl Into<String>, bounds: Vec<Interval>) -> Self {
        Self {
            name: name.into(),
            bounds,
        }
    }

    pub fn unbounded(name: impl Into<String>, dim: usize) -> Self {
        Self::new(name, vec![Interval::unbounded(); dim])
    }

    pub fn uniform(name: impl Into<String>, dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Ok(Self::new(name, vec![Interval::new(lo, hi)?; dim]))
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.bounds.len() && self.bounds.iter().zip(v).all(|(b, x)| b.contains(*x))
    }
}

/// Assumptions on inputs, guarantees on inputs and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgContract {
    pub assume: Vec<PortBox>,
    pub guarantee_inputs: Vec<PortBox>,
    pub guarantee_outputs: Vec<PortBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    Parallel,
    Serial,
    Feedback,
}

impl AgContract {
    pub fn new(assume: Vec<PortBox>, guarantee_outputs: Vec<PortBox>) -> Self {
        let guarantee_inputs = assume
            .iter()
            .map(|b| PortBox::unbounded(b.name.clone(), b.bounds.len()))
            .collect();
        Self {
            assume,
            guarantee_inputs,
            guarantee_outputs,
        }
    }

    /// No assumptions, no guarantees.
    pub fn trivial(inputs: &[(String, usize)], outputs: &[(String, usize)]) -> Self {
        Self::new(
            inputs.iter().map(|(n, d)| PortBox::unbounded(n.clone(), *d)).collect(),
            outputs.iter().map(|(n, d)| PortBox::unbounded(n.clone(), *d)).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.assume.len() != self.guarantee_inputs.len() {
            return Err(Error::PortMismatch(format!(
                "{} assumption boxes, {} input guarantee boxes",
                self.assume.len(),
                self.guarantee_inputs.len()
            )));
        }
        for b in self.assume.iter().chain(&self.guarantee_inputs).chain(&self.guarantee_outputs) {
            for iv in &b.bounds {
                Interval::new(iv.lo, iv.hi)?;
            }
        }
        Ok(())
    }

    /// False when no input satisfies both the assumption and the input
    /// guarantee, i.e. the contract admits no behaviour.
    pub fn is_vacuous(&self) -> bool {
        self.assume.iter().zip(&self.guarantee_inputs).any(|(a, g)| {
            a.bounds.iter().zip(&g.bounds).any(|(x, y)| !x.intersects(y))
        })
    }
}

fn check_pairs(c1: &AgContract, c2: &AgContract, sigma: &[(usize, usize)]) -> Result<()> {
    for &(o, i) in sigma {
        let out = c1
            .guarantee_outputs
            .get(o)
            .ok_or_else(|| Error::PortMismatch(format!("source has no output {o}")))?;
        let inp = c2
            .assume
            .get(i)
            .ok_or_else(|| Error::PortMismatch(format!("target has no input {i}")))?;
        if out.bounds.len() != inp.bounds.len() {
            return Err(Error::PortMismatch(format!(
                "{} has {} components, {} has {}",
                out.name,
                out.bounds.len(),
                inp.name,
                inp.bounds.len()
            )));
        }
    }
    Ok(())
}

/// Each connected output guarantee must lie inside the target's input
/// assumption. Residuals are the per-component excesses (`<= 0` when
/// contained); the witness names the first violated bound.
pub fn check_ag_compatibility(
    c1: &AgContract,
    c2: &AgContract,
    sigma: &[(usize, usize)],
) -> Result<ContractReport> {
    check_pairs(c1, c2, sigma)?;
    let vacuous = c1.is_vacuous();
    let mut values = Vec::new();
    let mut locations = Vec::new();
    let mut witness = None;
    for &(o, i) in sigma {
        let g = &c1.guarantee_outputs[o];
        let a = &c2.assume[i];
        for (k, (gi, ai)) in g.bounds.iter().zip(&a.bounds).enumerate() {
            let e = if vacuous { f64::NEG_INFINITY } else { gi.excess_over(ai) };
            if e > 0.0 && witness.is_none() {
                witness = Some(if gi.hi > ai.hi {
                    format!("{}[{k}] upper bound {} > {} assumed by {}", g.name, gi.hi, ai.hi, a.name)
                } else {
                    format!("{}[{k}] lower bound {} < {} assumed by {}", g.name, gi.lo, ai.lo, a.name)
                });
            }
            values.push(e);
            locations.push(Location::new(format!("{} -> {}", g.name, a.name), None, k));
        }
    }
    let mut report =
        ContractReport::from_values("ag-compatibility", ContractLevel::Parameter, &values, &locations, 0.0);
    report.witness = witness;
    Ok(report)
}

/// Composes two contracts (`c2` ignored for feedback). `sigma` lists
/// (output of the source, input of the target) pairs.
pub fn compose_ag(
    c1: &AgContract,
    c2: Option<&AgContract>,
    mode: Composition,
    sigma: &[(usize, usize)],
) -> Result<AgContract> {
    match mode {
        Composition::Parallel => {
            let c2 = c2.ok_or_else(|| Error::PortMismatch("parallel needs two contracts".into()))?;
            Ok(AgContract {
                assume: [c1.assume.clone(), c2.assume.clone()].concat(),
                guarantee_inputs: [c1.guarantee_inputs.clone(), c2.guarantee_inputs.clone()].concat(),
                guarantee_outputs: [c1.guarantee_outputs.clone(), c2.guarantee_outputs.clone()].concat(),
            })
        }
        Composition::Serial => {
            let c2 = c2.ok_or_else(|| Error::PortMismatch("serial needs two contracts".into()))?;
            let report = check_ag_compatibility(c1, c2, sigma)?;
            if !report.satisfied {
                return Err(Error::Incompatible(report.witness.unwrap_or_default()));
            }
            let keep = |i: &usize| !sigma.iter().any(|(_, t)| t == i);
            let free: Vec<usize> = (0..c2.assume.len()).filter(keep).collect();
            Ok(AgContract {
                assume: c1.assume.iter().cloned().chain(free.iter().map(|i| c2.assume[*i].clone())).collect(),
                guarantee_inputs: c1
                    .guarantee_inputs
                    .iter()
                    .cloned()
                    .chain(free.iter().map(|i| c2.guarantee_inputs[*i].clone()))
                    .collect(),
                guarantee_outputs: [c1.guarantee_outputs.clone(), c2.guarantee_outputs.clone()].concat(),
            })
        }
        Composition::Feedback => {
            let report = check_ag_compatibility(c1, c1, sigma)?;
            if !report.satisfied {
                return Err(Error::Incompatible(report.witness.unwrap_or_default()));
            }
            let keep = |i: &usize| !sigma.iter().any(|(_, t)| t == i);
            let free: Vec<usize> = (0..c1.assume.len()).filter(keep).collect();
            Ok(AgContract {
                assume: free.iter().map(|i| c1.assume[*i].clone()).collect(),
                guarantee_inputs: free.iter().map(|i| c1.guarantee_inputs[*i].clone()).collect(),
                guarantee_outputs: c1.guarantee_outputs.clone(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(assume: &[(f64, f64)], out: &[(f64, f64)]) -> AgContract {
        AgContract::new(
            assume
                .iter()
                .enumerate()
                .map(|(i, (l, h))| PortBox::new(format!("u{i}"), vec![Interval::new(*l, *h).unwrap()]))
                .collect(),
            out.iter()
                .enumerate()
                .map(|(i, (l, h))| PortBox::new(format!("y{i}"), vec![Interval::new(*l, *h).unwrap()]))
                .collect(),
        )
    }

    #[test]
    fn containment_is_compatible() {
        let r = check_ag_compatibility(&c(&[], &[(-1.0, 1.0)]), &c(&[(-2.0, 2.0)], &[]), &[(0, 0)]).unwrap();
        assert!(r.satisfied);
    }

    #[test]
    fn overshoot_has_witness() {
        let r = check_ag_compatibility(&c(&[], &[(-3.0, 3.0)]), &c(&[(-2.0, 2.0)], &[]), &[(0, 0)]).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.worst, 1.0);
        assert!(r.witness.unwrap().contains("3 > 2"));
    }

    #[test]
    fn unbounded_guarantee_is_incompatible() {
        let mut up = c(&[], &[(0.0, 0.0)]);
        up.guarantee_outputs[0].bounds[0] = Interval::unbounded();
        let r = check_ag_compatibility(&up, &c(&[(-2.0, 2.0)], &[]), &[(0, 0)]).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.worst, f64::INFINITY);
    }

    #[test]
    fn unbounded_into_unbounded_is_compatible() {
        let t = AgContract::trivial(&[("u".into(), 1)], &[("y".into(), 1)]);
        assert!(check_ag_compatibility(&t, &t, &[(0, 0)]).unwrap().satisfied);
    }

    #[test]
    fn parallel_is_product() {
        let p = compose_ag(
            &c(&[(-1.0, 1.0)], &[(-2.0, 2.0)]),
            Some(&c(&[(0.0, 1.0)], &[(0.0, 3.0)])),
            Composition::Parallel,
            &[],
        )
        .unwrap();
        assert_eq!(p.assume.len(), 2);
        assert_eq!(p.assume[1].bounds[0], Interval::new(0.0, 1.0).unwrap());
        assert_eq!(p.guarantee_outputs[0].bounds[0], Interval::new(-2.0, 2.0).unwrap());
    }

    #[test]
    fn serial_drops_internal_input() {
        let s = compose_ag(
            &c(&[(-1.0, 1.0)], &[(-1.0, 1.0)]),
            Some(&c(&[(-2.0, 2.0), (5.0, 6.0)], &[(0.0, 1.0)])),
            Composition::Serial,
            &[(0, 0)],
        )
        .unwrap();
        assert_eq!(s.assume.len(), 2);
        assert_eq!(s.assume[1].bounds[0], Interval::new(5.0, 6.0).unwrap());
        assert!(matches!(
            compose_ag(
                &c(&[], &[(-3.0, 3.0)]),
                Some(&c(&[(-2.0, 2.0)], &[])),
                Composition::Serial,
                &[(0, 0)]
            ),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn port_mismatch() {
        assert!(matches!(
            check_ag_compatibility(&c(&[], &[(0.0, 1.0)]), &c(&[], &[]), &[(0, 0)]),
            Err(Error::PortMismatch(_))
        ));
    }

    #[test]
    fn serde_round_trip_with_infinities() {
        let t = AgContract::trivial(&[("u".into(), 2)], &[]);
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"-inf\""));
        let back: AgContract = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
