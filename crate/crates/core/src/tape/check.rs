//! Central-difference validation of reverse-mode gradients.

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (leaf, flat index) pairs exceeding the tolerance.
    pub failing: Vec<(usize, usize)>,
    /// Coordinates where the one-sided differences disagree; excluded from
    /// pass/fail.
    pub kinks: Vec<(usize, usize)>,
    pub checked: usize,
    /// Every coordinate, in leaf then flat-index order.
    pub entries: Vec<GradEntry>,
}

/// One coordinate of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub leaf: usize,
    pub index: usize,
    pub ad: f64,
    pub fd: f64,
    pub rel_error: f64,
    pub kink: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Settings for [`check_gradient`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors use `max(|ad|, |fd|, floor_rel * max(1, |f|))` as the
    /// denominator so coordinates with vanishing gradient are judged on an
    /// absolute scale set by the function value.
    pub floor_rel: f64,
    /// One-sided differences disagreeing by more than this (relative) flag
    /// a kink.
    pub kink_threshold: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor_rel: 1e-3,
            kink_threshold: 1e-2,
        }
    }
}

impl GradCheck {
    pub fn new(step: f64, tolerance: f64) -> Self {
        Self {
            step,
            tolerance,
            ..Self::default()
        }
    }

    pub fn run<F>(&self, f: F, point: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        if self.step.is_nan() || self.step <= 0.0 {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        let eval = |pt: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let leaves: Vec<NodeId> = pt.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&mut tape, &leaves)?;
            let v = tape.value(out);
            if v.numel() != 1 {
                return Err(Error::NonScalarLoss(v.shape().to_vec()));
            }
            Ok(v.item())
        };

        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = point.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        let f0 = tape.value(out).item();
        let grads = tape.backward(out)?;
        let floor = self.floor_rel * f0.abs().max(1.0);

        let h = self.step;
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            failing: Vec::new(),
            kinks: Vec::new(),
            checked: 0,
            entries: Vec::new(),
        };
        let mut work: Vec<Tensor> = point.to_vec();
        for (li, leaf) in leaves.iter().enumerate() {
            let ad = grads.get_or_zeros(*leaf, &point[li]);
            for idx in 0..point[li].numel() {
                let x0 = point[li].data()[idx];
                work[li].data_mut()[idx] = x0 + h;
                let fp = eval(&work)?;
                work[li].data_mut()[idx] = x0 - h;
                let fm = eval(&work)?;
                work[li].data_mut()[idx] = x0;

                let fd = (fp - fm) / (2.0 * h);
                let fwd = (fp - f0) / h;
                let bwd = (f0 - fm) / h;
                let scale = fwd.abs().max(bwd.abs()).max(floor);
                let a = ad.data()[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
                let kink = (fwd - bwd).abs() > self.kink_threshold * scale;
                report.entries.push(GradEntry {
                    leaf: li,
                    index: idx,
                    ad: a,
                    fd,
                    rel_error: rel,
                    kink,
                });
                if kink {
                    report.kinks.push((li, idx));
                    continue;
                }
                report.checked += 1;
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel > self.tolerance {
                    report.failing.push((li, idx));
                }
            }
        }
        Ok(report)
    }
}

/// Compares `backward` against central differences at `point`.
pub fn check_gradient<F>(f: F, point: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    GradCheck::new(step, tolerance).run(f, point)
}
