use std::fmt::Write as _;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::time::{to_f64, Time};

#[derive(Clone, Debug, PartialEq)]
pub struct SignalSeries {
    pub name: String,
    /// One value per grid instant.
    pub values: Vec<Tensor>,
}

/// Numeric signal values on an ascending rational grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<Time>,
    pub signals: Vec<SignalSeries>,
}

impl Trajectory {
    pub fn signal(&self, name: &str) -> Option<&SignalSeries> {
        self.signals.iter().find(|s| s.name == name)
    }

    /// Component `i` of signal `name` over time.
    pub fn column(&self, name: &str, i: usize) -> Option<Vec<f64>> {
        self.signal(name)
            .map(|s| s.values.iter().map(|v| v.data()[i]).collect())
    }

    /// CSV with header `t,<signal>[i],...`; values printed with 17
    /// significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for s in &self.signals {
            let n = s.values.first().map_or(0, Tensor::numel);
            for i in 0..n {
                let _ = write!(out, ",{}[{i}]", s.name);
            }
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{:.16e}", to_f64(*t));
            for s in &self.signals {
                for v in s.values[k].data() {
                    let _ = write!(out, ",{v:.16e}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Trajectory::to_csv`] output. Every signal comes back as a
    /// vector; times are recovered as the simplest rational with the same
    /// `f64` value.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"t") {
            return Err(Error::Parse("CSV header must start with `t`".into()));
        }
        let mut layout: Vec<(String, usize)> = Vec::new();
        for c in &cols[1..] {
            let (name, idx) = c
                .strip_suffix(']')
                .and_then(|c| c.rsplit_once('['))
                .ok_or_else(|| Error::Parse(format!("bad column `{c}`")))?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse(format!("bad column `{c}`")))?;
            match layout.last_mut() {
                Some((n, len)) if n == name && *len == idx => *len += 1,
                _ if idx == 0 => layout.push((name.to_string(), 1)),
                _ => return Err(Error::Parse(format!("column `{c}` out of order"))),
            }
        }
        let mut times = Vec::new();
        let mut signals: Vec<SignalSeries> = layout
            .iter()
            .map(|(n, _)| SignalSeries {
                name: n.clone(),
                values: Vec::new(),
            })
            .collect();
        for (row, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", row + 2)))?;
            if vals.len() != cols.len() {
                return Err(Error::Parse(format!("row {} has {} fields", row + 2, vals.len())));
            }
            times.push(
                Ratio::<i64>::approximate_float(vals[0])
                    .ok_or_else(|| Error::Parse(format!("row {}: bad time", row + 2)))?,
            );
            let mut off = 1;
            for ((_, len), s) in layout.iter().zip(signals.iter_mut()) {
                s.values.push(Tensor::vector(vals[off..off + len].to_vec()));
                off += len;
            }
        }
        Ok(Self { times, signals })
    }
}
