use serde::{Deserialize, Serialize};

/// Residuals at or below this value count as satisfied.
pub const SATISFACTION_TOL: f64 = 1e-9;

/// Parameter-level residuals certify the guarantee for every trajectory;
/// trajectory-level ones only for the executions they were evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContractLevel {
    Parameter,
    Trajectory,
}

/// Where a residual component comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub signal: String,
    pub time_index: Option<usize>,
    pub component: usize,
}

impl Location {
    pub fn new(signal: impl Into<String>, time_index: Option<usize>, component: usize) -> Self {
        Self {
            signal: signal.into(),
            time_index,
            component,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractReport {
    pub contract: String,
    pub level: ContractLevel,
    pub satisfied: bool,
    pub tolerance: f64,
    #[serde(with = "crate::serde_ext")]
    pub worst: f64,
    pub location: Option<Location>,
    #[serde(with = "crate::serde_ext::vec")]
    pub residuals: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
}

impl ContractReport {
    /// `satisfied` iff every component is `<= tolerance`. The worst
    /// component is the first maximal one.
    pub fn from_values(
        contract: impl Into<String>,
        level: ContractLevel,
        values: &[f64],
        locations: &[Location],
        tolerance: f64,
    ) -> Self {
        let mut worst = f64::NEG_INFINITY;
        let mut at = None;
        for (i, v) in values.iter().enumerate() {
            if *v > worst || v.is_nan() {
                worst = *v;
                at = Some(i);
                if v.is_nan() {
                    break;
                }
            }
        }
        Self {
            contract: contract.into(),
            level,
            satisfied: values.iter().all(|v| *v <= tolerance),
            tolerance,
            worst,
            location: at.and_then(|i| locations.get(i).cloned()),
            residuals: values.to_vec(),
            witness: None,
        }
    }
}
