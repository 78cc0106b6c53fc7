use thiserror::Error;

/// Construction errors for [`crate::Tensor`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    // tape
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("backward root must be scalar-shaped, got {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("op {op} produced a non-finite value")]
    NonFiniteValue { op: &'static str },
    #[error("node {0} does not exist on this tape")]
    UnknownNode(usize),
    #[error("gradient check failed: max relative error {max_rel_error:e} over {failing} coordinates")]
    GradientCheckFailed { max_rel_error: f64, failing: usize },

    // blocks
    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    ImplicitSolveDiverged { iterations: usize, residual: f64 },
    #[error("implicit sensitivity matrix (I - dPhi/dY) is singular")]
    SingularJacobian,
    #[error("missing input signal `{0}`")]
    MissingInput(String),
    #[error("no positive period and no integration step declared")]
    EmptyTimeBase,
    #[error("invalid block: {0}")]
    InvalidBlock(String),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    // compose
    #[error("dimension mismatch connecting {from} (dim {from_dim}) to {to} (dim {to_dim})")]
    DimMismatch {
        from: String,
        to: String,
        from_dim: usize,
        to_dim: usize,
    },
    #[error("time-kind mismatch connecting {from} to {to}")]
    KindMismatch { from: String, to: String },
    #[error("input {0} is already driven by another output")]
    InputAlreadyDriven(String),
    #[error("unknown port `{0}`")]
    UnknownPort(String),
    #[error("invalid connection: {0}")]
    InvalidConnection(String),
    #[error("algebraic loop: {}", format_cycles(.0))]
    AlgebraicLoop(Vec<Vec<String>>),

    // contracts
    #[error("port mismatch: {0}")]
    PortMismatch(String),
    #[error("contracts are incompatible: {0}")]
    Incompatible(String),
    #[error("trajectory grids do not match: {0}")]
    GridMismatch(String),
    #[error("unknown contract type `{0}`")]
    UnknownContract(String),

    // nn
    #[error("layer dimensions do not chain: {0}")]
    LayerDims(String),
    #[error("householder direction {0} has near-zero norm")]
    DegenerateDirection(usize),
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,

    // optimize
    #[error("log-barrier requires strictly negative residuals, component {index} = {value}")]
    BarrierInfeasible { index: usize, value: f64 },
    #[error("empty interval [{lo}, {hi}]")]
    EmptyInterval { lo: f64, hi: f64 },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("loss is not scalar: shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    // io / config
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

fn format_cycles(cycles: &[Vec<String>]) -> String {
    cycles
        .iter()
        .map(|c| c.join(" -> "))
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(format!("{} (line {}, column {})", e, e.line(), e.column()))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
