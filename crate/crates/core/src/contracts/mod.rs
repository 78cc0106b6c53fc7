//! Contracts: interval-box assume-guarantee specifications and residual
//! certificates over executions.

mod ag;
mod report;
mod residual;

pub use ag::{check_ag_compatibility, compose_ag, AgContract, Composition, Interval, PortBox};
pub use report::{ContractLevel, ContractReport, Location, SATISFACTION_TOL};
pub use residual::{
    bound_residual, check_block_contracts, eval_block_residuals, eval_residual, lyapunov_residual,
    lyapunov_stepwise_residual, registered_residual, stability_residual, BoundResidual, PortMap,
    PortRef, ResidualContract, ResidualFn, ResidualOut, SignalView,
};
