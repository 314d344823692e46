//! Vehicle-to-edge mapping solvers.
//!
//! * [`solve_primary_mapping`]: bottleneck-optimal assignment for normal operation.
//! * [`build_lb_psvm`] / [`solve_lb_psvm`]: load-balanced failover mapping, a
//!   separable convex program solved by dual bisection.
//! * [`solve_psvm`] and [`backup_redirect`]: the single-target baselines.
//! * [`oracle_lb_psvm`]: exhaustive grid search used to validate the convex solver.

mod baseline;
mod lbpsvm;
mod oracle;
mod primary;

pub use baseline::{backup_redirect, failover_candidates, solve_psvm};
pub use lbpsvm::{
    build_lb_psvm, lb_psvm_objective, solve_lb_psvm, stationarity_residual, LbPsvmParams, LbPsvmProblem,
    LbPsvmSolution, SolveOptions,
};
pub use oracle::oracle_lb_psvm;
pub use primary::{solve_primary_mapping, PrimaryOutcome};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("service {service}: demand {demand} exceeds hosted capacity {capacity}")]
    CapacityInfeasible { service: usize, demand: f64, capacity: f64 },
    #[error("service {service}: no healthy candidate besides node {node}")]
    NoCandidate { service: usize, node: usize },
    #[error("service {service} is not hosted on node {node}")]
    NotHosted { service: usize, node: usize },
    #[error("service {service}: {affected} affected vehicles exceed queue headroom {headroom}")]
    QueueInfeasible { service: usize, affected: f64, headroom: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("grid oracle supports at most 4 candidates, got {0}")]
    OracleTooLarge(usize),
}
