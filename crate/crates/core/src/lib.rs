//! Attack-resilient vehicle-to-edge service mapping.
//!
//! The numerical core is generic over [`num::Scalar`] (`f32` or `f64`). The
//! aliases below fix it to `f64`, which is what the experiment runner uses and
//! what the documented tolerances assume.

pub mod experiment;
pub mod metrics;
pub mod mobility;
pub mod model;
pub mod num;
pub mod orchestrator;
pub mod placement;
pub mod queueing;
pub mod solvers;

pub use metrics::NetworkState;
pub use model::{Placement, Slot};
pub use num::Scalar;
pub use orchestrator::{AttackSchedule, Policy, Targeting};

pub type Point = model::Point<f64>;
pub type ServiceType = model::ServiceType<f64>;
pub type EdgeNode = model::EdgeNode<f64>;
pub type ServiceRequest = model::ServiceRequest<f64>;
pub type PrimaryMapping = model::PrimaryMapping<f64>;
pub type SecondaryMapping = model::SecondaryMapping<f64>;
pub type DelayModel = model::DelayModel<f64>;
pub type MetricsRecord = metrics::MetricsRecord<f64>;
pub type GridMap = mobility::GridMap<f64>;
pub type RequestStream = mobility::RequestStream<f64>;
pub type PropagationModel = mobility::PropagationModel<f64>;
pub type LbPsvmProblem = solvers::LbPsvmProblem<f64>;
pub type LbPsvmSolution = solvers::LbPsvmSolution<f64>;
pub type LbPsvmParams = solvers::LbPsvmParams<f64>;
pub type SolveOptions = solvers::SolveOptions<f64>;
pub type QueueModel = queueing::QueueModel<f64>;
pub type SimConfig = orchestrator::SimConfig<f64>;
pub type Simulation = orchestrator::Simulation<f64>;
