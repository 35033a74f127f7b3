//! Job dispatching to parallel queues with unknown service rates.
//!
//! The crate covers two problems on a discrete-time system with Bernoulli
//! arrivals and geometric service times:
//!
//! * [`routing`] computes the optimal weighted random routing vector for
//!   known rates, plus the constants that describe how sensitive it is to
//!   rate errors.
//! * [`sim`] runs learning dispatchers from [`policies`] against a genie
//!   that knows the rates, on shared randomness, and records the regret.
//!
//! [`experiment`] replicates coupled runs in parallel and aggregates them.

pub mod error;
pub mod estimation;
pub mod experiment;
pub mod model;
pub mod policies;
pub mod rng;
pub mod routing;
pub mod sim;

pub use error::{Error, Result};
pub use estimation::{concentration_bound, RateEstimator};
pub use experiment::{run_experiment, AggregateRow, ExperimentConfig, ExperimentResult};
pub use model::{geo_mean_queue, total_mean_queue, QueueState, SystemParams};
pub use policies::{exploration_prob, Observation, PolicyKind, PolicySpec, WarmStart};
pub use rng::{derive_seed, Purpose, RandomStream, StreamId};
pub use routing::{
    optimal_routing, oracle_optimal_routing, residual_capacities, routing_for_support,
    sensitivity_constants, tolerance_gap_estimate, GapInterval, RoutingVector,
    SensitivityConstants,
};
pub use sim::{
    run_coupled, run_single, sample_maximal_coupling, tv_distance, RegretTrace, Scenario,
    SingleRunMetrics,
};
