use thiserror::Error;

/// Errors produced by the model, routing and simulation layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("unstable queue: arrival rate {arrival} is not below service rate {service}")]
    Unstable { arrival: f64, service: f64 },

    #[error("support set has total service rate {total} which does not exceed the arrival rate {lambda}")]
    InsufficientCapacity { total: f64, lambda: f64 },

    #[error("value {value} outside the valid range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
