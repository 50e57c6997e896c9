use thiserror::Error;

/// Errors raised by the pricing, hedging and verification routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate driver: no Brownian channel and no jump channel")]
    DegenerateDriver,
    #[error("market degenerate at step {step}: sigma^2 + sum gamma^2 lambda = 0")]
    MarketDegenerate { step: usize },
    #[error("integrating factor undefined at step {step}, atom {atom}: 1 + G*gamma = {value}")]
    IntegratingFactorUndefined { step: usize, atom: usize, value: f64 },
    #[error("Q* density not positive at step {step}, atom {atom}: G*gamma = {value}")]
    DensityNotPositive { step: usize, atom: usize, value: f64 },
    #[error("kernel invalid at step {step}, atom {atom}: theta1 = {value} <= -1")]
    KernelInvalid { step: usize, atom: usize, value: f64 },
    #[error("policy returned non-finite value at step {step}")]
    NonFinitePolicy { step: usize },
    #[error("portfolio fraction undefined for zero wealth")]
    ZeroWealth,
    #[error("claim has no closed-form representation: use clark_ocone_call")]
    UseClarkOconeCall,
    #[error("evaluation time {t} is not before the horizon {horizon}")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("singular regression design at step {step}: {reason}")]
    SingularRegression { step: usize, reason: String },
    #[error("non-finite numerical result: {0}")]
    NonFinite(String),
    #[error("tree admits arbitrage at level {level}")]
    TreeArbitrage { level: usize },
    #[error("refine grid: {0}")]
    RefineGrid(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
