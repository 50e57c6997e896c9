//! Minimal-variance pricing and quadratic hedging of European claims in
//! jump-diffusion markets with finitely many jump atoms.
//!
//! Every numerical routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64` for everyday use.

// `!(x > y)` rejects NaN along with the ordered failures
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod claims;
pub mod emm;
pub mod error;
pub mod hedging;
pub mod linalg;
pub mod market;
pub mod oracle;
pub mod pricing;
pub mod rng;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use stats::Estimate;

pub type Market = market::MarketCoefficients<f64>;
pub type Grid = market::TimeGrid<f64>;
pub type Levy = market::LevyMeasure<f64>;
pub type Driver = market::DriverPath<f64>;
pub type Claim = claims::Claim<f64>;
pub type Aux = hedging::AuxCoefficients<f64>;
pub type Kernel = emm::GirsanovKernel<f64>;
pub type Tree = oracle::ScenarioTree<f64>;
pub type Price = pricing::PriceEstimate<f64>;
