//! Covariance, power and optimal-design search for multi-arm stepped-wedge
//! cluster randomized trials analysed with a linear mixed model.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision. Power calculations and searches run in
//! `f64`.

pub mod analytic;
pub mod designspace;
mod error;
pub mod inference;
pub mod model;
mod scalar;
pub mod search;

pub use designspace::{DesignSpace, Restriction};
pub use error::{Error, Result};
pub use inference::{PowerReport, PowerSpec};
pub use model::{CovarianceSummary, Design, VarianceComponents};
pub use scalar::Scalar;
pub use search::{Criterion, Objective, ScalingDomain, SearchOutcome, SearchResult};

pub type VarianceComponentsF64 = VarianceComponents<f64>;
pub type VarianceComponentsF32 = VarianceComponents<f32>;
pub type CovarianceSummaryF64 = CovarianceSummary<f64>;
pub type CovarianceSummaryF32 = CovarianceSummary<f32>;
pub type InformationEngineF64 = model::InformationEngine<f64>;
pub type InformationEngineF32 = model::InformationEngine<f32>;
