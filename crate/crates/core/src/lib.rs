//! ATT estimation with penalized covariate-balancing weights and an
//! immunization step that removes first-order sensitivity to the
//! first-step regularization bias.
//!
//! The pipeline is: fit balancing coefficients `beta` with a weighted-l1
//! penalty ([`balancing`]), fit an outcome regression `mu` on controls
//! weighted by `h'(x'beta)` ([`immunization`]), then combine both in the
//! moment condition of [`estimators`].

pub mod balancing;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod immunization;
pub mod link;
pub mod objective;
pub mod simulation;
pub mod solver;
pub mod stats;

pub use data::Dataset;
pub use error::{Error, Result};
pub use estimators::{AttEstimate, EstimatorConfig, Method};
pub use link::LinkSpec;
