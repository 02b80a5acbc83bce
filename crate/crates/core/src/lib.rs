//! Operator augmentation for model-based policy evaluation in tabular MDPs.
//!
//! A sampled model `(P̂, b̂)` yields the naive value estimate `v̂ = Â⁻¹b̂` with
//! `Â = I − γP̂`. Scaling it by a factor `ε < 1` trades a little bias for a
//! larger variance reduction; this crate computes that factor in closed form
//! ([`augmentation::theta`]), from data ([`augmentation::plugin_factor`],
//! [`augmentation::bootstrap_factor`]), and exactly or by Monte Carlo for
//! reference ([`oracle`]).
//!
//! Everything is generic over [`Real`]; the aliases below fix `f64`.

pub mod augmentation;
pub mod bounds;
pub mod environments;
pub mod error;
pub mod mdp;
pub mod oracle;
pub mod sampling;
pub mod scalar;

pub use augmentation::{
    augmented_value, bootstrap_factor, compute_moments, plugin_factor, row_covariance, theta,
};
pub use environments::{EnvConfig, Family};
pub use error::{Error, Result};
pub use mdp::{bellman_operator, induce_policy_model, m_norm_sq, solve_value, NormKind};
pub use sampling::{sample_estimated_model, RandomStream, RewardCovMode, SampleSizes};
pub use scalar::Real;

pub type Mdp = mdp::TabularMdp<f64>;
pub type Policy = mdp::Policy<f64>;
pub type InducedModel = mdp::InducedModel<f64>;
pub type BellmanOperator = mdp::BellmanOperator<f64>;
pub type NormSpec = mdp::NormSpec<f64>;
pub type EstimatedModel = sampling::EstimatedModel<f64>;
pub type AugmentationMoments = augmentation::AugmentationMoments<f64>;
pub type PerturbationSample = augmentation::PerturbationSample<f64>;
pub type FactorReport = augmentation::FactorReport<f64>;
pub type MseStatistics = oracle::MseStatistics<f64>;
pub type MseCurve = oracle::MseCurve<f64>;
pub type BoundsReport = bounds::BoundsReport<f64>;
