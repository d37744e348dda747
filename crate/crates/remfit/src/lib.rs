//! Relational event additive models for large time-stamped directed event
//! networks.
//!
//! The pipeline: load a citation-style event log ([`data_model`]), sample one
//! non-event control per event ([`sampler`]), compute effect statistics
//! ([`covariates`]), expand them through B-spline bases per batch
//! ([`bsplines`]), and fit the case-control logit partial likelihood
//! ([`likelihood`]) with a mini-batch adaptive-moment optimizer
//! ([`optimizer`]). Post-fit, [`baseline`] recovers the cumulative and
//! pointwise baseline hazard and [`selection`] handles information criteria
//! and cross-validated hyperparameter choice. [`synthgen`] generates
//! networks with known effect curves and provides an exact Newton fitter,
//! which is how everything else is verified.

pub mod baseline;
pub mod bsplines;
pub mod covariates;
pub mod data_model;
pub mod likelihood;
pub mod optimizer;
pub mod sampler;
pub mod selection;
pub mod synthgen;
pub mod util;

#[cfg(test)]
pub(crate) mod testutil;

pub use covariates::EffectKind;
pub use data_model::{EventLog, NodeId, Timestamp};
pub use likelihood::{EffectConfig, EffectMode, Transform};
pub use optimizer::{AdamConfig, EffectSpec, ModeSpec, ModelFit};
