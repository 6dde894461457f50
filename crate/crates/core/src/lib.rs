//! Bayes-error and mutual-information estimation for website-fingerprinting
//! defenses.
//!
//! Traces are encoded as fixed-length vectors, mapped through learned (or
//! hand-crafted) feature transformations, and scored with nearest-neighbour
//! estimators whose outputs are checked against information-theoretic bounds.

pub mod bounds;
pub mod defenses;
pub mod embedding;
pub mod estimators;
pub mod features;
pub mod manual_features;
pub mod rng;
pub mod synth;
pub mod traces;
pub mod pipeline;
