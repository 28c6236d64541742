//! Differentially private synthesis of multi-relation categorical databases.
//!
//! The pipeline learns one latent-variable graphical model per private foreign
//! key (plus single-relation models where needed), accounts every Gaussian
//! measurement in a privacy ledger calibrated against the analytic Gaussian
//! mechanism, and generates a synthetic database that preserves
//! inter-attribute, intra-group and inter-relational correlations.

// Index loops over parallel row/column arrays are the dominant access pattern
// here; iterator rewrites obscure them.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod em;
pub mod eval;
pub mod marginal;
pub mod model;
pub mod pipeline;
pub mod privacy;
pub mod rng;
pub mod schema;
pub mod select;
pub mod synth;
