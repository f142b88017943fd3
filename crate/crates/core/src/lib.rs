//! Tabular policy-gradient laboratory for studying entropy dynamics.
//!
//! Exact softmax policies, group-relative advantage estimators, clipped
//! surrogates, entropy predictors, bit-exact 16-bit casting, and an
//! experiment harness with reproducible metrics files.

pub mod dynamics;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod objectives;
pub mod policy;
pub mod quantize;
pub mod rng;

pub use error::{Error, Result};
