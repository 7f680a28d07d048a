//! Affine alignment of partially labeled point configurations.
//!
//! Two point sets (a reference `mu` and an observed `x`) share a small set of
//! manually labeled markers. An EM algorithm estimates an affine transform
//! together with posterior match probabilities, the posteriors are hardened
//! into a one-to-one (or many-to-one) matching, and a least-squares refit
//! over the accepted matches gives the final transform. Markers that are
//! missing from one side, or grossly misallocated, are detected and handled
//! before the main alignment.

// NaN-rejecting range checks read as `!(v > 0.0)`
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod hardening;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod priors;
pub mod qc;
pub mod registry;
pub mod synth;

pub use error::{Error, Result};
