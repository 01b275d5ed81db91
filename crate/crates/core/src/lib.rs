//! Regularized parametric InfoMax for generalized category discovery.
//!
//! Works on frozen feature vectors: a small feature transform and a cosine
//! classifier are trained with a supervised term, a marginal-entropy term,
//! a conditional-entropy term and two pseudo-label regularizers built from
//! Sinkhorn-balanced assignments.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pseudo;
pub mod trainer;

pub use error::{Result, RpimError};
pub use numerics::{DenseMatrix, Rng};
