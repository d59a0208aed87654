//! Sparse-input radiance field training on a hand-rolled reverse-mode tape.
//!
//! The pipeline: cameras on a viewing sphere emit pixel cones
//! ([`geometry`]); cones are cut into conical frustums, summarized as
//! Gaussians and encoded ([`sampling`]); a small MLP maps encodings to
//! density, color and a per-frustum offset ([`field`]); quadrature turns
//! those into pixel colors and depths ([`rendering`]). Training
//! ([`training`]) combines photometric supervision on the few seen views
//! with the offset regularizers and a consistency term between unseen
//! poses and their small perturbations ([`losses`]). Analytic scenes with a
//! dense reference renderer ([`scenes`]) supply ground truth, and
//! [`eval`] holds metrics and per-ray diagnostics.

pub mod checkpoint;
pub mod config;
pub mod diffmath;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod rendering;
pub mod sampling;
pub mod scenes;
pub mod training;

pub use diffmath::{grad_check, DiffError, Shape, Tape, Var};
