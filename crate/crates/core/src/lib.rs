//! Lifts per-view outputs of 2D vision operators into view-consistent 3D
//! predictions. Source views are encoded to feature maps, gathered along
//! epipolar projections of ray sample points, blended with learned weights,
//! corrected per view, and composited by volume rendering. Training runs
//! end-to-end on synthetic multi-view scenes with synthetic operators, so the
//! whole pipeline is reproducible from a seed on one machine.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod operators;
pub mod renderer;
pub mod sampling;
pub mod scenes;
pub mod tensorio;
pub mod training;

pub use error::{Error, Result};
pub use tensorio::{Rng, Tensor};
