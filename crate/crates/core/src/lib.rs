//! Label assignment, dense pseudo-label selection and soft labels for
//! semi-supervised oriented object detection.
//!
//! Boxes are modelled as 2D Gaussians; grid points inside a box's inscribed
//! ellipse become positives ([`assignment`]), teacher predictions are turned
//! into pixel-level pseudo-labels with level-dependent rules
//! ([`pseudo_label`]), and classification targets are softened with a
//! scale-aware power of the Gaussian centerness ([`soft_label`]).

// negated comparisons are used to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod pseudo_label;
pub mod sim;
pub mod soft_label;

pub use error::{Error, Result};
pub use geometry::{Gaussian2D, Point2, RotatedBox, ScoredBox};
