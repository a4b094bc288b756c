//! Data model and geometry for stroke-conditioned skeleton generation.
//!
//! A [`SkeletonGraph`] is a set of 3D joints joined by undirected bones. A
//! [`StrokeGraph2D`] is the 2D drawing that shares the skeleton's topology.
//! Everything downstream (training, sampling, evaluation) exchanges these two
//! types, serialized with the JSON schemas in [`json`].

pub mod align;
pub mod datakit;
pub mod error;
pub mod json;
pub mod metrics;
pub mod skeleton;
pub mod stroke;
pub mod textenc;
pub mod validate;

pub use error::{GraphError, ParseError};
pub use skeleton::{Category, Edge, Projection, SkeletonGraph, StrokeGraph2D, View};
pub use validate::{ValidationReport, Violation, ViolationCode};

/// Upper bound on joint count for training-eligible skeletons.
pub const MAX_TRAINING_JOINTS: usize = 30;
