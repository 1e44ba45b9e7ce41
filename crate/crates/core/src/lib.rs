//! Domain-adaptive two-stage detection with categorical regularization.
//!
//! A small Faster R-CNN style detector is trained on a labeled source
//! domain and adversarially aligned to an unlabeled target domain. Two
//! regularizers steer the alignment: an image-level multi-label classifier
//! ([`icr`]) and a per-instance weighting of the instance-level alignment
//! loss by how much the detection head and that classifier disagree
//! ([`ccr`]).

pub mod alignment;
pub mod autograd;
pub mod boxes;
pub mod ccr;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod icr;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
