//! Monte-Carlo uncertainty for instance segmentation and a pool-based
//! active-learning loop built on it.
//!
//! Detections from repeated stochastic forward passes are grouped into
//! instance sets by mask overlap. Each set gets a semantic, spatial and
//! occurrence certainty whose product is aggregated per image; the least
//! certain images are sent for annotation.

pub mod active;
pub mod certainty;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod io;
pub mod mask;
pub mod seed;
pub mod sim;

pub use certainty::{CertaintyBreakdown, CertaintyMethod, ImageCertainty};
pub use error::{Error, Result};
pub use grouping::{group_instances, InstanceSet, ScoredInstance};
pub use mask::{BinaryMask, BoundingBox};
