//! Joint implicit surface-occupancy and keypoint-saliency fields over point
//! clouds: model, self-supervised losses, gradient-refined keypoint
//! extraction, surface reconstruction and evaluation protocols.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod evalsuite;
pub mod field_model;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
pub use field_model::{FieldModel, ModelConfig};
pub use geometry::{NormParams, PointCloud, RigidTransform, Vec3};
pub use inference::{ExtractParams, KeypointSet};
