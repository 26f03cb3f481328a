//! Linear semantic shape models for point-cloud categories: learning,
//! completion of partial observations, semantic prototypes and 9-DoF pose
//! recovery through NOCS correspondences.

pub mod cloud;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod pose;
pub mod seed;
pub mod semantics;
pub mod shape;
pub mod spatial;
pub mod synth;
pub mod transform;
pub mod umeyama;

pub use cloud::{FeatureMatrix, SemanticCloud, Space};
pub use error::{Error, Result};
pub use transform::{Pose, SimilarityTransform};
