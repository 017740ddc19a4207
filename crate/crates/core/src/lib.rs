//! Domain-adaptive point cloud completion on a selective-scan backbone.
//!
//! Source and target clouds are scanned into aligned Z-order patches
//! ([`zorder`]), embedded and encoded by Mamba-style blocks ([`ssm`]), and
//! tied together during training by spatial and channel alignment losses
//! ([`alignment`]). A coarse-plus-folding decoder produces the completed
//! cloud ([`model`]).

pub mod alignment;
pub mod checkpoint;
pub mod cloud;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod zorder;

pub use cloud::{Point, PointCloud};
pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
