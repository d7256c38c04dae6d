//! Boundary-aware auxiliary supervision for semantic segmentation.
//!
//! This crate trains hierarchical segmentation backbones jointly with a
//! multi-scale semantic-boundary-detection head that taps selected backbone
//! stages. Boundary ground truth is generated on the fly from the label maps
//! after every geometric augmentation, so supervision bands keep a constant
//! pixel width at any training scale. The auxiliary head can be discarded at
//! export time, leaving a plain segmentation model with the conditioned
//! backbone weights.
//!
//! Module map:
//! - [`boundary`]: on-the-fly boundary target generation and exact EDTs
//! - [`autograd`] / [`nn`]: the small f64 tape engine and layers behind it
//! - [`backbone`]: stage taps, stride/dilation rewrites, the bundled toy net
//! - [`heads`]: generalized boundary heads and the FCN auxiliary baseline
//! - [`losses`]: joint objective (segmentation CE + weighted boundary BCE)
//! - [`metrics`]: mIoU, trimap boundary F-score, max-F at the dataset scale
//! - [`pipeline`]: datasets, augmentation, synthetic shapes generator
//! - [`model`] / [`fusion`]: full model assembly and explicit feature fusion
//! - [`trainer`]: SGD + poly LR loop, checkpoints, export, evaluation

pub mod autograd;
pub mod backbone;
pub mod boundary;
pub mod config;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod trainer;

pub use boundary::{
    binary_boundaries, category_boundary, distance_to_opposite, semantic_boundaries,
    BoundaryGenConfig, InstanceMap, LabelMap, SemanticBoundaryTensor,
};
pub use error::{Error, Result};
