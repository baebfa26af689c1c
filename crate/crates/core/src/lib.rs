//! Two-stage pillar-based 3D object detection on dense `f64` tensors.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensor container, convolutions, batch-norm, losses,
//!   trilinear interpolation and a finite-difference gradient checker.
//! * [`geometry`]: oriented boxes, rotated IoU, NMS and residual coding.
//! * [`voxelizer`] and [`vfe`]: point cloud to sparse voxel features and the
//!   dense stack of pseudo images.
//! * [`backbone`]: separable voxel feature modules (three axis-degenerate 2D
//!   convolutions per module), the three-block backbone, BEV squeeze and neck.
//! * [`rpn`]: anchors, heads, target assignment, proposal decoding, RPN loss.
//! * [`s2cfm`]: sparse scene feature, voxel RoI pooling and the key-value
//!   context memory with its update losses and analytic gradients.
//! * [`roi_head`]: second-stage refinement and the RoI loss.
//! * [`pipeline`]: a full detector assembled from the pieces above.

pub mod backbone;
pub mod error;
pub mod geometry;
pub mod numerics;
pub mod pipeline;
pub mod roi_head;
pub mod rpn;
pub mod s2cfm;
pub mod vfe;
pub mod voxelizer;

pub use error::{Error, Result};
pub use numerics::Tensor;
