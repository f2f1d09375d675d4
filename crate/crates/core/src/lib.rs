//! Training-free open-vocabulary 3D object detection from posed RGB-D
//! frames and 2D instance masks.
//!
//! - [`scene_io`]: scene manifests, masks, point clouds, depth maps and
//!   canonical JSON outputs.
//! - [`geometry`]: pinhole projection, occlusion tests, boxes, NMS and
//!   similarity alignment.
//! - [`mask_graph`]: class-agnostic detection by view-consensus merging of
//!   2D masks.
//! - [`ov_labeler`]: open-vocabulary labeling through an embedding provider.
//! - [`eval`]: mAP and binary precision/recall.
//! - [`synth`]: analytic cuboid scenes with known ground truth.

pub mod eval;
pub mod geometry;
pub mod mask_graph;
pub mod ov_labeler;
pub mod scene_io;
pub mod synth;
