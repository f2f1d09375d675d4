//! Camera geometry and box algebra.

mod align;
mod boxes;
mod camera;

pub use align::{
    align_depth_pose, align_two_poses, SimilarityTransform, MIN_CENTER_DISTANCE, MIN_DEPTH_OVERLAP,
};
pub use boxes::{box_from_points, crop_point_cloud, iou3d, nms, Box3D};
pub use camera::{
    backproject_pixel, bbox2d_from_pixels, compose_pose, project_point, split_rigid,
    visible_indices, visible_pixel, visible_projection, CameraFrame, DepthMap, Intrinsics,
    PixelSet, MIN_CAMERA_DEPTH, RIGIDITY_TOLERANCE,
};

/// Default occlusion threshold in meters.
pub const DEFAULT_TAU_OCC: f64 = 0.10;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-rigid pose: {0}")]
    NonRigidPose(String),
    #[error("intrinsics must have fx, fy > 0 and finite principal point")]
    InvalidIntrinsics,
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("depth map has {actual} values, expected {expected}")]
    DepthSize { expected: usize, actual: usize },
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("box has a non-positive side")]
    DegenerateBox,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("only {valid} pixels valid in both depth maps, need {required}")]
    InsufficientOverlap { valid: usize, required: usize },
    #[error("predicted camera centers coincide")]
    CoincidentCenters,
}
