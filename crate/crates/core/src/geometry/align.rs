//! Similarity alignment of a reconstructed scan onto ground-truth coordinates.
//!
//! Both estimators pin rotation and translation by mapping the predicted first
//! camera exactly onto the ground-truth first camera; they differ only in how
//! the scale is measured.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};

use super::camera::{compose_pose, split_rigid, DepthMap};
use super::GeometryError;

/// Minimum number of pixels valid in both depth maps for the median ratio.
pub const MIN_DEPTH_OVERLAP: usize = 100;

/// Minimum separation of the two predicted camera centers.
pub const MIN_CENTER_DISTANCE: f64 = 1e-9;

/// `x_gt = scale · rotation · x_pred + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// Re-expresses a predicted camera-from-world pose in ground-truth world
    /// coordinates (metric, unit-scale camera frame).
    pub fn apply_to_pose(&self, pose: &Matrix4<f64>) -> Result<Matrix4<f64>, GeometryError> {
        let (r, t) = split_rigid(pose)?;
        let center = -(r.transpose() * t);
        let new_center = self.scale * (self.rotation * center) + self.translation;
        let new_r = r * self.rotation.transpose();
        Ok(compose_pose(&new_r, &(-(new_r * new_center))))
    }

    pub fn det_rotation(&self) -> f64 {
        self.rotation.determinant()
    }
}

/// Rotation/translation that carry the predicted frame-0 camera onto the
/// ground-truth one, for a given scale.
fn pin_first_pose(
    pred_pose0: &Matrix4<f64>,
    gt_pose0: &Matrix4<f64>,
    scale: f64,
) -> Result<SimilarityTransform, GeometryError> {
    let (rp, tp) = split_rigid(pred_pose0)?;
    let (rg, tg) = split_rigid(gt_pose0)?;
    let rgt = rg.transpose();
    Ok(SimilarityTransform {
        scale,
        rotation: rgt * rp,
        translation: rgt * (scale * tp - tg),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Scale from the median per-pixel ratio of ground-truth to predicted depth
/// in the first frame; rotation/translation from the first poses.
pub fn align_depth_pose(
    pred_pose0: &Matrix4<f64>,
    gt_pose0: &Matrix4<f64>,
    pred_depth0: &DepthMap,
    gt_depth0: &DepthMap,
) -> Result<SimilarityTransform, GeometryError> {
    if pred_depth0.width() != gt_depth0.width() || pred_depth0.height() != gt_depth0.height() {
        return Err(GeometryError::LengthMismatch {
            left: pred_depth0.values().len(),
            right: gt_depth0.values().len(),
        });
    }
    let mut ratios: Vec<f64> = pred_depth0
        .values()
        .iter()
        .zip(gt_depth0.values())
        .filter(|(p, g)| **p > 0.0 && **g > 0.0)
        .map(|(p, g)| g / p)
        .collect();
    if ratios.len() < MIN_DEPTH_OVERLAP {
        return Err(GeometryError::InsufficientOverlap {
            valid: ratios.len(),
            required: MIN_DEPTH_OVERLAP,
        });
    }
    let scale = median(&mut ratios);
    pin_first_pose(pred_pose0, gt_pose0, scale)
}

/// Scale from the ratio of camera-center distances between the first two
/// frames; rotation/translation from the first poses.
pub fn align_two_poses(
    pred_pose0: &Matrix4<f64>,
    pred_pose1: &Matrix4<f64>,
    gt_pose0: &Matrix4<f64>,
    gt_pose1: &Matrix4<f64>,
) -> Result<SimilarityTransform, GeometryError> {
    let center = |m: &Matrix4<f64>| -> Result<Vector3<f64>, GeometryError> {
        let (r, t) = split_rigid(m)?;
        Ok(-(r.transpose() * t))
    };
    let pred_dist = (center(pred_pose1)? - center(pred_pose0)?).norm();
    if pred_dist <= MIN_CENTER_DISTANCE {
        return Err(GeometryError::CoincidentCenters);
    }
    let gt_dist = (center(gt_pose1)? - center(gt_pose0)?).norm();
    pin_first_pose(pred_pose0, gt_pose0, gt_dist / pred_dist)
}
