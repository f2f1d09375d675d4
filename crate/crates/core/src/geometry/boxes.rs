//! Axis-aligned 3D boxes: cropping, min/max fitting, IoU and greedy NMS.

use std::cmp::Ordering;

use nalgebra::{Point3, Vector3};

use super::GeometryError;

/// Axis-aligned box given by its center and per-axis extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: Point3<f64>,
    pub size: Vector3<f64>,
}

impl Box3D {
    /// Validated constructor: finite center, strictly positive finite size.
    pub fn new(center: Point3<f64>, size: Vector3<f64>) -> Result<Self, GeometryError> {
        if center.iter().any(|v| !v.is_finite()) || size.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("box"));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::DegenerateBox);
        }
        Ok(Self { center, size })
    }

    pub fn from_min_max(min: Point3<f64>, max: Point3<f64>) -> Self {
        Self {
            center: Point3::from((min.coords + max.coords) * 0.5),
            size: max - min,
        }
    }

    pub fn min(&self) -> Point3<f64> {
        self.center - self.size * 0.5
    }

    pub fn max(&self) -> Point3<f64> {
        self.center + self.size * 0.5
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    /// True when some side has zero extent (fit to a single distinct
    /// coordinate along that axis).
    pub fn is_degenerate(&self) -> bool {
        self.size.iter().any(|&s| s <= 0.0)
    }

    /// Closed containment test `c - s/2 <= p <= c + s/2`.
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| lo[i] <= p[i] && p[i] <= hi[i])
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        Self {
            center: self.center + t,
            size: self.size,
        }
    }
}

/// Indices of the points inside `b` (closed bounds on both sides).
pub fn crop_point_cloud(points: &[Point3<f64>], b: &Box3D) -> Vec<usize> {
    let (lo, hi) = (b.min(), b.max());
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| (0..3).all(|i| lo[i] <= p[i] && p[i] <= hi[i]))
        .map(|(i, _)| i)
        .collect()
}

/// Tightest axis-aligned box around `points`. A single distinct coordinate
/// along an axis yields zero extent there; see [`Box3D::is_degenerate`].
pub fn box_from_points<'a, I>(points: I) -> Result<Box3D, GeometryError>
where
    I: IntoIterator<Item = &'a Point3<f64>>,
{
    let mut it = points.into_iter();
    let first = it.next().ok_or(GeometryError::EmptyInput("point set"))?;
    let (mut lo, mut hi) = (*first, *first);
    for p in it {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("point set"));
    }
    Ok(Box3D::from_min_max(lo, hi))
}

fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    (0..3)
        .map(|i| (ahi[i].min(bhi[i]) - alo[i].max(blo[i])).max(0.0))
        .product()
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Candidate order for greedy suppression: score descending, then original
/// index ascending.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| match scores[j].total_cmp(&scores[i]) {
        Ordering::Equal => i.cmp(&j),
        o => o,
    });
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores favour the lower original index.
pub fn nms(boxes: &[Box3D], scores: &[f64], tau_iou: f64) -> Result<Vec<usize>, GeometryError> {
    if boxes.len() != scores.len() {
        return Err(GeometryError::LengthMismatch {
            left: boxes.len(),
            right: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GeometryError::NonFinite("score"));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.iter().all(|&k| iou3d(&boxes[k], &boxes[i]) < tau_iou) {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64, y: f64, z: f64, s: f64) -> Box3D {
        Box3D::new(Point3::new(x, y, z), Vector3::new(s, s, s)).unwrap()
    }

    #[test]
    fn crop_all_and_none() {
        let pts: Vec<_> = (0..10).map(|i| Point3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        assert_eq!(crop_point_cloud(&pts, &cube(0.5, 0.0, 0.0, 2.0)).len(), 10);
        assert!(crop_point_cloud(&pts, &cube(5.0, 5.0, 5.0, 1.0)).is_empty());
    }

    #[test]
    fn crop_bounds_are_closed() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0)];
        let b = Box3D::from_min_max(Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0));
        assert_eq!(crop_point_cloud(&pts, &b), vec![0, 1]);
    }

    #[test]
    fn fit_two_points() {
        let b = box_from_points(&[Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(b.center, Point3::new(0.5, 1.0, 1.5));
        assert_eq!(b.size, Vector3::new(1.0, 2.0, 3.0));
        assert!(!b.is_degenerate());
    }

    #[test]
    fn fit_single_point_is_degenerate() {
        let b = box_from_points(&[Point3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(b.size, Vector3::zeros());
        assert!(b.is_degenerate());
        assert!(box_from_points(&[]).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = cube(0.0, 0.0, 0.0, 1.0);
        assert_eq!(iou3d(&a, &a), 1.0);
        assert_eq!(iou3d(&a, &cube(3.0, 0.0, 0.0, 1.0)), 0.0);
        let b = cube(0.5, 0.0, 0.0, 1.0);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou3d(&a, &b), iou3d(&b, &a));
    }

    #[test]
    fn nms_basic_cases() {
        let a = cube(0.0, 0.0, 0.0, 1.0);
        assert_eq!(nms(&[a], &[0.3], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        assert_eq!(nms(&[a, a], &[0.9, 0.9], 0.5).unwrap(), vec![0]);
        assert!(matches!(
            nms(&[a], &[0.1, 0.2], 0.5),
            Err(GeometryError::LengthMismatch { .. })
        ));
        assert!(nms(&[a], &[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(Box3D::new(Point3::origin(), Vector3::new(1.0, 0.0, 1.0)).is_err());
        assert!(Box3D::new(Point3::new(f64::NAN, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)).is_err());
    }
}
