//! Pinhole camera model: projection, backprojection and the depth-consistency
//! occlusion test.
//!
//! Poses are stored camera-from-world. A world point `p` lands in camera space
//! as `R p + t` and on the image plane at `(fx x / w + cx, fy y / w + cy)`.
//! Integer pixel `(u, v)` is the pixel whose center sits at continuous
//! coordinate `(u, v)`; depth lookups round to the nearest pixel.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Minimum camera-space depth for a point to count as in front of the camera.
pub const MIN_CAMERA_DEPTH: f64 = 1e-6;

/// Tolerance on `RᵀR = I` for a pose to count as rigid.
pub const RIGIDITY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Row-major depth image in meters. Zero marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != width as usize * height as usize {
            return Err(GeometryError::DepthSize {
                expected: width as usize * height as usize,
                actual: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(GeometryError::InvalidDepth(*bad));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: u32, height: u32, depth: f64) -> Self {
        Self {
            width,
            height,
            values: vec![depth; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Depth at integer pixel `(x, y)`; zero when out of bounds.
    pub fn get(&self, x: u32, y: u32) -> f64 {
        if x >= self.width || y >= self.height {
            return 0.0;
        }
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, depth: f64) {
        let idx = y as usize * self.width as usize + x as usize;
        self.values[idx] = depth;
    }

    /// Nearest-pixel lookup at a continuous coordinate. Returns the rounded
    /// pixel and its depth when the pixel is inside the map and valid.
    pub fn lookup_nearest(&self, u: f64, v: f64) -> Option<((u32, u32), f64)> {
        let x = u.round();
        let y = v.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let (x, y) = (x as u32, y as u32);
        let d = self.get(x, y);
        (d > 0.0).then_some(((x, y), d))
    }
}

/// One calibrated, posed view with its depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub id: u32,
    pub intrinsics: Intrinsics,
    world_to_camera: Matrix4<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub depth: DepthMap,
}

impl CameraFrame {
    /// Builds a frame, validating intrinsics, pose rigidity and depth size.
    pub fn new(
        id: u32,
        intrinsics: Intrinsics,
        world_to_camera: Matrix4<f64>,
        depth: DepthMap,
    ) -> Result<Self, GeometryError> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0)
            || !intrinsics.cx.is_finite()
            || !intrinsics.cy.is_finite()
        {
            return Err(GeometryError::InvalidIntrinsics);
        }
        if depth.width == 0 || depth.height == 0 {
            return Err(GeometryError::EmptyInput("depth map"));
        }
        let (rotation, translation) = split_rigid(&world_to_camera)?;
        Ok(Self {
            id,
            intrinsics,
            world_to_camera,
            rotation,
            translation,
            depth,
        })
    }

    pub fn width(&self) -> u32 {
        self.depth.width
    }

    pub fn height(&self) -> u32 {
        self.depth.height
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn to_world(&self, x_cam: &Vector3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (x_cam - self.translation))
    }

    /// Continuous pixel and camera depth, without the in-frame check.
    fn project_unbounded(&self, p: &Point3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= MIN_CAMERA_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }
}

/// Splits a 4×4 camera-from-world matrix into rotation and translation,
/// rejecting anything that is not a proper rigid transform.
pub fn split_rigid(m: &Matrix4<f64>) -> Result<(Matrix3<f64>, Vector3<f64>), GeometryError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonRigidPose("non-finite entry".into()));
    }
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(GeometryError::NonRigidPose(format!(
            "bottom row is {bottom:?}, expected [0, 0, 0, 1]"
        )));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > RIGIDITY_TOLERANCE {
        return Err(GeometryError::NonRigidPose(format!(
            "rotation not orthonormal (max |RᵀR - I| = {err:.3e})"
        )));
    }
    if r.determinant() <= 0.0 {
        return Err(GeometryError::NonRigidPose("rotation is a reflection".into()));
    }
    let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    Ok((r, t))
}

/// Assembles a 4×4 camera-from-world matrix.
pub fn compose_pose(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

/// Projects a world point into `frame`. Absent when behind the camera or
/// outside `[0, W) × [0, H)`.
pub fn project_point(p: &Point3<f64>, frame: &CameraFrame) -> Option<(f64, f64)> {
    let (u, v, _) = frame.project_unbounded(p)?;
    let in_frame = u >= 0.0 && v >= 0.0 && u < frame.width() as f64 && v < frame.height() as f64;
    in_frame.then_some((u, v))
}

/// Lifts pixel `(u, v)` at camera depth `depth` back to world space.
pub fn backproject_pixel(
    u: (f64, f64),
    depth: f64,
    frame: &CameraFrame,
) -> Result<Point3<f64>, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidDepth(depth));
    }
    let k = &frame.intrinsics;
    let x_cam = Vector3::new(
        (u.0 - k.cx) / k.fx * depth,
        (u.1 - k.cy) / k.fy * depth,
        depth,
    );
    Ok(frame.to_world(&x_cam))
}

/// Pixels of the points that survive the occlusion test in one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelSet {
    pub frame_id: u32,
    pub pixels: Vec<(u32, u32)>,
}

impl PixelSet {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Occlusion test for a single point. Returns the rounded pixel when the
/// point projects in-frame onto a valid depth pixel whose backprojection lies
/// within `tau_occ` of the point.
pub fn visible_pixel(p: &Point3<f64>, frame: &CameraFrame, tau_occ: f64) -> Option<(u32, u32)> {
    let (u, v) = project_point(p, frame)?;
    let (pixel, d) = frame.depth.lookup_nearest(u, v)?;
    let k = &frame.intrinsics;
    let x_cam = Vector3::new((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d);
    let surface = frame.to_world(&x_cam);
    ((p - surface).norm() < tau_occ).then_some(pixel)
}

/// Indices (into `points`) and pixels of the points visible in `frame`.
pub fn visible_indices<'a, I>(points: I, frame: &CameraFrame, tau_occ: f64) -> (Vec<usize>, Vec<(u32, u32)>)
where
    I: IntoIterator<Item = &'a Point3<f64>>,
{
    let mut idx = Vec::new();
    let mut pixels = Vec::new();
    for (i, p) in points.into_iter().enumerate() {
        if let Some(px) = visible_pixel(p, frame, tau_occ) {
            idx.push(i);
            pixels.push(px);
        }
    }
    (idx, pixels)
}

/// Projects `points` into `frame` and keeps those passing the depth
/// consistency test. One pixel per surviving point, in input order.
pub fn visible_projection(
    points: &[Point3<f64>],
    frame: &CameraFrame,
    tau_occ: f64,
) -> PixelSet {
    let (_, pixels) = visible_indices(points, frame, tau_occ);
    PixelSet {
        frame_id: frame.id,
        pixels,
    }
}

/// Tight integer bounds `(xmin, ymin, xmax, ymax)` of a pixel set.
pub fn bbox2d_from_pixels(set: &PixelSet) -> Result<(u32, u32, u32, u32), GeometryError> {
    let mut it = set.pixels.iter();
    let &(x0, y0) = it.next().ok_or(GeometryError::EmptyInput("pixel set"))?;
    Ok(it.fold((x0, y0, x0, y0), |(a, b, c, d), &(x, y)| {
        (a.min(x), b.min(y), c.max(x), d.max(y))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(k: Intrinsics, pose: Matrix4<f64>, w: u32, h: u32, depth: f64) -> CameraFrame {
        CameraFrame::new(0, k, pose, DepthMap::filled(w, h, depth)).unwrap()
    }

    #[test]
    fn identity_camera_projects_optical_axis_to_origin() {
        let f = frame(Intrinsics::new(1.0, 1.0, 0.0, 0.0), Matrix4::identity(), 4, 4, 1.0);
        assert_eq!(project_point(&Point3::new(0.0, 0.0, 1.0), &f), Some((0.0, 0.0)));
    }

    #[test]
    fn analytic_projection() {
        let f = frame(Intrinsics::new(100.0, 100.0, 50.0, 50.0), Matrix4::identity(), 200, 100, 1.0);
        assert_eq!(project_point(&Point3::new(1.0, 0.0, 2.0), &f), Some((100.0, 50.0)));
    }

    #[test]
    fn behind_camera_and_out_of_frame_are_absent() {
        let f = frame(Intrinsics::new(100.0, 100.0, 50.0, 50.0), Matrix4::identity(), 100, 100, 1.0);
        assert_eq!(project_point(&Point3::new(0.0, 0.0, -1.0), &f), None);
        assert_eq!(project_point(&Point3::new(0.0, 0.0, 0.0), &f), None);
        // u = 100 is exactly W, so excluded
        assert_eq!(project_point(&Point3::new(1.0, 0.0, 2.0), &f), None);
    }

    #[test]
    fn analytic_backprojection() {
        let f = frame(Intrinsics::new(100.0, 100.0, 50.0, 50.0), Matrix4::identity(), 100, 100, 1.0);
        let p = backproject_pixel((50.0, 50.0), 2.0, &f).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 2.0));
        assert!(matches!(
            backproject_pixel((1.0, 1.0), 0.0, &f),
            Err(GeometryError::InvalidDepth(_))
        ));
    }

    #[test]
    fn non_rigid_pose_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        let err = CameraFrame::new(0, Intrinsics::new(1.0, 1.0, 0.0, 0.0), m, DepthMap::filled(2, 2, 1.0));
        assert!(matches!(err, Err(GeometryError::NonRigidPose(_))));
        let mut m = Matrix4::identity();
        m[(3, 0)] = 0.5;
        let err = CameraFrame::new(0, Intrinsics::new(1.0, 1.0, 0.0, 0.0), m, DepthMap::filled(2, 2, 1.0));
        assert!(matches!(err, Err(GeometryError::NonRigidPose(_))));
    }

    #[test]
    fn occlusion_keeps_surface_point_and_drops_hidden_point() {
        let f = frame(Intrinsics::new(100.0, 100.0, 50.0, 50.0), Matrix4::identity(), 100, 100, 2.0);
        let on_surface = Point3::new(0.0, 0.0, 2.0);
        let behind = Point3::new(0.0, 0.0, 2.5);
        assert_eq!(visible_pixel(&on_surface, &f, 0.1), Some((50, 50)));
        assert_eq!(visible_pixel(&behind, &f, 0.1), None);
        let set = visible_projection(&[on_surface, behind], &f, 0.1);
        assert_eq!(set.pixels, vec![(50, 50)]);
    }

    #[test]
    fn invalid_depth_pixel_drops_point() {
        let mut f = frame(Intrinsics::new(100.0, 100.0, 50.0, 50.0), Matrix4::identity(), 100, 100, 2.0);
        f.depth.set(50, 50, 0.0);
        assert_eq!(visible_pixel(&Point3::new(0.0, 0.0, 2.0), &f, 0.1), None);
    }

    #[test]
    fn bbox2d_cases() {
        let s = |p: Vec<(u32, u32)>| PixelSet { frame_id: 0, pixels: p };
        assert_eq!(bbox2d_from_pixels(&s(vec![(10, 20)])).unwrap(), (10, 20, 10, 20));
        assert_eq!(bbox2d_from_pixels(&s(vec![(0, 0), (4, 7)])).unwrap(), (0, 0, 4, 7));
        assert!(bbox2d_from_pixels(&s(vec![])).is_err());
    }

    #[test]
    fn camera_center_round_trip() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 1.1).into_inner();
        let t = Vector3::new(0.5, -1.0, 2.0);
        let f = frame(Intrinsics::new(1.0, 1.0, 0.0, 0.0), compose_pose(&rot, &t), 2, 2, 1.0);
        let c = f.center();
        assert!(f.to_camera(&c).norm() < 1e-12);
    }
}
