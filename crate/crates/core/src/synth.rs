//! Analytic test scenes: axis-aligned cuboids seen by rings of pinhole
//! cameras. Depth, instance masks and label maps are ray-cast exactly, so
//! the scene has a known ground truth for every stage of the pipeline.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde_json::json;

use crate::geometry::{compose_pose, Box3D, CameraFrame, DepthMap, Intrinsics};
use crate::ov_labeler::FakeProvider;
use crate::scene_io::{
    encode_rle, to_canonical_json, write_gray16_png, write_scene, Bitmap, Gray16, InstanceMask2D,
    PointCloud, SamplingInfo, Scene, SceneError, Vocabulary, DEFAULT_POINT_CAP,
    DEFAULT_PROMPT_TEMPLATE,
};

/// Vocabulary of generated scenes. The last class never occurs.
pub const SYNTH_CLASSES: [&str; 4] = ["chair", "table", "cabinet", "lamp"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthObject {
    pub bbox: Box3D,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Cameras alternate between two rings on the diagonal azimuths, so no
    /// cuboid face is seen exactly edge-on.
    pub n_cameras: usize,
    /// `(radius, height)` of the two camera rings, meters.
    pub rings: [(f64, f64); 2],
    /// Point cloud grid spacing on the cuboid faces, meters.
    pub surface_spacing: f64,
    /// Seed recorded for the provider that embeds the vocabulary.
    pub vocab_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            focal: 260.0,
            n_cameras: 8,
            rings: [(4.0, 2.6), (3.4, 3.2)],
            surface_spacing: 0.02,
            vocab_seed: 0,
        }
    }
}

/// Three well-separated cuboids resting on `z = 0`.
pub fn default_objects() -> Vec<SynthObject> {
    let obj = |c: [f64; 3], s: [f64; 3], class_id| SynthObject {
        bbox: Box3D::new(Point3::from(c), Vector3::from(s)).expect("valid box"),
        class_id,
    };
    vec![
        obj([-1.0, -0.6, 0.375], [1.2, 0.8, 0.75], 1),
        obj([1.1, -0.5, 0.45], [0.6, 0.6, 0.9], 0),
        obj([0.0, 1.2, 0.6], [0.9, 0.5, 1.2], 2),
    ]
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub scene: Scene,
    /// Per frame: `class_id + 1` where an object is hit, 0 elsewhere.
    pub label_maps: Vec<Gray16>,
    pub objects: Vec<SynthObject>,
}

/// Rotation taking world to camera coordinates for a camera at `eye`
/// looking at `target`, world `z` up, camera `y` down.
fn look_at(eye: &Point3<f64>, target: &Point3<f64>) -> Matrix3<f64> {
    let f = (target - eye).normalize();
    let x = f.cross(&Vector3::z()).normalize();
    let y = f.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), f.transpose()])
}

/// Nearest positive ray parameter at which `origin + t·dir` enters `b`.
fn ray_box(origin: &Point3<f64>, dir: &Vector3<f64>, b: &Box3D) -> Option<f64> {
    let (lo, hi) = (b.min(), b.max());
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let a = (lo[i] - origin[i]) / dir[i];
        let c = (hi[i] - origin[i]) / dir[i];
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Grid samples at cell centers on all six faces of `b`.
fn surface_points(b: &Box3D, spacing: f64) -> Vec<Point3<f64>> {
    let (lo, hi) = (b.min(), b.max());
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let nu = ((hi[u] - lo[u]) / spacing).ceil().max(1.0) as usize;
        let nv = ((hi[v] - lo[v]) / spacing).ceil().max(1.0) as usize;
        for side in [lo[axis], hi[axis]] {
            for i in 0..nu {
                for j in 0..nv {
                    let mut p = Point3::origin();
                    p[axis] = side;
                    p[u] = lo[u] + (i as f64 + 0.5) * (hi[u] - lo[u]) / nu as f64;
                    p[v] = lo[v] + (j as f64 + 0.5) * (hi[v] - lo[v]) / nv as f64;
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Renders `objects` from `config.n_cameras` cameras looking at the origin. Depths are
/// quantized to millimeters, matching what the depth PNGs store.
pub fn generate(config: &SynthConfig, objects: &[SynthObject]) -> SyntheticScene {
    let k = Intrinsics::new(
        config.focal,
        config.focal,
        (config.width as f64 - 1.0) / 2.0,
        (config.height as f64 - 1.0) / 2.0,
    );
    let target = Point3::new(0.0, 0.0, 0.5);
    let (w, h) = (config.width, config.height);
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    let mut label_maps = Vec::new();
    for c in 0..config.n_cameras {
        let angle = std::f64::consts::FRAC_PI_4 * (2 * c + 1) as f64;
        let (radius, height) = config.rings[(c / 4) % 2];
        let eye = Point3::new(radius * angle.cos(), radius * angle.sin(), height);
        let r = look_at(&eye, &target);
        let t = -(r * eye.coords);
        let mut depth = DepthMap::filled(w, h, 0.0);
        let mut hit_maps = vec![Bitmap::new(w, h); objects.len()];
        let mut labels = vec![0u16; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let d_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let d_world = r.transpose() * d_cam;
                // with z_cam = 1 along d_cam, the ray parameter is the camera depth
                let hit = objects
                    .iter()
                    .enumerate()
                    .filter_map(|(i, o)| ray_box(&eye, &d_world, &o.bbox).map(|t| (i, t)))
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, z)) = hit {
                    depth.set(x, y, (z * 1000.0).round() / 1000.0);
                    hit_maps[i].set(x, y, true);
                    labels[(y * w + x) as usize] = objects[i].class_id as u16 + 1;
                }
            }
        }
        let frame_id = c as u32;
        let mut mask_id = 0;
        for m in hit_maps.iter().filter(|m| !m.is_empty()) {
            masks.push(InstanceMask2D { frame_id, mask_id, rle: encode_rle(m) });
            mask_id += 1;
        }
        frames.push(CameraFrame::new(frame_id, k, compose_pose(&r, &t), depth).expect("rigid look-at pose"));
        label_maps.push(Gray16 { width: w, height: h, data: labels });
    }
    let points: Vec<Point3<f64>> = objects
        .iter()
        .flat_map(|o| surface_points(&o.bbox, config.surface_spacing))
        .collect();
    let provider = FakeProvider::new(config.vocab_seed);
    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let embeddings = classes
        .iter()
        .map(|c| provider.text_embedding(&DEFAULT_PROMPT_TEMPLATE.replace("{}", c)))
        .collect();
    let vocabulary = Vocabulary::new(classes, embeddings, DEFAULT_PROMPT_TEMPLATE).expect("unit embeddings");
    let n_points = points.len();
    let scene = Scene {
        id: "synthetic".into(),
        images: vec![None; frames.len()],
        frames,
        points: PointCloud::new(points),
        masks,
        vocabulary: Some(vocabulary),
        sampling: SamplingInfo {
            seed: 0,
            point_cap: DEFAULT_POINT_CAP,
            source_points: n_points,
        },
    };
    SyntheticScene {
        scene,
        label_maps,
        objects: objects.to_vec(),
    }
}

/// Canonical JSON of the ground-truth boxes (detections schema plus
/// `class_id`).
pub fn ground_truth_json(objects: &[SynthObject]) -> String {
    let records: Vec<_> = objects
        .iter()
        .map(|o| {
            let (c, s) = (o.bbox.center, o.bbox.size);
            json!({
                "center": [c.x, c.y, c.z],
                "size": [s.x, s.y, s.z],
                "label": SYNTH_CLASSES[o.class_id as usize],
                "class_id": o.class_id,
            })
        })
        .collect();
    to_canonical_json(&serde_json::Value::Array(records))
}

/// Paths of a synthetic scene on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
}

/// Writes the scene (label maps as frame images) plus `gt.json` into `dir`.
pub fn write_synthetic(synth: &SyntheticScene, dir: &Path) -> Result<SynthPaths, SceneError> {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| SceneError::io(&image_dir, e))?;
    let mut scene = synth.scene.clone();
    for (i, (f, map)) in scene.frames.iter().zip(&synth.label_maps).enumerate() {
        let rel = PathBuf::from(format!("images/{:06}.png", f.id));
        write_gray16_png(&dir.join(&rel), map)?;
        scene.images[i] = Some(rel);
    }
    let manifest = write_scene(&scene, dir)?;
    let ground_truth = dir.join("gt.json");
    std::fs::write(&ground_truth, ground_truth_json(&synth.objects)).map_err(|e| SceneError::io(&ground_truth, e))?;
    Ok(SynthPaths { manifest, ground_truth })
}

/// Small random scene for oracle checks: 1–3 random cuboids, 2–`max_frames`
/// low-resolution cameras at random positions, and at most
/// `max_masks_per_frame` masks per frame. Each mask is a random union of
/// "pieces" (an object's pixels on one side of a random image column), so
/// masks split, join and partially cover objects. Some pieces stay unmasked.
pub fn micro_scene(seed: u64, max_frames: usize, max_masks_per_frame: usize) -> Scene {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let n_objects = rng.random_range(1..=3);
    let objects: Vec<Box3D> = (0..n_objects)
        .map(|_| {
            let c = Point3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(0.2..0.6));
            let s = Vector3::new(rng.random_range(0.3..0.9), rng.random_range(0.3..0.9), rng.random_range(0.3..0.9));
            Box3D::new(c, s).expect("positive size")
        })
        .collect();
    let (w, h) = (48u32, 36u32);
    let k = Intrinsics::new(40.0, 40.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let n_frames = rng.random_range(2..=max_frames.max(2));
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for frame_id in 0..n_frames as u32 {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let radius = rng.random_range(2.5..3.5);
        let eye = Point3::new(radius * angle.cos(), radius * angle.sin(), rng.random_range(1.0..2.5));
        let target = Point3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.3);
        let r = look_at(&eye, &target);
        let t = -(r * eye.coords);
        let split = rng.random_range(0..w);
        let mut depth = DepthMap::filled(w, h, 0.0);
        // piece index per pixel: 2 * object + side, or none
        let mut piece = vec![None; (w * h) as usize];
        for x in 0..w {
            for y in 0..h {
                let d_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let d_world = r.transpose() * d_cam;
                let hit = objects
                    .iter()
                    .enumerate()
                    .filter_map(|(i, b)| ray_box(&eye, &d_world, b).map(|t| (i, t)))
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, z)) = hit {
                    depth.set(x, y, z);
                    piece[(x * h + y) as usize] = Some(2 * i + usize::from(x >= split));
                }
            }
        }
        let n_masks = rng.random_range(1..=max_masks_per_frame.max(1));
        // piece -> mask slot, or unmasked
        let assign: Vec<Option<usize>> = (0..2 * n_objects)
            .map(|_| rng.random_bool(0.85).then(|| rng.random_range(0..n_masks)))
            .collect();
        let mut bitmaps = vec![Bitmap::new(w, h); n_masks];
        for x in 0..w {
            for y in 0..h {
                if let Some(slot) = piece[(x * h + y) as usize].and_then(|p| assign[p]) {
                    bitmaps[slot].set(x, y, true);
                }
            }
        }
        for (mask_id, b) in bitmaps.iter().filter(|b| !b.is_empty()).enumerate() {
            masks.push(InstanceMask2D { frame_id, mask_id: mask_id as u32, rle: encode_rle(b) });
        }
        frames.push(CameraFrame::new(frame_id, k, compose_pose(&r, &t), depth).expect("rigid look-at pose"));
    }
    let points: Vec<Point3<f64>> = objects.iter().flat_map(|b| surface_points(b, 0.1)).collect();
    let n_points = points.len();
    Scene {
        id: format!("micro-{seed}"),
        images: vec![None; frames.len()],
        frames,
        points: PointCloud::new(points),
        masks,
        vocabulary: None,
        sampling: SamplingInfo { seed, point_cap: DEFAULT_POINT_CAP, source_points: n_points },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_point;

    #[test]
    fn ray_hits_front_face() {
        let b = Box3D::new(Point3::new(0.0, 0.0, 5.0), Vector3::new(2.0, 2.0, 2.0)).unwrap();
        let t = ray_box(&Point3::origin(), &Vector3::z(), &b).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert_eq!(ray_box(&Point3::origin(), &-Vector3::z(), &b), None);
        assert_eq!(ray_box(&Point3::new(3.0, 0.0, 0.0), &Vector3::z(), &b), None);
    }

    #[test]
    fn look_at_centers_target() {
        let eye = Point3::new(4.0, 1.0, 2.0);
        let target = Point3::new(0.0, 0.0, 0.5);
        let r = look_at(&eye, &target);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let f = CameraFrame::new(0, Intrinsics::new(100.0, 100.0, 50.0, 40.0), compose_pose(&r, &-(r * eye.coords)), DepthMap::filled(100, 80, 0.0)).unwrap();
        let (u, v) = project_point(&target, &f).unwrap();
        assert!((u - 50.0).abs() < 1e-9 && (v - 40.0).abs() < 1e-9);
        // world up maps to image up
        let (_, v_up) = project_point(&(target + Vector3::new(0.0, 0.0, 0.1)), &f).unwrap();
        assert!(v_up < v);
    }

    #[test]
    fn surface_grid_counts() {
        let b = Box3D::new(Point3::origin(), Vector3::new(0.1, 0.2, 0.3)).unwrap();
        let pts = surface_points(&b, 0.1);
        assert_eq!(pts.len(), 2 * (2 * 3 + 3 + 2));
        assert!(pts.iter().all(|p| b.contains(p)));
    }

    #[test]
    fn masks_are_disjoint_and_depth_consistent() {
        let cfg = SynthConfig { width: 80, height: 60, focal: 65.0, ..Default::default() };
        let s = generate(&cfg, &default_objects());
        assert_eq!(s.scene.frames.len(), 8);
        for f in &s.scene.frames {
            let ms = s.scene.masks_in_frame(f.id);
            assert!(!ms.is_empty());
            let mut union = 0;
            for m in ms {
                union += m.rle.area();
            }
            let valid = f.depth.values().iter().filter(|d| **d > 0.0).count() as u64;
            assert_eq!(union, valid);
        }
    }

    #[test]
    fn micro_scenes_respect_limits() {
        for seed in 0..20 {
            let s = micro_scene(seed, 6, 4);
            assert!((2..=6).contains(&s.frames.len()));
            for f in &s.frames {
                let ms = s.masks_in_frame(f.id);
                assert!(ms.len() <= 4);
                let union: u64 = ms.iter().map(|m| m.rle.area()).sum();
                let valid = f.depth.values().iter().filter(|d| **d > 0.0).count() as u64;
                assert!(union <= valid);
            }
            assert_eq!(micro_scene(seed, 6, 4), s);
        }
    }
}
