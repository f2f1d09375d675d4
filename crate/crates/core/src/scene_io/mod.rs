//! Scene manifests and the file formats around them.
//!
//! A scene directory holds a JSON manifest pointing at per-frame depth PNGs
//! (16-bit, millimeters), a binary PLY point cloud, a JSON masks file and an
//! optional `EMB1` vocabulary embedding file. Relative paths resolve against
//! the manifest's directory.

mod output;
mod ply;
mod raster;
mod rle;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraFrame, GeometryError, Intrinsics};
use crate::ov_labeler::EmbeddingVector;

pub use output::{
    detections_to_json, read_boxes, read_detection_records, read_detections, to_canonical_json,
    write_boxes, write_detections, write_pseudo_labels, DetectionRecord, PSEUDO_LABEL,
};
pub use ply::{read_ply, write_ply, PlyError, PointCloud};
pub use raster::{
    read_depth_png, read_embeddings, read_gray16_png, write_depth_png, write_embeddings,
    write_gray16_png, Gray16,
};
pub use rle::{decode_rle, encode_rle, Bitmap, Rle};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_POINT_CAP: usize = 100_000;
pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of {}";

/// Allowed deviation of a vocabulary embedding's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: schema violation at {field}: {message}")]
    Schema {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: mask/frame mismatch at {field}: {message}")]
    MaskMismatch {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{path}: frames[{index}].pose: {source}")]
    Pose {
        path: PathBuf,
        index: usize,
        #[source]
        source: GeometryError,
    },
    #[error("{path}: non-finite value at {field}")]
    NonFinite { path: PathBuf, field: String },
    #[error("{path}: no frames")]
    NoFrames { path: PathBuf },
    #[error("RLE runs sum to {actual}, expected {expected}")]
    RunSum { expected: u64, actual: u64 },
}

impl SceneError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: u32,
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Row-major 4×4 camera-from-world transform.
    pub pose: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub width: u32,
    pub height: u32,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabularyRecord {
    pub classes: Vec<String>,
    pub embeddings: PathBuf,
    pub dim: u32,
    #[serde(default = "default_template")]
    pub prompt_template: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    pub frames: Vec<FrameRecord>,
    pub point_cloud: PathBuf,
    pub masks: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<VocabularyRecord>,
}

/// Entry of the masks file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub frame_id: u32,
    pub mask_id: u32,
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask2D {
    pub frame_id: u32,
    pub mask_id: u32,
    pub rle: Rle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub classes: Vec<String>,
    pub text_embeddings: Vec<EmbeddingVector>,
    pub prompt_template: String,
}

impl Vocabulary {
    pub fn new(
        classes: Vec<String>,
        text_embeddings: Vec<EmbeddingVector>,
        prompt_template: impl Into<String>,
    ) -> Result<Self, String> {
        if classes.is_empty() {
            return Err("vocabulary has no classes".into());
        }
        if classes.len() != text_embeddings.len() {
            return Err(format!(
                "{} classes but {} embeddings",
                classes.len(),
                text_embeddings.len()
            ));
        }
        let dim = text_embeddings[0].dim();
        for (i, e) in text_embeddings.iter().enumerate() {
            if e.dim() != dim {
                return Err(format!("embedding {i} has dim {}, expected {dim}", e.dim()));
            }
            if (e.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(format!("embedding {i} has norm {:.6}, expected 1", e.norm()));
            }
        }
        Ok(Self {
            classes,
            text_embeddings,
            prompt_template: prompt_template.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.text_embeddings[0].dim()
    }

    pub fn prompt(&self, class: &str) -> String {
        self.prompt_template.replace("{}", class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SamplingInfo {
    pub seed: u64,
    pub point_cap: usize,
    pub source_points: usize,
}

/// A fully validated, immutable scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub frames: Vec<CameraFrame>,
    /// Per-frame image path (absolute), parallel to `frames`.
    pub images: Vec<Option<PathBuf>>,
    pub points: PointCloud,
    /// Sorted by `(frame_id, mask_id)`.
    pub masks: Vec<InstanceMask2D>,
    pub vocabulary: Option<Vocabulary>,
    pub sampling: SamplingInfo,
}

impl Scene {
    pub fn frame(&self, id: u32) -> Option<&CameraFrame> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn frame_index(&self, id: u32) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    pub fn image(&self, frame_id: u32) -> Option<&Path> {
        self.frame_index(frame_id)
            .and_then(|i| self.images[i].as_deref())
    }

    pub fn masks_in_frame(&self, frame_id: u32) -> &[InstanceMask2D] {
        let lo = self.masks.partition_point(|m| m.frame_id < frame_id);
        let hi = self.masks.partition_point(|m| m.frame_id <= frame_id);
        &self.masks[lo..hi]
    }

    /// Keeps at most `max_frames` frames, chosen with a uniform stride
    /// (`floor(i * n / max)`), together with their masks.
    pub fn with_frame_limit(&self, max_frames: usize) -> Scene {
        let n = self.frames.len();
        if max_frames == 0 || n <= max_frames {
            return self.clone();
        }
        let keep: Vec<usize> = (0..max_frames).map(|i| i * n / max_frames).collect();
        let ids: BTreeSet<u32> = keep.iter().map(|&i| self.frames[i].id).collect();
        Scene {
            id: self.id.clone(),
            frames: keep.iter().map(|&i| self.frames[i].clone()).collect(),
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            points: self.points.clone(),
            masks: self
                .masks
                .iter()
                .filter(|m| ids.contains(&m.frame_id))
                .cloned()
                .collect(),
            vocabulary: self.vocabulary.clone(),
            sampling: self.sampling,
        }
    }
}

/// Indices of a seeded uniform subsample of size `cap` out of `n`, ascending.
/// Uses a partial Fisher–Yates shuffle driven by SplitMix64.
pub fn subsample_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let (chosen, _) = idx.partial_shuffle(&mut rng, cap);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    chosen
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn schema(path: &Path, field: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Schema {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.into(),
    }
}

pub fn read_manifest(path: &Path) -> Result<SceneManifest, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| schema(path, "manifest", e.to_string()))
}

/// The manifest and every file it references, resolved, in manifest order.
pub fn referenced_files(manifest_path: &Path) -> Result<Vec<PathBuf>, SceneError> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut files = vec![manifest_path.to_path_buf()];
    for f in &m.frames {
        files.push(resolve(base, &f.depth));
        if let Some(image) = &f.image {
            files.push(resolve(base, image));
        }
    }
    files.push(resolve(base, &m.point_cloud));
    files.push(resolve(base, &m.masks));
    if let Some(v) = &m.vocabulary {
        files.push(resolve(base, &v.embeddings));
    }
    Ok(files)
}

pub fn read_masks(path: &Path) -> Result<Vec<MaskRecord>, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| schema(path, "masks", e.to_string()))
}

pub fn write_masks(path: &Path, masks: &[InstanceMask2D]) -> Result<(), SceneError> {
    let records: Vec<MaskRecord> = masks
        .iter()
        .map(|m| MaskRecord {
            frame_id: m.frame_id,
            mask_id: m.mask_id,
            size: [m.rle.height, m.rle.width],
            counts: m.rle.counts.clone(),
        })
        .collect();
    let text = serde_json::to_string(&records).expect("mask records serialize");
    std::fs::write(path, text).map_err(|e| SceneError::io(path, e))
}

fn validate_masks(
    path: &Path,
    records: Vec<MaskRecord>,
    frames: &[CameraFrame],
) -> Result<Vec<InstanceMask2D>, SceneError> {
    let by_id: HashMap<u32, &CameraFrame> = frames.iter().map(|f| (f.id, f)).collect();
    let mut masks = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let field = format!("[{i}]");
        let frame = by_id.get(&r.frame_id).ok_or_else(|| SceneError::MaskMismatch {
            path: path.to_path_buf(),
            field: format!("{field}.frame_id"),
            message: format!("unknown frame id {}", r.frame_id),
        })?;
        let [h, w] = r.size;
        if h != frame.height() || w != frame.width() {
            return Err(SceneError::MaskMismatch {
                path: path.to_path_buf(),
                field: format!("{field}.size"),
                message: format!(
                    "mask is {h}x{w}, frame {} is {}x{}",
                    r.frame_id,
                    frame.height(),
                    frame.width()
                ),
            });
        }
        let rle = Rle {
            height: h,
            width: w,
            counts: r.counts,
        };
        decode_rle(&rle).map_err(|e| schema(path, format!("{field}.counts"), e.to_string()))?;
        masks.push(InstanceMask2D {
            frame_id: r.frame_id,
            mask_id: r.mask_id,
            rle,
        });
    }
    masks.sort_by_key(|m| (m.frame_id, m.mask_id));
    for pair in masks.windows(2) {
        if (pair[0].frame_id, pair[0].mask_id) == (pair[1].frame_id, pair[1].mask_id) {
            return Err(schema(
                path,
                "mask_id",
                format!("duplicate mask ({}, {})", pair[0].frame_id, pair[0].mask_id),
            ));
        }
    }
    // pairwise disjointness within each frame
    let mut start = 0;
    while start < masks.len() {
        let fid = masks[start].frame_id;
        let end = start + masks[start..].partition_point(|m| m.frame_id == fid);
        let frame = by_id[&fid];
        let mut taken = vec![u32::MAX; frame.width() as usize * frame.height() as usize];
        for m in &masks[start..end] {
            let bits = decode_rle(&m.rle)?;
            for (j, on) in bits.as_column_major().iter().enumerate() {
                if !on {
                    continue;
                }
                if taken[j] != u32::MAX {
                    return Err(SceneError::MaskMismatch {
                        path: path.to_path_buf(),
                        field: format!("frame {fid}"),
                        message: format!("masks {} and {} overlap", taken[j], m.mask_id),
                    });
                }
                taken[j] = m.mask_id;
            }
        }
        start = end;
    }
    Ok(masks)
}

/// Loads and validates a scene. Point clouds larger than `point_cap` are
/// subsampled with [`subsample_indices`].
pub fn load_scene(manifest_path: &Path, point_cap: usize, seed: u64) -> Result<Scene, SceneError> {
    let manifest = read_manifest(manifest_path)?;
    let mp = manifest_path;
    if manifest.version != MANIFEST_VERSION {
        return Err(schema(
            mp,
            "version",
            format!("unsupported version {}, expected {MANIFEST_VERSION}", manifest.version),
        ));
    }
    if manifest.frames.is_empty() {
        return Err(SceneError::NoFrames { path: mp.to_path_buf() });
    }
    let base = mp.parent().unwrap_or(Path::new("."));
    let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };

    let mut seen = BTreeSet::new();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut images = Vec::with_capacity(manifest.frames.len());
    for (i, fr) in manifest.frames.iter().enumerate() {
        let field = |f: &str| format!("frames[{i}].{f}");
        if !seen.insert(fr.id) {
            return Err(schema(mp, field("id"), format!("duplicate frame id {}", fr.id)));
        }
        if fr.width == 0 || fr.height == 0 {
            return Err(schema(mp, field("width/height"), "must be > 0"));
        }
        let k = &fr.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(schema(mp, field("intrinsics"), "fx, fy must be > 0"));
        }
        if fr.pose.len() != 16 {
            return Err(schema(mp, field("pose"), format!("expected 16 values, got {}", fr.pose.len())));
        }
        if fr.pose.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::NonFinite { path: mp.to_path_buf(), field: field("pose") });
        }
        let pose = Matrix4::from_row_slice(&fr.pose);
        let depth_path = resolve(base, &fr.depth);
        let depth = read_depth_png(&depth_path)?;
        if depth.width() != fr.width || depth.height() != fr.height {
            return Err(schema(
                &depth_path,
                field("depth"),
                format!(
                    "depth is {}x{}, manifest says {}x{}",
                    depth.width(),
                    depth.height(),
                    fr.width,
                    fr.height
                ),
            ));
        }
        let frame = CameraFrame::new(fr.id, *k, pose, depth).map_err(|e| match e {
            GeometryError::NonRigidPose(_) => SceneError::Pose {
                path: mp.to_path_buf(),
                index: i,
                source: e,
            },
            other => schema(mp, field("intrinsics"), other.to_string()),
        })?;
        frames.push(frame);
        images.push(fr.image.as_ref().map(|p| resolve(base, p)));
    }

    let ply_path = resolve(base, &manifest.point_cloud);
    let file = std::fs::File::open(&ply_path).map_err(|e| SceneError::io(&ply_path, e))?;
    let cloud = read_ply(std::io::BufReader::new(file)).map_err(|e| SceneError::Format {
        path: ply_path.clone(),
        message: e.to_string(),
    })?;
    let source_points = cloud.len();
    let points = if source_points > point_cap {
        cloud.select(&subsample_indices(source_points, point_cap, seed))
    } else {
        cloud
    };

    let masks_path = resolve(base, &manifest.masks);
    let masks = validate_masks(&masks_path, read_masks(&masks_path)?, &frames)?;

    let vocabulary = match &manifest.vocabulary {
        None => None,
        Some(v) => Some(vocabulary_from_record(v, base, mp)?),
    };

    let id = manifest.scene_id.clone().unwrap_or_else(|| {
        base.canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "scene".to_string())
    });

    Ok(Scene {
        id,
        frames,
        images,
        points,
        masks,
        vocabulary,
        sampling: SamplingInfo {
            seed,
            point_cap,
            source_points,
        },
    })
}

fn vocabulary_from_record(v: &VocabularyRecord, base: &Path, origin: &Path) -> Result<Vocabulary, SceneError> {
    let emb_path = resolve(base, &v.embeddings);
    let emb = read_embeddings(&emb_path)?;
    if let Some(bad) = emb.iter().find(|e| e.dim() != v.dim as usize) {
        return Err(schema(
            &emb_path,
            "vocabulary.dim",
            format!("file has dim {}, record says {}", bad.dim(), v.dim),
        ));
    }
    Vocabulary::new(v.classes.clone(), emb, v.prompt_template.clone()).map_err(|m| schema(origin, "vocabulary", m))
}

/// Reads a standalone vocabulary file: a JSON vocabulary record whose
/// embeddings path resolves against the file's directory.
pub fn load_vocabulary(path: &Path) -> Result<Vocabulary, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    let record: VocabularyRecord = serde_json::from_str(&text).map_err(|e| schema(path, "vocabulary", e.to_string()))?;
    vocabulary_from_record(&record, path.parent().unwrap_or(Path::new(".")), path)
}

/// Every file a standalone vocabulary file references, itself included.
pub fn vocabulary_files(path: &Path) -> Result<Vec<PathBuf>, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    let record: VocabularyRecord = serde_json::from_str(&text).map_err(|e| schema(path, "vocabulary", e.to_string()))?;
    Ok(vec![path.to_path_buf(), resolve(path.parent().unwrap_or(Path::new(".")), &record.embeddings)])
}

/// Writes `scene` into `dir` as `manifest.json` plus data files and returns
/// the manifest path. Depth is quantized to millimeters and points to f32.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<PathBuf, SceneError> {
    let depth_dir = dir.join("depth");
    std::fs::create_dir_all(&depth_dir).map_err(|e| SceneError::io(&depth_dir, e))?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for (f, image) in scene.frames.iter().zip(&scene.images) {
        let rel = PathBuf::from(format!("depth/{:06}.png", f.id));
        write_depth_png(&dir.join(&rel), &f.depth)?;
        frames.push(FrameRecord {
            id: f.id,
            depth: rel,
            image: image.clone(),
            pose: f.world_to_camera().transpose().iter().copied().collect(),
            intrinsics: f.intrinsics,
            width: f.width(),
            height: f.height(),
        });
    }
    let ply_path = dir.join("points.ply");
    let file = std::fs::File::create(&ply_path).map_err(|e| SceneError::io(&ply_path, e))?;
    write_ply(std::io::BufWriter::new(file), &scene.points).map_err(|e| SceneError::Format {
        path: ply_path.clone(),
        message: e.to_string(),
    })?;
    write_masks(&dir.join("masks.json"), &scene.masks)?;
    let vocabulary = match &scene.vocabulary {
        None => None,
        Some(v) => {
            write_embeddings(&dir.join("vocab.emb"), &v.text_embeddings)?;
            Some(VocabularyRecord {
                classes: v.classes.clone(),
                embeddings: "vocab.emb".into(),
                dim: v.dim() as u32,
                prompt_template: v.prompt_template.clone(),
            })
        }
    };
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        scene_id: Some(scene.id.clone()),
        frames,
        point_cloud: "points.ply".into(),
        masks: "masks.json".into(),
        vocabulary,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| SceneError::io(&path, e))?;
    Ok(path)
}
