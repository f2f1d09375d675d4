//! Canonical JSON output for boxes, detections and pseudo-labels.
//!
//! Canonical means: object keys sorted, no insignificant whitespace, every
//! floating-point field printed with exactly six decimals, trailing newline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::geometry::Box3D;
use crate::ov_labeler::Detection;

use super::SceneError;

/// Label written for class-agnostic pseudo-labels.
pub const PSEUDO_LABEL: &str = "object";

/// One entry of a detections file. `label`, `score` and `class_id` are
/// optional on read so the same record parses box-only and ground-truth files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub class_id: Option<u32>,
}

impl DetectionRecord {
    pub fn to_box(&self) -> Result<Box3D, crate::geometry::GeometryError> {
        Box3D::new(Point3::from(self.center), Vector3::from(self.size))
    }
}

fn format_f64(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&format_f64(n.as_f64().unwrap_or(0.0)));
            } else {
                let _ = write!(out, "{n}");
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, x);
            }
            out.push(']');
        }
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(out, &m[k]);
            }
            out.push('}');
        }
    }
}

/// Serializes `v` canonically. Non-finite floats must be rejected before
/// they reach a `Value` (serde_json maps them to null).
pub fn to_canonical_json(v: &Value) -> String {
    let mut s = String::new();
    write_value(&mut s, v);
    s.push('\n');
    s
}

fn float(v: f64) -> Value {
    // from_f64 only fails on non-finite input, which callers exclude
    Value::Number(serde_json::Number::from_f64(v).expect("finite float"))
}

fn vec3(v: impl IntoIterator<Item = f64>) -> Value {
    Value::Array(v.into_iter().map(float).collect())
}

fn check_box(b: &Box3D, what: &str, path: &Path) -> Result<(), SceneError> {
    if b.center.iter().chain(b.size.iter()).any(|v| !v.is_finite()) {
        return Err(SceneError::NonFinite {
            path: path.to_path_buf(),
            field: format!("{what}.center/size"),
        });
    }
    if b.size.iter().any(|&s| s <= 0.0) {
        return Err(SceneError::Schema {
            path: path.to_path_buf(),
            field: format!("{what}.size"),
            message: "sizes must be > 0".into(),
        });
    }
    Ok(())
}

fn box_object(b: &Box3D) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("center".into(), vec3(b.center.iter().copied()));
    m.insert("size".into(), vec3(b.size.iter().copied()));
    m
}

fn write_text(path: &Path, text: &str) -> Result<(), SceneError> {
    std::fs::write(path, text).map_err(|e| SceneError::io(path, e))
}

pub fn detections_to_json(detections: &[Detection], path: &Path) -> Result<String, SceneError> {
    let mut arr = Vec::with_capacity(detections.len());
    for (i, d) in detections.iter().enumerate() {
        check_box(&d.bbox, &format!("[{i}]"), path)?;
        if !d.score.is_finite() {
            return Err(SceneError::NonFinite {
                path: path.to_path_buf(),
                field: format!("[{i}].score"),
            });
        }
        let mut m = box_object(&d.bbox);
        m.insert("label".into(), Value::String(d.label.clone()));
        m.insert("score".into(), float(d.score));
        arr.push(Value::Object(m));
    }
    Ok(to_canonical_json(&Value::Array(arr)))
}

/// Writes `[{center, size, label, score}, ...]`.
pub fn write_detections(detections: &[Detection], path: &Path) -> Result<(), SceneError> {
    let text = detections_to_json(detections, path)?;
    write_text(path, &text)
}

/// Writes class-agnostic boxes as `[{center, size}, ...]`.
pub fn write_boxes(boxes: &[Box3D], path: &Path) -> Result<(), SceneError> {
    let mut arr = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        check_box(b, &format!("[{i}]"), path)?;
        arr.push(Value::Object(box_object(b)));
    }
    write_text(path, &to_canonical_json(&Value::Array(arr)))
}

/// Writes `<out_dir>/<scene_id>.json` in the detections schema, one entry per
/// box with label `"object"` and score 1. Returns the written path.
pub fn write_pseudo_labels(
    boxes: &[Box3D],
    scene_id: &str,
    out_dir: &Path,
) -> Result<PathBuf, SceneError> {
    if scene_id.is_empty() || scene_id.contains(['/', '\\']) {
        return Err(SceneError::Schema {
            path: out_dir.to_path_buf(),
            field: "scene_id".into(),
            message: format!("'{scene_id}' is not a valid file stem"),
        });
    }
    let path = out_dir.join(format!("{scene_id}.json"));
    let dets: Vec<Detection> = boxes
        .iter()
        .map(|b| Detection {
            bbox: *b,
            label: PSEUDO_LABEL.to_string(),
            score: 1.0,
        })
        .collect();
    write_detections(&dets, &path)?;
    Ok(path)
}

pub fn read_detection_records(path: &Path) -> Result<Vec<DetectionRecord>, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SceneError::Schema {
        path: path.to_path_buf(),
        field: "detections".into(),
        message: e.to_string(),
    })
}

fn record_box(r: &DetectionRecord, i: usize, path: &Path) -> Result<Box3D, SceneError> {
    r.to_box().map_err(|e| SceneError::Schema {
        path: path.to_path_buf(),
        field: format!("[{i}]"),
        message: e.to_string(),
    })
}

/// Reads a boxes or detections file, keeping only the geometry.
pub fn read_boxes(path: &Path) -> Result<Vec<Box3D>, SceneError> {
    read_detection_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| record_box(r, i, path))
        .collect()
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, SceneError> {
    read_detection_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Detection {
                bbox: record_box(r, i, path)?,
                label: r.label.clone().ok_or_else(|| SceneError::Schema {
                    path: path.to_path_buf(),
                    field: format!("[{i}].label"),
                    message: "missing".into(),
                })?,
                score: r.score.ok_or_else(|| SceneError::Schema {
                    path: path.to_path_buf(),
                    field: format!("[{i}].score"),
                    message: "missing".into(),
                })?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(c: [f64; 3], s: [f64; 3], label: &str, score: f64) -> Detection {
        Detection {
            bbox: Box3D::new(Point3::from(c), Vector3::from(s)).unwrap(),
            label: label.into(),
            score,
        }
    }

    #[test]
    fn empty_list_is_empty_array() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        write_detections(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "[]\n");
    }

    #[test]
    fn one_detection_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        write_detections(&[det([1.0, -0.0, 2.5], [0.5, 1.0, 2.0], "chair", 0.9)], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "[{\"center\":[1.000000,0.000000,2.500000],\"label\":\"chair\",\"score\":0.900000,\"size\":[0.500000,1.000000,2.000000]}]\n"
        );
    }

    #[test]
    fn non_finite_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        let mut d = det([0.0; 3], [1.0; 3], "x", 0.5);
        d.score = f64::NAN;
        assert!(matches!(write_detections(&[d], &p), Err(SceneError::NonFinite { .. })));
        let mut d = det([0.0; 3], [1.0; 3], "x", 0.5);
        d.bbox.center.x = f64::INFINITY;
        assert!(matches!(write_detections(&[d], &p), Err(SceneError::NonFinite { .. })));
    }

    #[test]
    fn unwritable_path() {
        let err = write_detections(&[], Path::new("/nonexistent-dir/x/y.json")).unwrap_err();
        assert!(matches!(err, SceneError::Io { .. }));
    }

    #[test]
    fn pseudo_labels_file_per_scene() {
        let dir = tempfile::tempdir().unwrap();
        let b = Box3D::new(Point3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)).unwrap();
        let p = write_pseudo_labels(&[b], "scene0001", dir.path()).unwrap();
        assert_eq!(p, dir.path().join("scene0001.json"));
        let back = read_detections(&p).unwrap();
        assert_eq!(back[0].label, PSEUDO_LABEL);
        assert_eq!(back[0].score, 1.0);
        assert!(write_pseudo_labels(&[b], "../x", dir.path()).is_err());
    }

    #[test]
    fn boxes_file_reads_as_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        let b = Box3D::new(Point3::new(0.25, 0.5, 1.0), Vector3::new(1.0, 2.0, 0.125)).unwrap();
        write_boxes(&[b], &p).unwrap();
        assert_eq!(read_boxes(&p).unwrap(), vec![b]);
        assert!(read_detections(&p).is_err());
    }
}
