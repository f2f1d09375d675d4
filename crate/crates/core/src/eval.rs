//! Detection metrics: per-class average precision / mAP over scenes and a
//! class-agnostic binary precision/recall protocol.
//!
//! AP uses all-points interpolation: the precision curve is replaced by its
//! monotone envelope and integrated over every recall step. Classes without
//! ground truth are left out of the mAP mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::geometry::{iou3d, Box3D};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unknown class id {class_id} (vocabulary has {num_classes} classes)")]
    UnknownClass { class_id: u32, num_classes: usize },
    #[error("scene ids differ: only in predictions {only_preds:?}, only in ground truth {only_gts:?}")]
    SceneMismatch {
        only_preds: Vec<String>,
        only_gts: Vec<String>,
    },
    #[error("threshold {0} must lie in [0, 1]")]
    InvalidThreshold(f64),
    #[error("non-finite confidence in scene {scene}, prediction {index}")]
    NonFiniteScore { scene: String, index: usize },
}

/// A ground-truth box with its class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: Box3D,
    pub class_id: u32,
}

/// Ground truth of one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruthSet {
    pub boxes: Vec<GtBox>,
}

/// A scored, classified prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: Box3D,
    pub class_id: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub num_gt: usize,
    pub num_pred: usize,
    /// One AP per threshold, `None` when the class has no ground truth.
    pub ap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassAp>,
    /// One mAP per threshold.
    pub map: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BinaryPr {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_gt: usize,
}

/// Area under the precision envelope for a ranked list of TP/FP flags.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(EvalError::InvalidThreshold(t))
    }
}

fn check_scenes<P, G>(preds: &BTreeMap<String, P>, gts: &BTreeMap<String, G>) -> Result<(), EvalError> {
    let only_preds: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    let only_gts: Vec<String> = gts.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    if only_preds.is_empty() && only_gts.is_empty() {
        Ok(())
    } else {
        Err(EvalError::SceneMismatch { only_preds, only_gts })
    }
}

/// `(scene, index)` of every prediction passing `keep`, ordered by score
/// descending, then scene id, then index.
fn ranked<'a>(
    preds: &'a BTreeMap<String, Vec<ScoredBox>>,
    keep: impl Fn(&ScoredBox) -> bool,
) -> Vec<(&'a str, usize, &'a ScoredBox)> {
    let mut out: Vec<(&str, usize, &ScoredBox)> = preds
        .iter()
        .flat_map(|(scene, ps)| ps.iter().enumerate().map(move |(i, p)| (scene.as_str(), i, p)))
        .filter(|(_, _, p)| keep(p))
        .collect();
    out.sort_by(|a, b| {
        b.2.score
            .total_cmp(&a.2.score)
            .then_with(|| a.0.cmp(b.0))
            .then(a.1.cmp(&b.1))
    });
    out
}

/// Greedy one-to-one matching of ranked predictions: each takes the
/// unmatched candidate GT with the highest IoU at or above `threshold`
/// (lower GT index on ties). Returns a TP flag per prediction.
fn match_ranked(
    ranked: &[(&str, usize, &ScoredBox)],
    gts: &BTreeMap<String, GroundTruthSet>,
    threshold: f64,
    gt_filter: impl Fn(&GtBox, &ScoredBox) -> bool,
) -> Vec<bool> {
    let mut used: BTreeMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(k, g)| (k.as_str(), vec![false; g.boxes.len()]))
        .collect();
    ranked
        .iter()
        .map(|(scene, _, p)| {
            let Some(g) = gts.get(*scene) else { return false };
            let taken = used.get_mut(scene).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in g.boxes.iter().enumerate() {
                if taken[j] || !gt_filter(gt, p) {
                    continue;
                }
                let iou = iou3d(&p.bbox, &gt.bbox);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn validate(
    preds: &BTreeMap<String, Vec<ScoredBox>>,
    gts: &BTreeMap<String, GroundTruthSet>,
    num_classes: Option<usize>,
) -> Result<(), EvalError> {
    check_scenes(preds, gts)?;
    for (scene, ps) in preds {
        for (index, p) in ps.iter().enumerate() {
            if !p.score.is_finite() {
                return Err(EvalError::NonFiniteScore { scene: scene.clone(), index });
            }
        }
    }
    if let Some(n) = num_classes {
        let ids = preds
            .values()
            .flat_map(|ps| ps.iter().map(|p| p.class_id))
            .chain(gts.values().flat_map(|g| g.boxes.iter().map(|b| b.class_id)));
        for class_id in ids {
            if class_id as usize >= n {
                return Err(EvalError::UnknownClass { class_id, num_classes: n });
            }
        }
    }
    Ok(())
}

/// Per-class AP and mAP at each IoU threshold for classes `0..num_classes`.
pub fn evaluate_map(
    preds: &BTreeMap<String, Vec<ScoredBox>>,
    gts: &BTreeMap<String, GroundTruthSet>,
    num_classes: usize,
    iou_thresholds: &[f64],
) -> Result<EvalReport, EvalError> {
    for &t in iou_thresholds {
        check_threshold(t)?;
    }
    validate(preds, gts, Some(num_classes))?;
    let classes: Vec<ClassAp> = (0..num_classes as u32)
        .into_par_iter()
        .map(|class_id| {
            let num_gt = gts
                .values()
                .map(|g| g.boxes.iter().filter(|b| b.class_id == class_id).count())
                .sum();
            let order = ranked(preds, |p| p.class_id == class_id);
            let ap = iou_thresholds
                .iter()
                .map(|&t| {
                    (num_gt > 0).then(|| {
                        let tp = match_ranked(&order, gts, t, |g, p| g.class_id == p.class_id);
                        average_precision(&tp, num_gt)
                    })
                })
                .collect();
            ClassAp {
                class_id,
                num_gt,
                num_pred: order.len(),
                ap,
            }
        })
        .collect();
    let map = (0..iou_thresholds.len())
        .map(|t| {
            let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap[t]).collect();
            if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            }
        })
        .collect();
    Ok(EvalReport {
        iou_thresholds: iou_thresholds.to_vec(),
        classes,
        map,
    })
}

/// Class-agnostic precision/recall of the predictions scoring at least
/// `conf_threshold`. Precision is 0 when nothing is kept, recall is 0
/// without ground truth.
pub fn evaluate_pr_binary(
    preds: &BTreeMap<String, Vec<ScoredBox>>,
    gts: &BTreeMap<String, GroundTruthSet>,
    iou_threshold: f64,
    conf_threshold: f64,
) -> Result<BinaryPr, EvalError> {
    check_threshold(iou_threshold)?;
    check_threshold(conf_threshold)?;
    validate(preds, gts, None)?;
    let order = ranked(preds, |p| p.score >= conf_threshold);
    let tp = match_ranked(&order, gts, iou_threshold, |_, _| true);
    let true_positives = tp.iter().filter(|t| **t).count();
    let false_positives = tp.len() - true_positives;
    let num_gt = gts.values().map(|g| g.boxes.len()).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(BinaryPr {
        precision: ratio(true_positives, tp.len()),
        recall: ratio(true_positives, num_gt),
        true_positives,
        false_positives,
        num_gt,
    })
}

impl EvalReport {
    /// Aligned plain-text table; `names[i]` labels class `i` when present.
    pub fn to_table(&self, names: &[String]) -> String {
        let name = |id: u32| names.get(id as usize).cloned().unwrap_or_else(|| format!("class_{id}"));
        let width = self
            .classes
            .iter()
            .map(|c| name(c.class_id).len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}  {:>6}", "class", "gt");
        for t in &self.iou_thresholds {
            let _ = write!(out, "  {:>8}", format!("AP@{t:.2}"));
        }
        out.push('\n');
        for c in &self.classes {
            let _ = write!(out, "{:<width$}  {:>6}", name(c.class_id), c.num_gt);
            for ap in &c.ap {
                match ap {
                    Some(v) => {
                        let _ = write!(out, "  {v:>8.4}");
                    }
                    None => {
                        let _ = write!(out, "  {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<width$}  {:>6}", "mAP", "");
        for m in &self.map {
            let _ = write!(out, "  {m:>8.4}");
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Point3, Vector3};

    fn cube(x: f64) -> Box3D {
        Box3D::new(Point3::new(x, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)).unwrap()
    }

    fn one_scene<T>(v: T) -> BTreeMap<String, T> {
        BTreeMap::from([("s".to_string(), v)])
    }

    #[test]
    fn ap_micro_case_by_hand() {
        // P = 1, 1/2, 2/3 at R = 1/2, 1/2, 1 -> envelope 1, 2/3, 2/3
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[true, true], 2), 1.0);
    }

    #[test]
    fn micro_case_through_matching() {
        let gts = one_scene(GroundTruthSet {
            boxes: vec![GtBox { bbox: cube(0.0), class_id: 0 }, GtBox { bbox: cube(5.0), class_id: 0 }],
        });
        let preds = one_scene(vec![
            ScoredBox { bbox: cube(0.0), class_id: 0, score: 0.9 },
            ScoredBox { bbox: cube(20.0), class_id: 0, score: 0.8 },
            ScoredBox { bbox: cube(5.1), class_id: 0, score: 0.7 },
        ]);
        let r = evaluate_map(&preds, &gts, 1, &[0.25, 0.5]).unwrap();
        for m in &r.map {
            assert!((m - 5.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_prediction_is_false_positive() {
        let gts = one_scene(GroundTruthSet { boxes: vec![GtBox { bbox: cube(0.0), class_id: 0 }] });
        let preds = one_scene(vec![
            ScoredBox { bbox: cube(0.0), class_id: 0, score: 0.9 },
            ScoredBox { bbox: cube(0.0), class_id: 0, score: 0.8 },
        ]);
        let pr = evaluate_pr_binary(&preds, &gts, 0.5, 0.0).unwrap();
        assert_eq!((pr.true_positives, pr.false_positives), (1, 1));
        assert_eq!(pr.precision, 0.5);
        assert_eq!(pr.recall, 1.0);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let gts = one_scene(GroundTruthSet { boxes: vec![GtBox { bbox: cube(0.0), class_id: 1 }] });
        let preds = one_scene(vec![
            ScoredBox { bbox: cube(0.0), class_id: 1, score: 0.9 },
            ScoredBox { bbox: cube(3.0), class_id: 0, score: 0.9 },
        ]);
        let r = evaluate_map(&preds, &gts, 3, &[0.5]).unwrap();
        assert_eq!(r.classes[0].ap, vec![None]);
        assert_eq!(r.classes[1].ap, vec![Some(1.0)]);
        assert_eq!(r.map, vec![1.0]);
    }

    #[test]
    fn errors() {
        let gts = one_scene(GroundTruthSet { boxes: vec![GtBox { bbox: cube(0.0), class_id: 4 }] });
        let preds = one_scene(vec![]);
        assert_eq!(
            evaluate_map(&preds, &gts, 2, &[0.5]),
            Err(EvalError::UnknownClass { class_id: 4, num_classes: 2 })
        );
        let other = BTreeMap::from([("t".to_string(), vec![])]);
        assert!(matches!(evaluate_map(&other, &gts, 5, &[0.5]), Err(EvalError::SceneMismatch { .. })));
        assert_eq!(evaluate_pr_binary(&preds, &gts, 0.5, 1.5), Err(EvalError::InvalidThreshold(1.5)));
    }

    #[test]
    fn table_has_one_row_per_class_plus_header_and_map() {
        let gts = one_scene(GroundTruthSet { boxes: vec![GtBox { bbox: cube(0.0), class_id: 0 }] });
        let preds = one_scene(vec![ScoredBox { bbox: cube(0.0), class_id: 0, score: 1.0 }]);
        let r = evaluate_map(&preds, &gts, 2, &[0.25, 0.5]).unwrap();
        let t = r.to_table(&["chair".into(), "table".into()]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("chair") && t.contains("1.0000") && t.contains("AP@0.25"));
    }
}
