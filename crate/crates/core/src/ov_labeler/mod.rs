//! Open-vocabulary labeling of class-agnostic boxes.
//!
//! For each box: crop the scene cloud, project the crop into every frame with
//! the occlusion test, keep the `k` frames with the most visible points, frame
//! those points with a 2D box, ask the provider for a refined mask and for
//! crop embeddings at several scales, average everything and classify against
//! the vocabulary's text embeddings. Finally greedy NMS runs on the scored
//! boxes.

mod embedding;
mod fake;
mod protocol;
mod provider;

use rayon::prelude::*;

use crate::geometry::{bbox2d_from_pixels, crop_point_cloud, nms, visible_projection, Box3D, PixelSet};
use crate::scene_io::{decode_rle, Scene, Vocabulary};

pub use embedding::{aggregate_embeddings, classify, Classification, EmbeddingVector, MIN_MEAN_NORM};
pub use fake::{FakeProvider, FAKE_DIM, FAKE_NOISE};
pub use protocol::{
    handle_line, open_provider, serve, RemoteProvider, WireError, WireMask, WireRequest,
    WireResponse, WIRE_NORM_TOLERANCE,
};
pub use provider::{
    EmbedCropRequest, EmbeddingProvider, PixelBox, ProviderError, ProviderInfo, ProviderSpec,
    RefineMaskRequest, CAP_EMBED_CROP, CAP_EMBED_TEXT, CAP_REFINE_MASK, CAP_SEGMENT_FRAME,
    PROTOCOL_VERSION,
};

/// Label given to boxes that no frame sees.
pub const UNKNOWN_LABEL: &str = "unknown";

/// A labeled, scored 3D box.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelConfig {
    pub k_views: usize,
    /// Crop expansion factors, one provider embedding per factor.
    pub scales: Vec<f64>,
    pub temperature: f64,
    pub nms_iou: f64,
    pub tau_occ: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            k_views: 5,
            scales: vec![1.0, 1.5, 2.0],
            temperature: 0.01,
            nms_iou: 0.5,
            tau_occ: crate::geometry::DEFAULT_TAU_OCC,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        let bad = |m: String| Err(LabelError::InvalidConfig(m));
        if self.k_views == 0 {
            return bad("k_views must be >= 1".into());
        }
        if self.scales.is_empty() || self.scales.len() > u8::MAX as usize {
            return bad("scales must hold between 1 and 255 factors".into());
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return bad(format!("scale factor {s} must be > 0"));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if !(self.tau_occ > 0.0) {
            return bad(format!("tau_occ {} must be > 0", self.tau_occ));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad(format!("nms_iou {} must lie in [0, 1]", self.nms_iou));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("box {box_index}: provider failed: {source}")]
    Provider {
        box_index: usize,
        #[source]
        source: ProviderError,
    },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("no embeddings to aggregate")]
    EmptyEmbeddings,
    #[error("mean embedding norm is below {MIN_MEAN_NORM}")]
    DegenerateMean,
    #[error("empty pixel set")]
    EmptyPixels,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// A 2D crop handed to the provider at one scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropRequest {
    pub frame_id: u32,
    pub prompt_bbox: PixelBox,
    pub scale_index: u8,
}

/// Frames ranked by the number of visible cropped points (descending, lower
/// frame id first on ties). Frames seeing nothing are omitted.
pub fn select_top_views(box3d: &Box3D, scene: &Scene, k: usize, tau_occ: f64) -> Vec<PixelSet> {
    let idx = crop_point_cloud(&scene.points.points, box3d);
    let cropped: Vec<_> = idx.iter().map(|&i| scene.points.points[i]).collect();
    let mut views: Vec<PixelSet> = scene
        .frames
        .iter()
        .map(|f| visible_projection(&cropped, f, tau_occ))
        .filter(|s| !s.is_empty())
        .collect();
    views.sort_by(|a, b| b.len().cmp(&a.len()).then(a.frame_id.cmp(&b.frame_id)));
    views.truncate(k);
    views
}

/// Expands an inclusive pixel box about its center by `factor` and clamps it
/// to a `width × height` image.
pub fn expand_bbox(bbox: PixelBox, factor: f64, width: u32, height: u32) -> PixelBox {
    let axis = |lo: u32, hi: u32, limit: u32| -> (u32, u32) {
        let extent = (hi - lo + 1) as f64;
        let center = lo as f64 + extent / 2.0;
        let half = extent * factor / 2.0;
        let new_lo = (center - half).floor().max(0.0) as u32;
        let new_hi = ((center + half).ceil() - 1.0).max(0.0) as u32;
        (new_lo.min(limit - 1), new_hi.clamp(new_lo.min(limit - 1), limit - 1))
    };
    let (x0, x1) = axis(bbox[0], bbox[2], width);
    let (y0, y1) = axis(bbox[1], bbox[3], height);
    [x0, y0, x1, y1]
}

fn requests_for_bbox(frame_id: u32, bbox: PixelBox, scales: &[f64], width: u32, height: u32) -> Vec<CropRequest> {
    scales
        .iter()
        .enumerate()
        .map(|(i, &s)| CropRequest {
            frame_id,
            prompt_bbox: expand_bbox(bbox, s, width, height),
            scale_index: i as u8,
        })
        .collect()
}

/// One crop request per scale around the tight box of `view`'s pixels.
pub fn make_crop_requests(
    view: &PixelSet,
    scales: &[f64],
    width: u32,
    height: u32,
) -> Result<Vec<CropRequest>, LabelError> {
    let (x0, y0, x1, y1) = bbox2d_from_pixels(view).map_err(|_| LabelError::EmptyPixels)?;
    Ok(requests_for_bbox(view.frame_id, [x0, y0, x1, y1], scales, width, height))
}

/// Labels every box and applies NMS. Output keeps input box order.
pub fn label_detections<P>(
    boxes: &[Box3D],
    scene: &Scene,
    provider: &mut P,
    vocab: &Vocabulary,
    config: &LabelConfig,
) -> Result<Vec<Detection>, LabelError>
where
    P: EmbeddingProvider + ?Sized,
{
    config.validate()?;
    if provider.info().dim != vocab.dim() {
        return Err(LabelError::DimMismatch {
            expected: vocab.dim(),
            actual: provider.info().dim,
        });
    }
    let views: Vec<Vec<PixelSet>> = boxes
        .par_iter()
        .map(|b| select_top_views(b, scene, config.k_views, config.tau_occ))
        .collect();

    let mut detections = Vec::with_capacity(boxes.len());
    for (box_index, (b, views)) in boxes.iter().zip(&views).enumerate() {
        let provider_err = |source| LabelError::Provider { box_index, source };
        if views.is_empty() {
            detections.push(Detection {
                bbox: *b,
                label: UNKNOWN_LABEL.to_string(),
                score: 0.0,
            });
            continue;
        }
        let mut embeddings = Vec::with_capacity(views.len() * config.scales.len());
        for view in views {
            let frame = scene.frame(view.frame_id).expect("view frames come from the scene");
            let (w, h) = (frame.width(), frame.height());
            let image = scene.image(view.frame_id).map(|p| p.to_path_buf());
            let (x0, y0, x1, y1) = bbox2d_from_pixels(view).map_err(|_| LabelError::EmptyPixels)?;
            let refined = provider
                .refine_mask(&RefineMaskRequest {
                    frame_id: view.frame_id,
                    image_path: image.clone(),
                    width: w,
                    height: h,
                    bbox: [x0, y0, x1, y1],
                })
                .map_err(provider_err)?;
            let refined_bits = decode_rle(&refined).ok().filter(|m| {
                m.width() == w && m.height() == h && !m.is_empty()
            });
            // an unusable refinement falls back to the projected-point box
            let crop_base = refined_bits
                .as_ref()
                .and_then(|m| {
                    let pixels = PixelSet { frame_id: view.frame_id, pixels: m.pixels().collect() };
                    bbox2d_from_pixels(&pixels).ok()
                })
                .map_or([x0, y0, x1, y1], |(a, b, c, d)| [a, b, c, d]);
            let mask = if refined_bits.is_some() {
                refined
            } else {
                let mut m = crate::scene_io::Bitmap::new(w, h);
                for x in x0..=x1 {
                    for y in y0..=y1 {
                        m.set(x, y, true);
                    }
                }
                crate::scene_io::encode_rle(&m)
            };
            for req in requests_for_bbox(view.frame_id, crop_base, &config.scales, w, h) {
                let e = provider
                    .embed_crop(&EmbedCropRequest {
                        frame_id: req.frame_id,
                        image_path: image.clone(),
                        width: w,
                        height: h,
                        mask: mask.clone(),
                        bbox: req.prompt_bbox,
                        scale_index: req.scale_index,
                    })
                    .map_err(provider_err)?;
                if e.dim() != vocab.dim() {
                    return Err(LabelError::DimMismatch {
                        expected: vocab.dim(),
                        actual: e.dim(),
                    });
                }
                embeddings.push(e);
            }
        }
        let mean = aggregate_embeddings(&embeddings)?;
        let c = classify(&mean, vocab, config.temperature)?;
        detections.push(Detection {
            bbox: *b,
            label: c.label,
            score: c.confidence,
        });
    }

    let bxs: Vec<Box3D> = detections.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut kept = nms(&bxs, &scores, config.nms_iou)
        .map_err(|e| LabelError::InvalidConfig(format!("nms: {e}")))?;
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| detections[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_one_is_tight_box() {
        assert_eq!(expand_bbox([10, 20, 30, 25], 1.0, 640, 480), [10, 20, 30, 25]);
        assert_eq!(expand_bbox([5, 5, 5, 5], 1.0, 640, 480), [5, 5, 5, 5]);
    }

    #[test]
    fn expansion_grows_about_center() {
        // width 10 centered at 15 -> width 20 centered at 15
        assert_eq!(expand_bbox([10, 10, 19, 19], 2.0, 640, 480), [5, 5, 24, 24]);
    }

    #[test]
    fn crop_requests_per_scale() {
        let view = PixelSet { frame_id: 4, pixels: vec![(10, 10), (19, 19)] };
        let reqs = make_crop_requests(&view, &[1.0, 1.5, 2.0], 640, 480).unwrap();
        assert_eq!(reqs.len(), 3);
        assert_eq!(reqs[0].prompt_bbox, [10, 10, 19, 19]);
        assert_eq!(reqs.iter().map(|r| r.scale_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(reqs.iter().all(|r| r.frame_id == 4));
        let empty = PixelSet { frame_id: 4, pixels: vec![] };
        assert!(matches!(make_crop_requests(&empty, &[1.0], 640, 480), Err(LabelError::EmptyPixels)));
    }

    #[test]
    fn config_validation() {
        assert!(LabelConfig::default().validate().is_ok());
        let c = LabelConfig { k_views: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = LabelConfig { scales: vec![], ..Default::default() };
        assert!(c.validate().is_err());
        let c = LabelConfig { temperature: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
