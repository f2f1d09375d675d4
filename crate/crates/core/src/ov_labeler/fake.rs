//! Model-free provider for tests and CI.
//!
//! Contract:
//! - `embed_text(p)` is a unit vector drawn from SplitMix64 seeded with
//!   SHA-256(seed ‖ "text" ‖ p).
//! - `refine_mask` returns the prompt box, clamped to the image, filled.
//! - `embed_crop` returns the keyed-hash vector of `(frame_id, bbox)`, unless
//!   the frame's image is a 16-bit grayscale PNG *label map* and label
//!   classes were configured. Pixel value `v >= 1` then names class `v - 1`;
//!   the majority class under the mask (inside the crop box) yields
//!   `normalize(embed_text(template(class)) + 0.1 · hash(frame_id, bbox))`,
//!   where `hash` is itself unit-norm.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

use crate::scene_io::{decode_rle, encode_rle, read_gray16_png, Bitmap, Gray16, Rle};

use super::provider::{
    EmbedCropRequest, EmbeddingProvider, ProviderError, ProviderInfo, RefineMaskRequest,
    CAP_EMBED_CROP, CAP_EMBED_TEXT, CAP_REFINE_MASK, PROTOCOL_VERSION,
};
use super::EmbeddingVector;

pub const FAKE_DIM: usize = 64;

/// Weight of the per-crop hash noise added to label-map embeddings.
pub const FAKE_NOISE: f64 = 0.1;

#[derive(Debug)]
pub struct FakeProvider {
    seed: u64,
    info: ProviderInfo,
    label_classes: Option<(Vec<String>, String)>,
    label_maps: HashMap<PathBuf, Option<Gray16>>,
}

impl FakeProvider {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, FAKE_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            info: ProviderInfo {
                protocol_version: PROTOCOL_VERSION,
                dim,
                capabilities: vec![
                    CAP_REFINE_MASK.into(),
                    CAP_EMBED_CROP.into(),
                    CAP_EMBED_TEXT.into(),
                ],
                deterministic: true,
            },
            label_classes: None,
            label_maps: HashMap::new(),
        }
    }

    /// Enables label-map embeddings: value `v` in a label map is
    /// `classes[v - 1]`, embedded through `template`.
    pub fn with_label_classes(mut self, classes: Vec<String>, template: impl Into<String>) -> Self {
        self.label_classes = Some((classes, template.into()));
        self
    }

    fn hashed_vector(&self, domain: &[u8], payload: &[u8]) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(domain);
        h.update(payload);
        let digest = h.finalize();
        let mut rng = SplitMix64::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()));
        (0..self.info.dim)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
            .collect()
    }

    fn unit(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::new(v).normalized().expect("hash vector is non-zero")
    }

    pub fn text_embedding(&self, prompt: &str) -> EmbeddingVector {
        Self::unit(self.hashed_vector(b"text", prompt.as_bytes()))
    }

    fn crop_noise(&self, frame_id: u32, bbox: &[u32; 4]) -> Vec<f64> {
        let mut payload = frame_id.to_le_bytes().to_vec();
        for b in bbox {
            payload.extend_from_slice(&b.to_le_bytes());
        }
        self.hashed_vector(b"crop", &payload)
    }

    fn label_map(&mut self, path: &Path) -> Option<&Gray16> {
        self.label_maps
            .entry(path.to_path_buf())
            .or_insert_with(|| read_gray16_png(path).ok())
            .as_ref()
    }

    /// Majority label under `mask` within `bbox`; ties pick the smaller value.
    fn majority_class(&mut self, req: &EmbedCropRequest, mask: &Bitmap) -> Option<usize> {
        let n_classes = self.label_classes.as_ref()?.0.len();
        let path = req.image_path.clone()?;
        let map = self.label_map(&path)?;
        if map.width != req.width || map.height != req.height {
            return None;
        }
        let mut votes = vec![0usize; n_classes + 1];
        let [x0, y0, x1, y1] = req.bbox;
        for x in x0..=x1.min(map.width - 1) {
            for y in y0..=y1.min(map.height - 1) {
                let v = map.get(x, y) as usize;
                if v >= 1 && v <= n_classes && mask.get(x, y) {
                    votes[v] += 1;
                }
            }
        }
        let (best, count) = votes
            .iter()
            .enumerate()
            .skip(1)
            .fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
        (count > 0).then(|| best - 1)
    }
}

fn clamp_bbox(bbox: &[u32; 4], width: u32, height: u32) -> Result<[u32; 4], ProviderError> {
    let [x0, y0, x1, y1] = *bbox;
    if x0 > x1 || y0 > y1 {
        return Err(ProviderError::rejected("BOX", format!("inverted box {bbox:?}")));
    }
    if x0 >= width || y0 >= height {
        return Err(ProviderError::rejected(
            "BOX",
            format!("box {bbox:?} outside {width}x{height} image"),
        ));
    }
    Ok([x0, y0, x1.min(width - 1), y1.min(height - 1)])
}

impl EmbeddingProvider for FakeProvider {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn refine_mask(&mut self, req: &RefineMaskRequest) -> Result<Rle, ProviderError> {
        let [x0, y0, x1, y1] = clamp_bbox(&req.bbox, req.width, req.height)?;
        let mut mask = Bitmap::new(req.width, req.height);
        for x in x0..=x1 {
            for y in y0..=y1 {
                mask.set(x, y, true);
            }
        }
        Ok(encode_rle(&mask))
    }

    fn embed_crop(&mut self, req: &EmbedCropRequest) -> Result<EmbeddingVector, ProviderError> {
        clamp_bbox(&req.bbox, req.width, req.height)?;
        if req.mask.width != req.width || req.mask.height != req.height {
            return Err(ProviderError::rejected("MASK", "mask size differs from image size"));
        }
        let mask = decode_rle(&req.mask).map_err(|e| ProviderError::rejected("MASK", e.to_string()))?;
        let noise = Self::unit(self.crop_noise(req.frame_id, &req.bbox));
        match self.majority_class(req, &mask) {
            Some(c) => {
                let (classes, template) = self.label_classes.as_ref().expect("checked above");
                let prompt = template.replace("{}", &classes[c]);
                let base = self.text_embedding(&prompt);
                let mixed = base
                    .values()
                    .iter()
                    .zip(noise.values())
                    .map(|(b, n)| b + FAKE_NOISE * n)
                    .collect();
                Ok(Self::unit(mixed))
            }
            None => Ok(noise),
        }
    }

    fn embed_text(&mut self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if prompts.is_empty() {
            return Err(ProviderError::rejected("EMPTY", "no prompts"));
        }
        Ok(prompts.iter().map(|p| self.text_embedding(p)).collect())
    }
}
