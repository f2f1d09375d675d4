//! 16-bit grayscale PNG rasters (depth in millimeters, or label maps) and the
//! `EMB1` embedding container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::DepthMap;
use crate::ov_labeler::EmbeddingVector;

use super::SceneError;

/// Row-major 16-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray16 {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl Gray16 {
    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

pub fn read_gray16_png(path: &Path) -> Result<Gray16, SceneError> {
    let file = File::open(path).map_err(|e| SceneError::io(path, e))?;
    let bad = |msg: String| SceneError::Format {
        path: path.to_path_buf(),
        message: msg,
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(bad(format!(
            "expected 16-bit grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width, info.height);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let data = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok(Gray16 { width, height, data })
}

pub fn write_gray16_png(path: &Path, img: &Gray16) -> Result<(), SceneError> {
    let file = File::create(path).map_err(|e| SceneError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width, img.height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let bytes: Vec<u8> = img.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    let fmt = |e: png::EncodingError| SceneError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&bytes).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap, SceneError> {
    let img = read_gray16_png(path)?;
    let values = img.data.iter().map(|&mm| mm as f64 / 1000.0).collect();
    DepthMap::new(img.width, img.height, values).map_err(|e| SceneError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Quantizes meters to millimeters; values beyond the u16 range saturate.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<(), SceneError> {
    let data = depth
        .values()
        .iter()
        .map(|m| (m * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    write_gray16_png(
        path,
        &Gray16 {
            width: depth.width(),
            height: depth.height(),
            data,
        },
    )
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingVector>, SceneError> {
    let file = File::open(path).map_err(|e| SceneError::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| SceneError::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != EMB_MAGIC {
        return Err(bad("bad magic, expected EMB1"));
    }
    let count = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| SceneError::io(path, e))?;
    if body.len() != count * dim * 4 {
        return Err(bad(&format!(
            "body has {} bytes, expected {} ({count}x{dim} f32)",
            body.len(),
            count * dim * 4
        )));
    }
    let floats: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite embedding value"));
    }
    Ok(floats
        .chunks(dim.max(1))
        .take(count)
        .map(|c| EmbeddingVector::new(c.to_vec()))
        .collect())
}

pub fn write_embeddings(path: &Path, vectors: &[EmbeddingVector]) -> Result<(), SceneError> {
    let dim = vectors.first().map_or(0, |v| v.dim());
    if vectors.iter().any(|v| v.dim() != dim) {
        return Err(SceneError::Format {
            path: path.to_path_buf(),
            message: "embeddings differ in dimension".into(),
        });
    }
    let mut out = Vec::with_capacity(12 + vectors.len() * dim * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in vectors {
        for x in v.values() {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    let mut f = File::create(path).map_err(|e| SceneError::io(path, e))?;
    f.write_all(&out).map_err(|e| SceneError::io(path, e))
}
