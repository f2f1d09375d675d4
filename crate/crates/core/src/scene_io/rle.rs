//! Column-major run-length codec for binary masks.
//!
//! Runs alternate zero/one starting with zeros, so an all-ones mask is
//! `[0, H*W]`. Pixel `(x, y)` sits at flat index `x * H + y`. The canonical
//! form has no zero-length runs except possibly the leading one.

use serde::{Deserialize, Serialize};

use super::SceneError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

/// Dense binary mask stored column-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmap {
    height: u32,
    width: u32,
    data: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            height,
            width,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_column_major(width: u32, height: u32, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        Self { height, width, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[x as usize * self.height as usize + y as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.data[x as usize * self.height as usize + y as usize] = on;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn as_column_major(&self) -> &[bool] {
        &self.data
    }

    /// Foreground pixels as `(x, y)`, column by column.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let h = self.height as usize;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i / h) as u32, (i % h) as u32))
    }
}

impl Rle {
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    fn check_sum(&self) -> Result<(), SceneError> {
        let expected = self.height as u64 * self.width as u64;
        let actual: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if actual != expected {
            return Err(SceneError::RunSum { expected, actual });
        }
        Ok(())
    }
}

/// Expands runs into a bitmap. Zero-length interior runs are accepted.
pub fn decode_rle(rle: &Rle) -> Result<Bitmap, SceneError> {
    rle.check_sum()?;
    let mut data = Vec::with_capacity(rle.height as usize * rle.width as usize);
    for (i, &c) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    Ok(Bitmap::from_column_major(rle.width, rle.height, data))
}

/// Canonical runs for a bitmap.
pub fn encode_rle(mask: &Bitmap) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &mask.data {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    Rle {
        height: mask.height,
        width: mask.width,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_mask() {
        let r = Rle { height: 3, width: 4, counts: vec![12] };
        let b = decode_rle(&r).unwrap();
        assert!(b.is_empty());
        assert_eq!(encode_rle(&b), r);
    }

    #[test]
    fn all_ones_mask() {
        let r = Rle { height: 3, width: 4, counts: vec![0, 12] };
        let b = decode_rle(&r).unwrap();
        assert_eq!(b.area(), 12);
        assert_eq!(encode_rle(&b), r);
    }

    #[test]
    fn run_sum_mismatch() {
        let r = Rle { height: 3, width: 4, counts: vec![5, 5] };
        assert!(matches!(
            decode_rle(&r),
            Err(SceneError::RunSum { expected: 12, actual: 10 })
        ));
    }

    #[test]
    fn non_canonical_runs_canonicalize() {
        let r = Rle { height: 2, width: 2, counts: vec![1, 0, 1, 1, 1] };
        let b = decode_rle(&r).unwrap();
        assert_eq!(encode_rle(&b).counts, vec![2, 1, 1]);
    }

    #[test]
    fn column_major_layout() {
        // second pixel in column-major order is (0, 1)
        let r = Rle { height: 2, width: 3, counts: vec![1, 1, 4] };
        let b = decode_rle(&r).unwrap();
        assert!(b.get(0, 1));
        assert_eq!(b.pixels().collect::<Vec<_>>(), vec![(0, 1)]);
    }
}
