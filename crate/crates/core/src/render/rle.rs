//! Row-major run-length encoding for binary masks.
//!
//! Runs alternate between zeros and ones, starting with zeros. A mask whose
//! first pixel is set therefore begins with a zero-length run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RleError {
    #[error("runs sum to {actual} but the mask has {expected} pixels")]
    RunSumMismatch { expected: u64, actual: u64 },
    #[error("zero-length runs at positions {0} and {next}", next = .0 + 1)]
    ConsecutiveEmptyRuns(usize),
    #[error("bitmap is empty")]
    EmptyBitmap,
    #[error("bitmap has {actual} bits, expected {width}x{height}")]
    BitmapShape { width: u32, height: u32, actual: usize },
}

/// A binary raster stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

/// Tight pixel bounding box, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }
}

impl Bitmap {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, RleError> {
        if bits.len() != width as usize * height as usize {
            return Err(RleError::BitmapShape { width, height, actual: bits.len() });
        }
        Ok(Bitmap { width, height, bits })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Bitmap { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn bounding_box(&self) -> Option<PixelBox> {
        let mut bbox: Option<PixelBox> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            let x = (i % self.width as usize) as u32;
            let y = (i / self.width as usize) as u32;
            bbox = Some(match bbox {
                None => PixelBox { x0: x, y0: y, x1: x, y1: y },
                Some(b) => PixelBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            });
        }
        bbox
    }
}

/// Run-length encoded mask as carried on the segmenter wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub width: u32,
    pub height: u32,
    pub runs: Vec<u32>,
}

impl MaskRle {
    pub fn validate(&self) -> Result<(), RleError> {
        let expected = self.width as u64 * self.height as u64;
        let actual: u64 = self.runs.iter().map(|r| *r as u64).sum();
        if actual != expected {
            return Err(RleError::RunSumMismatch { expected, actual });
        }
        if let Some(pos) = (1..self.runs.len().saturating_sub(1))
            .find(|&i| self.runs[i] == 0 && self.runs[i + 1] == 0)
        {
            return Err(RleError::ConsecutiveEmptyRuns(pos));
        }
        Ok(())
    }

    /// Number of set pixels: the sum of the odd-indexed runs.
    pub fn ones(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|r| *r as u64).sum()
    }
}

pub fn rle_encode(bitmap: &Bitmap) -> Result<MaskRle, RleError> {
    if bitmap.bits.is_empty() {
        return Err(RleError::EmptyBitmap);
    }
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &bit in &bitmap.bits {
        if bit == current {
            len += 1;
        } else {
            runs.push(len);
            current = bit;
            len = 1;
        }
    }
    runs.push(len);
    Ok(MaskRle { width: bitmap.width, height: bitmap.height, runs })
}

pub fn rle_decode(mask: &MaskRle) -> Result<Bitmap, RleError> {
    mask.validate()?;
    let mut bits = Vec::with_capacity(mask.width as usize * mask.height as usize);
    let mut value = false;
    for &run in &mask.runs {
        bits.extend(std::iter::repeat_n(value, run as usize));
        value = !value;
    }
    Ok(Bitmap { width: mask.width, height: mask.height, bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bitmap(width: u32, height: u32, bits: &[u8]) -> Bitmap {
        Bitmap::new(width, height, bits.iter().map(|b| *b == 1).collect()).unwrap()
    }

    #[test]
    fn all_ones_starts_with_empty_zero_run() {
        let rle = rle_encode(&bitmap(2, 2, &[1, 1, 1, 1])).unwrap();
        assert_eq!(rle.runs, vec![0, 4]);
    }

    #[test]
    fn diagonal_pattern() {
        let rle = rle_encode(&bitmap(2, 2, &[1, 0, 0, 1])).unwrap();
        assert_eq!(rle.runs, vec![0, 1, 2, 1]);
        assert_eq!(rle.ones(), 2);
    }

    #[test]
    fn run_sum_mismatch() {
        let rle = MaskRle { width: 2, height: 2, runs: vec![0, 3] };
        assert_eq!(
            rle_decode(&rle).unwrap_err(),
            RleError::RunSumMismatch { expected: 4, actual: 3 }
        );
    }

    #[test]
    fn consecutive_empty_interior_runs_rejected() {
        let rle = MaskRle { width: 2, height: 2, runs: vec![1, 0, 0, 3] };
        assert_eq!(rle_decode(&rle).unwrap_err(), RleError::ConsecutiveEmptyRuns(1));
    }

    #[test]
    fn empty_bitmap_rejected() {
        assert_eq!(rle_encode(&Bitmap::zeros(0, 3)).unwrap_err(), RleError::EmptyBitmap);
    }

    #[test]
    fn bounding_box_is_tight() {
        let mut b = Bitmap::zeros(10, 8);
        b.set(3, 2, true);
        b.set(6, 5, true);
        assert_eq!(b.bounding_box(), Some(PixelBox { x0: 3, y0: 2, x1: 6, y1: 5 }));
        assert_eq!(Bitmap::zeros(4, 4).bounding_box(), None);
    }

    fn arb_bitmap() -> impl Strategy<Value = Bitmap> {
        (1u32..=64, 1u32..=64).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |bits| Bitmap::new(w, h, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip(b in arb_bitmap()) {
            let rle = rle_encode(&b).unwrap();
            rle.validate().unwrap();
            prop_assert_eq!(rle.ones() as usize, b.count_ones());
            prop_assert_eq!(rle_decode(&rle).unwrap(), b);
        }
    }
}
