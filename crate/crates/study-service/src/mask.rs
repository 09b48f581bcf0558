//! Binary annotation masks and their run-length wire format.
//!
//! A mask travels as
//!
//! ```json
//! {"width": 4, "height": 2, "counts": [3, 2, 3]}
//! ```
//!
//! `counts` are alternating run lengths over the row-major pixels, starting
//! with a run of off-pixels (which may be 0). They must sum to
//! `width * height`. The canonical encoding has no zero-length runs except
//! possibly the first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("runs cover {covered} pixels, mask has {expected}")]
    Length { covered: u64, expected: u64 },
    #[error("mask has no on-pixels")]
    Empty,
    #[error("mask is {actual:?}, image is {expected:?}")]
    Dimensions { expected: (u32, u32), actual: (u32, u32) },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    /// Row-major.
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.bits[(y * self.width + x) as usize] = on;
    }

    pub fn on_pixels(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn encode(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                current = b;
                run = 0;
            }
            run += 1;
        }
        if run > 0 || counts.is_empty() {
            counts.push(run);
        }
        RleMask { width: self.width, height: self.height, counts }
    }
}

impl RleMask {
    pub fn decode(&self) -> Result<Mask, MaskError> {
        let expected = u64::from(self.width) * u64::from(self.height);
        let covered = self.counts.iter().try_fold(0u64, |acc, &c| acc.checked_add(c)).unwrap_or(u64::MAX);
        if covered != expected {
            return Err(MaskError::Length { covered, expected });
        }
        let mut bits = Vec::with_capacity(expected as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(Mask { width: self.width, height: self.height, bits })
    }

    /// Decodes and checks the mask against the image it annotates.
    pub fn validate(&self, width: u32, height: u32) -> Result<Mask, MaskError> {
        if (self.width, self.height) != (width, height) {
            return Err(MaskError::Dimensions { expected: (width, height), actual: (self.width, self.height) });
        }
        let mask = self.decode()?;
        if mask.on_pixels() == 0 {
            return Err(MaskError::Empty);
        }
        Ok(mask)
    }
}
