use std::fmt;

use serde::{Deserialize, Serialize};

use super::{LocalizationError, Result};

/// Integer pixel box, half-open on the max edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(LocalizationError::InvalidBox(format!("({x_min}, {y_min}, {x_max}, {y_max}) has no area")));
        }
        Ok(BoundingBox { x_min, y_min, x_max, y_max })
    }

    /// The whole image.
    pub fn full(width: u32, height: u32) -> Result<Self> {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> u64 {
        (self.x_max - self.x_min) as u64
    }

    pub fn height(&self) -> u64 {
        (self.y_max - self.y_min) as u64
    }

    pub fn area(&self) -> u64 {
        self.width() * self.height()
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w as u64 * h as u64
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Intersection over union, from integer areas.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeBucket {
    S,
    M,
    L,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::S, SizeBucket::M, SizeBucket::L];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeBucket::S => "S",
            SizeBucket::M => "M",
            SizeBucket::L => "L",
        })
    }
}

/// Area-fraction cutoffs, both inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeCutoffs {
    pub small: f64,
    pub medium: f64,
}

impl Default for SizeCutoffs {
    fn default() -> Self {
        SizeCutoffs { small: 0.01, medium: 0.10 }
    }
}

/// Bucket of a box by the fraction of the image it covers.
pub fn size_bucket(gt: &BoundingBox, width: u32, height: u32, cutoffs: &SizeCutoffs) -> SizeBucket {
    let fraction = gt.area() as f64 / (width as u64 * height as u64) as f64;
    if fraction <= cutoffs.small {
        SizeBucket::S
    } else if fraction <= cutoffs.medium {
        SizeBucket::M
    } else {
        SizeBucket::L
    }
}

/// A ground-truth box with its label and size bucket.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub class_label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub size_bucket: SizeBucket,
}
