use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::raster;

const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResizeMode {
    /// Resize both axes to the input resolution, ignoring aspect ratio.
    #[default]
    Squash,
    /// Resize the short side, then take the centered square.
    CenterCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub resolution: usize,
    pub mode: ResizeMode,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessor {
    /// CLIP's channel statistics at the given square resolution.
    pub fn clip(resolution: usize) -> Self {
        Preprocessor { resolution, mode: ResizeMode::Squash, mean: CLIP_MEAN, std: CLIP_STD }
    }

    pub fn with_mode(mut self, mode: ResizeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn prepare(&self, image: &RgbImage) -> PreparedInput {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let r = self.resolution as u32;
        let (resized, crop) = match self.mode {
            ResizeMode::Squash => (imageops::resize(image, r, r, FilterType::CatmullRom), (0, 0, h, w)),
            ResizeMode::CenterCrop => {
                let side = h.min(w);
                let (y0, x0) = ((h - side) / 2, (w - side) / 2);
                let square = imageops::crop_imm(image, x0 as u32, y0 as u32, side as u32, side as u32).to_image();
                (imageops::resize(&square, r, r, FilterType::CatmullRom), (y0, x0, side, side))
            }
        };
        let n = self.resolution;
        let mut tensor = Array3::zeros((3, n, n));
        for (x, y, px) in resized.enumerate_pixels() {
            for c in 0..3 {
                let v = px.0[c] as f64 / 255.0;
                tensor[[c, y as usize, x as usize]] = (v - self.mean[c]) / self.std[c];
            }
        }
        PreparedInput {
            tensor,
            transform: Transform { original: (h, w), mode: self.mode, crop },
        }
    }
}

/// Records how a preprocessed input relates to original-image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    /// `(height, width)` of the original image.
    pub original: (usize, usize),
    pub mode: ResizeMode,
    /// `(y0, x0, height, width)` of the original region seen by the model.
    pub crop: (usize, usize, usize, usize),
}

impl Transform {
    pub fn identity(height: usize, width: usize) -> Self {
        Transform { original: (height, width), mode: ResizeMode::Squash, crop: (0, 0, height, width) }
    }

    /// Resamples a map defined over the model input onto the original image.
    /// Pixels outside the cropped region are zero.
    pub fn to_original(&self, map: &Array2<f64>) -> Array2<f64> {
        let (y0, x0, ch, cw) = self.crop;
        let region = raster::resize_bilinear(map.view(), ch, cw);
        if self.crop == (0, 0, self.original.0, self.original.1) {
            return region;
        }
        let mut out = Array2::zeros(self.original);
        out.slice_mut(s![y0..y0 + ch, x0..x0 + cw]).assign(&region);
        out
    }
}

/// A model-ready tensor plus the transform back to original pixels.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub tensor: Array3<f64>,
    pub transform: Transform,
}

impl PreparedInput {
    /// Wraps a tensor whose pixels are already the original image pixels.
    pub fn identity(tensor: Array3<f64>) -> Self {
        let (_, h, w) = tensor.dim();
        PreparedInput { tensor, transform: Transform::identity(h, w) }
    }
}
