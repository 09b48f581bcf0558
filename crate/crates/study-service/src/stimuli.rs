//! Study setup: the 14 image-class pairs and their pre-rendered overlays.
//!
//! `study.json`:
//!
//! ```json
//! {
//!   "database": "study.sqlite",
//!   "maps_dir": "runs/study/maps",
//!   "overlay_alpha": 0.5,
//!   "pairs": [
//!     {"pair_id": "p01", "image": "images/annunciation.jpg", "image_id": "annunciation", "class": "angel"}
//!   ]
//! }
//! ```
//!
//! A pair may list its seven map files under `"maps": {"gradcam": "...", ...}`;
//! otherwise they are looked up in `maps_dir` under the names `generate`
//! writes. Relative paths resolve against the file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor as IoCursor;
use std::path::{Path, PathBuf};

use iconoloc::raster::{min_max_normalize, resize_bilinear};
use iconoloc::saliency::store::{map_file_name, read_values};
use iconoloc::MethodId;
use image::{ImageFormat, Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_PAIRS: usize = 14;

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid study configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub pair_id: String,
    pub image: PathBuf,
    /// Defaults to the image file stem.
    #[serde(default)]
    pub image_id: Option<String>,
    pub class: String,
    #[serde(default)]
    pub maps: BTreeMap<MethodId, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub database: PathBuf,
    #[serde(default)]
    pub maps_dir: Option<PathBuf>,
    #[serde(default = "default_alpha")]
    pub overlay_alpha: f64,
    /// Directory of the browser bundle, served at `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    pub pairs: Vec<PairConfig>,
}

fn default_alpha() -> f64 {
    0.5
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self, SetupError> {
        let read = |message: String| SetupError::Read { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
        let mut cfg: StudyConfig = serde_json::from_str(&text).map_err(|e| read(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.database);
        cfg.maps_dir.as_mut().map(resolve);
        cfg.static_dir.as_mut().map(resolve);
        for pair in &mut cfg.pairs {
            resolve(&mut pair.image);
            pair.maps.values_mut().for_each(resolve);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SetupError> {
        if self.pairs.len() != N_PAIRS {
            return Err(SetupError::Invalid(format!("{} pairs configured, the study uses {N_PAIRS}", self.pairs.len())));
        }
        let ids: BTreeSet<&str> = self.pairs.iter().map(|p| p.pair_id.as_str()).collect();
        if ids.len() != N_PAIRS {
            return Err(SetupError::Invalid("pair ids are not unique".into()));
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(SetupError::Invalid(format!("overlay_alpha {} outside [0, 1]", self.overlay_alpha)));
        }
        for p in &self.pairs {
            if p.maps.is_empty() && self.maps_dir.is_none() {
                return Err(SetupError::Invalid(format!("pair {} lists no maps and no maps_dir is set", p.pair_id)));
            }
            if !p.maps.is_empty() && p.maps.len() != MethodId::ALL.len() {
                return Err(SetupError::Invalid(format!("pair {} lists {} maps, expected 7", p.pair_id, p.maps.len())));
            }
        }
        Ok(())
    }

    fn map_path(&self, pair: &PairConfig, method: MethodId) -> PathBuf {
        if let Some(p) = pair.maps.get(&method) {
            return p.clone();
        }
        let image_id = pair.image_id.clone().unwrap_or_else(|| {
            pair.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        });
        self.maps_dir.as_deref().unwrap_or(Path::new(".")).join(map_file_name(&image_id, &pair.class, method))
    }
}

/// One pair as shown to participants. PNG bytes are rendered once at setup.
#[derive(Debug, Clone)]
pub struct Stimulus {
    pub pair_id: String,
    pub class: String,
    pub width: u32,
    pub height: u32,
    pub image_png: Vec<u8>,
    /// Indexed by [`MethodId::index`].
    pub overlays_png: Vec<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct Stimuli {
    pub pairs: Vec<Stimulus>,
}

fn png(img: &RgbImage) -> Vec<u8> {
    let mut out = IoCursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    out.into_inner()
}

/// Blends a blue-to-red rendering of `map` over `image`.
pub fn render_overlay(image: &RgbImage, map: &Array2<f64>, alpha: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let map = if map.dim() == (h as usize, w as usize) {
        map.clone()
    } else {
        resize_bilinear(map.view(), h as usize, w as usize)
    };
    let (norm, _) = min_max_normalize(&map);
    RgbImage::from_fn(w, h, |x, y| {
        let v = norm[[y as usize, x as usize]].clamp(0.0, 1.0);
        let heat = [255.0 * v, 0.0, 255.0 * (1.0 - v)];
        let px = image.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| ((1.0 - alpha) * f64::from(px[c]) + alpha * heat[c]).round() as u8))
    })
}

impl Stimuli {
    /// Renders stimuli from in-memory images and maps (`maps` indexed by
    /// [`MethodId::index`]).
    pub fn from_parts(parts: Vec<(String, String, RgbImage, Vec<Array2<f64>>)>, alpha: f64) -> Result<Self, SetupError> {
        if parts.len() != N_PAIRS {
            return Err(SetupError::Invalid(format!("{} pairs given, the study uses {N_PAIRS}", parts.len())));
        }
        let pairs = parts
            .into_iter()
            .map(|(pair_id, class, image, maps)| {
                if maps.len() != MethodId::ALL.len() {
                    return Err(SetupError::Invalid(format!("pair {pair_id} has {} maps, expected 7", maps.len())));
                }
                Ok(Stimulus {
                    width: image.width(),
                    height: image.height(),
                    image_png: png(&image),
                    overlays_png: maps.iter().map(|m| png(&render_overlay(&image, m, alpha))).collect(),
                    pair_id,
                    class,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { pairs })
    }

    pub fn prepare(cfg: &StudyConfig) -> Result<Self, SetupError> {
        cfg.validate()?;
        let mut parts = Vec::with_capacity(N_PAIRS);
        for pair in &cfg.pairs {
            let image = image::open(&pair.image)
                .map_err(|e| SetupError::Read { path: pair.image.clone(), message: e.to_string() })?
                .to_rgb8();
            let mut maps = Vec::with_capacity(MethodId::ALL.len());
            for m in MethodId::ALL {
                let path = cfg.map_path(pair, m);
                maps.push(read_values(&path).map_err(|e| SetupError::Read { path, message: e.to_string() })?);
            }
            parts.push((pair.pair_id.clone(), pair.class.clone(), image, maps));
        }
        Self::from_parts(parts, cfg.overlay_alpha)
    }

    pub fn index_of(&self, pair_id: &str) -> Option<usize> {
        self.pairs.iter().position(|p| p.pair_id == pair_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_extremes() {
        let img = RgbImage::from_pixel(2, 1, Rgb([100, 100, 100]));
        let map = ndarray::array![[0.0, 1.0]];
        let o = render_overlay(&img, &map, 0.5);
        assert_eq!(o.get_pixel(0, 0).0, [50, 50, 178]);
        assert_eq!(o.get_pixel(1, 0).0, [178, 50, 50]);
        assert_eq!(render_overlay(&img, &map, 0.0), img);
    }
}
