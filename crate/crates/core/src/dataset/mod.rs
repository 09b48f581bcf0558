//! Box-annotation datasets in one canonical in-memory form.

mod canonical;
mod coco;
mod stats;
mod voc;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::localization::{size_bucket, BoundingBox, GroundTruthBox, SizeCutoffs};

pub use canonical::{from_canonical_json, to_canonical_json};
pub use stats::{class_stats, dataset_table, dataset_table_csv, size_distribution, ClassShare, ClassStats, SizeDistribution};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("unknown adapter `{0}` (expected iconart-voc, artdl or canonical-json)")]
    UnknownAdapter(String),
    #[error("dataset has no boxes")]
    Empty,
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adapter {
    IconartVoc,
    Artdl,
    CanonicalJson,
}

impl FromStr for Adapter {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iconart-voc" => Ok(Adapter::IconartVoc),
            "artdl" => Ok(Adapter::Artdl),
            "canonical-json" => Ok(Adapter::CanonicalJson),
            other => Err(DatasetError::UnknownAdapter(other.to_string())),
        }
    }
}

impl fmt::Display for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Adapter::IconartVoc => "iconart-voc",
            Adapter::Artdl => "artdl",
            Adapter::CanonicalJson => "canonical-json",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Path relative to the dataset root.
    pub file: String,
    pub width: u32,
    pub height: u32,
}

/// A box before validation, with the place it was read from.
#[derive(Debug, Clone)]
pub(crate) struct RawBox {
    pub image_id: String,
    pub class: String,
    pub bbox: (i64, i64, i64, i64),
    pub origin: (PathBuf, usize),
}

/// Lowercased, trimmed, underscores read as spaces.
pub fn normalize_class(name: &str) -> String {
    name.trim().replace('_', " ").to_lowercase()
}

/// Images, their boxes and the class list. Images are sorted by id; boxes
/// by image id, class and coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub name: String,
    pub split: Option<String>,
    images: Vec<ImageRecord>,
    boxes: Vec<GroundTruthBox>,
    classes: Vec<String>,
}

impl DatasetIndex {
    pub(crate) fn build(
        name: String,
        split: Option<String>,
        mut images: Vec<ImageRecord>,
        raw: Vec<RawBox>,
        declared_classes: Option<Vec<String>>,
    ) -> Result<Self> {
        images.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = images.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(DatasetError::Invalid(format!("duplicate image id `{}`", w[0].id)));
        }
        let lookup: BTreeMap<&str, &ImageRecord> = images.iter().map(|i| (i.id.as_str(), i)).collect();
        for img in &images {
            if img.width == 0 || img.height == 0 {
                return Err(DatasetError::Invalid(format!("image `{}` has zero size", img.id)));
            }
        }
        let cutoffs = SizeCutoffs::default();
        let mut boxes = Vec::with_capacity(raw.len());
        for r in raw {
            let bad = |message: String| DatasetError::Malformed { path: r.origin.0.clone(), line: r.origin.1, message };
            let img = lookup.get(r.image_id.as_str()).ok_or_else(|| bad(format!("box references unknown image `{}`", r.image_id)))?;
            let (x0, y0, x1, y1) = r.bbox;
            let in_range = |v: i64, hi: u32| v >= 0 && v <= hi as i64;
            if !(in_range(x0, img.width) && in_range(x1, img.width) && in_range(y0, img.height) && in_range(y1, img.height)) {
                return Err(bad(format!(
                    "box [{x0}, {y0}, {x1}, {y1}) outside image `{}` of size {}x{}",
                    r.image_id, img.width, img.height
                )));
            }
            let bbox = BoundingBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32).map_err(|e| bad(e.to_string()))?;
            let class_label = normalize_class(&r.class);
            if class_label.is_empty() {
                return Err(bad("empty class name".into()));
            }
            boxes.push(GroundTruthBox {
                image_id: r.image_id,
                size_bucket: size_bucket(&bbox, img.width, img.height, &cutoffs),
                class_label,
                bbox,
            });
        }
        boxes.sort_by(|a, b| (&a.image_id, &a.class_label, a.bbox).cmp(&(&b.image_id, &b.class_label, b.bbox)));
        let mut classes: BTreeSet<String> = boxes.iter().map(|b| b.class_label.clone()).collect();
        if let Some(declared) = declared_classes {
            let declared: BTreeSet<String> = declared.iter().map(|c| normalize_class(c)).collect();
            if let Some(extra) = classes.difference(&declared).next() {
                return Err(DatasetError::Invalid(format!("class `{extra}` is not in the declared class list")));
            }
            classes = declared;
        }
        Ok(DatasetIndex { name, split, images, boxes, classes: classes.into_iter().collect() })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn boxes(&self) -> &[GroundTruthBox] {
        &self.boxes
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.binary_search_by(|i| i.id.as_str().cmp(id)).ok().map(|k| &self.images[k])
    }

    /// Boxes grouped by `(image_id, class)`.
    pub fn pairs(&self) -> BTreeMap<(String, String), Vec<BoundingBox>> {
        let mut out: BTreeMap<(String, String), Vec<BoundingBox>> = BTreeMap::new();
        for b in &self.boxes {
            out.entry((b.image_id.clone(), b.class_label.clone())).or_default().push(b.bbox);
        }
        out
    }

    pub fn total_images(&self) -> usize {
        self.images.len()
    }

    /// Images with at least one box.
    pub fn positive_images(&self) -> usize {
        self.boxes.iter().map(|b| b.image_id.as_str()).collect::<BTreeSet<_>>().len()
    }

    pub fn negative_images(&self) -> usize {
        self.total_images() - self.positive_images()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads a dataset. `root` is the dataset directory (or, for the JSON
/// adapters, the annotation file itself). `split` defaults to `test`.
pub fn load(root: &Path, adapter: Adapter, split: Option<&str>) -> Result<DatasetIndex> {
    if !root.exists() {
        return Err(DatasetError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        });
    }
    let split = split.unwrap_or("test");
    match adapter {
        Adapter::CanonicalJson => canonical::load(root, split),
        Adapter::IconartVoc => voc::load(root, split),
        Adapter::Artdl => coco::load(root, split),
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

/// The annotation file of a JSON dataset: `root` itself when it is a file,
/// otherwise the first existing candidate inside it.
pub(crate) fn json_file(root: &Path, candidates: &[String]) -> Result<PathBuf> {
    if root.is_file() {
        return Ok(root.to_path_buf());
    }
    candidates.iter().map(|c| root.join(c)).find(|p| p.is_file()).ok_or_else(|| DatasetError::Io {
        path: root.join(&candidates[0]),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("none of {} found", candidates.join(", "))),
    })
}

/// 1-based line of the `n`-th (0-based) occurrence of the JSON key `key`
/// after the key `section`.
pub(crate) fn json_key_line(text: &str, section: &str, key: &str, n: usize) -> usize {
    let start = text.find(&format!("\"{section}\"")).unwrap_or(0);
    let needle = format!("\"{key}\"");
    let mut seen = 0;
    let mut from = start;
    while let Some(off) = text[from..].find(&needle) {
        let pos = from + off;
        from = pos + needle.len();
        if !text[from..].trim_start().starts_with(':') {
            continue;
        }
        if seen == n {
            return text[..pos].matches('\n').count() + 1;
        }
        seen += 1;
    }
    1
}
