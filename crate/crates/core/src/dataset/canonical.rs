//! The canonical JSON document:
//!
//! ```json
//! {
//!   "name": "iconart",
//!   "split": "test",
//!   "classes": ["angel", "beard"],
//!   "images": [{"id": "img1", "file": "JPEGImages/img1.jpg", "width": 640, "height": 480}],
//!   "instances": [{"image_id": "img1", "class": "angel", "box": [10, 20, 110, 220]}]
//! }
//! ```
//!
//! Boxes are `[x_min, y_min, x_max, y_max]` in pixels, max edges exclusive.
//! Every field is optional; an empty file is an empty dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{json_file, json_key_line, read_text, DatasetError, DatasetIndex, ImageRecord, RawBox, Result};

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<String>>,
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    instances: Vec<Instance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Instance {
    image_id: String,
    class: String,
    #[serde(rename = "box")]
    bbox: [i64; 4],
}

pub(super) fn load(root: &Path, split: &str) -> Result<DatasetIndex> {
    let path = json_file(root, &[format!("{split}.json"), "dataset.json".into()])?;
    let text = read_text(&path)?;
    let fallback = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse(&text, &path, &fallback)
}

fn parse(text: &str, path: &Path, fallback_name: &str) -> Result<DatasetIndex> {
    let doc: Document = if text.trim().is_empty() {
        Document::default()
    } else {
        serde_json::from_str(text)
            .map_err(|e| DatasetError::Malformed { path: path.to_path_buf(), line: e.line(), message: e.to_string() })?
    };
    let raw = doc
        .instances
        .into_iter()
        .enumerate()
        .map(|(i, inst)| {
            let [x0, y0, x1, y1] = inst.bbox;
            RawBox {
                image_id: inst.image_id,
                class: inst.class,
                bbox: (x0, y0, x1, y1),
                origin: (path.to_path_buf(), json_key_line(text, "instances", "box", i)),
            }
        })
        .collect();
    DatasetIndex::build(doc.name.unwrap_or_else(|| fallback_name.to_string()), doc.split, doc.images, raw, doc.classes)
}

/// Parses a canonical document from a string. `path` is used in errors.
pub fn from_canonical_json(text: &str, path: &Path) -> Result<DatasetIndex> {
    parse(text, path, "dataset")
}

/// Serializes an index; loading the output yields an equal index.
pub fn to_canonical_json(index: &DatasetIndex) -> String {
    let doc = Document {
        name: Some(index.name.clone()),
        split: index.split.clone(),
        classes: Some(index.classes().to_vec()),
        images: index.images().to_vec(),
        instances: index
            .boxes()
            .iter()
            .map(|b| Instance {
                image_id: b.image_id.clone(),
                class: b.class_label.clone(),
                bbox: [b.bbox.x_min as i64, b.bbox.y_min as i64, b.bbox.x_max as i64, b.bbox.y_max as i64],
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
    s.push('\n');
    s
}
