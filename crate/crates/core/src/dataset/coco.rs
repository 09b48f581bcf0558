//! COCO-style detection JSON: `images` (`id`, `file_name`, `width`,
//! `height`), `annotations` (`image_id`, `category_id`, `bbox` as
//! `[x, y, w, h]`) and `categories` (`id`, `name`). Box edges are rounded to
//! the nearest pixel.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{json_file, json_key_line, read_text, DatasetError, DatasetIndex, ImageRecord, RawBox, Result};

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Id {
    Int(i64),
    Str(String),
}

impl Id {
    fn key(&self) -> String {
        match self {
            Id::Int(i) => i.to_string(),
            Id::Str(s) => s.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct Document {
    images: Vec<Image>,
    #[serde(default)]
    annotations: Vec<Annotation>,
    categories: Vec<Category>,
}

#[derive(Debug, Deserialize)]
struct Image {
    id: Id,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct Annotation {
    image_id: Id,
    category_id: Id,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct Category {
    id: Id,
    name: String,
}

pub(super) fn load(root: &Path, split: &str) -> Result<DatasetIndex> {
    let path = json_file(
        root,
        &[format!("{split}.json"), format!("annotations/{split}.json"), "annotations.json".into()],
    )?;
    let text = read_text(&path)?;
    let doc: Document = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Malformed { path: path.clone(), line: e.line(), message: e.to_string() })?;
    let categories: BTreeMap<String, String> = doc.categories.iter().map(|c| (c.id.key(), c.name.clone())).collect();
    let mut raw = Vec::with_capacity(doc.annotations.len());
    for (i, a) in doc.annotations.iter().enumerate() {
        let line = json_key_line(&text, "annotations", "bbox", i);
        let class = categories.get(&a.category_id.key()).ok_or_else(|| DatasetError::Malformed {
            path: path.clone(),
            line,
            message: format!("unknown category id {}", a.category_id.key()),
        })?;
        let [x, y, w, h] = a.bbox;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(DatasetError::Malformed { path: path.clone(), line, message: "non-finite bbox".into() });
        }
        raw.push(RawBox {
            image_id: a.image_id.key(),
            class: class.clone(),
            bbox: (x.round() as i64, y.round() as i64, (x + w).round() as i64, (y + h).round() as i64),
            origin: (path.clone(), line),
        });
    }
    let images = doc
        .images
        .into_iter()
        .map(|i| ImageRecord { id: i.id.key(), file: i.file_name, width: i.width, height: i.height })
        .collect();
    let name = root
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artdl".into());
    DatasetIndex::build(name, Some(split.to_string()), images, raw, Some(categories.into_values().collect()))
}
