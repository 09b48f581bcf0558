use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use super::DatasetIndex;
use crate::localization::{size_bucket, SizeBucket, SizeCutoffs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassShare {
    pub class: String,
    pub boxes: usize,
    /// Fraction of all boxes.
    pub box_share: f64,
    pub images: usize,
    /// Fraction of all images that contain the class.
    pub image_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    /// Sorted by box count, descending; ties by name.
    pub classes: Vec<ClassShare>,
}

impl ClassStats {
    pub fn get(&self, class: &str) -> Option<&ClassShare> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "boxes", "box_share", "images", "image_share"]).expect("in-memory write");
        for c in &self.classes {
            w.write_record([
                c.class.clone(),
                c.boxes.to_string(),
                format!("{:.6}", c.box_share),
                c.images.to_string(),
                format!("{:.6}", c.image_share),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<28} {:>7} {:>9} {:>7} {:>9}\n", "class", "boxes", "% boxes", "images", "% images");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<28} {:>7} {:>8.2}% {:>7} {:>8.2}%",
                c.class,
                c.boxes,
                c.box_share * 100.0,
                c.images,
                c.image_share * 100.0
            );
        }
        out
    }
}

fn share(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

/// Per-class box and image counts. Declared classes without boxes are
/// listed with zero counts.
pub fn class_stats(index: &DatasetIndex) -> ClassStats {
    let mut boxes: BTreeMap<&str, usize> = index.classes().iter().map(|c| (c.as_str(), 0)).collect();
    let mut images: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for b in index.boxes() {
        *boxes.entry(b.class_label.as_str()).or_default() += 1;
        images.entry(b.class_label.as_str()).or_default().insert(b.image_id.as_str());
    }
    let total_boxes = index.boxes().len();
    let total_images = index.total_images();
    let mut classes: Vec<ClassShare> = boxes
        .into_iter()
        .map(|(class, n)| {
            let imgs = images.get(class).map_or(0, BTreeSet::len);
            ClassShare {
                class: class.to_string(),
                boxes: n,
                box_share: share(n, total_boxes),
                images: imgs,
                image_share: share(imgs, total_images),
            }
        })
        .collect();
    classes.sort_by(|a, b| b.boxes.cmp(&a.boxes).then_with(|| a.class.cmp(&b.class)));
    ClassStats { classes }
}

/// Box counts per size bucket, indexed by [`SizeBucket::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeDistribution {
    pub counts: [usize; 3],
    pub shares: [f64; 3],
}

impl SizeDistribution {
    pub fn share(&self, bucket: SizeBucket) -> f64 {
        self.shares[bucket.index()]
    }
}

/// Shares of boxes per size bucket; all zeros for a dataset without boxes.
pub fn size_distribution(index: &DatasetIndex, cutoffs: &SizeCutoffs) -> SizeDistribution {
    let mut counts = [0usize; 3];
    for b in index.boxes() {
        let img = index.image(&b.image_id).expect("boxes reference indexed images");
        counts[size_bucket(&b.bbox, img.width, img.height, cutoffs).index()] += 1;
    }
    let total: usize = counts.iter().sum();
    SizeDistribution { counts, shares: counts.map(|c| share(c, total)) }
}

const TABLE_HEADER: [&str; 6] = ["dataset", "images", "positive", "negative", "boxes", "classes"];

fn table_row(index: &DatasetIndex) -> [String; 6] {
    [
        index.name.clone(),
        index.total_images().to_string(),
        index.positive_images().to_string(),
        index.negative_images().to_string(),
        index.boxes().len().to_string(),
        index.classes().len().to_string(),
    ]
}

/// One row per dataset: totals, positive and negative images, boxes, classes.
pub fn dataset_table(indices: &[&DatasetIndex]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>9} {:>9} {:>8} {:>8}\n",
        TABLE_HEADER[0], TABLE_HEADER[1], TABLE_HEADER[2], TABLE_HEADER[3], TABLE_HEADER[4], TABLE_HEADER[5]
    );
    for idx in indices {
        let r = table_row(idx);
        let _ = writeln!(out, "{:<16} {:>8} {:>9} {:>9} {:>8} {:>8}", r[0], r[1], r[2], r[3], r[4], r[5]);
    }
    out
}

pub fn dataset_table_csv(indices: &[&DatasetIndex]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER).expect("in-memory write");
    for idx in indices {
        w.write_record(table_row(idx)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
