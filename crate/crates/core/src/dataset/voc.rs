//! Pascal-VOC layout: `ImageSets/Main/{split}.txt` lists image ids,
//! `Annotations/{id}.xml` holds the size and objects, `JPEGImages/{id}.jpg`
//! the pixels. VOC boxes are 1-based and inclusive.

use std::path::Path;

use roxmltree::{Document, Node};

use super::{read_text, DatasetError, DatasetIndex, ImageRecord, RawBox, Result};

pub(super) fn load(root: &Path, split: &str) -> Result<DatasetIndex> {
    let list_path = root.join("ImageSets").join("Main").join(format!("{split}.txt"));
    let list = read_text(&list_path)?;
    let mut images = Vec::new();
    let mut boxes = Vec::new();
    for line in list.lines() {
        let Some(id) = line.split_whitespace().next() else { continue };
        let xml_path = root.join("Annotations").join(format!("{id}.xml"));
        let text = read_text(&xml_path)?;
        let (image, mut found) = parse_annotation(&text, &xml_path, id)?;
        images.push(image);
        boxes.append(&mut found);
    }
    let name = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "voc".into());
    DatasetIndex::build(name, Some(split.to_string()), images, boxes, None)
}

fn child<'a>(node: Node<'a, 'a>, name: &str) -> Option<Node<'a, 'a>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn parse_annotation(text: &str, path: &Path, id: &str) -> Result<(ImageRecord, Vec<RawBox>)> {
    let doc = Document::parse(text).map_err(|e| DatasetError::Malformed {
        path: path.to_path_buf(),
        line: e.pos().row as usize,
        message: e.to_string(),
    })?;
    let line_of = |n: Node| doc.text_pos_at(n.range().start).row as usize;
    let malformed = |n: Node, message: String| DatasetError::Malformed { path: path.to_path_buf(), line: line_of(n), message };
    let number = |parent: Node, name: &str| -> Result<i64> {
        let c = child(parent, name).ok_or_else(|| malformed(parent, format!("missing <{name}>")))?;
        let t = c.text().unwrap_or("").trim();
        // Some VOC exports write integral coordinates as floats.
        t.parse::<i64>()
            .ok()
            .or_else(|| t.parse::<f64>().ok().filter(|v| v.fract() == 0.0).map(|v| v as i64))
            .ok_or_else(|| malformed(c, format!("<{name}> is not an integer: `{t}`")))
    };
    let root = doc.root_element();
    let size = child(root, "size").ok_or_else(|| malformed(root, "missing <size>".into()))?;
    let (width, height) = (number(size, "width")?, number(size, "height")?);
    if width <= 0 || height <= 0 || width > u32::MAX as i64 || height > u32::MAX as i64 {
        return Err(malformed(size, format!("invalid image size {width}x{height}")));
    }
    let file = child(root, "filename")
        .and_then(|n| n.text())
        .map(|f| format!("JPEGImages/{}", f.trim()))
        .unwrap_or_else(|| format!("JPEGImages/{id}.jpg"));
    let image = ImageRecord { id: id.to_string(), file, width: width as u32, height: height as u32 };
    let mut boxes = Vec::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let name = child(obj, "name").and_then(|n| n.text()).ok_or_else(|| malformed(obj, "object without <name>".into()))?;
        let bb = child(obj, "bndbox").ok_or_else(|| malformed(obj, "object without <bndbox>".into()))?;
        let (x0, y0) = (number(bb, "xmin")?, number(bb, "ymin")?);
        let (x1, y1) = (number(bb, "xmax")?, number(bb, "ymax")?);
        boxes.push(RawBox {
            image_id: id.to_string(),
            class: name.to_string(),
            bbox: (x0 - 1, y0 - 1, x1, y1),
            origin: (path.to_path_buf(), line_of(bb)),
        });
    }
    Ok((image, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::BoundingBox;

    #[test]
    fn converts_one_based_inclusive_boxes() {
        let xml = r#"<annotation>
  <filename>a.jpg</filename>
  <size><width>100</width><height>50</height><depth>3</depth></size>
  <object><name>Saint_Sebastien</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>100</xmax><ymax>50</ymax></bndbox></object>
</annotation>"#;
        let (img, boxes) = parse_annotation(xml, Path::new("a.xml"), "a").unwrap();
        assert_eq!((img.width, img.height), (100, 50));
        let idx = DatasetIndex::build("t".into(), None, vec![img], boxes, None).unwrap();
        assert_eq!(idx.boxes()[0].bbox, BoundingBox::full(100, 50).unwrap());
        assert_eq!(idx.boxes()[0].class_label, "saint sebastien");
    }

    #[test]
    fn bad_coordinate_reports_line() {
        let xml = "<annotation>\n<size><width>10</width><height>10</height></size>\n<object><name>x</name>\n<bndbox><xmin>a</xmin><ymin>1</ymin><xmax>2</xmax><ymax>2</ymax></bndbox></object>\n</annotation>";
        let e = parse_annotation(xml, Path::new("a.xml"), "a").unwrap_err().to_string();
        assert!(e.starts_with("a.xml:4:"), "{e}");
    }
}
