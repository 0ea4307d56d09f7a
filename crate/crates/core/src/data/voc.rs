//! PASCAL VOC XML annotation ingestion: per-image `<annotation>` files with
//! 1-based inclusive pixel corners, converted to normalized center form.

use super::{Annotation, DataError, DatasetIndex, ImageRecord, INDEX_FORMAT};
use crate::geometry::BBox;
use std::path::Path;

fn child_text<'a>(
    node: roxmltree::Node<'a, 'a>,
    name: &str,
    file: &str,
) -> Result<&'a str, DataError> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .and_then(|c| c.text())
        .map(str::trim)
        .ok_or_else(|| DataError::MissingElement { file: file.into(), element: name.into() })
}

fn parse_number<T: std::str::FromStr>(text: &str, element: &str, file: &str) -> Result<T, DataError> {
    text.parse().map_err(|_| DataError::BadValue {
        file: file.into(),
        element: element.into(),
        got: text.into(),
    })
}

/// Parse the annotation files listed in `image_set` (one image id per line)
/// from `annotation_dir`, resolving object names against `class_names`.
/// Difficult objects are flagged, not dropped; evaluation treats them as
/// neither matchable targets nor false-negative sources.
pub fn load_voc(
    annotation_dir: &Path,
    image_set: &Path,
    class_names: &[String],
) -> Result<DatasetIndex, DataError> {
    let listing = std::fs::read_to_string(image_set)?;
    let mut records = Vec::new();
    for id in listing.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let path = annotation_dir.join(format!("{id}.xml"));
        records.push(parse_annotation_file(&path, id, class_names)?);
    }
    let index = DatasetIndex {
        format: INDEX_FORMAT.into(),
        class_names: class_names.to_vec(),
        records,
    };
    index.validate()?;
    Ok(index)
}

fn parse_annotation_file(
    path: &Path,
    id: &str,
    class_names: &[String],
) -> Result<ImageRecord, DataError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let doc = roxmltree::Document::parse(&text)
        .map_err(|e| DataError::Xml { file: file.clone(), message: e.to_string() })?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(DataError::Xml {
            file,
            message: format!("root element is <{}>, expected <annotation>", root.tag_name().name()),
        });
    }

    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or_else(|| DataError::MissingElement { file: file.clone(), element: "size".into() })?;
    let width: u32 = parse_number(child_text(size, "width", &file)?, "width", &file)?;
    let height: u32 = parse_number(child_text(size, "height", &file)?, "height", &file)?;
    if width == 0 || height == 0 {
        return Err(DataError::Invalid(format!("{file}: zero image dimensions")));
    }

    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name", &file)?;
        let class_id = class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::UnknownClass { file: file.clone(), name: name.into() })?;
        let difficult = match obj.children().find(|c| c.has_tag_name("difficult")) {
            Some(d) => d.text().map(str::trim) == Some("1"),
            None => false,
        };
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| DataError::MissingElement { file: file.clone(), element: "bndbox".into() })?;
        let xmin: f64 = parse_number(child_text(bnd, "xmin", &file)?, "xmin", &file)?;
        let ymin: f64 = parse_number(child_text(bnd, "ymin", &file)?, "ymin", &file)?;
        let xmax: f64 = parse_number(child_text(bnd, "xmax", &file)?, "xmax", &file)?;
        let ymax: f64 = parse_number(child_text(bnd, "ymax", &file)?, "ymax", &file)?;
        if xmax < xmin || ymax < ymin {
            return Err(DataError::Invalid(format!("{file}: inverted bndbox corners")));
        }
        // 1-based inclusive pixel corners: pixel i spans [i-1, i).
        let (w, h) = (width as f64, height as f64);
        let bw = (xmax - xmin + 1.0) / w;
        let bh = (ymax - ymin + 1.0) / h;
        let cx = (xmin - 1.0 + xmax) / 2.0 / w;
        let cy = (ymin - 1.0 + ymax) / 2.0 / h;
        let bbox = BBox::new(cx.clamp(0.0, 1.0), cy.clamp(0.0, 1.0), bw.min(1.0), bh.min(1.0), class_id);
        objects.push(Annotation { bbox, difficult });
    }

    Ok(ImageRecord { id: id.into(), width, height, objects, file: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(dir: &Path, id: &str, body: &str) {
        let mut f = std::fs::File::create(dir.join(format!("{id}.xml"))).unwrap();
        f.write_all(body.as_bytes()).unwrap();
    }

    fn classes() -> Vec<String> {
        vec!["cat".into(), "dog".into()]
    }

    fn setup(body: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "img1", body);
        let set = dir.path().join("set.txt");
        std::fs::write(&set, "img1\n").unwrap();
        (dir, set)
    }

    #[test]
    fn full_image_box_parses_within_one_pixel() {
        let body = r#"<annotation><size><width>100</width><height>50</height></size>
            <object><name>cat</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>100</xmax><ymax>50</ymax></bndbox></object>
            </annotation>"#;
        let (dir, set) = setup(body);
        let idx = load_voc(dir.path(), &set, &classes()).unwrap();
        let b = idx.records[0].objects[0].bbox;
        assert!((b.w - 1.0).abs() < 1.0 / 100.0);
        assert!((b.h - 1.0).abs() < 1.0 / 50.0);
        assert!((b.cx - 0.5).abs() < 1.0 / 100.0);
    }

    #[test]
    fn difficult_flag_is_kept() {
        let body = r#"<annotation><size><width>80</width><height>80</height></size>
            <object><name>dog</name><difficult>1</difficult>
            <bndbox><xmin>10</xmin><ymin>10</ymin><xmax>40</xmax><ymax>40</ymax></bndbox></object>
            </annotation>"#;
        let (dir, set) = setup(body);
        let idx = load_voc(dir.path(), &set, &classes()).unwrap();
        assert!(idx.records[0].objects[0].difficult);
    }

    #[test]
    fn malformed_xml_names_the_file() {
        let (dir, set) = setup("<annotation><size>");
        let err = load_voc(dir.path(), &set, &classes()).unwrap_err();
        match err {
            DataError::Xml { file, .. } => assert!(file.contains("img1.xml")),
            other => panic!("expected Xml error, got {other:?}"),
        }
    }

    #[test]
    fn missing_bndbox_is_named() {
        let body = r#"<annotation><size><width>80</width><height>80</height></size>
            <object><name>cat</name></object></annotation>"#;
        let (dir, set) = setup(body);
        let err = load_voc(dir.path(), &set, &classes()).unwrap_err();
        match err {
            DataError::MissingElement { element, .. } => assert_eq!(element, "bndbox"),
            other => panic!("expected MissingElement, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_is_listed() {
        let body = r#"<annotation><size><width>80</width><height>80</height></size>
            <object><name>zebra</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object>
            </annotation>"#;
        let (dir, set) = setup(body);
        let err = load_voc(dir.path(), &set, &classes()).unwrap_err();
        match err {
            DataError::UnknownClass { name, .. } => assert_eq!(name, "zebra"),
            other => panic!("expected UnknownClass, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_coordinate_is_reported() {
        let body = r#"<annotation><size><width>80</width><height>80</height></size>
            <object><name>cat</name><bndbox><xmin>abc</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object>
            </annotation>"#;
        let (dir, set) = setup(body);
        let err = load_voc(dir.path(), &set, &classes()).unwrap_err();
        match err {
            DataError::BadValue { element, got, .. } => {
                assert_eq!(element, "xmin");
                assert_eq!(got, "abc");
            }
            other => panic!("expected BadValue, got {other:?}"),
        }
    }
}
