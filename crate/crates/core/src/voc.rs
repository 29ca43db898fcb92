//! PASCAL VOC annotation ingestion.
//!
//! VOC stores 1-based inclusive integer pixel corners. They are converted to
//! continuous coordinates as `[xmin - 1, ymin - 1, xmax, ymax]`, so a box
//! covering pixels 1..=10 becomes `[0, 10]` with width 10.

use std::collections::BTreeSet;
use std::path::Path;

use crate::curation::{Annotation, ClassEntry, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct VocObject {
    pub name: String,
    pub bbox: BBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocImage {
    pub id: String,
    pub folder: Option<String>,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<VocObject>,
}

fn xml_err(path: &str, message: impl Into<String>) -> Error {
    Error::Xml {
        path: path.to_string(),
        message: message.into(),
    }
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(tag))
        .and_then(|c| c.text())
        .map(str::trim)
}

fn child_number(node: roxmltree::Node, tag: &str, path: &str) -> Result<f64> {
    let text = child_text(node, tag).ok_or_else(|| xml_err(path, format!("missing <{tag}>")))?;
    text.parse::<f64>()
        .map_err(|_| xml_err(path, format!("<{tag}> is not a number: {text:?}")))
}

/// Parse one VOC annotation document. `source` names the document in
/// error messages and supplies the image id when `<filename>` is absent.
pub fn parse_voc_xml(text: &str, source: &str) -> Result<VocImage> {
    let doc = roxmltree::Document::parse(text).map_err(|e| xml_err(source, e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(xml_err(source, "root element is not <annotation>"));
    }
    let id = child_text(root, "filename")
        .map(|f| {
            Path::new(f)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(f)
                .to_string()
        })
        .unwrap_or_else(|| {
            Path::new(source)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(source)
                .to_string()
        });
    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or_else(|| xml_err(source, "missing <size>"))?;
    let width = child_number(size, "width", source)?;
    let height = child_number(size, "height", source)?;

    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name")
            .ok_or_else(|| xml_err(source, "object without <name>"))?
            .to_string();
        let difficult = child_text(obj, "difficult").is_some_and(|d| d == "1");
        let bb = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| xml_err(source, format!("object {name} without <bndbox>")))?;
        let bbox = BBox::new(
            child_number(bb, "xmin", source)? - 1.0,
            child_number(bb, "ymin", source)? - 1.0,
            child_number(bb, "xmax", source)?,
            child_number(bb, "ymax", source)?,
        )?;
        objects.push(VocObject {
            name,
            bbox,
            difficult,
        });
    }
    Ok(VocImage {
        id,
        folder: child_text(root, "folder").map(str::to_string),
        width,
        height,
        objects,
    })
}

/// Build a dataset from parsed VOC images. With `class_names` the ids follow
/// that order and unlisted names are an error; otherwise the sorted set of
/// names found is used.
pub fn dataset_from_voc(images: &[VocImage], class_names: Option<&[String]>) -> Result<Dataset> {
    let names: Vec<String> = match class_names {
        Some(n) => n.to_vec(),
        None => images
            .iter()
            .flat_map(|i| i.objects.iter().map(|o| o.name.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let lookup = |name: &str| names.iter().position(|n| n == name).map(|p| p as u32);

    let mut unknown = BTreeSet::new();
    let mut records = Vec::with_capacity(images.len());
    for img in images {
        let mut annotations = Vec::with_capacity(img.objects.len());
        for o in &img.objects {
            match lookup(&o.name) {
                Some(class_id) => annotations.push(Annotation {
                    difficult: o.difficult,
                    ..Annotation::new(o.bbox, class_id)
                }),
                None => {
                    unknown.insert(o.name.clone());
                }
            }
        }
        records.push(ImageRecord {
            id: img.id.clone(),
            width: img.width,
            height: img.height,
            annotations,
            proposals: None,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "unknown class names: {unknown:?}"
        )));
    }
    let voc2007 = !images.is_empty()
        && images
            .iter()
            .all(|i| i.folder.as_deref() == Some("VOC2007"));
    let mut ds = Dataset {
        classes: names
            .into_iter()
            .enumerate()
            .map(|(id, name)| ClassEntry {
                id: id as u32,
                name,
            })
            .collect(),
        images: records,
        provenance: voc2007.then(|| "voc2007".to_string()),
    };
    ds.normalize()?;
    Ok(ds)
}

/// Read every `*.xml` file of a directory, in file-name order.
pub fn load_voc_dir(dir: impl AsRef<Path>, class_names: Option<&[String]>) -> Result<Dataset> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "xml"))
        .collect();
    paths.sort();
    let images = paths
        .iter()
        .map(|p| parse_voc_xml(&std::fs::read_to_string(p)?, &p.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    dataset_from_voc(&images, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"<annotation>
  <folder>VOC2007</folder>
  <filename>000005.jpg</filename>
  <size><width>500</width><height>375</height><depth>3</depth></size>
  <object><name>chair</name><pose>Rear</pose><truncated>0</truncated><difficult>0</difficult>
    <bndbox><xmin>263</xmin><ymin>211</ymin><xmax>324</xmax><ymax>339</ymax></bndbox></object>
  <object><name>chair</name><difficult>1</difficult>
    <bndbox><xmin>5</xmin><ymin>244</ymin><xmax>67</xmax><ymax>374</ymax></bndbox></object>
  <object><name>bottle</name><difficult>0</difficult>
    <bndbox><xmin>241</xmin><ymin>194</ymin><xmax>295</xmax><ymax>299</ymax></bndbox></object>
</annotation>"#;

    #[test]
    fn parses_voc_document() {
        let img = parse_voc_xml(SAMPLE, "000005.xml").unwrap();
        assert_eq!(img.id, "000005");
        assert_eq!((img.width, img.height), (500.0, 375.0));
        assert_eq!(img.objects.len(), 3);
        assert_eq!(img.objects[0].bbox.to_array(), [262.0, 210.0, 324.0, 339.0]);
        assert!(img.objects[1].difficult);

        let ds = dataset_from_voc(&[img], None).unwrap();
        assert_eq!(ds.class_name(0), Some("bottle"));
        assert_eq!(ds.class_name(1), Some("chair"));
        assert_eq!(ds.provenance.as_deref(), Some("voc2007"));
        assert!(ds.images[0].annotations[1].difficult);
    }

    #[test]
    fn fixed_class_list() {
        let img = parse_voc_xml(SAMPLE, "x.xml").unwrap();
        let names = vec!["chair".to_string()];
        assert!(dataset_from_voc(std::slice::from_ref(&img), Some(&names)).is_err());
        let names = vec!["chair".to_string(), "bottle".to_string()];
        let ds = dataset_from_voc(&[img], Some(&names)).unwrap();
        assert_eq!(ds.images[0].annotations[2].class_id, 1);
    }

    #[test]
    fn malformed_documents() {
        assert!(matches!(
            parse_voc_xml("<annotation>", "bad.xml"),
            Err(Error::Xml { .. })
        ));
        let no_size = "<annotation><filename>a.jpg</filename></annotation>";
        assert!(parse_voc_xml(no_size, "a.xml").is_err());
    }
}
