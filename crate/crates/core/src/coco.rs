//! COCO-style annotation JSON.
//!
//! Reads and writes `images[]`, `annotations[]` (with `bbox = [x, y, w, h]`)
//! and `categories[]`. Model confidences go in the `score` extension field;
//! `source` and `note` extensions preserve per-label provenance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{AnnotationSet, Category, CategoryId, ImageId, ImageInfo, Label, LabelId, Source};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: LabelId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: CategoryId,
    pub name: String,
}

/// Converts parsed COCO content into an [`AnnotationSet`] tagged with `source`.
///
/// Annotations without a `source` extension inherit the set's source; a
/// missing `score` means confidence 1.
pub fn from_coco(file: CocoFile, source: Source) -> Result<AnnotationSet> {
    let mut set = AnnotationSet::new(source);
    if !file.categories.is_empty() {
        set.set_categories(
            file.categories
                .into_iter()
                .map(|c| Category { id: c.id, name: c.name })
                .collect(),
        );
    }
    for img in file.images {
        set.add_image(ImageInfo {
            id: img.id,
            width: img.width,
            height: img.height,
            file_name: img.file_name,
        })?;
    }
    for ann in file.annotations {
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox::new(x, y, w, h).map_err(|source| Error::InvalidBox {
            annotation_id: ann.id,
            source,
        })?;
        let label_source = ann.source.unwrap_or(source);
        let confidence = ann.score.unwrap_or(1.0);
        set.push(Label {
            id: ann.id,
            image_id: ann.image_id,
            category_id: ann.category_id,
            bbox,
            source: label_source,
            confidence,
            note: ann.note,
        })?;
    }
    Ok(set)
}

pub fn to_coco(set: &AnnotationSet) -> CocoFile {
    CocoFile {
        images: set
            .images()
            .map(|i| CocoImage {
                id: i.id,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
            })
            .collect(),
        annotations: set
            .iter()
            .map(|l| CocoAnnotation {
                id: l.id,
                image_id: l.image_id,
                category_id: l.category_id,
                bbox: l.bbox.to_array(),
                area: l.bbox.area(),
                iscrowd: 0,
                score: (!l.source.is_human()).then_some(l.confidence),
                source: Some(l.source),
                note: l.note.clone(),
            })
            .collect(),
        categories: set
            .categories()
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    }
}

/// Parses COCO JSON text; `origin` is only used for error messages.
pub fn parse_coco(text: &str, origin: &Path, source: Source) -> Result<AnnotationSet> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, &e))?;
    from_coco(file, source)
}

pub fn load_coco(path: impl AsRef<Path>, source: Source) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco(&text, path, source)
}

pub fn coco_to_string(set: &AnnotationSet) -> String {
    serde_json::to_string_pretty(&to_coco(set)).expect("COCO structures always serialize")
}

pub fn save_coco(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, coco_to_string(set).as_bytes())
}
