//! Labels, datasets and their provenance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type ImageId = u64;
pub type LabelId = u64;
pub type CategoryId = u32;

/// Who produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Crowd,
    Expert,
    /// Detector trained on expert labels.
    ModelP,
    /// Detector trained on the crowd/expert consensus labels.
    ModelA,
}

impl Source {
    pub fn is_human(self) -> bool {
        matches!(self, Source::Crowd | Source::Expert)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Crowd => "crowd",
            Source::Expert => "expert",
            Source::ModelP => "model-p",
            Source::ModelA => "model-a",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crowd" => Ok(Source::Crowd),
            "expert" => Ok(Source::Expert),
            "model-p" => Ok(Source::ModelP),
            "model-a" => Ok(Source::ModelA),
            other => Err(Error::Config(format!("unknown label source `{other}`"))),
        }
    }
}

/// Identifies a label across sources; ids are only unique within one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelRef {
    pub source: Source,
    pub id: LabelId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub id: LabelId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub source: Source,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Label {
    /// A human label (confidence 1).
    pub fn human(id: LabelId, image_id: ImageId, category_id: CategoryId, bbox: BBox, source: Source) -> Self {
        debug_assert!(source.is_human());
        Label {
            id,
            image_id,
            category_id,
            bbox,
            source,
            confidence: 1.0,
            note: None,
        }
    }

    pub fn predicted(
        id: LabelId,
        image_id: ImageId,
        category_id: CategoryId,
        bbox: BBox,
        source: Source,
        confidence: f64,
    ) -> Self {
        Label {
            id,
            image_id,
            category_id,
            bbox,
            source,
            confidence,
            note: None,
        }
    }

    pub fn key(&self) -> LabelRef {
        LabelRef {
            source: self.source,
            id: self.id,
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidAnnotation {
                annotation_id: self.id,
                message: format!("confidence {} outside [0, 1]", self.confidence),
            });
        }
        if self.source.is_human() && self.confidence != 1.0 {
            return Err(Error::InvalidAnnotation {
                annotation_id: self.id,
                message: format!("{} label must have confidence 1.0, got {}", self.source, self.confidence),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

impl Category {
    pub fn default_profile() -> Vec<Category> {
        vec![Category {
            id: 1,
            name: "EDD".to_string(),
        }]
    }
}

/// Per-image label lists over an image table.
///
/// Every label's image exists in the table and label ids are unique within
/// the set. Iteration order is by image id, then insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SetRepr")]
pub struct AnnotationSet {
    source: Source,
    categories: Vec<Category>,
    images: BTreeMap<ImageId, ImageInfo>,
    labels: BTreeMap<ImageId, Vec<Label>>,
    #[serde(skip)]
    ids: BTreeSet<LabelId>,
}

#[derive(Deserialize)]
struct SetRepr {
    source: Source,
    categories: Vec<Category>,
    images: BTreeMap<ImageId, ImageInfo>,
    labels: BTreeMap<ImageId, Vec<Label>>,
}

impl TryFrom<SetRepr> for AnnotationSet {
    type Error = Error;

    fn try_from(r: SetRepr) -> Result<Self> {
        let mut set = AnnotationSet::new(r.source);
        set.categories = r.categories;
        for info in r.images.into_values() {
            set.add_image(info)?;
        }
        for l in r.labels.into_values().flatten() {
            set.push(l)?;
        }
        Ok(set)
    }
}

impl AnnotationSet {
    pub fn new(source: Source) -> Self {
        AnnotationSet {
            source,
            categories: Category::default_profile(),
            images: BTreeMap::new(),
            labels: BTreeMap::new(),
            ids: BTreeSet::new(),
        }
    }

    /// An empty set sharing `other`'s image table and categories.
    pub fn empty_like(other: &AnnotationSet, source: Source) -> Self {
        AnnotationSet {
            source,
            categories: other.categories.clone(),
            images: other.images.clone(),
            labels: BTreeMap::new(),
            ids: BTreeSet::new(),
        }
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn set_source(&mut self, source: Source) {
        self.source = source;
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn set_categories(&mut self, categories: Vec<Category>) {
        self.categories = categories;
    }

    pub fn add_image(&mut self, info: ImageInfo) -> Result<()> {
        if info.width == 0 || info.height == 0 {
            return Err(Error::InvalidImage {
                image_id: info.id,
                message: format!("non-positive size {}x{}", info.width, info.height),
            });
        }
        self.images.insert(info.id, info);
        Ok(())
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageInfo> {
        self.images.get(&id)
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageInfo> {
        self.images.values()
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        self.images.keys().copied().collect()
    }

    pub fn has_image(&self, id: ImageId) -> bool {
        self.images.contains_key(&id)
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn push(&mut self, label: Label) -> Result<()> {
        if !self.images.contains_key(&label.image_id) {
            return Err(Error::InvalidAnnotation {
                annotation_id: label.id,
                message: format!("references unknown image {}", label.image_id),
            });
        }
        label.validate()?;
        if !self.ids.insert(label.id) {
            return Err(Error::InvalidAnnotation {
                annotation_id: label.id,
                message: "duplicate label id".into(),
            });
        }
        self.labels.entry(label.image_id).or_default().push(label);
        Ok(())
    }

    /// Labels on one image, empty when none.
    pub fn labels(&self, image: ImageId) -> &[Label] {
        self.labels.get(&image).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Label> {
        self.labels.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains_id(&self, id: LabelId) -> bool {
        self.ids.contains(&id)
    }

    /// One past the largest label id in use (1 for an empty set).
    pub fn next_label_id(&self) -> LabelId {
        self.ids.last().map_or(1, |m| m + 1)
    }

    /// Drops `image` from the table along with its labels.
    pub fn remove_image(&mut self, image: ImageId) -> Option<(ImageInfo, Vec<Label>)> {
        let info = self.images.remove(&image)?;
        Some((info, self.take_labels(image)))
    }

    /// Removes and returns all labels of `image`; the image stays in the table.
    pub fn take_labels(&mut self, image: ImageId) -> Vec<Label> {
        let taken = self.labels.remove(&image).unwrap_or_default();
        for l in &taken {
            self.ids.remove(&l.id);
        }
        taken
    }

    /// Replaces the labels of `image` wholesale.
    pub fn replace_labels(&mut self, image: ImageId, labels: Vec<Label>) -> Result<()> {
        let old = self.take_labels(image);
        for l in labels {
            if let Err(e) = self.push(l) {
                // restore previous contents before surfacing the error
                self.take_labels(image);
                for o in old {
                    self.push(o).expect("previous labels were valid");
                }
                return Err(e);
            }
        }
        Ok(())
    }

    /// The set restricted to `images` (image table and labels).
    pub fn subset<'a>(&self, images: impl IntoIterator<Item = &'a ImageId>) -> AnnotationSet {
        let mut out = AnnotationSet {
            source: self.source,
            categories: self.categories.clone(),
            images: BTreeMap::new(),
            labels: BTreeMap::new(),
            ids: BTreeSet::new(),
        };
        for id in images {
            if let Some(info) = self.images.get(id) {
                out.images.insert(*id, info.clone());
                for l in self.labels(*id) {
                    out.ids.insert(l.id);
                    out.labels.entry(*id).or_default().push(l.clone());
                }
            }
        }
        out
    }

    /// Union of several sets with labels renumbered 1.. in (image, input order).
    ///
    /// Image tables are merged; the first set listing an image wins.
    pub fn merge_renumbered(source: Source, parts: &[&AnnotationSet]) -> Result<AnnotationSet> {
        let mut out = AnnotationSet::new(source);
        if let Some(first) = parts.first() {
            out.categories = first.categories.clone();
        }
        for p in parts {
            for info in p.images() {
                if !out.has_image(info.id) {
                    out.add_image(info.clone())?;
                }
            }
        }
        let mut next = 1;
        for image in out.image_ids() {
            for p in parts {
                for l in p.labels(image) {
                    let mut l = l.clone();
                    l.id = next;
                    next += 1;
                    out.push(l)?;
                }
            }
        }
        Ok(out)
    }

    /// Ids of images that carry at least one label.
    pub fn support(&self) -> BTreeSet<ImageId> {
        self.labels
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, _)| *k)
            .collect()
    }
}
