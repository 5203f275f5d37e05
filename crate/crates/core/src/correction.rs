//! Instance-level correction of the crowd labels left after the active loop.
//!
//! Gray and pink regions are fixed automatically from the expert-trained
//! detector, green labels that merely enclose a predicted box are dropped as
//! box-in-box noise, and everything still red or green goes to a reviewer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, overlap_fraction, BBox};
use crate::ledger::{Action, Actor, BudgetLedger};
use crate::lsm::{partition_image, LsmMode, Region, RegionPartition};
use crate::model::{AnnotationSet, ImageId, Label, LabelRef, Source};

pub const DEFAULT_GAMMA: f64 = 0.8;
/// Minimum IoU for a prediction to be offered as a suggestion.
pub const SUGGESTION_IOU: f64 = 0.1;

/// Where box-in-box witnesses may come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BibMode {
    /// Any prediction of either detector.
    #[default]
    Formula,
    /// Any label in the gray, pink or red regions.
    Prose,
}

impl std::str::FromStr for BibMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "formula" => Ok(BibMode::Formula),
            "prose" => Ok(BibMode::Prose),
            other => Err(Error::Config(format!("unknown bib mode `{other}`"))),
        }
    }
}

/// A green label dropped as box-in-box noise and the box that exposed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BibRemoval {
    pub green: Label,
    pub witness: Label,
}

/// Splits green labels into retained ones and box-in-box removals.
///
/// A green label goes when some same-category witness `b*` has more than
/// `gamma` of its own area inside it. The first such witness (input order) is recorded.
pub fn bib_filter(greens: &[Label], witnesses: &[Label], gamma: f64) -> (Vec<Label>, Vec<BibRemoval>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for g in greens {
        let hit = witnesses
            .iter()
            .find(|w| w.key() != g.key() && w.category_id == g.category_id && overlap_fraction(&g.bbox, &w.bbox) > gamma);
        match hit {
            Some(w) => removed.push(BibRemoval {
                green: g.clone(),
                witness: w.clone(),
            }),
            None => kept.push(g.clone()),
        }
    }
    (kept, removed)
}

/// Witness candidates for [`bib_filter`] on one image.
pub fn bib_witnesses(partition: &RegionPartition, model_p: &[Label], model_a: &[Label], mode: BibMode) -> Vec<Label> {
    match mode {
        BibMode::Formula => model_p.iter().chain(model_a).cloned().collect(),
        BibMode::Prose => partition
            .gray
            .iter()
            .flat_map(|c| c.members.iter())
            .chain(&partition.pink)
            .chain(&partition.red)
            .cloned()
            .collect(),
    }
}

/// Counters from [`auto_correct`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoStats {
    /// Gray crowd labels whose box was replaced by the matched model-P box.
    pub replaced: usize,
    /// Gray crowd labels kept because their cluster had no model-P box.
    pub kept: usize,
    /// Model-P boxes added from gray clusters without a crowd label.
    pub added_gray: usize,
    pub added_pink: usize,
}

fn cleaned(mut l: Label, id: u64, bbox: BBox, note: &str) -> Label {
    l.id = id;
    l.bbox = bbox;
    l.source = Source::Crowd;
    l.confidence = 1.0;
    l.note = Some(note.to_string());
    l
}

/// Applies the automatic part of the correction.
///
/// Output covers the images of `crowd`. Red and green labels are left out;
/// they come back through the review queue. Crowd label ids are kept, added
/// labels get fresh ids after the largest crowd id.
pub fn auto_correct(crowd: &AnnotationSet, partitions: &BTreeMap<ImageId, RegionPartition>) -> Result<(AnnotationSet, AutoStats)> {
    let mut out = AnnotationSet::empty_like(crowd, Source::Crowd);
    let mut stats = AutoStats::default();
    let mut next_id = crowd.next_label_id();
    let mut fresh = || {
        let id = next_id;
        next_id += 1;
        id
    };
    for image in crowd.image_ids() {
        let Some(part) = partitions.get(&image) else { continue };
        let mut labels = Vec::new();
        for cluster in &part.gray {
            let c = cluster.member(Source::Crowd);
            let p = cluster.member(Source::ModelP);
            match (c, p) {
                (Some(c), Some(p)) => {
                    labels.push(cleaned(c.clone(), c.id, p.bbox, "auto:replaced"));
                    stats.replaced += 1;
                }
                (Some(c), None) => {
                    labels.push(cleaned(c.clone(), c.id, c.bbox, "gray:kept"));
                    stats.kept += 1;
                }
                (None, Some(p)) => {
                    labels.push(cleaned(p.clone(), fresh(), p.bbox, "auto:added-gray"));
                    stats.added_gray += 1;
                }
                (None, None) => {}
            }
        }
        for p in &part.pink {
            labels.push(cleaned(p.clone(), fresh(), p.bbox, "auto:added-pink"));
            stats.added_pink += 1;
        }
        out.replace_labels(image, labels)?;
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Edited,
    Rejected,
    AddedMissing,
}

/// A reviewer's verdict on one flagged label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Decision {
    /// Keep a box: the suggestion at this index, or the flagged box itself when absent.
    Accept {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        suggestion: Option<usize>,
    },
    /// Replace the flagged box.
    Edit { bbox: BBox },
    /// The flagged box is wrong and nothing replaces it.
    Reject,
    /// An object the flagged label does not cover; the flagged label keeps its default fate.
    AddMissing { bbox: BBox },
}

impl Decision {
    pub fn status(&self) -> ReviewStatus {
        match self {
            Decision::Accept { .. } => ReviewStatus::Accepted,
            Decision::Edit { .. } => ReviewStatus::Edited,
            Decision::Reject => ReviewStatus::Rejected,
            Decision::AddMissing { .. } => ReviewStatus::AddedMissing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: u64,
    pub image_id: ImageId,
    pub region: Region,
    /// A crowd label (green) or a model-A prediction (red).
    pub flagged: Label,
    /// Predictions overlapping the flagged box, by confidence descending.
    pub suggestions: Vec<Label>,
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    /// Final box, when the decision produces one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<BBox>,
}

impl ReviewItem {
    pub fn is_resolved(&self) -> bool {
        self.status != ReviewStatus::Pending
    }

    /// Checks a decision against this item without applying it.
    pub fn check(&self, decision: &Decision) -> Result<()> {
        if let Decision::Accept { suggestion: Some(i) } = decision {
            if *i >= self.suggestions.len() {
                return Err(Error::InvalidDecision {
                    item_id: self.item_id,
                    message: format!("no suggestion {i} (item has {})", self.suggestions.len()),
                });
            }
        }
        Ok(())
    }

    /// Records `decision`, replacing any earlier one.
    pub fn resolve(&mut self, decision: Decision) -> Result<()> {
        self.check(&decision)?;
        self.resolution = match &decision {
            Decision::Accept { suggestion: Some(i) } => Some(self.suggestions[*i].bbox),
            Decision::Accept { suggestion: None } => Some(self.flagged.bbox),
            Decision::Edit { bbox } | Decision::AddMissing { bbox } => Some(*bbox),
            Decision::Reject => None,
        };
        self.status = decision.status();
        self.decision = Some(decision);
        Ok(())
    }
}

/// One review item per red and green label, ordered by image then by position on the image.
///
/// `first_item_id` numbers the items; suggestions are all predictions on
/// the image (except the flagged one) with IoU above [`SUGGESTION_IOU`].
pub fn build_review_queue(
    image: ImageId,
    red: &[Label],
    greens: &[Label],
    model_p: &[Label],
    model_a: &[Label],
    first_item_id: u64,
) -> Vec<ReviewItem> {
    let mut flagged: Vec<(Region, &Label)> = red
        .iter()
        .map(|l| (Region::Red, l))
        .chain(greens.iter().map(|l| (Region::Green, l)))
        .collect();
    flagged.sort_by(|(ra, a), (rb, b)| {
        let pa = (a.bbox.y(), a.bbox.x());
        let pb = (b.bbox.y(), b.bbox.x());
        pa.partial_cmp(&pb)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ra.cmp(rb))
            .then(a.id.cmp(&b.id))
    });
    flagged
        .into_iter()
        .enumerate()
        .map(|(n, (region, f))| {
            let mut suggestions: Vec<Label> = model_p
                .iter()
                .chain(model_a)
                .filter(|s| s.key() != f.key() && iou(&s.bbox, &f.bbox) > SUGGESTION_IOU)
                .cloned()
                .collect();
            suggestions.sort_by(|a, b| {
                b.confidence
                    .partial_cmp(&a.confidence)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.key().cmp(&b.key()))
            });
            ReviewItem {
                item_id: first_item_id + n as u64,
                image_id: image,
                region,
                flagged: f.clone(),
                suggestions,
                status: ReviewStatus::Pending,
                decision: None,
                resolution: None,
            }
        })
        .collect()
}

/// Combines the auto-corrected set with resolved review items.
///
/// A green label stays unless rejected or edited; a red box enters only when
/// accepted or edited. Labels from the queue get fresh ids after the largest
/// id of `corrected`, in queue order.
pub fn apply_decisions(corrected: &AnnotationSet, queue: &[ReviewItem]) -> Result<AnnotationSet> {
    let pending: Vec<u64> = queue.iter().filter(|i| !i.is_resolved()).map(|i| i.item_id).collect();
    if !pending.is_empty() {
        return Err(Error::Unresolved(pending));
    }
    let mut out = corrected.clone();
    let mut next_id = corrected.next_label_id();
    for item in queue {
        let decision = item.decision.as_ref().ok_or(Error::Unresolved(vec![item.item_id]))?;
        let mut boxes: Vec<(BBox, &str)> = Vec::new();
        let default_kept = item.region == Region::Green;
        match decision {
            Decision::Accept { suggestion } => {
                let b = match suggestion {
                    Some(i) => item.suggestions.get(*i).map(|s| s.bbox).ok_or_else(|| Error::InvalidDecision {
                        item_id: item.item_id,
                        message: format!("no suggestion {i}"),
                    })?,
                    None => item.flagged.bbox,
                };
                boxes.push((b, "review:accepted"));
            }
            Decision::Edit { bbox } => boxes.push((*bbox, "review:edited")),
            Decision::Reject => {}
            Decision::AddMissing { bbox } => {
                if default_kept {
                    boxes.push((item.flagged.bbox, "review:kept"));
                }
                boxes.push((*bbox, "review:added-missing"));
            }
        }
        if !out.has_image(item.image_id) {
            return Err(Error::MissingImage(item.image_id));
        }
        for (b, note) in boxes {
            out.push(cleaned(item.flagged.clone(), next_id, b, note))?;
            next_id += 1;
        }
    }
    Ok(out)
}

/// One expert review charge per resolved item.
pub fn charge_reviews(ledger: &mut BudgetLedger, queue: &[ReviewItem]) {
    for item in queue.iter().filter(|i| i.is_resolved()) {
        ledger.charge(Actor::Expert, Action::ReviewCorrect, item.image_id, 1);
    }
}

/// Resolves every item from the ground truth, the way a careful expert would.
///
/// Per image, truths already covered (IoU >= 0.5) by the auto-corrected
/// labels are off limits. Each item then claims the uncovered truth it
/// overlaps most (IoU >= 0.1): the box is accepted when it or a suggestion
/// already fits that truth (IoU >= 0.9), edited to the truth otherwise.
/// Items with nothing left to claim are rejected.
pub fn truth_oracle_decisions(corrected: &AnnotationSet, queue: &[ReviewItem], truth: &AnnotationSet) -> Vec<(u64, Decision)> {
    const CLAIM_IOU: f64 = 0.1;
    const COVER_IOU: f64 = 0.5;
    const FIT_IOU: f64 = 0.9;
    let mut covered: BTreeMap<ImageId, BTreeSet<u64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(queue.len());
    for item in queue {
        let truths = truth.labels(item.image_id);
        let taken = covered.entry(item.image_id).or_insert_with(|| {
            let mut taken = BTreeSet::new();
            for l in corrected.labels(item.image_id) {
                let best = truths
                    .iter()
                    .filter(|t| t.category_id == l.category_id && !taken.contains(&t.id))
                    .map(|t| (iou(&t.bbox, &l.bbox), t.id))
                    .filter(|(v, _)| *v >= COVER_IOU)
                    .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
                if let Some((_, id)) = best {
                    taken.insert(id);
                }
            }
            taken
        });
        let f = &item.flagged;
        let claim = truths
            .iter()
            .filter(|t| t.category_id == f.category_id && !taken.contains(&t.id))
            .map(|t| (iou(&t.bbox, &f.bbox), t))
            .filter(|(v, _)| *v >= CLAIM_IOU)
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.id.cmp(&a.1.id)));
        let decision = match claim {
            None => Decision::Reject,
            Some((v, t)) => {
                taken.insert(t.id);
                if v >= FIT_IOU {
                    Decision::Accept { suggestion: None }
                } else if let Some(i) = item.suggestions.iter().position(|s| iou(&s.bbox, &t.bbox) >= FIT_IOU) {
                    Decision::Accept { suggestion: Some(i) }
                } else {
                    Decision::Edit { bbox: t.bbox }
                }
            }
        };
        out.push((item.item_id, decision));
    }
    out
}

/// Settings of the correction step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub iou_threshold: f64,
    pub gamma: f64,
    pub mode: LsmMode,
    pub bib_mode: BibMode,
    /// Turns the box-in-box filter off (queue-size ablation).
    pub bib_enabled: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            iou_threshold: crate::lsm::DEFAULT_MATCH_IOU,
            gamma: DEFAULT_GAMMA,
            mode: LsmMode::Dual,
            bib_mode: BibMode::Formula,
            bib_enabled: true,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("iou threshold", self.iou_threshold), ("gamma", self.gamma)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Per-region counts and what happened to them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub images: usize,
    pub crowd_labels: usize,
    pub gray_clusters: usize,
    pub gray_crowd_labels: usize,
    pub pink: usize,
    pub red: usize,
    pub green: usize,
    pub auto: AutoStats,
    pub bib_removed: usize,
    pub queue_size: usize,
    /// Queue size had the box-in-box filter been off.
    pub queue_size_without_bib: usize,
    pub resolved: BTreeMap<ReviewStatus, usize>,
}

impl CorrectionReport {
    pub fn record_resolutions(&mut self, queue: &[ReviewItem]) {
        self.resolved.clear();
        for item in queue.iter().filter(|i| i.is_resolved()) {
            *self.resolved.entry(item.status).or_default() += 1;
        }
    }
}

/// Everything the correction step produces before review.
#[derive(Debug, Clone)]
pub struct CorrectionOutcome {
    pub corrected: AnnotationSet,
    pub queue: Vec<ReviewItem>,
    pub removed: Vec<BibRemoval>,
    pub partitions: BTreeMap<ImageId, RegionPartition>,
    pub report: CorrectionReport,
}

/// Partitions, filters, auto-corrects and queues the crowd labels of `crowd`.
///
/// `model_p` and `model_a` are the final detectors' predictions on the same
/// images; `model_a` is ignored in single-model mode.
pub fn run_correction(
    crowd: &AnnotationSet,
    model_p: &AnnotationSet,
    model_a: &AnnotationSet,
    config: &CorrectionConfig,
) -> Result<CorrectionOutcome> {
    config.validate()?;
    let mut partitions = BTreeMap::new();
    let mut queue = Vec::new();
    let mut removed = Vec::new();
    let mut report = CorrectionReport {
        images: crowd.num_images(),
        crowd_labels: crowd.len(),
        ..CorrectionReport::default()
    };
    for image in crowd.image_ids() {
        let c = crowd.labels(image);
        let p = model_p.labels(image);
        let a = match config.mode {
            LsmMode::Dual => model_a.labels(image),
            LsmMode::Single => &[],
        };
        let part = partition_image(c, p, a, config.iou_threshold, config.mode);
        report.gray_clusters += part.gray.len();
        report.gray_crowd_labels += part.gray.iter().filter(|g| g.member(Source::Crowd).is_some()).count();
        report.pink += part.pink.len();
        report.red += part.red.len();
        report.green += part.green.len();
        report.queue_size_without_bib += part.red.len() + part.green.len();

        let (greens, gone) = if config.bib_enabled {
            let witnesses = bib_witnesses(&part, p, a, config.bib_mode);
            bib_filter(&part.green, &witnesses, config.gamma)
        } else {
            (part.green.clone(), Vec::new())
        };
        let items = build_review_queue(image, &part.red, &greens, p, a, queue.len() as u64 + 1);
        queue.extend(items);
        removed.extend(gone);
        partitions.insert(image, part);
    }
    let (corrected, auto) = auto_correct(crowd, &partitions)?;
    report.auto = auto;
    report.bib_removed = removed.len();
    report.queue_size = queue.len();
    Ok(CorrectionOutcome {
        corrected,
        queue,
        removed,
        partitions,
        report,
    })
}

/// Labels of one image as drawn by the review UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayLabel {
    #[serde(rename = "ref")]
    pub label_ref: LabelRef,
    pub category_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
    pub region: Region,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOverlay {
    pub image_id: ImageId,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub labels: Vec<OverlayLabel>,
    pub image_score: f64,
}

impl ImageOverlay {
    pub fn from_partition(info: &crate::model::ImageInfo, part: &RegionPartition) -> Self {
        let mut labels = Vec::with_capacity(part.label_count());
        let mut put = |l: &Label, region: Region| {
            labels.push(OverlayLabel {
                label_ref: l.key(),
                category_id: l.category_id,
                bbox: l.bbox,
                confidence: l.confidence,
                region,
                color: region.color().to_string(),
            })
        };
        for c in &part.gray {
            for l in &c.members {
                put(l, Region::Gray);
            }
        }
        for l in &part.pink {
            put(l, Region::Pink);
        }
        for l in &part.red {
            put(l, Region::Red);
        }
        for l in &part.green {
            put(l, Region::Green);
        }
        ImageOverlay {
            image_id: info.id,
            file_name: info.file_name.clone(),
            width: info.width,
            height: info.height,
            labels,
            image_score: crate::lsm::image_score(part),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageInfo;

    fn lab(id: u64, source: Source, b: [f64; 4], conf: f64) -> Label {
        let bbox = BBox::new(b[0], b[1], b[2], b[3]).unwrap();
        if source.is_human() {
            Label::human(id, 1, 1, bbox, source)
        } else {
            Label::predicted(id, 1, 1, bbox, source, conf)
        }
    }

    fn set(source: Source, labels: &[Label]) -> AnnotationSet {
        let mut s = AnnotationSet::new(source);
        s.add_image(ImageInfo {
            id: 1,
            width: 200,
            height: 200,
            file_name: "a.png".into(),
        })
        .unwrap();
        for l in labels {
            s.push(l.clone()).unwrap();
        }
        s
    }

    #[test]
    fn bib_containment_removes() {
        let g = lab(1, Source::Crowd, [0.0, 0.0, 100.0, 100.0], 1.0);
        let w = lab(1, Source::ModelP, [10.0, 10.0, 20.0, 20.0], 0.9);
        let (kept, gone) = bib_filter(&[g.clone()], &[w.clone()], 0.8);
        assert!(kept.is_empty());
        assert_eq!(gone, vec![BibRemoval { green: g, witness: w }]);
    }

    #[test]
    fn bib_half_covered_retained() {
        let g = lab(1, Source::Crowd, [0.0, 0.0, 20.0, 20.0], 1.0);
        let w = lab(1, Source::ModelP, [10.0, 0.0, 20.0, 20.0], 0.9);
        assert_eq!(overlap_fraction(&g.bbox, &w.bbox), 0.5);
        let (kept, gone) = bib_filter(&[g], &[w], 0.8);
        assert_eq!(kept.len(), 1);
        assert!(gone.is_empty());
    }

    #[test]
    fn bib_empty_and_strict() {
        let (k, r) = bib_filter(&[], &[lab(1, Source::ModelP, [0.0, 0.0, 5.0, 5.0], 0.5)], 0.8);
        assert!(k.is_empty() && r.is_empty());
        // witness 80 % inside: exactly gamma is not enough
        let g = lab(1, Source::Crowd, [0.0, 0.0, 8.0, 10.0], 1.0);
        let w = lab(1, Source::ModelA, [0.0, 0.0, 10.0, 10.0], 0.5);
        assert_eq!(bib_filter(&[g.clone()], &[w.clone()], 0.8).1.len(), 0);
        assert_eq!(bib_filter(&[g], &[w], 0.79).1.len(), 1);
    }

    fn outcome(crowd: &[Label], p: &[Label], a: &[Label]) -> CorrectionOutcome {
        run_correction(
            &set(Source::Crowd, crowd),
            &set(Source::ModelP, p),
            &set(Source::ModelA, a),
            &CorrectionConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn gray_replacement_and_pink_addition() {
        let o = outcome(
            &[lab(5, Source::Crowd, [0.0, 0.0, 10.0, 10.0], 1.0)],
            &[
                lab(1, Source::ModelP, [1.0, 0.0, 10.0, 10.0], 0.9),
                lab(2, Source::ModelP, [100.0, 100.0, 10.0, 10.0], 0.8),
            ],
            &[],
        );
        let labels = o.corrected.labels(1);
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0].id, 5);
        assert_eq!(labels[0].bbox.to_array(), [1.0, 0.0, 10.0, 10.0]);
        assert_eq!(labels[1].id, 6);
        assert_eq!(labels[1].note.as_deref(), Some("auto:added-pink"));
        assert!(o.queue.is_empty());
        assert_eq!(o.report.auto.replaced, 1);
        assert_eq!(o.report.auto.added_pink, 1);
    }

    #[test]
    fn gray_fixed_point_and_crowd_model_a_cluster() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let o = outcome(&[lab(1, Source::Crowd, b, 1.0)], &[lab(1, Source::ModelP, b, 0.9)], &[]);
        assert_eq!(o.corrected.labels(1)[0].bbox.to_array(), b);

        let o = outcome(
            &[lab(1, Source::Crowd, b, 1.0)],
            &[],
            &[lab(1, Source::ModelA, [1.0, 1.0, 10.0, 10.0], 0.9)],
        );
        assert_eq!(o.corrected.labels(1)[0].bbox.to_array(), b);
        assert_eq!(o.report.auto.kept, 1);
    }

    #[test]
    fn pink_on_empty_image() {
        let o = outcome(&[], &[lab(1, Source::ModelP, [0.0, 0.0, 10.0, 10.0], 0.9)], &[]);
        assert_eq!(o.corrected.len(), 1);
    }

    #[test]
    fn queue_suggestions_sorted() {
        let o = outcome(
            &[lab(1, Source::Crowd, [0.0, 0.0, 20.0, 20.0], 1.0)],
            &[lab(1, Source::ModelP, [8.0, 8.0, 20.0, 20.0], 0.4)],
            &[lab(1, Source::ModelA, [6.0, 6.0, 20.0, 20.0], 0.7)],
        );
        // crowd and both predictions are pairwise below 0.5 IoU
        let green: Vec<_> = o.queue.iter().filter(|i| i.region == Region::Green).collect();
        assert_eq!(green.len(), 1);
        let conf: Vec<f64> = green[0].suggestions.iter().map(|s| s.confidence).collect();
        assert_eq!(conf, vec![0.7, 0.4]);
        assert!(o.queue.windows(2).all(|w| w[0].item_id < w[1].item_id));
    }

    #[test]
    fn empty_queue_and_reject_all() {
        let o = outcome(&[lab(1, Source::Crowd, [0.0, 0.0, 10.0, 10.0], 1.0)], &[], &[]);
        assert_eq!(o.queue.len(), 1);
        let mut q = o.queue.clone();
        assert!(matches!(apply_decisions(&o.corrected, &q), Err(Error::Unresolved(ids)) if ids == vec![1]));
        q[0].resolve(Decision::Reject).unwrap();
        let clean = apply_decisions(&o.corrected, &q).unwrap();
        assert!(clean.is_empty());
        assert_eq!(apply_decisions(&o.corrected, &[]).unwrap(), o.corrected);
        // idempotent
        assert_eq!(apply_decisions(&o.corrected, &q).unwrap(), clean);
    }

    #[test]
    fn decisions_produce_boxes() {
        let o = outcome(
            &[lab(1, Source::Crowd, [0.0, 0.0, 20.0, 20.0], 1.0)],
            &[],
            &[lab(1, Source::ModelA, [8.0, 8.0, 20.0, 20.0], 0.6)],
        );
        let mut q = o.queue.clone();
        assert_eq!(q.len(), 2);
        let edit = BBox::new(1.0, 1.0, 5.0, 5.0).unwrap();
        for item in q.iter_mut() {
            match item.region {
                Region::Green => item.resolve(Decision::Edit { bbox: edit }).unwrap(),
                _ => item.resolve(Decision::AddMissing { bbox: edit }).unwrap(),
            }
        }
        let clean = apply_decisions(&o.corrected, &q).unwrap();
        // edit replaces the green; add-missing on red adds the box only
        assert_eq!(clean.len(), 2);
        assert!(clean.iter().all(|l| l.bbox == edit));

        let mut item = q[0].clone();
        assert!(matches!(item.resolve(Decision::Accept { suggestion: Some(9) }), Err(Error::InvalidDecision { .. })));
    }

    #[test]
    fn oracle_rejects_background_and_fixes_loc() {
        let truth = set(
            Source::Expert,
            &[lab(1, Source::Expert, [0.0, 0.0, 20.0, 20.0], 1.0)],
        );
        let o = outcome(
            &[
                lab(1, Source::Crowd, [10.0, 10.0, 20.0, 20.0], 1.0),
                lab(2, Source::Crowd, [150.0, 150.0, 10.0, 10.0], 1.0),
            ],
            &[],
            &[],
        );
        let mut q = o.queue.clone();
        for (id, d) in truth_oracle_decisions(&o.corrected, &q, &truth) {
            q.iter_mut().find(|i| i.item_id == id).unwrap().resolve(d).unwrap();
        }
        let clean = apply_decisions(&o.corrected, &q).unwrap();
        assert_eq!(clean.len(), 1);
        assert_eq!(clean.iter().next().unwrap().bbox.to_array(), [0.0, 0.0, 20.0, 20.0]);
    }

    #[test]
    fn conservation_of_crowd_labels() {
        let o = outcome(
            &[
                lab(1, Source::Crowd, [0.0, 0.0, 10.0, 10.0], 1.0),
                lab(2, Source::Crowd, [50.0, 50.0, 40.0, 40.0], 1.0),
                lab(3, Source::Crowd, [150.0, 0.0, 10.0, 10.0], 1.0),
                lab(4, Source::Crowd, [100.0, 150.0, 10.0, 10.0], 1.0),
            ],
            &[
                lab(1, Source::ModelP, [0.0, 0.0, 10.0, 10.0], 0.9),
                lab(2, Source::ModelP, [55.0, 55.0, 10.0, 10.0], 0.9),
            ],
            &[lab(1, Source::ModelA, [100.0, 150.0, 10.0, 10.0], 0.8)],
        );
        let r = &o.report;
        assert_eq!(r.auto.replaced + r.auto.kept + r.green, r.crowd_labels);
        let green_queued = o.queue.iter().filter(|i| i.region == Region::Green).count();
        assert_eq!(green_queued + r.bib_removed, r.green);
        assert_eq!(r.bib_removed, 1);
        assert_eq!(r.queue_size + r.bib_removed, r.queue_size_without_bib);
    }
}
