//! Label Selection Module.
//!
//! Crowd labels and the two detectors' predictions on one image are grouped
//! by greedy descending-IoU matching. Groups backed by two or more sources
//! form the gray region; unmatched labels fall into pink (model-P only),
//! red (model-A only) or green (crowd only). Red and green labels carry an
//! instance score, and their sum is the image's inconsistency score.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::iou;
use crate::model::{ImageId, Label, LabelRef, Source};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Labels from distinct sources that agree with each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCluster {
    /// At most one label per source, ordered crowd, model-P, model-A.
    pub members: Vec<Label>,
    /// IoU of every member pair above the match threshold.
    pub pairwise_iou: Vec<(LabelRef, LabelRef, f64)>,
}

impl MatchCluster {
    pub fn member(&self, source: Source) -> Option<&Label> {
        self.members.iter().find(|l| l.source == source)
    }

    pub fn sources(&self) -> Vec<Source> {
        self.members.iter().map(|l| l.source).collect()
    }
}

/// Labels that matched nothing, by source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Leftovers {
    pub crowd: Vec<Label>,
    pub model_p: Vec<Label>,
    pub model_a: Vec<Label>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub clusters: Vec<MatchCluster>,
    pub leftovers: Leftovers,
}

struct Node<'a> {
    label: &'a Label,
    mask: u8,
}

fn source_bit(s: Source) -> u8 {
    match s {
        Source::Crowd | Source::Expert => 1,
        Source::ModelP => 2,
        Source::ModelA => 4,
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Greedy cross-source matching on one image.
///
/// Candidate edges join labels of different sources and the same category
/// whose IoU is strictly above `iou_threshold`. Edges are taken in
/// descending IoU order (ties: higher combined confidence, then lower label
/// ids); an edge merges two groups only when they share no source, so every
/// group holds at most one label per source and each source pair is matched
/// one-to-one.
pub fn match_cross_source(crowd: &[Label], model_p: &[Label], model_a: &[Label], iou_threshold: f64) -> MatchResult {
    let nodes: Vec<Node<'_>> = crowd
        .iter()
        .chain(model_p)
        .chain(model_a)
        .map(|label| Node {
            label,
            mask: source_bit(label.source),
        })
        .collect();

    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in (i + 1)..nodes.len() {
            let (a, b) = (nodes[i].label, nodes[j].label);
            if nodes[i].mask == nodes[j].mask || a.category_id != b.category_id {
                continue;
            }
            let v = iou(&a.bbox, &b.bbox);
            if v > iou_threshold {
                edges.push((v, i, j));
            }
        }
    }
    edges.sort_by(|x, y| {
        let (la, lb) = (nodes[x.1].label, nodes[x.2].label);
        let (ra, rb) = (nodes[y.1].label, nodes[y.2].label);
        y.0.partial_cmp(&x.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                (rb.confidence + ra.confidence)
                    .partial_cmp(&(la.confidence + lb.confidence))
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| {
                let kx = sorted_pair(la.key(), lb.key());
                let ky = sorted_pair(ra.key(), rb.key());
                (kx.0.id, kx.1.id, kx).cmp(&(ky.0.id, ky.1.id, ky))
            })
    });

    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    let mut mask: Vec<u8> = nodes.iter().map(|n| n.mask).collect();
    for &(_, i, j) in &edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj || mask[ri] & mask[rj] != 0 {
            continue;
        }
        let (root, child) = if ri < rj { (ri, rj) } else { (rj, ri) };
        parent[child] = root;
        mask[root] |= mask[child];
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..nodes.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }

    let mut result = MatchResult::default();
    for members in groups.into_values() {
        if members.len() == 1 {
            let l = nodes[members[0]].label.clone();
            match l.source {
                Source::ModelP => result.leftovers.model_p.push(l),
                Source::ModelA => result.leftovers.model_a.push(l),
                Source::Crowd | Source::Expert => result.leftovers.crowd.push(l),
            }
            continue;
        }
        let mut labels: Vec<Label> = members.iter().map(|&i| nodes[i].label.clone()).collect();
        labels.sort_by_key(|l| source_bit(l.source));
        let mut pairwise = Vec::new();
        for a in 0..labels.len() {
            for b in (a + 1)..labels.len() {
                let v = iou(&labels[a].bbox, &labels[b].bbox);
                if v > iou_threshold {
                    pairwise.push((labels[a].key(), labels[b].key(), v));
                }
            }
        }
        result.clusters.push(MatchCluster {
            members: labels,
            pairwise_iou: pairwise,
        });
    }
    result
}

fn sorted_pair(a: LabelRef, b: LabelRef) -> (LabelRef, LabelRef) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Gray,
    Pink,
    Red,
    Green,
}

impl Region {
    /// Overlay color name used by the review UI.
    pub fn color(self) -> &'static str {
        match self {
            Region::Gray => "gray",
            Region::Pink => "pink",
            Region::Red => "red",
            Region::Green => "green",
        }
    }
}

/// The four-way split of one image's labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub gray: Vec<MatchCluster>,
    pub pink: Vec<Label>,
    pub red: Vec<Label>,
    pub green: Vec<Label>,
    /// Instance scores of red and green labels.
    pub scores: BTreeMap<LabelRef, f64>,
}

impl RegionPartition {
    pub fn model_p(&self) -> impl Iterator<Item = &Label> {
        self.gray
            .iter()
            .filter_map(|c| c.member(Source::ModelP))
            .chain(self.pink.iter())
    }

    pub fn model_a(&self) -> impl Iterator<Item = &Label> {
        self.gray
            .iter()
            .filter_map(|c| c.member(Source::ModelA))
            .chain(self.red.iter())
    }

    /// Number of labels across all regions.
    pub fn label_count(&self) -> usize {
        self.gray.iter().map(|c| c.members.len()).sum::<usize>() + self.pink.len() + self.red.len() + self.green.len()
    }

    pub fn region_of(&self, key: LabelRef) -> Option<Region> {
        if self.gray.iter().any(|c| c.members.iter().any(|l| l.key() == key)) {
            Some(Region::Gray)
        } else if self.pink.iter().any(|l| l.key() == key) {
            Some(Region::Pink)
        } else if self.red.iter().any(|l| l.key() == key) {
            Some(Region::Red)
        } else if self.green.iter().any(|l| l.key() == key) {
            Some(Region::Green)
        } else {
            None
        }
    }

    pub fn dump(&self, image_id: ImageId) -> PartitionDump {
        PartitionDump {
            image_id,
            gray: self
                .gray
                .iter()
                .map(|c| c.members.iter().map(Label::key).collect())
                .collect(),
            pink: self.pink.iter().map(Label::key).collect(),
            red: self.red.iter().map(Label::key).collect(),
            green: self.green.iter().map(Label::key).collect(),
            scores: self.scores.iter().map(|(k, v)| (*k, *v)).collect(),
            image_score: image_score(self),
        }
    }
}

/// Audit form of a partition: label references per region plus scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionDump {
    pub image_id: ImageId,
    pub gray: Vec<Vec<LabelRef>>,
    pub pink: Vec<LabelRef>,
    pub red: Vec<LabelRef>,
    pub green: Vec<LabelRef>,
    pub scores: Vec<(LabelRef, f64)>,
    pub image_score: f64,
}

/// Instance score of a red label: the model-A confidence.
pub fn score_red(label: &Label) -> f64 {
    debug_assert_eq!(label.source, Source::ModelA);
    label.confidence
}

/// Instance score of a green label: confidence of the model-P box with the
/// highest IoU against it, whether or not that IoU clears the match
/// threshold. Ties go to higher confidence, then lower label id. Zero when
/// model-P predicted nothing on the image.
pub fn score_green(label: &Label, model_p: &[Label]) -> f64 {
    debug_assert!(label.source.is_human());
    model_p
        .iter()
        .map(|p| (iou(&label.bbox, &p.bbox), p))
        .max_by(|(ia, a), (ib, b)| {
            ia.partial_cmp(ib)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.confidence.partial_cmp(&b.confidence).unwrap_or(Ordering::Equal))
                .then_with(|| b.id.cmp(&a.id))
        })
        .map_or(0.0, |(_, p)| p.confidence)
}

/// Assigns each matched group and leftover label to its region and scores red/green labels.
pub fn classify_regions(matched: MatchResult) -> RegionPartition {
    let MatchResult { clusters, leftovers } = matched;
    let model_p: Vec<Label> = clusters
        .iter()
        .filter_map(|c| c.member(Source::ModelP).cloned())
        .chain(leftovers.model_p.iter().cloned())
        .collect();

    let mut scores = BTreeMap::new();
    for r in &leftovers.model_a {
        scores.insert(r.key(), score_red(r));
    }
    for g in &leftovers.crowd {
        scores.insert(g.key(), score_green(g, &model_p));
    }
    RegionPartition {
        gray: clusters,
        pink: leftovers.model_p,
        red: leftovers.model_a,
        green: leftovers.crowd,
        scores,
    }
}

/// Image inconsistency score: the sum of red and green instance scores.
pub fn image_score(partition: &RegionPartition) -> f64 {
    partition
        .red
        .iter()
        .chain(partition.green.iter())
        .map(|l| partition.scores.get(&l.key()).copied().unwrap_or(0.0))
        .sum()
}

/// The module without the consensus-trained detector: red is always empty.
pub fn classify_single_model(crowd: &[Label], model_p: &[Label], iou_threshold: f64) -> RegionPartition {
    classify_regions(match_cross_source(crowd, model_p, &[], iou_threshold))
}

/// Whether the consensus-trained detector participates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LsmMode {
    #[default]
    Dual,
    Single,
}

impl std::str::FromStr for LsmMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dual" => Ok(LsmMode::Dual),
            "single" => Ok(LsmMode::Single),
            other => Err(crate::error::Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Runs the module on one image in the given mode.
pub fn partition_image(
    crowd: &[Label],
    model_p: &[Label],
    model_a: &[Label],
    iou_threshold: f64,
    mode: LsmMode,
) -> RegionPartition {
    match mode {
        LsmMode::Dual => classify_regions(match_cross_source(crowd, model_p, model_a, iou_threshold)),
        LsmMode::Single => classify_single_model(crowd, model_p, iou_threshold),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn lab(id: u64, source: Source, b: [f64; 4], conf: f64) -> Label {
        let bbox = BBox::new(b[0], b[1], b[2], b[3]).unwrap();
        if source.is_human() {
            Label::human(id, 1, 1, bbox, source)
        } else {
            Label::predicted(id, 1, 1, bbox, source, conf)
        }
    }

    #[test]
    fn identical_boxes_form_one_cluster() {
        let b = [10.0, 10.0, 20.0, 20.0];
        let m = match_cross_source(
            &[lab(1, Source::Crowd, b, 1.0)],
            &[lab(1, Source::ModelP, b, 0.9)],
            &[lab(1, Source::ModelA, b, 0.8)],
            0.5,
        );
        assert_eq!(m.clusters.len(), 1);
        assert_eq!(m.clusters[0].members.len(), 3);
        assert_eq!(m.clusters[0].pairwise_iou.len(), 3);
        let p = classify_regions(m);
        assert_eq!(p.gray.len(), 1);
        assert!(p.pink.is_empty() && p.red.is_empty() && p.green.is_empty());
        assert_eq!(image_score(&p), 0.0);
    }

    #[test]
    fn disjoint_boxes_are_singletons() {
        let m = match_cross_source(
            &[lab(1, Source::Crowd, [0.0, 0.0, 5.0, 5.0], 1.0)],
            &[lab(1, Source::ModelP, [20.0, 0.0, 5.0, 5.0], 0.9)],
            &[lab(1, Source::ModelA, [40.0, 0.0, 5.0, 5.0], 0.7)],
            0.5,
        );
        assert!(m.clusters.is_empty());
        let p = classify_regions(m);
        assert_eq!(p.green.len(), 1);
        assert_eq!(p.pink.len(), 1);
        assert_eq!(p.red.len(), 1);
        assert_eq!(p.scores[&LabelRef { source: Source::ModelA, id: 1 }], 0.7);
        // green takes the best-IoU model-P box even at IoU 0
        assert_eq!(p.scores[&LabelRef { source: Source::Crowd, id: 1 }], 0.9);
    }

    #[test]
    fn two_source_agreement_is_gray() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let p = classify_regions(match_cross_source(
            &[lab(1, Source::Crowd, b, 1.0)],
            &[],
            &[lab(2, Source::ModelA, b, 0.6)],
            0.5,
        ));
        assert_eq!(p.gray.len(), 1);
        assert_eq!(p.gray[0].sources(), vec![Source::Crowd, Source::ModelA]);
    }

    #[test]
    fn chain_never_puts_two_crowd_labels_together() {
        // C1 ~ P1 ~ A1 ~ C2 chain: the merge that would pair C1 and C2 is refused
        let c1 = lab(1, Source::Crowd, [0.0, 0.0, 10.0, 10.0], 1.0);
        let p1 = lab(1, Source::ModelP, [1.0, 0.0, 10.0, 10.0], 0.9);
        let a1 = lab(1, Source::ModelA, [2.0, 0.0, 10.0, 10.0], 0.9);
        let c2 = lab(2, Source::Crowd, [3.0, 0.0, 10.0, 10.0], 1.0);
        let m = match_cross_source(&[c1, c2], &[p1], &[a1], 0.5);
        for c in &m.clusters {
            let mut s = c.sources();
            s.dedup();
            assert_eq!(s.len(), c.members.len());
        }
        let total: usize = m.clusters.iter().map(|c| c.members.len()).sum::<usize>()
            + m.leftovers.crowd.len()
            + m.leftovers.model_p.len()
            + m.leftovers.model_a.len();
        assert_eq!(total, 4);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.5: [0,0,10,10] vs [0,0,10,20]
        let m = match_cross_source(
            &[lab(1, Source::Crowd, [0.0, 0.0, 10.0, 10.0], 1.0)],
            &[lab(1, Source::ModelP, [0.0, 0.0, 10.0, 20.0], 0.9)],
            &[],
            0.5,
        );
        assert!(m.clusters.is_empty());
    }

    #[test]
    fn region_examples() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let p = classify_regions(match_cross_source(&[], &[lab(3, Source::ModelP, b, 0.5)], &[], 0.5));
        assert_eq!(p.pink.len(), 1);
        assert!(p.scores.is_empty());
        let p = classify_regions(match_cross_source(&[lab(3, Source::Crowd, b, 1.0)], &[], &[], 0.5));
        assert_eq!(p.green.len(), 1);
        let p = classify_regions(match_cross_source(&[], &[], &[lab(3, Source::ModelA, b, 0.2)], 0.5));
        assert_eq!(p.red.len(), 1);
    }

    #[test]
    fn red_score_is_confidence() {
        for c in [0.7, 0.0, 1.0] {
            assert_eq!(score_red(&lab(1, Source::ModelA, [0.0, 0.0, 1.0, 1.0], c)), c);
        }
    }

    #[test]
    fn green_score_examples() {
        let g = lab(1, Source::Crowd, [0.0, 0.0, 10.0, 10.0], 1.0);
        assert_eq!(score_green(&g, &[lab(5, Source::ModelP, [0.0, 0.0, 10.0, 10.0], 0.9)]), 0.9);
        assert_eq!(score_green(&g, &[]), 0.0);
        let disjoint = lab(5, Source::ModelP, [50.0, 50.0, 10.0, 10.0], 0.8);
        let overlapping = lab(6, Source::ModelP, [5.0, 0.0, 10.0, 10.0], 0.4);
        // IoUs: 0 and 1/3
        assert_eq!(score_green(&g, &[disjoint, overlapping]), 0.4);
    }

    #[test]
    fn image_score_sums() {
        let mut p = RegionPartition::default();
        assert_eq!(image_score(&p), 0.0);
        let r = lab(1, Source::ModelA, [0.0, 0.0, 1.0, 1.0], 0.7);
        let g = lab(2, Source::Crowd, [5.0, 0.0, 1.0, 1.0], 1.0);
        p.scores.insert(r.key(), 0.7);
        p.scores.insert(g.key(), 0.4);
        p.red.push(r);
        p.green.push(g);
        assert!((image_score(&p) - 1.1).abs() < 1e-12);

        let mut q = RegionPartition::default();
        for id in [1, 2] {
            let g = lab(id, Source::Crowd, [id as f64 * 10.0, 0.0, 1.0, 1.0], 1.0);
            q.scores.insert(g.key(), 0.3);
            q.green.push(g);
        }
        assert!((image_score(&q) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_model_examples() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let p = classify_single_model(&[lab(1, Source::Crowd, b, 1.0)], &[lab(1, Source::ModelP, b, 0.9)], 0.5);
        assert_eq!(p.gray.len(), 1);
        assert!(p.red.is_empty());
        let p = classify_single_model(&[lab(1, Source::Crowd, b, 1.0)], &[], 0.5);
        assert_eq!(p.green.len(), 1);
        assert!(p.red.is_empty());
    }
}
