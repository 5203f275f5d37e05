//! Consensus dataset: expert labels corroborated by at least one crowd label.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::overlap_fraction;
use crate::model::{AnnotationSet, ImageId, Label, Source};

pub const DEFAULT_DELTA: f64 = 0.5;

/// Expert labels on one image covered by some crowd label by more than `delta`
/// of their own area. One crowd label may corroborate several expert labels.
pub fn consensus_labels(expert: &[Label], crowd: &[Label], delta: f64) -> Vec<Label> {
    expert
        .iter()
        .filter(|p| {
            crowd
                .iter()
                .any(|c| c.category_id == p.category_id && overlap_fraction(&c.bbox, &p.bbox) > delta)
        })
        .map(|p| {
            let mut l = p.clone();
            l.source = Source::Expert;
            l
        })
        .collect()
}

/// Grows the consensus set over `images`.
///
/// Images outside `images` keep their previous consensus labels; images in
/// `images` get their consensus recomputed from the current expert and crowd
/// labels, replacing anything stale.
pub fn build_consensus_increment(
    expert: &AnnotationSet,
    crowd: &AnnotationSet,
    previous: &AnnotationSet,
    images: &BTreeSet<ImageId>,
    delta: f64,
) -> Result<AnnotationSet> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("consensus threshold {delta} outside (0, 1)")));
    }
    let mut out = previous.clone();
    out.set_source(Source::Expert);
    for &image in images {
        let info = expert.image(image).ok_or(Error::MissingImage(image))?;
        if !out.has_image(image) {
            out.add_image(info.clone())?;
        }
        let labels = consensus_labels(expert.labels(image), crowd.labels(image), delta);
        out.replace_labels(image, labels)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::model::ImageInfo;

    fn sets(expert_boxes: &[[f64; 4]], crowd_boxes: &[[f64; 4]]) -> (AnnotationSet, AnnotationSet) {
        let info = ImageInfo {
            id: 1,
            width: 100,
            height: 100,
            file_name: String::new(),
        };
        let mut p = AnnotationSet::new(Source::Expert);
        let mut c = AnnotationSet::new(Source::Crowd);
        p.add_image(info.clone()).unwrap();
        c.add_image(info).unwrap();
        for (i, b) in expert_boxes.iter().enumerate() {
            let bb = BBox::new(b[0], b[1], b[2], b[3]).unwrap();
            p.push(Label::human(i as u64 + 1, 1, 1, bb, Source::Expert)).unwrap();
        }
        for (i, b) in crowd_boxes.iter().enumerate() {
            let bb = BBox::new(b[0], b[1], b[2], b[3]).unwrap();
            c.push(Label::human(i as u64 + 1, 1, 1, bb, Source::Crowd)).unwrap();
        }
        (p, c)
    }

    fn run(p: &AnnotationSet, c: &AnnotationSet, delta: f64) -> AnnotationSet {
        let prev = AnnotationSet::empty_like(p, Source::Expert);
        build_consensus_increment(p, c, &prev, &BTreeSet::from([1]), delta).unwrap()
    }

    #[test]
    fn identical_box_included() {
        let (p, c) = sets(&[[0.0, 0.0, 10.0, 10.0]], &[[0.0, 0.0, 10.0, 10.0]]);
        assert_eq!(run(&p, &c, 0.5).len(), 1);
    }

    #[test]
    fn forty_percent_coverage_excluded() {
        // crowd covers 4 of the expert box's 10 columns
        let (p, c) = sets(&[[0.0, 0.0, 10.0, 10.0]], &[[6.0, 0.0, 10.0, 10.0]]);
        assert!((overlap_fraction(&c.labels(1)[0].bbox, &p.labels(1)[0].bbox) - 0.4).abs() < 1e-12);
        assert!(run(&p, &c, 0.5).is_empty());
    }

    #[test]
    fn boundary_is_strict() {
        let (p, c) = sets(&[[0.0, 0.0, 10.0, 10.0]], &[[5.0, 0.0, 10.0, 10.0]]);
        assert!(run(&p, &c, 0.5).is_empty());
        assert_eq!(run(&p, &c, 0.49).len(), 1);
    }

    #[test]
    fn empty_crowd_contributes_nothing() {
        let (p, c) = sets(&[[0.0, 0.0, 10.0, 10.0]], &[]);
        assert!(run(&p, &c, 0.5).is_empty());
    }

    #[test]
    fn one_crowd_box_validates_several() {
        let (p, c) = sets(&[[0.0, 0.0, 5.0, 5.0], [10.0, 10.0, 5.0, 5.0]], &[[0.0, 0.0, 20.0, 20.0]]);
        assert_eq!(run(&p, &c, 0.5).len(), 2);
    }

    #[test]
    fn missing_image_is_an_error() {
        let (p, c) = sets(&[], &[]);
        let prev = AnnotationSet::empty_like(&p, Source::Expert);
        let err = build_consensus_increment(&p, &c, &prev, &BTreeSet::from([9]), 0.5).unwrap_err();
        assert!(matches!(err, Error::MissingImage(9)));
    }

    #[test]
    fn directional_thresholds() {
        // touching (10 %) and near-containment (98 %)
        let (p, c) = sets(
            &[[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 10.0, 10.0]],
            &[[9.0, 0.0, 10.0, 10.0], [50.0, 50.2, 10.0, 10.0]],
        );
        assert_eq!(run(&p, &c, 0.01).len(), 2);
        let strict = run(&p, &c, 0.99);
        assert!(strict.is_empty());
        let loose = run(&p, &c, 0.97);
        assert_eq!(loose.len(), 1);
        assert_eq!(loose.iter().next().unwrap().id, 2);
    }

    #[test]
    fn idempotent_and_monotone() {
        let (p, c) = sets(&[[0.0, 0.0, 10.0, 10.0]], &[[0.0, 0.0, 10.0, 10.0]]);
        let once = run(&p, &c, 0.5);
        let twice = build_consensus_increment(&p, &c, &once, &BTreeSet::from([1]), 0.5).unwrap();
        assert_eq!(once, twice);
        for l in once.iter() {
            assert!(twice.contains_id(l.id));
            assert!(p.contains_id(l.id));
        }
    }
}
