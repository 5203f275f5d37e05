use std::collections::BTreeMap;
use std::path::Path;

use boxclean::coco::{coco_to_string, parse_coco};
use boxclean::consensus::consensus_labels;
use boxclean::eval::{ap50, label_quality};
use boxclean::lsm::{image_score, partition_image, LsmMode};
use boxclean::noise::{assign_difficulty, corrupt, generate_corpus, CorpusSpec, NoiseSpec};
use boxclean::{overlap_fraction, BBox, Label, LabelRef, Source};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 2.0..60.0f64, 2.0..60.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

fn labels(source: Source, max: usize) -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec((bbox(), 0.05..1.0f64), 0..max).prop_map(move |v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (b, conf))| {
                let id = i as u64 + 1;
                if source.is_human() {
                    Label::human(id, 1, 1, b, source)
                } else {
                    Label::predicted(id, 1, 1, b, source, conf)
                }
            })
            .collect()
    })
}

fn small_corpus(images: usize, seed: u64) -> boxclean::AnnotationSet {
    generate_corpus(&CorpusSpec { images, ..CorpusSpec::default() }, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_label_lands_in_exactly_one_region(
        crowd in labels(Source::Crowd, 8),
        p in labels(Source::ModelP, 8),
        a in labels(Source::ModelA, 8),
        thr in 0.1..0.9f64,
    ) {
        for mode in [LsmMode::Dual, LsmMode::Single] {
            let part = partition_image(&crowd, &p, &a, thr, mode);
            let mut seen: BTreeMap<LabelRef, usize> = BTreeMap::new();
            let placed = part.gray.iter().flat_map(|c| c.members.iter())
                .chain(&part.pink).chain(&part.red).chain(&part.green);
            for l in placed {
                *seen.entry(l.key()).or_default() += 1;
            }
            let mut expected: Vec<&Label> = crowd.iter().chain(&p).collect();
            if mode == LsmMode::Dual {
                expected.extend(&a);
            } else {
                prop_assert!(part.red.is_empty());
            }
            prop_assert_eq!(seen.len(), expected.len());
            for l in expected {
                prop_assert_eq!(seen.get(&l.key()), Some(&1));
            }
            for c in &part.gray {
                prop_assert!(c.members.len() >= 2);
            }
            for l in part.red.iter().chain(&part.green) {
                let s = part.scores[&l.key()];
                prop_assert!((0.0..=1.0).contains(&s));
            }
            prop_assert!(image_score(&part) >= 0.0);
        }
    }

    #[test]
    fn consensus_is_a_corroborated_subset(
        expert in labels(Source::Expert, 8),
        crowd in labels(Source::Crowd, 8),
        lo in 0.0..0.9f64,
        gap in 0.0..0.5f64,
    ) {
        let loose = consensus_labels(&expert, &crowd, lo);
        let strict = consensus_labels(&expert, &crowd, (lo + gap).min(0.99));
        for l in &loose {
            prop_assert!(expert.iter().any(|e| e.id == l.id && e.bbox == l.bbox));
            prop_assert!(crowd.iter().any(|c| overlap_fraction(&c.bbox, &l.bbox) > lo));
        }
        for l in &strict {
            prop_assert!(loose.iter().any(|x| x.id == l.id));
        }
    }

    #[test]
    fn noise_ledger_accounts_for_every_truth_box(seed in 0u64..500) {
        let truth = small_corpus(6, seed);
        let difficulty = assign_difficulty(&truth, seed);
        let out = corrupt(&truth, &NoiseSpec::paper_like(seed), &difficulty).unwrap();
        let counts = out.ledger.counts();
        let total: usize = counts.values().sum();
        prop_assert!(total >= truth.len());
        prop_assert_eq!(out.crowd.num_images(), truth.num_images());
    }
}

#[test]
fn clean_noise_spec_is_the_identity() {
    let truth = small_corpus(10, 3);
    let difficulty = assign_difficulty(&truth, 3);
    let out = corrupt(&truth, &NoiseSpec::none(3), &difficulty).unwrap();
    assert_eq!(out.crowd.len(), truth.len());
    for (c, t) in out.crowd.iter().zip(truth.iter()) {
        assert_eq!(c.bbox, t.bbox);
    }
    assert_eq!(label_quality(&out.crowd, &truth).f1, Some(1.0));
}

#[test]
fn coco_round_trip_keeps_boxes_and_sources() {
    let truth = small_corpus(5, 8);
    let difficulty = assign_difficulty(&truth, 8);
    let crowd = corrupt(&truth, &NoiseSpec::paper_like(8), &difficulty).unwrap().crowd;
    let back = parse_coco(&coco_to_string(&crowd), Path::new("mem"), Source::Crowd).unwrap();
    assert_eq!(back.len(), crowd.len());
    assert_eq!(back.image_ids(), crowd.image_ids());
    for (a, b) in back.iter().zip(crowd.iter()) {
        assert_eq!((a.id, a.image_id, a.bbox, a.source), (b.id, b.image_id, b.bbox, b.source));
    }
}

#[test]
fn truth_as_predictions_scores_full_ap_percent() {
    let truth = small_corpus(8, 21);
    let preds: Vec<Label> = truth
        .iter()
        .map(|l| Label::predicted(l.id, l.image_id, l.category_id, l.bbox, Source::ModelP, 0.9))
        .collect();
    assert_eq!(ap50(&preds, &truth), Some(100.0));
    assert_eq!(ap50(&[], &truth), Some(0.0));
}

#[test]
fn same_seed_same_corpus() {
    let a = coco_to_string(&small_corpus(7, 42));
    assert_eq!(a, coco_to_string(&small_corpus(7, 42)));
    assert_ne!(a, coco_to_string(&small_corpus(7, 43)));
}
