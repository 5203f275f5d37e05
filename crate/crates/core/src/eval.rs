//! Detection and dataset-quality metrics.
//!
//! AP50 follows the COCO convention: predictions ranked by confidence, each
//! truth matched at most once at IoU ≥ 0.5, 101-point interpolated precision.
//! The TIDE-style decomposition attributes lost AP to background, missed and
//! mislocalized errors by oracle-fixing one class at a time.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::iou;
use crate::ledger::BudgetLedger;
use crate::model::{AnnotationSet, CategoryId, Label};

pub const MATCH_IOU: f64 = 0.5;
/// Below this IoU to every truth a false positive is a background error.
pub const BACKGROUND_IOU: f64 = 0.1;
pub const RECALL_POINTS: usize = 101;

/// Baseline match of predictions against truths.
struct Matching {
    /// Prediction indices in rank order (confidence desc, then label id).
    order: Vec<usize>,
    /// For each prediction: index of the matched truth in `truths`.
    matched: Vec<Option<usize>>,
    truths: Vec<Label>,
}

fn rank_order(preds: &[Label]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(preds[a].id.cmp(&preds[b].id))
    });
    order
}

fn match_predictions(preds: &[Label], truth: &AnnotationSet) -> Matching {
    let truths: Vec<Label> = truth.iter().cloned().collect();
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, t) in truths.iter().enumerate() {
        by_image.entry(t.image_id).or_default().push(i);
    }
    let order = rank_order(preds);
    let mut taken = vec![false; truths.len()];
    let mut matched = vec![None; preds.len()];
    for &p in &order {
        let pred = &preds[p];
        let mut best: Option<(f64, usize)> = None;
        for &t in by_image.get(&pred.image_id).map(Vec::as_slice).unwrap_or(&[]) {
            if taken[t] || truths[t].category_id != pred.category_id {
                continue;
            }
            let v = iou(&pred.bbox, &truths[t].bbox);
            if v >= MATCH_IOU && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, t));
            }
        }
        if let Some((_, t)) = best {
            taken[t] = true;
            matched[p] = Some(t);
        }
    }
    Matching { order, matched, truths }
}

/// 101-point interpolated AP (in percent) of a ranked TP/FP sequence.
pub fn ap_from_ranked(is_tp: &[bool], num_truth: usize) -> f64 {
    if num_truth == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_truth as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    100.0 * sum / RECALL_POINTS as f64
}

fn categories_with_truth(truth: &AnnotationSet) -> BTreeSet<CategoryId> {
    truth.iter().map(|l| l.category_id).collect()
}

fn per_category_ap(m: &Matching, preds: &[Label], cat: CategoryId, prefix_tps: usize, removed: &[bool]) -> f64 {
    let npos = m.truths.iter().filter(|t| t.category_id == cat).count();
    let mut flags = vec![true; prefix_tps];
    flags.extend(
        m.order
            .iter()
            .filter(|&&p| preds[p].category_id == cat && !removed[p])
            .map(|&p| m.matched[p].is_some()),
    );
    ap_from_ranked(&flags, npos)
}

/// AP at IoU 0.5 in percent, averaged over categories present in the truth.
/// `None` when the truth is empty.
pub fn ap50(preds: &[Label], truth: &AnnotationSet) -> Option<f64> {
    let cats = categories_with_truth(truth);
    if cats.is_empty() {
        return None;
    }
    let m = match_predictions(preds, truth);
    let none = vec![false; preds.len()];
    let sum: f64 = cats.iter().map(|&c| per_category_ap(&m, preds, c, 0, &none)).sum();
    Some(sum / cats.len() as f64)
}

/// AP gained by oracle-fixing each error class, in AP points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TideReport {
    pub ap50: f64,
    pub bkg_dap: f64,
    pub miss_dap: f64,
    pub loc_dap: f64,
}

/// Error classification of a prediction set against the truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub matched: usize,
    pub bkg: usize,
    /// Mislocalized boxes and duplicates of already-matched truths.
    pub loc: usize,
    pub miss: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum FpKind {
    Bkg,
    /// Mislocalized; carries the unmatched truth it most overlaps, if any.
    Loc(Option<usize>),
}

fn classify_errors(m: &Matching, preds: &[Label]) -> (Vec<Option<FpKind>>, BTreeSet<usize>) {
    let matched_truths: BTreeSet<usize> = m.matched.iter().flatten().copied().collect();
    let mut kinds = vec![None; preds.len()];
    let mut loc_targets = BTreeSet::new();
    for &p in &m.order {
        if m.matched[p].is_some() {
            continue;
        }
        let pred = &preds[p];
        let mut max_any = 0.0f64;
        let mut target: Option<(f64, usize)> = None;
        for (t, truth) in m.truths.iter().enumerate() {
            if truth.image_id != pred.image_id || truth.category_id != pred.category_id {
                continue;
            }
            let v = iou(&pred.bbox, &truth.bbox);
            max_any = max_any.max(v);
            if !matched_truths.contains(&t) && v >= BACKGROUND_IOU && target.is_none_or(|(bv, _)| v > bv) {
                target = Some((v, t));
            }
        }
        if max_any < BACKGROUND_IOU {
            kinds[p] = Some(FpKind::Bkg);
        } else {
            let t = target.map(|(_, t)| t);
            if let Some(t) = t {
                loc_targets.insert(t);
            }
            kinds[p] = Some(FpKind::Loc(t));
        }
    }
    let missed: BTreeSet<usize> = (0..m.truths.len())
        .filter(|t| !matched_truths.contains(t) && !loc_targets.contains(t))
        .collect();
    (kinds, missed)
}

/// Counts matched predictions and each error class.
pub fn error_counts(preds: &[Label], truth: &AnnotationSet) -> ErrorCounts {
    let m = match_predictions(preds, truth);
    let (kinds, missed) = classify_errors(&m, preds);
    ErrorCounts {
        matched: m.matched.iter().filter(|x| x.is_some()).count(),
        bkg: kinds.iter().filter(|k| matches!(k, Some(FpKind::Bkg))).count(),
        loc: kinds.iter().filter(|k| matches!(k, Some(FpKind::Loc(_)))).count(),
        miss: missed.len(),
    }
}

/// Decomposes AP loss into background, miss and localization errors.
///
/// * Bkg fix: background false positives are deleted.
/// * Loc fix: each mislocalized prediction is snapped onto its target truth
///   (the highest-ranked one per truth); the rest, including duplicates, are deleted.
/// * Miss fix: missed truths are added as detections ranked above everything else.
pub fn tide_decompose(preds: &[Label], truth: &AnnotationSet) -> Option<TideReport> {
    let cats = categories_with_truth(truth);
    if cats.is_empty() {
        return None;
    }
    let m = match_predictions(preds, truth);
    let (kinds, missed) = classify_errors(&m, preds);
    let none = vec![false; preds.len()];

    let mean = |f: &dyn Fn(CategoryId) -> f64| cats.iter().map(|&c| f(c)).sum::<f64>() / cats.len() as f64;
    let base = mean(&|c| per_category_ap(&m, preds, c, 0, &none));

    let drop_bkg: Vec<bool> = kinds.iter().map(|k| matches!(k, Some(FpKind::Bkg))).collect();
    let bkg_fixed = mean(&|c| per_category_ap(&m, preds, c, 0, &drop_bkg));

    // snapped predictions become hits; other Loc-class predictions vanish
    let mut loc_m = Matching {
        order: m.order.clone(),
        matched: m.matched.clone(),
        truths: m.truths.clone(),
    };
    let mut drop_loc = vec![false; preds.len()];
    let mut claimed = BTreeSet::new();
    for &p in &m.order {
        if let Some(FpKind::Loc(target)) = kinds[p] {
            match target {
                Some(t) if claimed.insert(t) => loc_m.matched[p] = Some(t),
                _ => drop_loc[p] = true,
            }
        }
    }
    let loc_fixed = mean(&|c| per_category_ap(&loc_m, preds, c, 0, &drop_loc));

    let miss_fixed = mean(&|c| {
        let n = missed.iter().filter(|&&t| m.truths[t].category_id == c).count();
        per_category_ap(&m, preds, c, n, &none)
    });

    Some(TideReport {
        ap50: base,
        bkg_dap: bkg_fixed - base,
        miss_dap: miss_fixed - base,
        loc_dap: loc_fixed - base,
    })
}

/// Dataset quality of candidate labels treated as confidence-1 predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    /// `None` when there are no candidates.
    pub precision: Option<f64>,
    /// `None` when the truth is empty.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub counts: ErrorCounts,
}

pub fn label_quality(candidates: &AnnotationSet, truth: &AnnotationSet) -> LabelQuality {
    let preds: Vec<Label> = candidates
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.confidence = 1.0;
            l
        })
        .collect();
    let counts = error_counts(&preds, truth);
    let precision = (!preds.is_empty()).then(|| counts.matched as f64 / preds.len() as f64);
    let recall = (!truth.is_empty()).then(|| counts.matched as f64 / truth.len() as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        (None, Some(_)) => Some(0.0),
        _ => None,
    };
    LabelQuality {
        precision,
        recall,
        f1,
        counts,
    }
}

/// Ledger total as a percentage of expert annotation of every truth instance.
pub fn budget_percent(ledger: &BudgetLedger, truth: &AnnotationSet) -> f64 {
    ledger.budget_percent(truth.len() as u64)
}

/// One row of an experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ap50: Option<f64>,
    pub tide: Option<TideReport>,
    pub label_quality: Option<LabelQuality>,
    pub budget_percent: Option<f64>,
    /// TIDE figures are AP deltas ("dAP"), not error counts.
    pub tide_variant: String,
}

impl EvalReport {
    pub fn new(method: impl Into<String>) -> Self {
        EvalReport {
            method: method.into(),
            ap50: None,
            tide: None,
            label_quality: None,
            budget_percent: None,
            tide_variant: "dAP".into(),
        }
    }

    /// Evaluates `preds` against `truth` (AP50 and TIDE).
    pub fn with_detection(mut self, preds: &[Label], truth: &AnnotationSet) -> Self {
        self.tide = tide_decompose(preds, truth);
        self.ap50 = self.tide.map(|t| t.ap50);
        self
    }
}

/// Evaluates a label set as if it were detector output: AP50, TIDE and label quality.
pub fn evaluate_labels(method: &str, candidates: &AnnotationSet, truth: &AnnotationSet) -> EvalReport {
    let preds: Vec<Label> = candidates.iter().cloned().collect();
    let mut r = EvalReport::new(method).with_detection(&preds, truth);
    r.label_quality = Some(label_quality(candidates, truth));
    r
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Plain-text table: method, AP50, Bkg, Miss, Loc, Budget.
pub fn render_table(rows: &[EvalReport]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>7}  {:>7}  {:>7}  {:>9}  {:>6}",
        "Method", "AP50(%)", "Bkg", "Miss", "Loc", "Budget(%)", "F1"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 56));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>7}  {:>7}  {:>7}  {:>9}  {:>6}",
            r.method,
            cell(r.ap50),
            cell(r.tide.map(|t| t.bkg_dap)),
            cell(r.tide.map(|t| t.miss_dap)),
            cell(r.tide.map(|t| t.loc_dap)),
            cell(r.budget_percent),
            cell(r.label_quality.as_ref().and_then(|q| q.f1).map(|f| 100.0 * f)),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::model::{ImageInfo, Source};

    fn truth_set(boxes: &[[f64; 4]]) -> AnnotationSet {
        let mut t = AnnotationSet::new(Source::Expert);
        t.add_image(ImageInfo {
            id: 1,
            width: 200,
            height: 200,
            file_name: String::new(),
        })
        .unwrap();
        for (i, b) in boxes.iter().enumerate() {
            t.push(Label::human(i as u64 + 1, 1, 1, BBox::new(b[0], b[1], b[2], b[3]).unwrap(), Source::Expert))
                .unwrap();
        }
        t
    }

    fn pred(id: u64, b: [f64; 4], conf: f64) -> Label {
        Label::predicted(id, 1, 1, BBox::new(b[0], b[1], b[2], b[3]).unwrap(), Source::ModelP, conf)
    }

    const A: [f64; 4] = [0.0, 0.0, 10.0, 10.0];
    const B: [f64; 4] = [50.0, 50.0, 10.0, 10.0];
    const C: [f64; 4] = [100.0, 0.0, 10.0, 10.0];

    #[test]
    fn perfect_and_empty() {
        let t = truth_set(&[A, B]);
        let preds = vec![pred(1, A, 1.0), pred(2, B, 1.0)];
        assert_eq!(ap50(&preds, &t), Some(100.0));
        assert_eq!(ap50(&[], &t), Some(0.0));
        assert_eq!(ap50(&preds, &AnnotationSet::new(Source::Expert)), None);
    }

    #[test]
    fn worked_pr_curve() {
        // TP 0.9, FP 0.8, TP 0.7 over two truths
        let t = truth_set(&[A, B]);
        let preds = vec![pred(1, A, 0.9), pred(2, C, 0.8), pred(3, B, 0.7)];
        let expected = 100.0 * (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap50(&preds, &t).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn tide_perfect_is_zero() {
        let t = truth_set(&[A, B]);
        let r = tide_decompose(&[pred(1, A, 0.9), pred(2, B, 0.8)], &t).unwrap();
        assert_eq!((r.bkg_dap, r.miss_dap, r.loc_dap), (0.0, 0.0, 0.0));
    }

    #[test]
    fn tide_isolates_miss() {
        let t = truth_set(&[A, B, C]);
        let r = tide_decompose(&[pred(1, A, 1.0), pred(2, B, 1.0)], &t).unwrap();
        assert!(r.miss_dap > 0.0);
        assert_eq!(r.bkg_dap, 0.0);
        assert_eq!(r.loc_dap, 0.0);
        assert!((r.ap50 + r.miss_dap - 100.0).abs() < 1e-9);
    }

    #[test]
    fn tide_isolates_bkg_and_loc() {
        let t = truth_set(&[A, B]);
        // background box ranked between the two hits
        let r = tide_decompose(&[pred(1, A, 0.9), pred(2, [150.0, 150.0, 10.0, 10.0], 0.8), pred(3, B, 0.7)], &t).unwrap();
        assert!(r.bkg_dap > 0.0);
        assert_eq!(r.loc_dap, 0.0);
        assert_eq!(r.miss_dap, 0.0);

        // shifted box with IoU 1/3 to B
        let r = tide_decompose(&[pred(1, A, 0.9), pred(2, [55.0, 50.0, 10.0, 10.0], 0.8)], &t).unwrap();
        assert!(r.loc_dap > 0.0);
        assert_eq!(r.bkg_dap, 0.0);
        assert_eq!(r.miss_dap, 0.0);
        assert!((r.ap50 + r.loc_dap - 100.0).abs() < 1e-9);
    }

    #[test]
    fn error_counts_classify() {
        let t = truth_set(&[A, B, C]);
        let preds = vec![
            pred(1, A, 0.9),
            pred(2, A, 0.85),                      // duplicate of matched A
            pred(3, [55.0, 50.0, 10.0, 10.0], 0.8), // loc on B
            pred(4, [150.0, 150.0, 5.0, 5.0], 0.7), // background
        ];
        let c = error_counts(&preds, &t);
        assert_eq!(c, ErrorCounts { matched: 1, bkg: 1, loc: 2, miss: 1 });
    }

    #[test]
    fn label_quality_cases() {
        let t = truth_set(&[A, B]);
        let q = label_quality(&t, &t);
        assert_eq!((q.precision, q.recall, q.f1), (Some(1.0), Some(1.0), Some(1.0)));
        let empty = AnnotationSet::empty_like(&t, Source::Crowd);
        let q = label_quality(&empty, &t);
        assert_eq!(q.precision, None);
        assert_eq!(q.recall, Some(0.0));
    }

    #[test]
    fn multi_category_matching_is_strict() {
        let mut t = truth_set(&[A]);
        t.push(Label::human(9, 1, 2, BBox::new(50.0, 50.0, 10.0, 10.0).unwrap(), Source::Expert))
            .unwrap();
        let mut wrong = pred(1, A, 0.9);
        wrong.category_id = 2;
        let r = tide_decompose(&[wrong, pred(2, B, 0.5)], &t).unwrap();
        assert_eq!(r.ap50, 0.0);
        assert!(r.bkg_dap > 0.0 || r.miss_dap > 0.0);
    }

    #[test]
    fn table_has_columns() {
        let mut r = EvalReport::new("Noisy Training");
        r.ap50 = Some(48.35);
        r.budget_percent = Some(10.0);
        let s = render_table(&[r]);
        assert!(s.contains("AP50(%)") && s.contains("Budget(%)") && s.contains("48.35"));
    }
}
