//! Synthetic ground truth and crowd-style label corruption.
//!
//! Crowd noise follows four error kinds: spurious background boxes (Bkg),
//! dropped instances (Miss), misplaced boxes (Loc) and one box swallowing two
//! neighbouring instances (Bib). Miss and Loc probabilities scale with a
//! per-instance difficulty so that hard instances attract more noise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::{AnnotationSet, CategoryId, ImageId, ImageInfo, Label, LabelId, Source};
use crate::rng::{rng_for, stream};

/// Background boxes keep IoU below this against every true box.
pub const BKG_MAX_IOU: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Shape of a generated ground-truth corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Median box side in pixels.
    pub median_size: f64,
    /// Log-normal spread of box sides.
    pub size_spread: f64,
    /// Probability that an instance is placed next to an earlier one.
    pub cluster_prob: f64,
    pub categories: u32,
    /// Id of the first image; lets train and test corpora share one id space.
    pub first_image_id: ImageId,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            images: 300,
            width: 512,
            height: 512,
            min_instances: 3,
            max_instances: 12,
            median_size: 40.0,
            size_spread: 0.35,
            cluster_prob: 0.35,
            categories: 1,
            first_image_id: 1,
        }
    }
}

/// Generates non-overlapping ground-truth boxes (source `Expert`).
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> AnnotationSet {
    let mut set = AnnotationSet::new(Source::Expert);
    if spec.categories > 1 {
        set.set_categories(
            (1..=spec.categories)
                .map(|id| crate::model::Category {
                    id,
                    name: format!("class-{id}"),
                })
                .collect(),
        );
    }
    let size = Normal::new(spec.median_size.ln(), spec.size_spread).expect("valid spread");
    let aspect = Normal::new(0.0, 0.2).expect("valid aspect spread");
    let (wf, hf) = (spec.width as f64, spec.height as f64);
    let mut next_id: LabelId = 1;
    for k in 0..spec.images {
        let image_id = spec.first_image_id + k as ImageId;
        set.add_image(ImageInfo {
            id: image_id,
            width: spec.width,
            height: spec.height,
            file_name: format!("img_{image_id:05}.png"),
        })
        .expect("positive image size");
        let mut rng = rng_for(seed, &[stream::CORPUS, image_id]);
        let n = rng.random_range(spec.min_instances..=spec.max_instances);
        let mut placed: Vec<(BBox, CategoryId)> = Vec::new();
        for _ in 0..n {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let side: f64 = size.sample(&mut rng).exp().clamp(6.0, wf.min(hf) / 3.0);
                let ar = f64::exp(aspect.sample(&mut rng));
                let (w, h) = (side * ar.sqrt(), side / ar.sqrt());
                let (x, y) = if !placed.is_empty() && rng.random_bool(spec.cluster_prob) {
                    let anchor = placed.choose(&mut rng).expect("non-empty").0;
                    let gap = rng.random_range(0.0..0.5) * w.min(anchor.w());
                    match rng.random_range(0..4) {
                        0 => (anchor.right() + gap, anchor.y() + rng.random_range(-0.3..0.3) * h),
                        1 => (anchor.x() - gap - w, anchor.y() + rng.random_range(-0.3..0.3) * h),
                        2 => (anchor.x() + rng.random_range(-0.3..0.3) * w, anchor.bottom() + gap),
                        _ => (anchor.x() + rng.random_range(-0.3..0.3) * w, anchor.y() - gap - h),
                    }
                } else {
                    (rng.random_range(0.0..wf - w), rng.random_range(0.0..hf - h))
                };
                if x < 0.0 || y < 0.0 || x + w > wf || y + h > hf {
                    continue;
                }
                let b = BBox::new(x, y, w, h).expect("positive size");
                if placed.iter().any(|(p, _)| crate::geometry::intersection_area(p, &b) > 0.0) {
                    continue;
                }
                let cat = rng.random_range(1..=spec.categories);
                placed.push((b, cat));
                break;
            }
        }
        for (b, cat) in placed {
            set.push(Label::human(next_id, image_id, cat, b, Source::Expert))
                .expect("fresh id on known image");
            next_id += 1;
        }
    }
    set
}

/// Per-instance difficulty in `[0, 1]`, keyed by ground-truth label id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DifficultyMap(pub BTreeMap<LabelId, f64>);

impl DifficultyMap {
    pub fn get(&self, id: LabelId) -> f64 {
        self.0.get(&id).copied().unwrap_or(0.5)
    }

    /// Every instance of `truth` at the same difficulty.
    pub fn uniform(truth: &AnnotationSet, value: f64) -> Self {
        DifficultyMap(truth.iter().map(|l| (l.id, value.clamp(0.0, 1.0))).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weight of the size-rank term added to the Beta(2,2) draw.
pub const SIZE_DIFFICULTY_WEIGHT: f64 = 0.3;

/// Beta(2,2) difficulty shifted up for small boxes and down for large ones.
pub fn assign_difficulty(truth: &AnnotationSet, seed: u64) -> DifficultyMap {
    let mut rng = rng_for(seed, &[stream::DIFFICULTY]);
    let beta = Beta::new(2.0, 2.0).expect("valid beta");
    let mut by_area: Vec<(f64, LabelId)> = truth.iter().map(|l| (l.bbox.area(), l.id)).collect();
    by_area.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let denom = (by_area.len().max(2) - 1) as f64;
    let rank: BTreeMap<LabelId, f64> = by_area
        .iter()
        .enumerate()
        .map(|(i, (_, id))| (*id, i as f64 / denom))
        .collect();
    let mut map = BTreeMap::new();
    for l in truth.iter() {
        let base: f64 = beta.sample(&mut rng);
        let d = base + SIZE_DIFFICULTY_WEIGHT * (0.5 - rank[&l.id]);
        map.insert(l.id, d.clamp(0.0, 1.0));
    }
    DifficultyMap(map)
}

/// Crowd noise rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Spurious boxes per true instance.
    pub bkg_rate: f64,
    pub miss_rate: f64,
    pub loc_rate: f64,
    pub bib_rate: f64,
    /// Jitter standard deviation as a fraction of box width/height.
    pub loc_jitter_sigma: f64,
    pub seed: u64,
    /// Miss and Loc probabilities are `rate × (coupling + difficulty)`.
    #[serde(default = "default_coupling")]
    pub difficulty_coupling: f64,
}

fn default_coupling() -> f64 {
    0.5
}

impl NoiseSpec {
    pub fn none(seed: u64) -> Self {
        NoiseSpec {
            bkg_rate: 0.0,
            miss_rate: 0.0,
            loc_rate: 0.0,
            bib_rate: 0.0,
            loc_jitter_sigma: 0.3,
            seed,
            difficulty_coupling: default_coupling(),
        }
    }

    /// Rates loosely proportioned to the error mix of a real crowdsourced
    /// EDD dataset (an approximation; the real ratios are unpublished).
    pub fn paper_like(seed: u64) -> Self {
        NoiseSpec {
            bkg_rate: 0.05,
            miss_rate: 0.15,
            loc_rate: 0.17,
            bib_rate: 0.03,
            ..NoiseSpec::none(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bkg_rate", self.bkg_rate),
            ("miss_rate", self.miss_rate),
            ("loc_rate", self.loc_rate),
            ("bib_rate", self.bib_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.loc_jitter_sigma > 0.0 && self.loc_jitter_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "loc_jitter_sigma = {} must be positive",
                self.loc_jitter_sigma
            )));
        }
        if !(self.difficulty_coupling >= 0.0) {
            return Err(Error::Config("difficulty_coupling must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoiseType {
    Clean,
    Bkg,
    Miss,
    Loc,
    Bib,
}

/// Which dataset a noise record's `label_id` refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordSet {
    /// An emitted crowd label.
    Crowd,
    /// A ground-truth label that no longer appears in the crowd set.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub label_id: LabelId,
    pub set: RecordSet,
    pub noise_type: NoiseType,
    /// Ground-truth labels the record derives from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub origin: Vec<LabelId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseLedger {
    pub records: Vec<NoiseRecord>,
}

impl NoiseLedger {
    pub fn counts(&self) -> BTreeMap<NoiseType, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.noise_type).or_insert(0) += 1;
        }
        out
    }

    pub fn count(&self, t: NoiseType) -> usize {
        self.records.iter().filter(|r| r.noise_type == t).count()
    }

    /// Noise type of an emitted crowd label.
    pub fn crowd_type(&self, crowd_id: LabelId) -> Option<NoiseType> {
        self.records
            .iter()
            .find(|r| r.set == RecordSet::Crowd && r.label_id == crowd_id)
            .map(|r| r.noise_type)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(NoiseLedger {
            records: crate::io::read_json(path)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Corruption {
    pub crowd: AnnotationSet,
    pub ledger: NoiseLedger,
    /// Background boxes that could not be placed.
    pub bkg_skipped: usize,
}

enum Fate {
    Clean,
    Miss,
    Loc(BBox),
    BibHead(BBox, LabelId),
    BibTail,
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, sigma: f64) -> BBox {
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    for _ in 0..PLACEMENT_ATTEMPTS {
        let (cx, cy) = b.center();
        let cx = cx + n.sample(rng) * b.w();
        let cy = cy + n.sample(rng) * b.h();
        let w = (b.w() * (1.0 + n.sample(rng))).max(0.2 * b.w());
        let h = (b.h() * (1.0 + n.sample(rng))).max(0.2 * b.h());
        let cand = BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h).expect("positive size");
        // a misplaced box still overlaps its object; farther ones would be background errors
        if iou(&cand, b) >= BKG_MAX_IOU {
            return cand;
        }
    }
    BBox::new(b.x() + 0.3 * b.w(), b.y(), b.w(), b.h()).expect("positive size")
}

/// Produces a crowd-style copy of `truth` plus a per-label noise ledger.
///
/// Per image, in order: Miss deletes instances, Bib merges neighbouring
/// survivors into their hull, Loc jitters the remaining survivors. Background
/// boxes are then spread over images uniformly at random. Crowd label ids are
/// assigned sequentially in image order.
pub fn corrupt(truth: &AnnotationSet, spec: &NoiseSpec, difficulty: &DifficultyMap) -> Result<Corruption> {
    spec.validate()?;
    let mut crowd = AnnotationSet::empty_like(truth, Source::Crowd);
    let mut ledger = NoiseLedger::default();
    let image_ids = truth.image_ids();

    // background allocation: which image each spurious box goes to
    let n_truth = truth.len();
    let n_bkg = (spec.bkg_rate * n_truth as f64).ceil() as usize;
    let size_pool: Vec<(f64, f64)> = truth.iter().map(|l| (l.bbox.w(), l.bbox.h())).collect();
    let mut bkg_per_image: BTreeMap<ImageId, usize> = BTreeMap::new();
    if n_bkg > 0 && !image_ids.is_empty() && !size_pool.is_empty() {
        let mut rng = rng_for(spec.seed, &[stream::NOISE_BKG]);
        for _ in 0..n_bkg {
            let img = *image_ids.choose(&mut rng).expect("non-empty");
            *bkg_per_image.entry(img).or_insert(0) += 1;
        }
    }

    let mut next_id: LabelId = 1;
    let mut bkg_skipped = 0;
    for &image in &image_ids {
        let mut rng = rng_for(spec.seed, &[stream::NOISE, image]);
        let labels = truth.labels(image);
        let mut fates: Vec<Fate> = Vec::with_capacity(labels.len());

        for l in labels {
            let d = difficulty.get(l.id);
            let p = (spec.miss_rate * (spec.difficulty_coupling + d)).clamp(0.0, 1.0);
            fates.push(if rng.random_bool(p) { Fate::Miss } else { Fate::Clean });
        }

        if spec.bib_rate > 0.0 {
            for i in 0..labels.len() {
                if !matches!(fates[i], Fate::Clean) || !rng.random_bool(spec.bib_rate) {
                    continue;
                }
                let a = &labels[i].bbox;
                let partner = (0..labels.len())
                    .filter(|&j| j != i && matches!(fates[j], Fate::Clean))
                    .filter(|&j| labels[j].category_id == labels[i].category_id)
                    .map(|j| (a.gap(&labels[j].bbox), j))
                    .filter(|(g, j)| *g < a.w().min(labels[*j].bbox.w()))
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                if let Some((_, j)) = partner {
                    let (head, tail) = (i.min(j), i.max(j));
                    fates[head] = Fate::BibHead(a.hull(&labels[j].bbox), labels[tail].id);
                    fates[tail] = Fate::BibTail;
                }
            }
        }

        for (i, l) in labels.iter().enumerate() {
            if matches!(fates[i], Fate::Clean) {
                let d = difficulty.get(l.id);
                let p = (spec.loc_rate * (spec.difficulty_coupling + d)).clamp(0.0, 1.0);
                if rng.random_bool(p) {
                    fates[i] = Fate::Loc(jitter(&mut rng, &l.bbox, spec.loc_jitter_sigma));
                }
            }
        }

        for (l, fate) in labels.iter().zip(&fates) {
            let (emit, noise, origin) = match fate {
                Fate::Clean => (Some(l.bbox), NoiseType::Clean, vec![l.id]),
                Fate::Loc(b) => (Some(*b), NoiseType::Loc, vec![l.id]),
                Fate::BibHead(hull, other) => {
                    ledger.records.push(NoiseRecord {
                        label_id: l.id,
                        set: RecordSet::Truth,
                        noise_type: NoiseType::Bib,
                        origin: vec![],
                    });
                    (Some(*hull), NoiseType::Bib, vec![l.id, *other])
                }
                Fate::BibTail => (None, NoiseType::Bib, vec![]),
                Fate::Miss => (None, NoiseType::Miss, vec![]),
            };
            match emit {
                Some(b) => {
                    crowd.push(Label::human(next_id, image, l.category_id, b, Source::Crowd))?;
                    ledger.records.push(NoiseRecord {
                        label_id: next_id,
                        set: RecordSet::Crowd,
                        noise_type: noise,
                        origin,
                    });
                    next_id += 1;
                }
                None => ledger.records.push(NoiseRecord {
                    label_id: l.id,
                    set: RecordSet::Truth,
                    noise_type: noise,
                    origin,
                }),
            }
        }

        let want = bkg_per_image.get(&image).copied().unwrap_or(0);
        if want > 0 {
            let info = truth.image(image).expect("image from table");
            let (wf, hf) = (info.width as f64, info.height as f64);
            let category = labels.first().map_or(1, |l| l.category_id);
            for _ in 0..want {
                let mut placed = None;
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let (w, h) = *size_pool.choose(&mut rng).expect("non-empty");
                    let (w, h) = (w.min(wf), h.min(hf));
                    let x = rng.random_range(0.0..=(wf - w));
                    let y = rng.random_range(0.0..=(hf - h));
                    let cand = BBox::new(x, y, w, h).expect("positive size");
                    if labels.iter().all(|t| iou(&t.bbox, &cand) < BKG_MAX_IOU) {
                        placed = Some(cand);
                        break;
                    }
                }
                match placed {
                    Some(b) => {
                        crowd.push(Label::human(next_id, image, category, b, Source::Crowd))?;
                        ledger.records.push(NoiseRecord {
                            label_id: next_id,
                            set: RecordSet::Crowd,
                            noise_type: NoiseType::Bkg,
                            origin: vec![],
                        });
                        next_id += 1;
                    }
                    None => bkg_skipped += 1,
                }
            }
        }
    }
    if bkg_skipped > 0 {
        log::warn!("{bkg_skipped} background boxes could not be placed");
    }
    Ok(Corruption {
        crowd,
        ledger,
        bkg_skipped,
    })
}

/// Truth label ids consumed by Miss or Bib, i.e. absent from the crowd set.
pub fn removed_truth(ledger: &NoiseLedger) -> BTreeSet<LabelId> {
    ledger
        .records
        .iter()
        .filter(|r| r.set == RecordSet::Truth)
        .map(|r| r.label_id)
        .collect()
}
