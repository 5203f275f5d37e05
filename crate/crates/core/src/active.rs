//! Active selection of images for expert re-annotation.
//!
//! Each iteration trains the expert-label detector on `D_p` and the
//! consensus detector on `D_a`, predicts on the images still carrying crowd
//! labels, scores them by label inconsistency and sends the `k` worst to
//! the expert. Their crowd labels leave `D_c`, the expert labels join `D_p`,
//! and the consensus set grows with the newly corroborated labels.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::coco::save_coco;
use crate::consensus::{build_consensus_increment, DEFAULT_DELTA};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::io::{create_dir_all, write_json};
use crate::ledger::{Action, Actor, BudgetLedger, CostModel};
use crate::lsm::{image_score, partition_image, LsmMode, DEFAULT_MATCH_IOU};
use crate::model::{AnnotationSet, ImageId, Label, Source};
use crate::rng::{rng_for, stream};

/// How the next batch of images is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Highest image inconsistency score first.
    #[default]
    Active,
    /// Uniformly at random, same batch sizes.
    Random,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Selection::Active),
            "random" => Ok(Selection::Random),
            other => Err(Error::Config(format!("unknown selection `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Size of the random initial expert sample.
    pub x0: usize,
    /// Images selected per iteration.
    pub k: usize,
    /// Number of iterations.
    pub g: usize,
    pub delta: f64,
    pub iou_threshold: f64,
    pub mode: LsmMode,
    pub selection: Selection,
    /// Stop early once the ledger total reaches this many cost units.
    pub budget_cap: Option<f64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            x0: 40,
            k: 40,
            g: 4,
            delta: DEFAULT_DELTA,
            iou_threshold: DEFAULT_MATCH_IOU,
            mode: LsmMode::Dual,
            selection: Selection::Active,
            budget_cap: None,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("iou threshold", self.iou_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1)")));
            }
        }
        if self.x0 == 0 {
            return Err(Error::Config("initial sample size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Supplies expert labels for an image.
pub trait ExpertOracle {
    fn annotate(&mut self, image: ImageId) -> Result<Vec<Label>>;
}

/// Answers with the ground truth.
#[derive(Debug, Clone)]
pub struct TruthOracle {
    truth: Arc<AnnotationSet>,
}

impl TruthOracle {
    pub fn new(truth: Arc<AnnotationSet>) -> Self {
        TruthOracle { truth }
    }
}

impl ExpertOracle for TruthOracle {
    fn annotate(&mut self, image: ImageId) -> Result<Vec<Label>> {
        if !self.truth.has_image(image) {
            return Err(Error::MissingImage(image));
        }
        Ok(self
            .truth
            .labels(image)
            .iter()
            .map(|l| {
                let mut l = l.clone();
                l.source = Source::Expert;
                l.confidence = 1.0;
                l
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Iteration that produced this batch (0 for the initial sample).
    pub iteration: usize,
    pub selected: Vec<ImageId>,
    /// Inconsistency scores of the selected images (active selection only).
    pub scores: Vec<f64>,
    pub expert_instances: usize,
    pub consensus_instances: usize,
    pub crowd_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub config: LoopConfig,
    pub seed: u64,
    pub iteration: usize,
    /// Selected images in the order they were chosen.
    pub selected: Vec<ImageId>,
    pub history: Vec<IterationRecord>,
    /// Expert labels; covers exactly the selected images.
    pub d_p: AnnotationSet,
    /// Crowd labels of the images not selected yet.
    pub d_c: AnnotationSet,
    /// Expert labels corroborated by the crowd.
    pub d_a: AnnotationSet,
    /// Crowd labels of every image as first received.
    pub crowd_archive: AnnotationSet,
    pub ledger: BudgetLedger,
    pub complete: bool,
}

fn acquire(state: &mut PipelineState, images: &[ImageId], oracle: &mut dyn ExpertOracle) -> Result<()> {
    for &image in images {
        let (info, _) = state
            .d_c
            .remove_image(image)
            .ok_or_else(|| Error::State(format!("image {image} already selected")))?;
        state.d_p.add_image(info)?;
        let labels = oracle.annotate(image)?;
        state.ledger.charge(Actor::Expert, Action::Annotate, image, labels.len() as u64);
        for mut l in labels {
            l.image_id = image;
            if state.d_p.contains_id(l.id) {
                l.id = state.d_p.next_label_id();
            }
            state.d_p.push(l)?;
        }
        state.selected.push(image);
    }
    let batch: BTreeSet<ImageId> = images.iter().copied().collect();
    state.d_a = build_consensus_increment(&state.d_p, &state.crowd_archive, &state.d_a, &batch, state.config.delta)?;
    Ok(())
}

fn record(state: &PipelineState, selected: Vec<ImageId>, scores: Vec<f64>) -> IterationRecord {
    IterationRecord {
        iteration: state.iteration,
        selected,
        scores,
        expert_instances: state.d_p.len(),
        consensus_instances: state.d_a.len(),
        crowd_instances: state.d_c.len(),
    }
}

/// Draws the initial expert sample and sets up all datasets.
///
/// Every crowd label is charged once; the sample is charged at the expert rate.
pub fn initialize(
    crowd: &AnnotationSet,
    oracle: &mut dyn ExpertOracle,
    config: LoopConfig,
    costs: CostModel,
    seed: u64,
) -> Result<PipelineState> {
    config.validate()?;
    costs.validate()?;
    let pool = crowd.image_ids();
    if config.x0 > pool.len() {
        return Err(Error::Config(format!(
            "initial sample of {} exceeds the {} available images",
            config.x0,
            pool.len()
        )));
    }
    let mut ledger = BudgetLedger::new(costs);
    for image in &pool {
        let n = crowd.labels(*image).len() as u64;
        if n > 0 {
            ledger.charge(Actor::Crowd, Action::Annotate, *image, n);
        }
    }
    let mut rng = rng_for(seed, &[stream::INIT]);
    let mut x0: Vec<ImageId> = rand::seq::index::sample(&mut rng, pool.len(), config.x0)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    x0.sort_unstable();

    let mut d_p = AnnotationSet::new(Source::Expert);
    d_p.set_categories(crowd.categories().to_vec());
    let mut d_a = d_p.clone();
    d_a.set_source(Source::Expert);
    let mut crowd_archive = crowd.clone();
    crowd_archive.set_source(Source::Crowd);
    let complete = x0.len() == pool.len() || config.g == 0;
    let mut state = PipelineState {
        config,
        seed,
        iteration: 0,
        selected: Vec::new(),
        history: Vec::new(),
        d_p,
        d_c: crowd_archive.clone(),
        d_a,
        crowd_archive,
        ledger,
        complete,
    };
    acquire(&mut state, &x0, oracle)?;
    let rec = record(&state, x0, Vec::new());
    state.history.push(rec);
    Ok(state)
}

/// Image scores of the pool under the given predictions, best first (ties by image id).
pub fn rank_images(
    crowd: &AnnotationSet,
    model_p: &AnnotationSet,
    model_a: &AnnotationSet,
    iou_threshold: f64,
    mode: LsmMode,
) -> Vec<(ImageId, f64)> {
    let mut scored: Vec<(ImageId, f64)> = crowd
        .image_ids()
        .into_iter()
        .map(|image| {
            let part = partition_image(
                crowd.labels(image),
                model_p.labels(image),
                model_a.labels(image),
                iou_threshold,
                mode,
            );
            (image, image_score(&part))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// Trains both detectors on the current expert and consensus sets.
pub fn fit_detectors(state: &PipelineState, model_p: &mut dyn Detector, model_a: &mut dyn Detector) -> Result<()> {
    model_p.fit(&state.d_p)?;
    if state.config.mode == LsmMode::Dual {
        model_a.fit(&state.d_a)?;
    }
    Ok(())
}

/// One train, predict, score, select and re-annotate round.
pub fn run_iteration(
    state: &mut PipelineState,
    model_p: &mut dyn Detector,
    model_a: &mut dyn Detector,
    oracle: &mut dyn ExpertOracle,
) -> Result<()> {
    if state.complete || state.iteration >= state.config.g {
        return Err(Error::State(format!(
            "loop already finished after {} iterations",
            state.iteration
        )));
    }
    fit_detectors(state, model_p, model_a)?;
    let pool = state.d_c.image_ids();
    let k = state.config.k.min(pool.len());

    let (chosen, scores) = match state.config.selection {
        Selection::Active => {
            let bp = model_p.predict(&pool)?;
            let ba = match state.config.mode {
                LsmMode::Dual => model_a.predict(&pool)?,
                LsmMode::Single => AnnotationSet::empty_like(&bp, Source::ModelA),
            };
            let ranked = rank_images(&state.d_c, &bp, &ba, state.config.iou_threshold, state.config.mode);
            ranked.into_iter().take(k).unzip()
        }
        Selection::Random => {
            let mut rng = rng_for(state.seed, &[stream::SELECT, state.iteration as u64]);
            let mut shuffled = pool.clone();
            shuffled.shuffle(&mut rng);
            shuffled.truncate(k);
            (shuffled, Vec::new())
        }
    };
    acquire(state, &chosen, oracle)?;
    state.iteration += 1;
    let rec = record(state, chosen, scores);
    state.history.push(rec);

    let capped = state.config.budget_cap.is_some_and(|cap| state.ledger.total() >= cap);
    if state.iteration >= state.config.g || state.d_c.num_images() == 0 || capped {
        state.complete = true;
    }
    Ok(())
}

pub const STATE_FILE: &str = "state.json";

fn iteration_dir(root: &Path, iteration: usize) -> PathBuf {
    root.join(format!("iter_{iteration:03}"))
}

impl PipelineState {
    /// Writes `iter_NNN/` under `root`: the full state plus the datasets as COCO and the ledger.
    pub fn save_checkpoint(&self, root: &Path) -> Result<PathBuf> {
        let dir = iteration_dir(root, self.iteration);
        create_dir_all(&dir)?;
        save_coco(&self.d_p, &dir.join("d_p.json"))?;
        save_coco(&self.d_c, &dir.join("d_c.json"))?;
        save_coco(&self.d_a, &dir.join("d_a.json"))?;
        self.ledger.save(&dir.join("ledger.json"))?;
        // state last: its presence marks the checkpoint as complete
        write_json(&dir.join(STATE_FILE), self)?;
        Ok(dir)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<PipelineState> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let state: PipelineState = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        state.check_invariants().map_err(|e| Error::Checkpoint {
            path,
            message: e.to_string(),
        })?;
        Ok(state)
    }

    /// The checkpoint directory with the highest iteration under `root`, if any.
    pub fn latest_checkpoint(root: &Path) -> Option<PathBuf> {
        let entries = fs::read_dir(root).ok()?;
        entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let n: usize = name.strip_prefix("iter_")?.parse().ok()?;
                e.path().join(STATE_FILE).exists().then(|| (n, e.path()))
            })
            .max_by_key(|(n, _)| *n)
            .map(|(_, p)| p)
    }

    /// Structural invariants of a loop state.
    pub fn check_invariants(&self) -> Result<()> {
        let selected: BTreeSet<ImageId> = self.selected.iter().copied().collect();
        if selected.len() != self.selected.len() {
            return Err(Error::State("an image was selected twice".into()));
        }
        let covered: BTreeSet<ImageId> = self.d_p.image_ids().into_iter().collect();
        if covered != selected {
            return Err(Error::State("expert set does not cover exactly the selected images".into()));
        }
        if self.d_c.image_ids().iter().any(|i| selected.contains(i)) {
            return Err(Error::State("selected image still carries crowd labels".into()));
        }
        if self.d_a.iter().any(|l| !self.d_p.contains_id(l.id)) {
            return Err(Error::State("consensus label missing from the expert set".into()));
        }
        Ok(())
    }

    /// Fraction of images selected so far.
    pub fn selected_fraction(&self) -> f64 {
        self.selected.len() as f64 / self.crowd_archive.num_images().max(1) as f64
    }
}

/// Runs the remaining iterations, checkpointing after each, then fits the final detectors.
pub fn run_full(
    state: &mut PipelineState,
    model_p: &mut dyn Detector,
    model_a: &mut dyn Detector,
    oracle: &mut dyn ExpertOracle,
    checkpoints: Option<&Path>,
) -> Result<()> {
    if let Some(root) = checkpoints {
        if PipelineState::latest_checkpoint(root).is_none() {
            state.save_checkpoint(root)?;
        }
    }
    while !state.complete && state.iteration < state.config.g {
        run_iteration(state, model_p, model_a, oracle)?;
        log::info!(
            "iteration {}: {} selected, {} expert labels, {} consensus labels",
            state.iteration,
            state.selected.len(),
            state.d_p.len(),
            state.d_a.len()
        );
        if let Some(root) = checkpoints {
            state.save_checkpoint(root)?;
        }
    }
    state.complete = true;
    fit_detectors(state, model_p, model_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{SimConfig, SimulatedDetector};
    use crate::noise::{assign_difficulty, corrupt, generate_corpus, CorpusSpec, NoiseSpec};

    struct Fixture {
        truth: Arc<AnnotationSet>,
        crowd: AnnotationSet,
        p: SimulatedDetector,
        a: SimulatedDetector,
    }

    fn fixture(images: usize, seed: u64) -> Fixture {
        let truth = generate_corpus(
            &CorpusSpec {
                images,
                ..CorpusSpec::default()
            },
            seed,
        );
        let diff = assign_difficulty(&truth, seed);
        let crowd = corrupt(&truth, &NoiseSpec::paper_like(seed), &diff).unwrap().crowd;
        let truth = Arc::new(truth);
        let diff = Arc::new(diff);
        let p = SimulatedDetector::new(Source::ModelP, SimConfig::default(), truth.clone(), diff.clone(), seed);
        let a = SimulatedDetector::new(Source::ModelA, SimConfig::default(), truth.clone(), diff, seed);
        Fixture { truth, crowd, p, a }
    }

    fn cfg(x0: usize, k: usize, g: usize) -> LoopConfig {
        LoopConfig {
            x0,
            k,
            g,
            ..LoopConfig::default()
        }
    }

    #[test]
    fn initialize_guards_and_determinism() {
        let f = fixture(20, 1);
        let mut o = TruthOracle::new(f.truth.clone());
        assert!(matches!(
            initialize(&f.crowd, &mut o, cfg(0, 1, 1), CostModel::default(), 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            initialize(&f.crowd, &mut o, cfg(21, 1, 1), CostModel::default(), 1),
            Err(Error::Config(_))
        ));
        let a = initialize(&f.crowd, &mut o, cfg(5, 1, 1), CostModel::default(), 7).unwrap();
        let b = initialize(&f.crowd, &mut o, cfg(5, 1, 1), CostModel::default(), 7).unwrap();
        assert_eq!(a.selected, b.selected);
        a.check_invariants().unwrap();
        assert_eq!(a.d_c.num_images(), 15);

        let all = initialize(&f.crowd, &mut o, cfg(20, 1, 1), CostModel::default(), 7).unwrap();
        assert!(all.complete);
        assert_eq!(all.d_p.len(), f.truth.len());
    }

    #[test]
    fn loop_grows_by_k_and_keeps_invariants() {
        let mut f = fixture(40, 2);
        let mut o = TruthOracle::new(f.truth.clone());
        let mut s = initialize(&f.crowd, &mut o, cfg(5, 6, 4), CostModel::default(), 2).unwrap();
        let mut prev_p = s.d_p.len();
        let mut prev_a: BTreeSet<u64> = s.d_a.iter().map(|l| l.id).collect();
        for i in 1..=4 {
            run_iteration(&mut s, &mut f.p, &mut f.a, &mut o).unwrap();
            s.check_invariants().unwrap();
            assert_eq!(s.selected.len(), 5 + 6 * i);
            assert!(s.d_p.len() >= prev_p);
            let now_a: BTreeSet<u64> = s.d_a.iter().map(|l| l.id).collect();
            assert!(prev_a.is_subset(&now_a));
            prev_p = s.d_p.len();
            prev_a = now_a;
        }
        assert!(s.complete);
        assert!(run_iteration(&mut s, &mut f.p, &mut f.a, &mut o).is_err());

        // ledger: all crowd labels plus expert labels on the selected images
        let crowd: u64 = f.crowd.len() as u64;
        let expert: u64 = s.selected.iter().map(|i| f.truth.labels(*i).len() as u64).sum();
        let by_kind = s.ledger.instances_by_kind();
        assert_eq!(by_kind[&(Actor::Crowd, Action::Annotate)], crowd);
        assert_eq!(by_kind[&(Actor::Expert, Action::Annotate)], expert);
    }

    #[test]
    fn exhaustion_selects_everything() {
        let mut f = fixture(12, 3);
        let mut o = TruthOracle::new(f.truth.clone());
        let mut s = initialize(&f.crowd, &mut o, cfg(4, 8, 3), CostModel::default(), 3).unwrap();
        run_iteration(&mut s, &mut f.p, &mut f.a, &mut o).unwrap();
        assert_eq!(s.selected.len(), 12);
        assert!(s.complete);
    }

    #[test]
    fn zero_k_only_refreshes_detectors() {
        let mut f = fixture(10, 4);
        let mut o = TruthOracle::new(f.truth.clone());
        let mut s = initialize(&f.crowd, &mut o, cfg(3, 0, 1), CostModel::default(), 4).unwrap();
        let before = s.clone();
        run_iteration(&mut s, &mut f.p, &mut f.a, &mut o).unwrap();
        assert_eq!(s.selected, before.selected);
        assert_eq!(s.d_p, before.d_p);
        assert_eq!(s.ledger, before.ledger);
        assert_eq!(f.p.skill().training_instance_count, before.d_p.len() as u64);
    }

    #[test]
    fn zero_scores_fall_back_to_low_ids() {
        let crowd = AnnotationSet::empty_like(&generate_corpus(&CorpusSpec { images: 6, ..CorpusSpec::default() }, 5), Source::Crowd);
        let empty = AnnotationSet::empty_like(&crowd, Source::ModelP);
        let ranked = rank_images(&crowd, &empty, &empty, 0.5, LsmMode::Dual);
        let ids: Vec<_> = ranked.iter().map(|r| r.0).collect();
        assert_eq!(ids, crowd.image_ids());
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let f = fixture(30, 6);
        let run = |stop_after: Option<usize>, root: &Path| {
            let mut p = f.p.clone();
            let mut a = f.a.clone();
            let mut o = TruthOracle::new(f.truth.clone());
            let mut s = initialize(&f.crowd, &mut o, cfg(4, 4, 4), CostModel::default(), 6).unwrap();
            s.save_checkpoint(root).unwrap();
            if let Some(n) = stop_after {
                for _ in 0..n {
                    run_iteration(&mut s, &mut p, &mut a, &mut o).unwrap();
                    s.save_checkpoint(root).unwrap();
                }
                let latest = PipelineState::latest_checkpoint(root).unwrap();
                s = PipelineState::load_checkpoint(&latest).unwrap();
                assert_eq!(s.iteration, n);
            }
            run_full(&mut s, &mut p, &mut a, &mut o, Some(root)).unwrap();
            s
        };
        let whole = run(None, &dir.path().join("a"));
        let resumed = run(Some(2), &dir.path().join("b"));
        assert_eq!(whole, resumed);
        let a = fs::read(dir.path().join("a/iter_004/d_p.json")).unwrap();
        let b = fs::read(dir.path().join("b/iter_004/d_p.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let it = dir.path().join("iter_001");
        fs::create_dir_all(&it).unwrap();
        fs::write(it.join(STATE_FILE), "{\"config\": 3").unwrap();
        assert!(matches!(PipelineState::load_checkpoint(&it), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn random_selection_is_seeded() {
        let f = fixture(30, 7);
        let go = |seed| {
            let (mut p, mut a) = (f.p.clone(), f.a.clone());
            let mut o = TruthOracle::new(f.truth.clone());
            let mut c = cfg(4, 5, 2);
            c.selection = Selection::Random;
            let mut s = initialize(&f.crowd, &mut o, c, CostModel::default(), seed).unwrap();
            run_full(&mut s, &mut p, &mut a, &mut o, None).unwrap();
            s.selected
        };
        assert_eq!(go(1), go(1));
        assert_ne!(go(1), go(2));
    }
}
