//! The whole cleaning procedure on one dataset, plus a synthetic experiment harness.
//!
//! [`clean_labels`] runs the active loop and the correction step with an
//! automatic reviewer; [`prepare_review`] and [`finish_review`] split the
//! same procedure around a human review session. [`run_experiment`]
//! compares training on noisy, cleaned and clean labels on a synthetic corpus.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::active::{initialize, run_full, ExpertOracle, LoopConfig, PipelineState, Selection, TruthOracle};
use crate::coco::{load_coco, save_coco};
use crate::correction::{
    apply_decisions, charge_reviews, run_correction, truth_oracle_decisions, CorrectionConfig, CorrectionOutcome,
    CorrectionReport, ImageOverlay, ReviewItem,
};
use crate::detector::{fit_simulated_against, predict_simulated, Detector, SimConfig, SimulatedDetector};
use crate::error::{Error, Result};
use crate::eval::{label_quality, EvalReport, LabelQuality};
use crate::io::{create_dir_all, read_json, write_json};
use crate::ledger::{BudgetLedger, CostModel};
use crate::lsm::LsmMode;
use crate::model::{AnnotationSet, ImageId, Label, Source};
use crate::noise::{assign_difficulty, corrupt, generate_corpus, CorpusSpec, DifficultyMap, NoiseLedger, NoiseSpec};
use crate::queue::QueueStore;
use crate::rng::{derive_seed, stream};

/// A generated corpus with its crowd labels.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Ground truth of train and test images together.
    pub truth: Arc<AnnotationSet>,
    pub train: AnnotationSet,
    pub test: AnnotationSet,
    pub difficulty: Arc<DifficultyMap>,
    /// Crowd labels of the training images.
    pub crowd: AnnotationSet,
    pub noise: NoiseLedger,
}

/// Generates `train_images + test_images` images and corrupts the training part.
pub fn synthesize(corpus: &CorpusSpec, train_images: usize, test_images: usize, noise: &NoiseSpec, seed: u64) -> Result<SyntheticData> {
    let spec = CorpusSpec {
        images: train_images + test_images,
        ..corpus.clone()
    };
    let truth = generate_corpus(&spec, seed);
    let ids = truth.image_ids();
    let train = truth.subset(ids[..train_images].iter());
    let test = truth.subset(ids[train_images..].iter());
    let difficulty = assign_difficulty(&truth, seed);
    let noise = NoiseSpec { seed, ..noise.clone() };
    let out = corrupt(&train, &noise, &difficulty)?;
    Ok(SyntheticData {
        truth: Arc::new(truth),
        train,
        test,
        difficulty: Arc::new(difficulty),
        crowd: out.crowd,
        noise: out.ledger,
    })
}

/// Settings of one cleaning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningConfig {
    pub loop_cfg: LoopConfig,
    pub correction: CorrectionConfig,
    pub costs: CostModel,
    pub detector: SimConfig,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            loop_cfg: LoopConfig::default(),
            correction: CorrectionConfig::default(),
            costs: CostModel::default(),
            detector: SimConfig::default(),
        }
    }
}

impl CleaningConfig {
    /// The correction step follows the loop's matching threshold and mode.
    fn correction(&self) -> CorrectionConfig {
        CorrectionConfig {
            iou_threshold: self.loop_cfg.iou_threshold,
            mode: self.loop_cfg.mode,
            ..self.correction
        }
    }
}

/// Result of [`clean_labels`].
#[derive(Debug, Clone)]
pub struct CleaningRun {
    pub state: PipelineState,
    /// Cleaned labels of the images the expert never saw.
    pub b_clean: AnnotationSet,
    /// Expert labels plus cleaned labels, renumbered.
    pub cleaned: AnnotationSet,
    pub queue: Vec<ReviewItem>,
    pub report: CorrectionReport,
    pub ledger: BudgetLedger,
}

/// Everything a reviewer needs, before review.
#[derive(Debug, Clone)]
pub struct Step2 {
    pub state: PipelineState,
    pub outcome: CorrectionOutcome,
    pub overlays: BTreeMap<ImageId, ImageOverlay>,
}

/// Runs the active loop with the given detectors and prepares the correction step.
///
/// With `checkpoints` set, every iteration is checkpointed there and the
/// latest existing checkpoint is resumed.
pub fn step1_and_correct(
    crowd: &AnnotationSet,
    oracle: &mut dyn ExpertOracle,
    model_p: &mut dyn Detector,
    model_a: &mut dyn Detector,
    cfg: &CleaningConfig,
    seed: u64,
    checkpoints: Option<&Path>,
) -> Result<Step2> {
    let resumed = checkpoints.and_then(PipelineState::latest_checkpoint);
    let mut state = match resumed {
        Some(dir) => {
            log::info!("resuming from {}", dir.display());
            let s = PipelineState::load_checkpoint(&dir)?;
            if s.config != cfg.loop_cfg || s.seed != seed {
                return Err(Error::Checkpoint {
                    path: dir,
                    message: "checkpoint was written with a different configuration or seed".into(),
                });
            }
            s
        }
        None => initialize(crowd, oracle, cfg.loop_cfg.clone(), cfg.costs.clone(), seed)?,
    };
    run_full(&mut state, model_p, model_a, oracle, checkpoints)?;

    let pool = state.d_c.image_ids();
    let bp = model_p.predict(&pool)?;
    let ba = match cfg.loop_cfg.mode {
        LsmMode::Dual => model_a.predict(&pool)?,
        LsmMode::Single => AnnotationSet::empty_like(&bp, Source::ModelA),
    };
    let outcome = run_correction(&state.d_c, &bp, &ba, &cfg.correction())?;
    let overlays = outcome
        .partitions
        .iter()
        .filter_map(|(id, part)| state.d_c.image(*id).map(|info| (*id, ImageOverlay::from_partition(info, part))))
        .collect();
    Ok(Step2 {
        state,
        outcome,
        overlays,
    })
}

/// The simulated detectors used by [`run_step1_and_correct`], keyed by `seed`.
pub fn simulated_detectors(
    truth: &Arc<AnnotationSet>,
    difficulty: &Arc<DifficultyMap>,
    sim: &SimConfig,
    seed: u64,
) -> (SimulatedDetector, SimulatedDetector) {
    let det_seed = derive_seed(seed, &[stream::DETECT, 1]);
    (
        SimulatedDetector::new(Source::ModelP, sim.clone(), truth.clone(), difficulty.clone(), det_seed),
        SimulatedDetector::new(Source::ModelA, sim.clone(), truth.clone(), difficulty.clone(), det_seed),
    )
}

/// [`step1_and_correct`] with simulated detectors and the truth as expert.
pub fn run_step1_and_correct(
    crowd: &AnnotationSet,
    truth: &Arc<AnnotationSet>,
    difficulty: &Arc<DifficultyMap>,
    cfg: &CleaningConfig,
    seed: u64,
    checkpoints: Option<&Path>,
) -> Result<Step2> {
    let (mut model_p, mut model_a) = simulated_detectors(truth, difficulty, &cfg.detector, seed);
    let mut oracle = TruthOracle::new(truth.clone());
    step1_and_correct(crowd, &mut oracle, &mut model_p, &mut model_a, cfg, seed, checkpoints)
}

/// Final cleaned set from a resolved queue.
pub fn assemble(state: &PipelineState, corrected: &AnnotationSet, queue: &[ReviewItem]) -> Result<(AnnotationSet, AnnotationSet, BudgetLedger)> {
    let b_clean = apply_decisions(corrected, queue)?;
    let mut ledger = state.ledger.clone();
    charge_reviews(&mut ledger, queue);
    let cleaned = AnnotationSet::merge_renumbered(Source::Crowd, &[&state.d_p, &b_clean])?;
    Ok((b_clean, cleaned, ledger))
}

/// Closed loop: ground truth acts as expert and as reviewer.
pub fn clean_labels(
    crowd: &AnnotationSet,
    truth: &Arc<AnnotationSet>,
    difficulty: &Arc<DifficultyMap>,
    cfg: &CleaningConfig,
    seed: u64,
    workdir: Option<&Path>,
) -> Result<CleaningRun> {
    let checkpoints = workdir.map(|w| w.join(CHECKPOINT_DIR));
    let step2 = run_step1_and_correct(crowd, truth, difficulty, cfg, seed, checkpoints.as_deref())?;
    review_with_truth(step2, truth, workdir)
}

/// Resolves the queue of `step2` with the truth-oracle reviewer and assembles the result.
///
/// With `workdir` set the queue and its decisions are persisted under `workdir/review`.
pub fn review_with_truth(step2: Step2, truth: &AnnotationSet, workdir: Option<&Path>) -> Result<CleaningRun> {
    let decisions = truth_oracle_decisions(&step2.outcome.corrected, &step2.outcome.queue, truth);
    let queue = match workdir {
        Some(w) => {
            let mut store = prepare_review(&step2, &w.join(REVIEW_DIR))?;
            for (id, d) in decisions {
                store.record(id, d, "truth-oracle", None)?;
            }
            store.items().to_vec()
        }
        None => {
            let mut q = step2.outcome.queue.clone();
            for ((id, d), item) in decisions.into_iter().zip(q.iter_mut()) {
                debug_assert_eq!(id, item.item_id);
                item.resolve(d)?;
            }
            q
        }
    };
    let Step2 { state, outcome, .. } = step2;
    let (b_clean, cleaned, ledger) = assemble(&state, &outcome.corrected, &queue)?;
    let mut report = outcome.report;
    report.record_resolutions(&queue);
    Ok(CleaningRun {
        state,
        b_clean,
        cleaned,
        queue,
        report,
        ledger,
    })
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REVIEW_DIR: &str = "review";
pub const CORRECTED_FILE: &str = "corrected.json";
pub const EXPERT_FILE: &str = "expert.json";
pub const STEP1_LEDGER_FILE: &str = "ledger-step1.json";
pub const REPORT_FILE: &str = "correction-report.json";

/// Persists the correction step for a human reviewer under `dir`.
pub fn prepare_review(step2: &Step2, dir: &Path) -> Result<QueueStore> {
    create_dir_all(dir)?;
    save_coco(&step2.outcome.corrected, &dir.join(CORRECTED_FILE))?;
    save_coco(&step2.state.d_p, &dir.join(EXPERT_FILE))?;
    step2.state.ledger.save(&dir.join(STEP1_LEDGER_FILE))?;
    write_json(&dir.join(REPORT_FILE), &step2.outcome.report)?;
    QueueStore::create(dir, &step2.outcome.queue, &step2.overlays)
}

/// Combines a reviewed queue under `dir` with the auto-corrected and expert labels.
///
/// Returns the cleaned set, the ledger including review charges, and the report.
pub fn finish_review(dir: &Path, costs: &CostModel) -> Result<(AnnotationSet, BudgetLedger, CorrectionReport)> {
    let store = QueueStore::open(dir)?;
    let corrected = load_coco(&dir.join(CORRECTED_FILE), Source::Crowd)?;
    let expert = load_coco(&dir.join(EXPERT_FILE), Source::Expert)?;
    let mut ledger = BudgetLedger::load(&dir.join(STEP1_LEDGER_FILE), costs.clone())?;
    let b_clean = apply_decisions(&corrected, store.items())?;
    charge_reviews(&mut ledger, store.items());
    let cleaned = AnnotationSet::merge_renumbered(Source::Crowd, &[&expert, &b_clean])?;
    let mut report: CorrectionReport = read_json(&dir.join(REPORT_FILE))?;
    report.record_resolutions(store.items());
    Ok((cleaned, ledger, report))
}

/// Predictions on `test` of a simulated detector trained on `train`.
///
/// The fit accounts for label noise in `train`; randomness is keyed by
/// `seed` alone, so methods compared under one seed share their draws.
pub fn train_and_predict(train: &AnnotationSet, data: &SyntheticData, sim: &SimConfig, seed: u64) -> Vec<Label> {
    let skill = fit_simulated_against(train, Source::ModelP, sim, &data.truth);
    let det_seed = derive_seed(seed, &[stream::DETECT, 2]);
    predict_simulated(&skill, &data.test.image_ids(), &data.truth, &data.difficulty, det_seed)
        .iter()
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub train_images: usize,
    pub test_images: usize,
    pub noise: NoiseSpec,
    pub cleaning: CleaningConfig,
    /// Also run random selection and single-model variants.
    pub ablations: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // 300 training images; the initial sample and batch size keep the
        // selected fraction at 80/300 after four iterations.
        ExperimentConfig {
            corpus: CorpusSpec::default(),
            train_images: 300,
            test_images: 100,
            noise: NoiseSpec::paper_like(0),
            cleaning: CleaningConfig {
                loop_cfg: LoopConfig {
                    x0: 16,
                    k: 16,
                    g: 4,
                    ..LoopConfig::default()
                },
                ..CleaningConfig::default()
            },
            ablations: true,
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub crowd_quality: LabelQuality,
    /// One row per training set: noisy, cleaned (and variants), clean.
    pub rows: Vec<EvalReport>,
    pub correction: CorrectionReport,
    pub selected_fraction: f64,
}

impl ExperimentReport {
    pub fn row(&self, method: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub const NOISY: &str = "noisy";
pub const CLEAN: &str = "clean";
pub const OURS: &str = "ours";
pub const OURS_RANDOM: &str = "ours-random";
pub const OURS_SINGLE: &str = "ours-single";

/// Noisy vs cleaned vs clean training on one synthetic corpus.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, workdir: Option<&Path>) -> Result<ExperimentReport> {
    let data = synthesize(&cfg.corpus, cfg.train_images, cfg.test_images, &cfg.noise, seed)?;
    let sim = &cfg.cleaning.detector;
    let row = |method: &str, train: &AnnotationSet, budget: Option<f64>| {
        let preds = train_and_predict(train, &data, sim, seed);
        let mut r = EvalReport::new(method).with_detection(&preds, &data.test);
        r.label_quality = Some(label_quality(train, &data.train));
        r.budget_percent = budget;
        r
    };

    let crowd_cost = {
        let mut l = BudgetLedger::new(cfg.cleaning.costs.clone());
        for image in data.crowd.image_ids() {
            l.charge(crate::ledger::Actor::Crowd, crate::ledger::Action::Annotate, image, data.crowd.labels(image).len() as u64);
        }
        l.budget_percent(data.train.len() as u64)
    };
    let mut rows = vec![row(NOISY, &data.crowd, Some(crowd_cost))];

    let main = clean_labels(&data.crowd, &data.truth, &data.difficulty, &cfg.cleaning, seed, workdir)?;
    rows.push(row(OURS, &main.cleaned, Some(main.ledger.budget_percent(data.train.len() as u64))));

    if cfg.ablations {
        let variants = [
            (OURS_RANDOM, Selection::Random, cfg.cleaning.loop_cfg.mode),
            (OURS_SINGLE, cfg.cleaning.loop_cfg.selection, LsmMode::Single),
        ];
        for (name, selection, mode) in variants {
            let mut c = cfg.cleaning.clone();
            c.loop_cfg.selection = selection;
            c.loop_cfg.mode = mode;
            let run = clean_labels(&data.crowd, &data.truth, &data.difficulty, &c, seed, None)?;
            rows.push(row(name, &run.cleaned, Some(run.ledger.budget_percent(data.train.len() as u64))));
        }
    }
    rows.push(row(CLEAN, &data.train, Some(100.0)));

    Ok(ExperimentReport {
        seed,
        crowd_quality: label_quality(&data.crowd, &data.train),
        rows,
        correction: main.report,
        selected_fraction: main.state.selected_fraction(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            train_images: 60,
            test_images: 20,
            cleaning: CleaningConfig {
                loop_cfg: LoopConfig {
                    x0: 6,
                    k: 6,
                    g: 2,
                    ..LoopConfig::default()
                },
                ..CleaningConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn cleaning_improves_labels() {
        let r = run_experiment(&small(), 3, None).unwrap();
        let noisy = r.row(NOISY).unwrap().label_quality.as_ref().unwrap().f1.unwrap();
        let ours = r.row(OURS).unwrap().label_quality.as_ref().unwrap().f1.unwrap();
        assert!(ours > noisy, "{ours} vs {noisy}");
        let clean = r.row(CLEAN).unwrap();
        assert_eq!(clean.label_quality.as_ref().unwrap().f1, Some(1.0));
        assert!(r.row(OURS).unwrap().budget_percent.unwrap() < 100.0);
        assert_eq!(r.rows.len(), 5);
    }

    #[test]
    fn closed_loop_with_workdir_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let data = synthesize(&cfg.corpus, 60, 0, &cfg.noise, 4).unwrap();
        let a = clean_labels(&data.crowd, &data.truth, &data.difficulty, &cfg.cleaning, 4, None).unwrap();
        let b = clean_labels(&data.crowd, &data.truth, &data.difficulty, &cfg.cleaning, 4, Some(dir.path())).unwrap();
        assert_eq!(a.cleaned, b.cleaned);
        let store = QueueStore::open(&dir.path().join(REVIEW_DIR)).unwrap();
        assert_eq!(store.log().len(), a.queue.len());
    }

    #[test]
    fn review_handoff_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let data = synthesize(&cfg.corpus, 60, 0, &cfg.noise, 5).unwrap();
        let step2 = run_step1_and_correct(&data.crowd, &data.truth, &data.difficulty, &cfg.cleaning, 5, None).unwrap();
        let mut store = prepare_review(&step2, dir.path()).unwrap();
        assert!(matches!(finish_review(dir.path(), &cfg.cleaning.costs), Err(Error::Unresolved(_))));
        let decisions = truth_oracle_decisions(&step2.outcome.corrected, &step2.outcome.queue, &data.truth);
        for (id, d) in decisions {
            store.record(id, d, "me", None).unwrap();
        }
        drop(store);
        let (cleaned, ledger, report) = finish_review(dir.path(), &cfg.cleaning.costs).unwrap();
        let direct = clean_labels(&data.crowd, &data.truth, &data.difficulty, &cfg.cleaning, 5, None).unwrap();
        assert_eq!(cleaned.iter().map(|l| l.bbox).collect::<Vec<_>>(), direct.cleaned.iter().map(|l| l.bbox).collect::<Vec<_>>());
        assert_eq!(ledger.total(), direct.ledger.total());
        assert_eq!(report.queue_size, direct.report.queue_size);
    }
}
