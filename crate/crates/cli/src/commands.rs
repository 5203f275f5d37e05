use std::fs::{File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use boxclean::active::{LoopConfig, Selection, TruthOracle};
use boxclean::coco::{load_coco, save_coco};
use boxclean::correction::CorrectionReport;
use boxclean::detector::{Detector, ExternalDetector, SimulatedDetector};
use boxclean::eval::{evaluate_labels, render_table, EvalReport};
use boxclean::io::{create_dir_all, read_json, write_json};
use boxclean::ledger::{Action, Actor, BudgetLedger};
use boxclean::lsm::LsmMode;
use boxclean::noise::{assign_difficulty, corrupt, generate_corpus, CorpusSpec, DifficultyMap, NoiseType};
use boxclean::pipeline::{
    finish_review, prepare_review, review_with_truth, simulated_detectors, step1_and_correct, CleaningConfig, CHECKPOINT_DIR,
    OURS, OURS_RANDOM, OURS_SINGLE, REVIEW_DIR,
};
use boxclean::queue::{QueueStore, LOG_FILE, QUEUE_FILE};
use boxclean::{AnnotationSet, Error, Source};
use boxclean_review::{AppState, ServiceConfig};

use crate::config::{set, set_opt, DetectorChoice, RunConfig, RESOLVED_FILE};
use crate::{EvaluateArgs, ExportReportArgs, RunPipelineArgs, ServeReviewArgs, SimulateNoiseArgs};

pub const CROWD_FILE: &str = "crowd.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const NOISE_LEDGER_FILE: &str = "noise-ledger.json";
pub const DIFFICULTY_FILE: &str = "difficulty.json";
pub const CLEANED_FILE: &str = "cleaned.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const RUN_REPORT_FILE: &str = "report.json";
pub const COMPARE_FILE: &str = "compare.json";
pub const LOCK_FILE: &str = ".boxclean.lock";

/// Held for the life of a command that writes into a workdir.
#[derive(Debug)]
pub struct WorkdirLock {
    _file: File,
}

pub fn lock_workdir(dir: &Path) -> anyhow::Result<WorkdirLock> {
    create_dir_all(dir)?;
    let path = dir.join(LOCK_FILE);
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    match file.try_lock() {
        Ok(()) => Ok(WorkdirLock { _file: file }),
        Err(TryLockError::WouldBlock) => Err(Error::State(format!("{} is in use by another boxclean process", dir.display())).into()),
        Err(TryLockError::Error(e)) => Err(Error::io(&path, e).into()),
    }
}

fn type_name(t: NoiseType) -> &'static str {
    match t {
        NoiseType::Clean => "clean",
        NoiseType::Bkg => "bkg",
        NoiseType::Miss => "miss",
        NoiseType::Loc => "loc",
        NoiseType::Bib => "bib",
    }
}

pub fn simulate_noise(a: SimulateNoiseArgs) -> anyhow::Result<()> {
    let mut rc = RunConfig::load_or_default(a.config.as_deref())?;
    set_opt(&mut rc.seed, a.seed);
    set_opt(&mut rc.paths.truth, a.truth);
    set(&mut rc.noise.preset, a.preset);
    set_opt(&mut rc.noise.bkg_rate, a.bkg);
    set_opt(&mut rc.noise.miss_rate, a.miss);
    set_opt(&mut rc.noise.loc_rate, a.loc);
    set_opt(&mut rc.noise.bib_rate, a.bib);
    set_opt(&mut rc.noise.loc_jitter_sigma, a.loc_sigma);
    let seed = rc.seed()?;
    let spec = rc.noise.spec(seed)?;

    let _lock = lock_workdir(&a.out_dir)?;
    let truth = match (a.generate, &rc.paths.truth) {
        (Some(n), _) => {
            let truth = generate_corpus(&CorpusSpec { images: n, ..rc.corpus.clone() }, seed);
            save_coco(&truth, a.out_dir.join(TRUTH_FILE))?;
            truth
        }
        (None, Some(path)) => load_coco(path, Source::Expert)?,
        (None, None) => return Err(Error::Config("pass --truth or --generate".into()).into()),
    };
    let difficulty = assign_difficulty(&truth, seed);
    let out = corrupt(&truth, &spec, &difficulty)?;
    save_coco(&out.crowd, a.out_dir.join(CROWD_FILE))?;
    out.ledger.save(&a.out_dir.join(NOISE_LEDGER_FILE))?;
    write_json(&a.out_dir.join(DIFFICULTY_FILE), &difficulty)?;

    println!("images {}  truth {}  crowd {}", truth.num_images(), truth.len(), out.crowd.len());
    for (t, n) in out.ledger.counts() {
        println!("{:<6} {n}", type_name(t));
    }
    Ok(())
}

/// Budget split of one run, in cost units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub total: f64,
    pub crowd: f64,
    pub expert: f64,
    pub review: f64,
    /// Percentage of expert annotation of every truth instance, when the truth is known.
    pub percent: Option<f64>,
}

impl BudgetSummary {
    fn new(ledger: &BudgetLedger, truth: Option<&AnnotationSet>) -> Self {
        BudgetSummary {
            total: ledger.total(),
            crowd: ledger.total_for(Actor::Crowd, Action::Annotate) + ledger.total_for(Actor::Crowd, Action::ReviewCorrect),
            expert: ledger.total_for(Actor::Expert, Action::Annotate),
            review: ledger.total_for(Actor::Expert, Action::ReviewCorrect),
            percent: truth.map(|t| ledger.budget_percent(t.len() as u64)),
        }
    }
}

/// Written to `report.json` by closed-loop runs and `export-report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub loop_config: LoopConfig,
    pub selected_images: usize,
    pub selected_fraction: f64,
    pub budget: BudgetSummary,
    pub correction: CorrectionReport,
    /// Cleaned labels against the truth.
    pub cleaned: Option<EvalReport>,
    /// Crowd labels against the truth.
    pub crowd: Option<EvalReport>,
}

struct Inputs {
    crowd: AnnotationSet,
    truth: Option<Arc<AnnotationSet>>,
    expert: Option<Arc<AnnotationSet>>,
    difficulty: Arc<DifficultyMap>,
}

fn load_inputs(rc: &RunConfig, seed: u64) -> anyhow::Result<Inputs> {
    let crowd_path = rc
        .paths
        .crowd
        .as_ref()
        .ok_or_else(|| Error::Config("a crowd file is required (--crowd or paths.crowd)".into()))?;
    let crowd = load_coco(crowd_path, Source::Crowd)?;
    let truth = match &rc.paths.truth {
        Some(p) => Some(Arc::new(load_coco(p, Source::Expert)?)),
        None => None,
    };
    let expert = match &rc.paths.expert {
        Some(p) => Some(Arc::new(load_coco(p, Source::Expert)?)),
        None => truth.clone(),
    };
    let difficulty = match (&rc.paths.difficulty, &truth) {
        (Some(p), _) => read_json(p)?,
        (None, Some(t)) => assign_difficulty(t, seed),
        (None, None) => DifficultyMap::default(),
    };
    Ok(Inputs {
        crowd,
        truth,
        expert,
        difficulty: Arc::new(difficulty),
    })
}

fn detectors(
    rc: &RunConfig,
    inputs: &Inputs,
    cfg: &CleaningConfig,
    seed: u64,
    dir: &Path,
) -> anyhow::Result<(Box<dyn Detector>, Box<dyn Detector>)> {
    match rc.detector.choice()? {
        DetectorChoice::Simulated => {
            let truth = inputs.truth.as_ref().ok_or_else(|| {
                Error::Config("the simulated detector needs the ground truth (--truth or paths.truth)".into())
            })?;
            let (p, a): (SimulatedDetector, SimulatedDetector) = simulated_detectors(truth, &inputs.difficulty, &cfg.detector, seed);
            Ok((Box::new(p), Box::new(a)))
        }
        DetectorChoice::External(cmd) => {
            let work = dir.join("detector");
            Ok((
                Box::new(ExternalDetector::new(cmd.clone(), Source::ModelP, &inputs.crowd, &work)),
                Box::new(ExternalDetector::new(cmd, Source::ModelA, &inputs.crowd, &work)),
            ))
        }
    }
}

fn closed_loop(rc: &RunConfig, inputs: &Inputs, cfg: &CleaningConfig, method: &str, seed: u64, dir: &Path) -> anyhow::Result<RunReport> {
    let truth = inputs
        .truth
        .as_ref()
        .ok_or_else(|| Error::Config("closed-loop runs need the ground truth; use --interactive without it".into()))?;
    let expert = inputs.expert.as_ref().unwrap_or(truth);
    let (mut p, mut a) = detectors(rc, inputs, cfg, seed, dir)?;
    let mut oracle = TruthOracle::new(expert.clone());
    let checkpoints = dir.join(CHECKPOINT_DIR);
    let step2 = step1_and_correct(&inputs.crowd, &mut oracle, p.as_mut(), a.as_mut(), cfg, seed, Some(&checkpoints))?;
    let run = review_with_truth(step2, truth, Some(dir))?;

    let truth_here = truth.subset(inputs.crowd.image_ids().iter());
    let budget = BudgetSummary::new(&run.ledger, Some(&truth_here));
    let mut cleaned = evaluate_labels(method, &run.cleaned, &truth_here);
    cleaned.budget_percent = budget.percent;
    let report = RunReport {
        method: method.into(),
        seed,
        loop_config: cfg.loop_cfg.clone(),
        selected_images: run.state.selected.len(),
        selected_fraction: run.state.selected_fraction(),
        budget,
        correction: run.report,
        cleaned: Some(cleaned),
        crowd: Some(evaluate_labels("crowd", &inputs.crowd, &truth_here)),
    };
    save_coco(&run.cleaned, dir.join(CLEANED_FILE))?;
    run.ledger.save(&dir.join(LEDGER_FILE))?;
    write_json(&dir.join(RUN_REPORT_FILE), &report)?;
    Ok(report)
}

fn print_summary(r: &RunReport) {
    let f1 = |e: &Option<EvalReport>| {
        e.as_ref()
            .and_then(|e| e.label_quality.as_ref())
            .and_then(|q| q.f1)
            .map_or_else(|| "-".to_string(), |f| format!("{f:.4}"))
    };
    println!(
        "{}: {} of {} images to the expert, queue {} (bib removed {}), budget {:.1} units{}, F1 crowd {} -> cleaned {}",
        r.method,
        r.selected_images,
        r.correction.images + r.selected_images,
        r.correction.queue_size,
        r.correction.bib_removed,
        r.budget.total,
        r.budget.percent.map_or_else(String::new, |p| format!(" ({p:.2}%)")),
        f1(&r.crowd),
        f1(&r.cleaned),
    );
}

pub fn run_pipeline(a: RunPipelineArgs) -> anyhow::Result<()> {
    let mut rc = RunConfig::load_or_default(a.config.as_deref())?;
    set_opt(&mut rc.seed, a.seed);
    set_opt(&mut rc.paths.crowd, a.crowd);
    set_opt(&mut rc.paths.truth, a.truth);
    set_opt(&mut rc.paths.expert, a.expert);
    set_opt(&mut rc.paths.difficulty, a.difficulty);
    set_opt(&mut rc.paths.images, a.images);
    set_opt(&mut rc.paths.workdir, a.workdir);
    set(&mut rc.loop_cfg.x0, a.x0);
    set(&mut rc.loop_cfg.k, a.k);
    set(&mut rc.loop_cfg.g, a.g);
    set(&mut rc.loop_cfg.delta, a.delta);
    set(&mut rc.loop_cfg.iou_threshold, a.iou_thr);
    set(&mut rc.loop_cfg.mode, a.mode);
    set(&mut rc.loop_cfg.selection, a.selection);
    if a.random {
        rc.loop_cfg.selection = Selection::Random;
    }
    set(&mut rc.correction.gamma, a.gamma);
    set(&mut rc.correction.bib_mode, a.bib_mode);
    set(&mut rc.detector.kind, a.detector);
    let seed = rc.seed()?;
    let cfg = rc.cleaning()?;
    rc.detector.choice()?;
    let workdir = rc.workdir()?.to_path_buf();

    let _lock = lock_workdir(&workdir)?;
    let inputs = load_inputs(&rc, seed)?;
    rc.save(&workdir.join(RESOLVED_FILE))?;

    if a.interactive {
        let review = workdir.join(REVIEW_DIR);
        if review.join(LOG_FILE).exists() && std::fs::metadata(review.join(LOG_FILE)).is_ok_and(|m| m.len() > 0) {
            return Err(Error::State(format!("{} already holds review decisions; use a fresh workdir", review.display())).into());
        }
        let expert = inputs
            .expert
            .clone()
            .ok_or_else(|| Error::Config("step 1 needs expert labels (--expert or --truth)".into()))?;
        let (mut p, mut m) = detectors(&rc, &inputs, &cfg, seed, &workdir)?;
        let mut oracle = TruthOracle::new(expert);
        let checkpoints = workdir.join(CHECKPOINT_DIR);
        let step2 = step1_and_correct(&inputs.crowd, &mut oracle, p.as_mut(), m.as_mut(), &cfg, seed, Some(&checkpoints))?;
        let store = prepare_review(&step2, &review)?;
        println!(
            "{} images to the expert; {} items await review in {}",
            step2.state.selected.len(),
            store.items().len(),
            review.display()
        );
        return Ok(());
    }

    if !a.compare {
        let report = closed_loop(&rc, &inputs, &cfg, OURS, seed, &workdir)?;
        print_summary(&report);
        return Ok(());
    }

    let variants = [
        (OURS, cfg.loop_cfg.selection, cfg.loop_cfg.mode),
        (OURS_RANDOM, Selection::Random, cfg.loop_cfg.mode),
        (OURS_SINGLE, cfg.loop_cfg.selection, LsmMode::Single),
    ];
    let mut reports = Vec::new();
    for (name, selection, mode) in variants {
        let mut c = cfg.clone();
        c.loop_cfg.selection = selection;
        c.loop_cfg.mode = mode;
        c.correction.mode = mode;
        let r = closed_loop(&rc, &inputs, &c, name, seed, &workdir.join(name))?;
        print_summary(&r);
        reports.push(r);
    }
    write_json(&workdir.join(COMPARE_FILE), &reports)?;
    let mut rows: Vec<EvalReport> = reports.iter().filter_map(|r| r.cleaned.clone()).collect();
    if let Some(crowd) = reports.first().and_then(|r| r.crowd.clone()) {
        rows.insert(0, crowd);
    }
    print!("{}", render_table(&rows));
    Ok(())
}

/// The report `evaluate` prints, also used by tests to check CLI/library agreement.
pub fn evaluation(candidate: &AnnotationSet, truth: &AnnotationSet, method: &str, labels: bool) -> EvalReport {
    if labels {
        evaluate_labels(method, candidate, truth)
    } else {
        let preds: Vec<_> = candidate.iter().cloned().collect();
        EvalReport::new(method).with_detection(&preds, truth)
    }
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let source = if a.labels { Source::Crowd } else { Source::ModelP };
    let candidate = load_coco(&a.candidate, source)?;
    let truth = load_coco(&a.truth, Source::Expert)?;
    let report = evaluation(&candidate, &truth, &a.method, a.labels);
    let text = serde_json::to_string_pretty(&report).context("serializing report")?;
    match a.out {
        Some(path) => boxclean::io::write_atomic(&path, text.as_bytes())?,
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

/// The review directory of a workdir; a bare queue directory is accepted too.
fn review_dir(workdir: &Path) -> anyhow::Result<PathBuf> {
    for dir in [workdir.join(REVIEW_DIR), workdir.to_path_buf()] {
        if dir.join(QUEUE_FILE).exists() {
            return Ok(dir);
        }
    }
    Err(Error::State(format!("no review queue in {} (run `run-pipeline --interactive` first)", workdir.display())).into())
}

fn resolved_config(workdir: &Path) -> anyhow::Result<RunConfig> {
    let path = workdir.join(RESOLVED_FILE);
    if path.exists() {
        RunConfig::load(&path)
    } else {
        Ok(RunConfig::default())
    }
}

pub fn serve_review(a: ServeReviewArgs) -> anyhow::Result<()> {
    let dir = review_dir(&a.workdir)?;
    let rc = resolved_config(&a.workdir)?;
    let _lock = lock_workdir(&a.workdir)?;
    let store = QueueStore::open(&dir)?;
    let config = ServiceConfig {
        images_dir: a.images.or(rc.paths.images),
        ui_dir: a.ui,
        token: a.token,
        costs: rc.costs,
    };
    let app = AppState::new(store, config);
    let handle = app.store();
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::io(PathBuf::from(&addr), e))
            .with_context(|| format!("cannot listen on {addr}"))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        boxclean_review::serve(listener, app, shutdown)
            .await
            .map_err(|e| Error::io(PathBuf::from(&addr), e))?;
        let store = handle.read().await;
        let p = store.progress(&rc.costs);
        println!("{} of {} items resolved, {} pending", p.resolved, p.total, p.pending);
        anyhow::Ok(())
    })
}

pub fn export_report(a: ExportReportArgs) -> anyhow::Result<()> {
    let dir = review_dir(&a.workdir)?;
    let mut rc = resolved_config(&a.workdir)?;
    set_opt(&mut rc.paths.truth, a.truth);
    let _lock = lock_workdir(&a.workdir)?;
    let (cleaned, ledger, correction) = finish_review(&dir, &rc.costs)?;
    let truth = match &rc.paths.truth {
        Some(p) => Some(load_coco(p, Source::Expert)?),
        None => None,
    };
    let crowd = match &rc.paths.crowd {
        Some(p) if p.exists() => Some(load_coco(p, Source::Crowd)?),
        _ => None,
    };
    let selected = correction.images;
    let truth_here = truth.map(|t| match &crowd {
        Some(c) => t.subset(c.image_ids().iter()),
        None => t,
    });
    let budget = BudgetSummary::new(&ledger, truth_here.as_ref());
    let total_images = crowd.as_ref().map_or(0, |c| c.num_images());
    let expert_images = total_images.saturating_sub(selected);
    let mut cleaned_eval = truth_here.as_ref().map(|t| evaluate_labels(OURS, &cleaned, t));
    if let Some(e) = cleaned_eval.as_mut() {
        e.budget_percent = budget.percent;
    }
    let report = RunReport {
        method: OURS.into(),
        seed: rc.seed.unwrap_or_default(),
        loop_config: rc.loop_cfg.clone(),
        selected_images: expert_images,
        selected_fraction: if total_images == 0 { 0.0 } else { expert_images as f64 / total_images as f64 },
        budget,
        correction,
        cleaned: cleaned_eval,
        crowd: match (&crowd, &truth_here) {
            (Some(c), Some(t)) => Some(evaluate_labels("crowd", c, t)),
            _ => None,
        },
    };
    save_coco(&cleaned, a.workdir.join(CLEANED_FILE))?;
    ledger.save(&a.workdir.join(LEDGER_FILE))?;
    write_json(&a.workdir.join(RUN_REPORT_FILE), &report)?;
    print_summary(&report);
    Ok(())
}
