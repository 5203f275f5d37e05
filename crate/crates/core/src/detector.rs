//! Detector contract, a simulated detector, and an adapter for external trainers.
//!
//! The simulated detector does not learn anything. Its skill follows a
//! saturating law of the training-set size, and its predictions are drawn
//! from the ground truth: recall, localization noise, false-positive rate
//! and confidence all depend on skill and on each instance's difficulty.
//! Random draws are keyed by (seed, image, role), so two fits that differ
//! only in skill see the same underlying randomness.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coco::{from_coco, save_coco, CocoFile};
use crate::error::{Error, Result};
use crate::eval::label_quality;
use crate::geometry::{iou, BBox};
use crate::model::{AnnotationSet, ImageId, Label, Source};
use crate::noise::{DifficultyMap, BKG_MAX_IOU};
use crate::rng::{rng_for, stream};

/// Something that can be trained on labels and then predict boxes.
pub trait Detector {
    fn fit(&mut self, train: &AnnotationSet) -> Result<()>;
    /// Predictions (source model-P or model-A) on `images`.
    fn predict(&self, images: &[ImageId]) -> Result<AnnotationSet>;
}

/// Every constant of the simulated detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub s_max: f64,
    /// Training instances at which skill has covered `1 - 1/e` of its range.
    pub tau: f64,
    /// Skill with no training data.
    pub floor: f64,
    pub fp_base_p: f64,
    pub fp_base_a: f64,
    pub jitter_base: f64,
    /// Slope of the logistic detection curve in `skill - difficulty`.
    pub slope: f64,
    /// The consensus-trained detector never finds instances harder than `skill + margin`.
    pub consensus_miss_margin: f64,
    /// Skill lost per unit of `1 - F1` of the training labels (quality-aware fits only).
    pub noise_skill_penalty: f64,
    /// Relative growth of false positives and jitter per unit of `1 - precision`.
    pub noise_fp_gain: f64,
    pub noise_jitter_gain: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            s_max: 0.95,
            tau: 400.0,
            floor: 0.05,
            fp_base_p: 0.25,
            fp_base_a: 0.08,
            jitter_base: 0.15,
            slope: 8.0,
            consensus_miss_margin: 0.1,
            noise_skill_penalty: 0.5,
            noise_fp_gain: 2.0,
            noise_jitter_gain: 2.0,
        }
    }
}

impl SimConfig {
    /// Saturating skill law: `floor + (s_max - floor)(1 - exp(-n / tau))`.
    pub fn skill_for(&self, instances: f64) -> f64 {
        self.floor + (self.s_max - self.floor) * (1.0 - (-instances.max(0.0) / self.tau).exp())
    }

    pub fn fp_base(&self, role: Source) -> f64 {
        match role {
            Source::ModelA => self.fp_base_a,
            _ => self.fp_base_p,
        }
    }
}

/// Fitted state of a simulated detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSkill {
    pub role: Source,
    pub training_instance_count: u64,
    pub skill: f64,
    /// Precision of the training labels against the truth (1 when not measured).
    pub label_precision: f64,
    pub config: SimConfig,
}

impl DetectorSkill {
    pub fn with_skill(role: Source, skill: f64, config: SimConfig) -> Self {
        DetectorSkill {
            role,
            training_instance_count: 0,
            skill,
            label_precision: 1.0,
            config,
        }
    }
}

/// Skill from the number of training instances alone.
pub fn fit_simulated(train: &AnnotationSet, role: Source, config: &SimConfig) -> DetectorSkill {
    let n = train.len() as u64;
    DetectorSkill {
        role,
        training_instance_count: n,
        skill: config.skill_for(n as f64),
        label_precision: 1.0,
        config: config.clone(),
    }
}

/// Skill from training labels measured against the truth of the same images.
///
/// Only labels that match a true instance count towards the size law, and
/// the skill drops with the training set's label F1. Precision of the labels
/// additionally inflates false positives and localization jitter at prediction time.
pub fn fit_simulated_against(
    train: &AnnotationSet,
    role: Source,
    config: &SimConfig,
    truth: &AnnotationSet,
) -> DetectorSkill {
    let reference = truth.subset(train.image_ids().iter());
    let q = label_quality(train, &reference);
    let n = train.len() as u64;
    let correct = q.counts.matched as f64;
    let f1 = q.f1.unwrap_or(1.0);
    let skill = (config.skill_for(correct) - config.noise_skill_penalty * (1.0 - f1)).clamp(config.floor, config.s_max);
    DetectorSkill {
        role,
        training_instance_count: n,
        skill,
        label_precision: q.precision.unwrap_or(1.0),
        config: config.clone(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Moves the center and rescales the sides by `sigma`-scaled normal draws.
fn jitter(b: &BBox, sigma: f64, z: &[f64; 4]) -> BBox {
    let (cx, cy) = b.center();
    let cx = cx + sigma * z[0] * b.w();
    let cy = cy + sigma * z[1] * b.h();
    let w = (b.w() * (1.0 + sigma * z[2])).max(0.2 * b.w());
    let h = (b.h() * (1.0 + sigma * z[3])).max(0.2 * b.h());
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h).expect("positive size")
}

fn role_tag(role: Source) -> u64 {
    match role {
        Source::ModelA => 2,
        _ => 1,
    }
}

/// Draws predictions for `images` from the ground truth.
pub fn predict_simulated(
    skill: &DetectorSkill,
    images: &[ImageId],
    truth: &AnnotationSet,
    difficulty: &DifficultyMap,
    seed: u64,
) -> AnnotationSet {
    let cfg = &skill.config;
    let s = skill.skill;
    let impurity = 1.0 - skill.label_precision;
    let jitter_sigma = cfg.jitter_base * (1.0 - s) * (1.0 + cfg.noise_jitter_gain * impurity);
    let fp_rate = (cfg.fp_base(skill.role) * (1.0 - s) * (1.0 + cfg.noise_fp_gain * impurity)).clamp(0.0, 1.0);

    let wanted: BTreeSet<ImageId> = images.iter().copied().collect();
    let mut out = AnnotationSet::empty_like(&truth.subset(wanted.iter()), skill.role);
    let mut next_id = 1;
    for &image in &wanted {
        let Some(info) = truth.image(image) else { continue };
        let truths = truth.labels(image);
        let mut rng = rng_for(seed, &[stream::DETECT, image, role_tag(skill.role)]);
        let mut preds = Vec::new();
        for (k, t) in truths.iter().enumerate() {
            // fixed number of draws per instance keeps streams aligned across skills
            let u_detect: f64 = rng.random();
            let z: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let z_conf: f64 = StandardNormal.sample(&mut rng);
            let u_fp: f64 = rng.random();

            let d = difficulty.get(t.id);
            let p = sigmoid(cfg.slope * (s - d));
            let suppressed = skill.role == Source::ModelA && d > s + cfg.consensus_miss_margin;
            if u_detect < p && !suppressed {
                let b = &t.bbox;
                let bbox = if jitter_sigma == 0.0 {
                    *b
                } else {
                    jitter(b, jitter_sigma, &z)
                };
                let conf = (0.3 + 0.7 * p + 0.1 * z_conf).clamp(0.01, 0.99);
                preds.push(Label::predicted(0, image, t.category_id, bbox, skill.role, conf));
            }
            if u_fp < fp_rate {
                let mut frng = rng_for(seed, &[stream::DETECT, image, role_tag(skill.role), 1 + k as u64]);
                let (wf, hf) = (info.width as f64, info.height as f64);
                let (w, h) = (t.bbox.w().min(wf), t.bbox.h().min(hf));
                for _ in 0..100 {
                    let x = frng.random_range(0.0..=(wf - w));
                    let y = frng.random_range(0.0..=(hf - h));
                    let cand = BBox::new(x, y, w, h).expect("positive size");
                    if truths.iter().all(|o| iou(&o.bbox, &cand) < BKG_MAX_IOU) {
                        let u: f64 = frng.random();
                        let zc: f64 = StandardNormal.sample(&mut frng);
                        let conf = (0.3 * u + 0.05 * zc).clamp(0.01, 0.99);
                        preds.push(Label::predicted(0, image, t.category_id, cand, skill.role, conf));
                        break;
                    }
                }
            }
        }
        for mut p in preds {
            p.id = next_id;
            next_id += 1;
            out.push(p).expect("valid prediction");
        }
    }
    out
}

/// A simulated detector backed by the ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedDetector {
    role: Source,
    config: SimConfig,
    truth: Arc<AnnotationSet>,
    difficulty: Arc<DifficultyMap>,
    seed: u64,
    quality_aware: bool,
    skill: DetectorSkill,
}

impl SimulatedDetector {
    pub fn new(role: Source, config: SimConfig, truth: Arc<AnnotationSet>, difficulty: Arc<DifficultyMap>, seed: u64) -> Self {
        let skill = DetectorSkill::with_skill(role, config.floor, config.clone());
        SimulatedDetector {
            role,
            config,
            truth,
            difficulty,
            seed,
            quality_aware: false,
            skill,
        }
    }

    /// Makes `fit` account for label noise in the training set.
    pub fn quality_aware(mut self, on: bool) -> Self {
        self.quality_aware = on;
        self
    }

    pub fn skill(&self) -> &DetectorSkill {
        &self.skill
    }

    pub fn role(&self) -> Source {
        self.role
    }
}

impl Detector for SimulatedDetector {
    fn fit(&mut self, train: &AnnotationSet) -> Result<()> {
        self.skill = if self.quality_aware {
            fit_simulated_against(train, self.role, &self.config, &self.truth)
        } else {
            fit_simulated(train, self.role, &self.config)
        };
        Ok(())
    }

    fn predict(&self, images: &[ImageId]) -> Result<AnnotationSet> {
        Ok(predict_simulated(&self.skill, images, &self.truth, &self.difficulty, self.seed))
    }
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

/// Trains and runs an external detector through files.
///
/// Writes the training set as COCO JSON and the image list (one
/// `id<TAB>file_name` per line), runs `command` through `sh -c` with
/// `{train_json}`, `{image_list}` and `{out_json}` substituted, and reads
/// the predictions back as COCO JSON with per-annotation `score`.
pub fn external_detector_round_trip(
    command: &str,
    train: &AnnotationSet,
    images: &AnnotationSet,
    role: Source,
    workdir: &Path,
) -> Result<AnnotationSet> {
    crate::io::create_dir_all(workdir)?;
    let tag = role.as_str();
    let train_json = workdir.join(format!("train-{tag}.json"));
    let image_list = workdir.join(format!("images-{tag}.txt"));
    let out_json = workdir.join(format!("predictions-{tag}.json"));
    save_coco(train, &train_json)?;
    let list: String = images.images().map(|i| format!("{}\t{}\n", i.id, i.file_name)).collect();
    crate::io::write_atomic(&image_list, list.as_bytes())?;
    if out_json.exists() {
        fs::remove_file(&out_json).map_err(|e| Error::io(&out_json, e))?;
    }

    let cmd = command
        .replace("{train_json}", &shell_quote(&train_json))
        .replace("{image_list}", &shell_quote(&image_list))
        .replace("{out_json}", &shell_quote(&out_json));
    let output = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .current_dir(workdir)
        .output()
        .map_err(|e| Error::io(workdir, e))?;
    if !output.status.success() {
        return Err(Error::CommandFailed {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    if !out_json.exists() {
        return Err(Error::MissingOutput(out_json));
    }
    let text = fs::read_to_string(&out_json).map_err(|e| Error::io(&out_json, e))?;
    let mut file: CocoFile = serde_json::from_str(&text).map_err(|e| Error::parse(&out_json, &e))?;
    // adapters often echo the training file back; whatever it says, these are predictions
    for a in &mut file.annotations {
        a.source = None;
    }
    let raw = from_coco(file, role)?;

    let mut preds = AnnotationSet::empty_like(images, role);
    for l in raw.iter() {
        if !images.has_image(l.image_id) {
            continue;
        }
        let mut l = l.clone();
        l.source = role;
        preds.push(l)?;
    }
    Ok(preds)
}

/// [`Detector`] over [`external_detector_round_trip`].
#[derive(Debug, Clone)]
pub struct ExternalDetector {
    command: String,
    role: Source,
    workdir: PathBuf,
    images: AnnotationSet,
    train: Option<AnnotationSet>,
}

impl ExternalDetector {
    /// `images` is the image table predictions may refer to; its labels are ignored.
    pub fn new(command: impl Into<String>, role: Source, images: &AnnotationSet, workdir: impl Into<PathBuf>) -> Self {
        ExternalDetector {
            command: command.into(),
            role,
            workdir: workdir.into(),
            images: AnnotationSet::empty_like(images, role),
            train: None,
        }
    }
}

impl Detector for ExternalDetector {
    fn fit(&mut self, train: &AnnotationSet) -> Result<()> {
        self.train = Some(train.clone());
        Ok(())
    }

    fn predict(&self, images: &[ImageId]) -> Result<AnnotationSet> {
        let train = self
            .train
            .as_ref()
            .ok_or_else(|| Error::State("external detector used before fit".into()))?;
        let subset = self.images.subset(images.iter());
        external_detector_round_trip(&self.command, train, &subset, self.role, &self.workdir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{generate_corpus, CorpusSpec};

    fn corpus(images: usize, seed: u64) -> AnnotationSet {
        generate_corpus(
            &CorpusSpec {
                images,
                ..CorpusSpec::default()
            },
            seed,
        )
    }

    fn train_of(n: usize) -> AnnotationSet {
        let c = corpus(((n / 3) + 2).max(2), 99);
        let ids: Vec<_> = c.iter().take(n).map(|l| l.id).collect();
        let mut t = AnnotationSet::empty_like(&c, Source::Expert);
        for l in c.iter().filter(|l| ids.contains(&l.id)) {
            t.push(l.clone()).unwrap();
        }
        assert_eq!(t.len(), n);
        t
    }

    #[test]
    fn skill_law() {
        let cfg = SimConfig::default();
        assert_eq!(fit_simulated(&AnnotationSet::new(Source::Expert), Source::ModelP, &cfg).skill, 0.05);
        assert!((cfg.skill_for(1e9) - 0.95).abs() < 1e-12);
        let expected = 0.05 + (0.95 - 0.05) * (1.0 - (-1.0f64).exp());
        assert!((cfg.skill_for(400.0) - expected).abs() < 1e-12);
        assert!((expected - 0.6188).abs() < 2e-4);
        let s400 = fit_simulated(&train_of(400), Source::ModelP, &cfg);
        assert_eq!(s400.training_instance_count, 400);
        assert!((s400.skill - expected).abs() < 1e-12);
    }

    #[test]
    fn skill_monotone() {
        let cfg = SimConfig::default();
        let mut prev = 0.0;
        for n in [0.0, 1.0, 10.0, 40.0, 400.0, 4000.0] {
            let s = cfg.skill_for(n);
            assert!(s >= prev && s <= cfg.s_max);
            prev = s;
        }
    }

    #[test]
    fn perfect_detector_reproduces_truth() {
        let truth = corpus(15, 5);
        let diff = DifficultyMap::uniform(&truth, 0.0);
        let cfg = SimConfig {
            jitter_base: 0.0,
            ..SimConfig::default()
        };
        let skill = DetectorSkill::with_skill(Source::ModelP, cfg.s_max, cfg);
        let preds = predict_simulated(&skill, &truth.image_ids(), &truth, &diff, 3);
        let tp: Vec<_> = preds.iter().filter(|p| truth.labels(p.image_id).iter().any(|t| t.bbox == p.bbox)).collect();
        assert_eq!(tp.len(), truth.len());
        assert!(preds.iter().all(|p| p.confidence > 0.0 && p.confidence < 1.0));
    }

    #[test]
    fn floor_skill_has_low_recall() {
        let truth = corpus(60, 6);
        let diff = DifficultyMap::uniform(&truth, 0.5);
        let cfg = SimConfig::default();
        let skill = DetectorSkill::with_skill(Source::ModelP, cfg.floor, cfg);
        let mut recalls = Vec::new();
        for seed in 0..10 {
            let preds = predict_simulated(&skill, &truth.image_ids(), &truth, &diff, seed);
            recalls.push(label_quality(&preds, &truth).recall.unwrap());
        }
        let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
        // p = sigmoid(-3.6) ≈ 0.027, so even a 3σ band sits far below 0.2
        let n = truth.len() as f64 * recalls.len() as f64;
        let p = sigmoid(8.0 * (0.05 - 0.5));
        assert!(mean + 3.0 * (p * (1.0 - p) / n).sqrt() < 0.2, "mean recall {mean}");
    }

    #[test]
    fn false_positives_attenuate_with_data() {
        let truth = corpus(30, 7);
        let diff = crate::noise::assign_difficulty(&truth, 7);
        let cfg = SimConfig::default();
        let fps = |n: usize| {
            let skill = DetectorSkill {
                training_instance_count: n as u64,
                skill: cfg.skill_for(n as f64),
                ..DetectorSkill::with_skill(Source::ModelP, 0.0, cfg.clone())
            };
            let mut total = 0usize;
            for seed in 0..20 {
                let preds = predict_simulated(&skill, &truth.image_ids(), &truth, &diff, seed);
                total += crate::eval::error_counts(&preds.iter().cloned().collect::<Vec<_>>(), &truth).bkg;
            }
            total as f64 / (20.0 * truth.num_images() as f64)
        };
        assert!(fps(40) > fps(400));
    }

    #[test]
    fn confidence_tracks_correctness() {
        let truth = corpus(80, 8);
        let diff = crate::noise::assign_difficulty(&truth, 8);
        let cfg = SimConfig::default();
        let skill = DetectorSkill::with_skill(Source::ModelP, cfg.skill_for(150.0), cfg);
        let preds = predict_simulated(&skill, &truth.image_ids(), &truth, &diff, 1);
        assert!(preds.len() >= 300);
        let (mut tp, mut fp) = (Vec::new(), Vec::new());
        for p in preds.iter() {
            if truth.labels(p.image_id).iter().any(|t| iou(&t.bbox, &p.bbox) >= 0.5) {
                tp.push(p.confidence);
            } else {
                fp.push(p.confidence);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!fp.is_empty());
        assert!(mean(&tp) > mean(&fp));
    }

    #[test]
    fn consensus_model_misses_more() {
        let truth = corpus(60, 9);
        let diff = crate::noise::assign_difficulty(&truth, 9);
        let cfg = SimConfig::default();
        let s = cfg.skill_for(300.0);
        let (mut rp, mut ra) = (0.0, 0.0);
        for seed in 0..10 {
            for (role, acc) in [(Source::ModelP, &mut rp), (Source::ModelA, &mut ra)] {
                let skill = DetectorSkill::with_skill(role, s, cfg.clone());
                let preds = predict_simulated(&skill, &truth.image_ids(), &truth, &diff, seed);
                *acc += label_quality(&preds, &truth).recall.unwrap();
            }
        }
        assert!(ra <= rp);
    }

    #[test]
    fn deterministic_under_seed() {
        let truth = corpus(10, 10);
        let diff = crate::noise::assign_difficulty(&truth, 10);
        let cfg = SimConfig::default();
        let skill = DetectorSkill::with_skill(Source::ModelA, 0.5, cfg);
        let a = predict_simulated(&skill, &truth.image_ids(), &truth, &diff, 4);
        let b = predict_simulated(&skill, &truth.image_ids(), &truth, &diff, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_training_labels_lower_skill() {
        let truth = corpus(40, 11);
        let cfg = SimConfig::default();
        let clean = fit_simulated_against(&truth, Source::ModelP, &cfg, &truth);
        assert!((clean.skill - cfg.skill_for(truth.len() as f64)).abs() < 1e-12);
        let diff = crate::noise::assign_difficulty(&truth, 11);
        let noisy = crate::noise::corrupt(&truth, &crate::noise::NoiseSpec::paper_like(1), &diff).unwrap();
        let fitted = fit_simulated_against(&noisy.crowd, Source::ModelP, &cfg, &truth);
        assert!(fitted.skill < clean.skill);
        assert!(fitted.label_precision < 1.0);
    }

    #[test]
    fn external_identity_adapter() {
        let dir = tempfile::tempdir().unwrap();
        let truth = corpus(4, 12);
        let preds = external_detector_round_trip(
            "cp {train_json} {out_json}",
            &truth,
            &truth,
            Source::ModelP,
            dir.path(),
        )
        .unwrap();
        assert_eq!(preds.len(), truth.len());
        for (p, t) in preds.iter().zip(truth.iter()) {
            assert_eq!(p.bbox, t.bbox);
            assert_eq!(p.source, Source::ModelP);
        }
        let list = fs::read_to_string(dir.path().join("images-model-p.txt")).unwrap();
        assert_eq!(list.lines().count(), 4);

        // echoed expert source plus a score below 1 is still a prediction
        let scored = r#"sed 's/"bbox"/"score": 0.4, "bbox"/' {train_json} > {out_json}"#;
        let preds = external_detector_round_trip(scored, &truth, &truth, Source::ModelA, dir.path()).unwrap();
        assert_eq!(preds.len(), truth.len());
        assert!(preds.iter().all(|p| p.source == Source::ModelA && p.confidence == 0.4));
    }

    #[test]
    fn external_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let truth = corpus(2, 13);
        let run = |cmd: &str| external_detector_round_trip(cmd, &truth, &truth, Source::ModelA, dir.path());

        assert!(matches!(run("exit 3").unwrap_err(), Error::CommandFailed { .. }));
        assert!(matches!(run("true").unwrap_err(), Error::MissingOutput(_)));
        assert!(matches!(run("echo '{not json' > {out_json}").unwrap_err(), Error::Parse { .. }));
        let bad_score = r#"echo '{"images":[{"id":1,"width":512,"height":512}],"annotations":[{"id":77,"image_id":1,"category_id":1,"bbox":[1,1,5,5],"score":1.7}]}' > {out_json}"#;
        match run(bad_score).unwrap_err() {
            Error::InvalidAnnotation { annotation_id, .. } => assert_eq!(annotation_id, 77),
            other => panic!("unexpected {other:?}"),
        }
    }
}
