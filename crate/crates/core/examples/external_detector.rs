//! Plugs a detector written in another language into the loop through a
//! shell command. The adapter here is a one-line Python script that answers
//! with the training labels shrunk by a pixel and a made-up score. It finds
//! nothing on images it was not trained on, so most crowd labels end up queued.
//!
//! cargo run --example external_detector

use std::sync::Arc;

use boxclean::active::TruthOracle;
use boxclean::detector::ExternalDetector;
use boxclean::noise::{CorpusSpec, NoiseSpec};
use boxclean::pipeline::{step1_and_correct, synthesize, CleaningConfig};
use boxclean::Source;

const ADAPTER: &str = r#"
import json, sys
coco = json.load(open(sys.argv[1]))
for a in coco["annotations"]:
    x, y, w, h = a["bbox"]
    a["bbox"] = [x + 1, y + 1, max(w - 2, 1), max(h - 2, 1)]
    a["score"] = 0.8
json.dump(coco, open(sys.argv[2], "w"))
"#;

fn main() -> boxclean::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| boxclean::Error::io(std::env::temp_dir(), e))?;
    let script = dir.path().join("adapter.py");
    std::fs::write(&script, ADAPTER).map_err(|e| boxclean::Error::io(&script, e))?;
    let command = format!("python3 {} {{train_json}} {{out_json}}", script.display());

    let seed = 4;
    let data = synthesize(&CorpusSpec::default(), 60, 0, &NoiseSpec::paper_like(seed), seed)?;
    let mut cfg = CleaningConfig::default();
    cfg.loop_cfg.x0 = 6;
    cfg.loop_cfg.k = 6;
    cfg.loop_cfg.g = 2;

    let work = dir.path().join("detector");
    let mut p = ExternalDetector::new(command.clone(), Source::ModelP, &data.crowd, &work);
    let mut a = ExternalDetector::new(command, Source::ModelA, &data.crowd, &work);
    let mut oracle = TruthOracle::new(Arc::clone(&data.truth));
    let step2 = step1_and_correct(&data.crowd, &mut oracle, &mut p, &mut a, &cfg, seed, None)?;
    println!(
        "{} images selected; {} review items over {} remaining images",
        step2.state.selected.len(),
        step2.outcome.queue.len(),
        step2.outcome.report.images
    );
    let mut files: Vec<String> = std::fs::read_dir(&work)
        .map_err(|e| boxclean::Error::io(&work, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    println!("exchange files: {}", files.join(", "));
    Ok(())
}
