//! AP50 and the Bkg/Miss/Loc breakdown for detectors trained on clean and
//! on noisy labels.
//!
//! cargo run --release --example evaluate_detections

use boxclean::eval::{error_counts, render_table, EvalReport};
use boxclean::noise::{CorpusSpec, NoiseSpec};
use boxclean::pipeline::{synthesize, train_and_predict};
use boxclean::detector::SimConfig;

fn main() -> boxclean::Result<()> {
    let seed = 2;
    let data = synthesize(&CorpusSpec::default(), 300, 100, &NoiseSpec::paper_like(seed), seed)?;
    let sim = SimConfig::default();
    let mut rows = Vec::new();
    for (name, train) in [("noisy", &data.crowd), ("clean", &data.train)] {
        let preds = train_and_predict(train, &data, &sim, seed);
        let c = error_counts(&preds, &data.test);
        println!(
            "{name}: {} predictions, {} matched, {} background, {} mislocalized, {} missed",
            preds.len(),
            c.matched,
            c.bkg,
            c.loc,
            c.miss
        );
        rows.push(EvalReport::new(name).with_detection(&preds, &data.test));
    }
    print!("{}", render_table(&rows));
    Ok(())
}
