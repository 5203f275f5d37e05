//! Step 2: final detectors partition the remaining crowd labels, the
//! box-in-box filter drops merged boxes, simple cases are fixed
//! automatically and the rest is queued for review.
//!
//! cargo run --release --example correct_labels

use boxclean::correction::truth_oracle_decisions;
use boxclean::eval::label_quality;
use boxclean::noise::{CorpusSpec, NoiseSpec};
use boxclean::pipeline::{review_with_truth, run_step1_and_correct, synthesize, CleaningConfig};

fn main() -> boxclean::Result<()> {
    let seed = 5;
    let data = synthesize(&CorpusSpec::default(), 300, 0, &NoiseSpec::paper_like(seed), seed)?;
    let mut cfg = CleaningConfig::default();
    cfg.loop_cfg.x0 = 16;
    cfg.loop_cfg.k = 16;

    let step2 = run_step1_and_correct(&data.crowd, &data.truth, &data.difficulty, &cfg, seed, None)?;
    let r = &step2.outcome.report;
    println!(
        "{} images, {} crowd labels: {} gray clusters, {} pink, {} red, {} green",
        r.images, r.crowd_labels, r.gray_clusters, r.pink, r.red, r.green
    );
    println!(
        "auto: {} replaced, {} kept, {} added from gray, {} added from pink",
        r.auto.replaced, r.auto.kept, r.auto.added_gray, r.auto.added_pink
    );
    println!(
        "box-in-box filter removed {}; queue {} (would be {} without it)",
        r.bib_removed, r.queue_size, r.queue_size_without_bib
    );
    for item in step2.outcome.queue.iter().take(5) {
        let flagged = item.flagged.bbox.to_array();
        println!(
            "  item {} image {} {:?} flagged {:?}, {} suggestions",
            item.item_id,
            item.image_id,
            item.region,
            flagged,
            item.suggestions.len()
        );
    }

    let decisions = truth_oracle_decisions(&step2.outcome.corrected, &step2.outcome.queue, &data.truth);
    println!("a truth-backed reviewer answers {} items", decisions.len());
    let run = review_with_truth(step2, &data.truth, None)?;
    let before = label_quality(&data.crowd, &data.train);
    let after = label_quality(&run.cleaned, &data.train);
    println!(
        "F1 {:.4} -> {:.4}, precision {:.4} -> {:.4}, recall {:.4} -> {:.4}",
        before.f1.unwrap(),
        after.f1.unwrap(),
        before.precision.unwrap(),
        after.precision.unwrap(),
        before.recall.unwrap(),
        after.recall.unwrap()
    );
    println!("budget {:.2}% of full expert annotation", run.ledger.budget_percent(data.train.len() as u64));
    Ok(())
}
