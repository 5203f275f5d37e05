//! Step 1 on its own: random initial sample, then rounds of detector training
//! and inconsistency-ranked selection, with checkpoints and a resume.
//!
//! cargo run --release --example active_loop

use std::sync::Arc;

use boxclean::active::{initialize, run_full, run_iteration, LoopConfig, PipelineState, TruthOracle};
use boxclean::detector::SimConfig;
use boxclean::ledger::CostModel;
use boxclean::noise::NoiseSpec;
use boxclean::pipeline::{simulated_detectors, synthesize};
use boxclean::noise::CorpusSpec;

fn main() -> boxclean::Result<()> {
    let seed = 3;
    let data = synthesize(&CorpusSpec::default(), 300, 0, &NoiseSpec::paper_like(seed), seed)?;
    let config = LoopConfig {
        x0: 16,
        k: 16,
        g: 4,
        ..LoopConfig::default()
    };
    let (mut p, mut a) = simulated_detectors(&data.truth, &data.difficulty, &SimConfig::default(), seed);
    let mut oracle = TruthOracle::new(Arc::clone(&data.truth));
    let mut state = initialize(&data.crowd, &mut oracle, config, CostModel::default(), seed)?;

    let dir = tempfile::tempdir().map_err(|e| boxclean::Error::io(std::env::temp_dir(), e))?;
    let root = dir.path().join("checkpoints");
    state.save_checkpoint(&root)?;
    for _ in 0..2 {
        run_iteration(&mut state, &mut p, &mut a, &mut oracle)?;
        state.save_checkpoint(&root)?;
    }
    for r in &state.history {
        let top: Vec<String> = r.scores.iter().take(3).map(|s| format!("{s:.2}")).collect();
        println!(
            "iteration {}: {} images, top scores [{}], expert {} / consensus {} / crowd {} instances",
            r.iteration,
            r.selected.len(),
            top.join(", "),
            r.expert_instances,
            r.consensus_instances,
            r.crowd_instances
        );
    }

    // pretend the process died here and pick up from disk
    let latest = PipelineState::latest_checkpoint(&root).expect("checkpoint written");
    println!("resuming from {}", latest.file_name().unwrap().to_string_lossy());
    let mut resumed = PipelineState::load_checkpoint(&latest)?;
    run_full(&mut resumed, &mut p, &mut a, &mut oracle, Some(&root))?;
    println!(
        "done after {} iterations: {} of {} images re-annotated ({:.1}%), {} consensus labels, ledger {:.0} units",
        resumed.iteration,
        resumed.selected.len(),
        data.crowd.num_images(),
        100.0 * resumed.selected_fraction(),
        resumed.d_a.len(),
        resumed.ledger.total()
    );
    Ok(())
}
