//! Noisy vs cleaned vs clean training on synthetic corpora, several seeds.
//!
//! cargo run --release --example compare_methods -- [seeds]

use boxclean::eval::render_table;
use boxclean::pipeline::{run_experiment, ExperimentConfig};

fn main() -> boxclean::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let cfg = ExperimentConfig::default();
    let mut sums: Vec<(String, f64, f64, f64, usize)> = Vec::new();
    for seed in 1..=seeds {
        let r = run_experiment(&cfg, seed, None)?;
        println!("seed {seed}: {:.1}% of the images went to the expert", 100.0 * r.selected_fraction);
        println!("{}", render_table(&r.rows));
        for row in &r.rows {
            let f1 = row.label_quality.as_ref().and_then(|q| q.f1).unwrap_or(0.0);
            let ap = row.ap50.unwrap_or(0.0);
            let budget = row.budget_percent.unwrap_or(0.0);
            match sums.iter_mut().find(|s| s.0 == row.method) {
                Some(s) => {
                    s.1 += ap;
                    s.2 += f1;
                    s.3 += budget;
                    s.4 += 1;
                }
                None => sums.push((row.method.clone(), ap, f1, budget, 1)),
            }
        }
    }
    println!("mean over {seeds} seeds");
    for (method, ap, f1, budget, n) in sums {
        let n = n as f64;
        println!("{method:<12} AP50 {:6.2}  F1 {:.4}  budget {:6.2}%", ap / n, f1 / n, budget / n);
    }
    Ok(())
}
