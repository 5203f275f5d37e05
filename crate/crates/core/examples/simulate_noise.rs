//! Generates a ground-truth corpus, injects crowd noise and shows what each
//! noise type does to the labels.
//!
//! cargo run --release --example simulate_noise -- [images] [seed]

use boxclean::eval::{evaluate_labels, render_table};
use boxclean::noise::{assign_difficulty, corrupt, generate_corpus, CorpusSpec, NoiseSpec};

fn main() -> boxclean::Result<()> {
    let mut args = std::env::args().skip(1);
    let images = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let truth = generate_corpus(&CorpusSpec { images, ..CorpusSpec::default() }, seed);
    let difficulty = assign_difficulty(&truth, seed);
    println!("{} images, {} instances", truth.num_images(), truth.len());

    let default_mix = NoiseSpec::paper_like(seed);
    let specs = [
        ("bkg only", NoiseSpec { bkg_rate: 0.3, ..NoiseSpec::none(seed) }),
        ("miss only", NoiseSpec { miss_rate: 0.3, ..NoiseSpec::none(seed) }),
        ("loc only", NoiseSpec { loc_rate: 0.3, ..NoiseSpec::none(seed) }),
        ("bib only", NoiseSpec { bib_rate: 0.2, ..NoiseSpec::none(seed) }),
        ("default mix", default_mix),
    ];
    let mut rows = Vec::new();
    for (name, spec) in specs {
        let out = corrupt(&truth, &spec, &difficulty)?;
        let counts: Vec<String> = out.ledger.counts().iter().map(|(t, n)| format!("{t:?} {n}")).collect();
        println!("{name:<10} crowd {:4}  {}", out.crowd.len(), counts.join(", "));
        rows.push(evaluate_labels(name, &out.crowd, &truth));
    }
    println!("\ncrowd labels scored as predictions against the truth");
    print!("{}", render_table(&rows));
    Ok(())
}
