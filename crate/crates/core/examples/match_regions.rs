//! Splits one image's crowd labels and two detectors' predictions into
//! gray/pink/red/green regions and scores the image.
//!
//! cargo run --example match_regions

use boxclean::lsm::{image_score, partition_image, LsmMode, DEFAULT_MATCH_IOU};
use boxclean::{iou, BBox, Label, Source};

fn human(id: u64, b: [f64; 4]) -> Label {
    Label::human(id, 1, 1, BBox::new(b[0], b[1], b[2], b[3]).unwrap(), Source::Crowd)
}

fn pred(id: u64, source: Source, b: [f64; 4], conf: f64) -> Label {
    Label::predicted(id, 1, 1, BBox::new(b[0], b[1], b[2], b[3]).unwrap(), source, conf)
}

fn main() {
    let crowd = vec![
        human(1, [10.0, 10.0, 40.0, 40.0]),   // agreed on by everyone
        human(2, [100.0, 20.0, 30.0, 30.0]),  // loose box around a real object
        human(3, [200.0, 200.0, 25.0, 25.0]), // nothing there
    ];
    let model_p = vec![
        pred(1, Source::ModelP, [12.0, 11.0, 38.0, 40.0], 0.93),
        pred(2, Source::ModelP, [108.0, 26.0, 16.0, 17.0], 0.71),
        pred(3, Source::ModelP, [300.0, 40.0, 30.0, 30.0], 0.64),
    ];
    let model_a = vec![
        pred(1, Source::ModelA, [11.0, 10.0, 39.0, 41.0], 0.88),
        pred(2, Source::ModelA, [60.0, 150.0, 20.0, 20.0], 0.42),
    ];
    println!("IoU crowd#2 vs model-P#2: {:.3}", iou(&crowd[1].bbox, &model_p[1].bbox));

    for mode in [LsmMode::Dual, LsmMode::Single] {
        let part = partition_image(&crowd, &model_p, &model_a, DEFAULT_MATCH_IOU, mode);
        println!("\n{mode:?} mode");
        for c in &part.gray {
            let members: Vec<String> = c.members.iter().map(|l| format!("{}#{}", l.source.as_str(), l.id)).collect();
            println!("  gray  {}", members.join(" + "));
        }
        for l in &part.pink {
            println!("  pink  model-p#{} conf {:.2}", l.id, l.confidence);
        }
        for l in part.red.iter().chain(&part.green) {
            let region = if l.source == Source::ModelA { "red  " } else { "green" };
            println!("  {region} {}#{} score {:.2}", l.source.as_str(), l.id, part.scores[&l.key()]);
        }
        println!("  image score {:.2}", image_score(&part));
    }
}
