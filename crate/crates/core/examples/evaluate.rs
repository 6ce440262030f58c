//! Saliency metric and localization error for the box and gradient
//! baselines and for the ground-truth boxes.
//!
//! Usage: `cargo run --release --example evaluate`

use fastsal::baselines::{CenterBox, GradientProducer, MaxBox};
use fastsal::blackbox::{train_classifier, ClassifierTrainConfig};
use fastsal::datasets::{generate_sprites, SpriteConfig};
use fastsal::eval::{evaluate_saliency, localization_error, GroundTruthBoxes, SaliencyProducer, DEFAULT_THRESHOLD};

fn main() -> fastsal::Result<()> {
    let train = generate_sprites(&SpriteConfig { num_classes: 4, sprites_per_class: 60, seed: 1, ..Default::default() })?;
    let val = generate_sprites(&SpriteConfig { num_classes: 4, sprites_per_class: 25, seed: 2, ..Default::default() })?;
    let model = train_classifier(&train, &ClassifierTrainConfig { epochs: 5, ..Default::default() }, None)?.model;

    let gt = GroundTruthBoxes { boxes: val.boxes.as_ref().unwrap() };
    let gradient = GradientProducer { model: &model };
    let producers: [&dyn SaliencyProducer; 4] = [&gt, &CenterBox, &MaxBox, &gradient];
    println!("{:<14} {:>8} {:>10}", "producer", "metric", "loc. error");
    for p in producers {
        let s = evaluate_saliency(p, &val, &model, DEFAULT_THRESHOLD)?;
        let l = localization_error(p, &val, DEFAULT_THRESHOLD)?;
        println!("{:<14} {:>8.4} {:>10.3}", s.producer, s.mean_metric, l.error_rate);
    }
    Ok(())
}
