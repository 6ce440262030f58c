//! Trains the desk-scale CNN classifier on sprites and reports held-out
//! accuracy.
//!
//! Usage: `cargo run --release --example train_blackbox`

use fastsal::blackbox::{accuracy, classify, train_classifier, ClassifierTrainConfig};
use fastsal::datasets::{generate_sprites, SpriteConfig};

fn main() -> fastsal::Result<()> {
    let train = generate_sprites(&SpriteConfig { num_classes: 4, sprites_per_class: 60, seed: 1, ..Default::default() })?;
    let val = generate_sprites(&SpriteConfig { num_classes: 4, sprites_per_class: 25, seed: 2, ..Default::default() })?;
    let cfg = ClassifierTrainConfig { epochs: 5, ..Default::default() };
    let trained = train_classifier(&train, &cfg, Some(std::path::Path::new("target/blackbox.ckpt")))?;
    for (epoch, loss) in trained.report.epoch_losses.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.4}");
    }
    println!("held-out accuracy {:.3}", accuracy(&trained.model, &val)?);

    let probs = classify(&trained.model, &[&val.images[0]])?;
    let top: Vec<String> =
        probs[0].top_k(3).iter().map(|(c, p)| format!("{} {p:.3}", val.class_names[*c])).collect();
    println!("first validation image ({}): {}", val.class_names[val.labels[0]], top.join(", "));
    Ok(())
}
