//! Unconstrained full-resolution mask optimization finds a near-invisible
//! perturbation that wipes out the class probability. This is why the
//! saliency objective smooths masks and replaces removed evidence with a
//! plausible alternative rather than zeros.
//!
//! Usage: `cargo run --release --example adversarial`

use fastsal::baselines::{adversarial_demo, AdversarialConfig};
use fastsal::blackbox::{train_classifier, ClassifierTrainConfig};
use fastsal::datasets::{generate_sprites, SpriteConfig};

fn main() -> fastsal::Result<()> {
    let data = generate_sprites(&SpriteConfig { num_classes: 3, sprites_per_class: 60, seed: 1, ..Default::default() })?;
    let model = train_classifier(&data, &ClassifierTrainConfig { epochs: 4, ..Default::default() }, None)?.model;
    let cfg = AdversarialConfig::default();
    for i in 0..3 {
        let r = adversarial_demo(&data.images[i], data.labels[i], &model, &cfg)?;
        println!(
            "image {i}: f_c {:.4} -> {:.2e} with mean |1 - M| = {:.4}",
            r.prob_before, r.prob_after, r.mean_perturbation
        );
    }
    Ok(())
}
