//! Per-image iterative mask optimization against a trained classifier.
//! Writes the mask and the preserved/destroyed renderings as PNGs.
//!
//! Usage: `cargo run --release --example iterative [STEPS]`

use std::path::Path;

use fastsal::baselines::{iterative_mask, IterConfig};
use fastsal::blackbox::{classify, train_classifier, ClassifierTrainConfig};
use fastsal::datasets::{generate_sprites, SpriteConfig};
use fastsal::evidence::{apply_mask_image, make_alternative, AlternativeSpec};

fn main() -> fastsal::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let data = generate_sprites(&SpriteConfig { num_classes: 3, sprites_per_class: 60, seed: 1, ..Default::default() })?;
    let model = train_classifier(&data, &ClassifierTrainConfig { epochs: 4, ..Default::default() }, None)?.model;
    let (image, class) = (&data.images[1], data.labels[1]);

    let cfg = IterConfig { steps, ..Default::default() };
    let result = iterative_mask(image, class, &model, &cfg)?;
    let first = result.trace.first().copied().unwrap_or(f64::NAN);
    let last = result.trace.last().copied().unwrap_or(f64::NAN);
    println!("{} steps: loss {first:.3} -> {last:.3}, mask area {:.3}", result.trace.len(), result.mask.mean());

    let alt = make_alternative(image, &AlternativeSpec::for_height(cfg.alternative, image.height(), cfg.seed))?;
    let preserved = apply_mask_image(image, &result.mask, &alt)?;
    let destroyed = apply_mask_image(image, &result.mask.inverted(), &alt)?;
    let probs = classify(&model, &[image, &preserved, &destroyed])?;
    println!(
        "f_c: original {:.3}, preserved {:.3}, destroyed {:.3}",
        probs[0].get(class),
        probs[1].get(class),
        probs[2].get(class)
    );
    let out = Path::new("target/iterative");
    std::fs::create_dir_all(out)?;
    result.mask.save_png(&out.join("mask.png"))?;
    preserved.save_png(&out.join("preserved.png"))?;
    destroyed.save_png(&out.join("destroyed.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
