//! Sprites -> classifier -> masker -> evaluation, on a laptop CPU.
//!
//! Knobs (environment variables): BB_PER_CLASS, PER_CLASS, VAL_PER_CLASS, BB_EPOCHS,
//! EPOCHS, BATCH, LR, LAMBDA_TV, LAMBDA_AREA, LAMBDA_DESTROY, AUX, ALT (blur,
//! color_noise, random_50_50), OUT (directory for checkpoints and the history file).
//! Unset knobs fall back to `TrainConfig::desk()`.

use std::path::PathBuf;
use std::time::Instant;

use fastsal::baselines::{CenterBox, MaskerProducer, MaxBox};
use fastsal::blackbox::{train_classifier, ClassifierTrainConfig};
use fastsal::datasets::{generate_sprites, SpriteConfig};
use fastsal::eval::{evaluate_saliency, localization_error, DEFAULT_THRESHOLD};
use fastsal::evidence::AlternativeMode;
use fastsal::masker::{Masker, MaskerConfig};
use fastsal::objective::ObjectiveParams;
use fastsal::trainer::{masker_diagnostics, train, TrainConfig, TrainOutputs};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> fastsal::Result<()> {
    tracing_subscriber::fmt().with_env_filter("info").init();
    let out = PathBuf::from(env("OUT", "target/end_to_end".to_string()));
    let bb_set = generate_sprites(&SpriteConfig { sprites_per_class: env("BB_PER_CLASS", 200), seed: 1, ..Default::default() })?;
    // sprites are interleaved by class, so a prefix is balanced
    let n = (env("PER_CLASS", 100) * bb_set.num_classes()).min(bb_set.len());
    let train_set = bb_set.subset(&(0..n).collect::<Vec<_>>());
    let val = generate_sprites(&SpriteConfig { sprites_per_class: env("VAL_PER_CLASS", 100), seed: 2, ..Default::default() })?;

    let t = Instant::now();
    let bb_cfg = ClassifierTrainConfig { epochs: env("BB_EPOCHS", 20), ..Default::default() };
    let bb = train_classifier(&bb_set, &bb_cfg, Some(&out.join("blackbox.ckpt")))?;
    let acc = fastsal::blackbox::accuracy(&bb.model, &val)?;
    println!("classifier: held-out accuracy {acc:.4} ({:.0}s)", t.elapsed().as_secs_f64());

    let alt = match env("ALT", "random_50_50".to_string()).as_str() {
        "blur" => AlternativeMode::Blur,
        "color_noise" => AlternativeMode::ColorNoise,
        _ => AlternativeMode::Random5050,
    };
    let desk = TrainConfig::desk();
    let params = ObjectiveParams {
        lambda_tv: env("LAMBDA_TV", desk.params.lambda_tv),
        lambda_area: env("LAMBDA_AREA", desk.params.lambda_area),
        lambda_destroy: env("LAMBDA_DESTROY", desk.params.lambda_destroy),
        aux_weight: env("AUX", desk.params.aux_weight),
        ..desk.params
    };
    let cfg = TrainConfig {
        epochs: env("EPOCHS", 20),
        batch_size: env("BATCH", desk.batch_size),
        learning_rate: env("LR", 1e-3),
        params,
        alternative: alt,
        ..desk
    };
    let masker = Masker::new(MaskerConfig::cifar(10), train_set.class_names.clone(), 0)?;
    let t = Instant::now();
    let outputs = TrainOutputs { history: Some(out.join("history.jsonl")), checkpoint_dir: Some(out.join("checkpoints")) };
    train(&masker, &train_set, &bb.model, &cfg, &outputs)?;
    println!("masker: trained in {:.0}s", t.elapsed().as_secs_f64());

    for p in [&MaskerProducer { masker: &masker } as &dyn fastsal::eval::SaliencyProducer, &CenterBox, &MaxBox] {
        let s = evaluate_saliency(p, &val, &bb.model, DEFAULT_THRESHOLD)?;
        let l = localization_error(p, &val, DEFAULT_THRESHOLD)?;
        println!("{:<10} saliency metric {:.4}  localization error {:.4}", s.producer, s.mean_metric, l.error_rate);
    }
    for mode in [AlternativeMode::Blur, AlternativeMode::ColorNoise] {
        let d = masker_diagnostics(&masker, &val, &bb.model, mode, 0)?;
        println!("{mode:?}: {d:?}");
    }
    Ok(())
}
