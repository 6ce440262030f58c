//! The saliency objective on hand-made masks: smoothness and area terms,
//! then the full breakdown against a trained classifier for an empty mask,
//! a full mask and the ground-truth box.
//!
//! Usage: `cargo run --release --example objective`

use candle_core::{DType, Device, Tensor};
use fastsal::blackbox::{train_classifier, ClassifierTrainConfig};
use fastsal::datasets::{generate_sprites, SpriteConfig};
use fastsal::evidence::{make_alternative, AlternativeMode, AlternativeSpec};
use fastsal::image::Mask;
use fastsal::objective::{average_value, saliency_loss, total_variation, ObjectiveParams};

fn main() -> fastsal::Result<()> {
    let dev = Device::Cpu;
    let stripes = Tensor::new(&[[0f64, 1.0], [0.0, 1.0]], &dev)?;
    println!(
        "2x2 stripes: TV {} AV {}",
        total_variation(&stripes)?.to_scalar::<f64>()?,
        average_value(&stripes)?.to_scalar::<f64>()?
    );

    let data = generate_sprites(&SpriteConfig { num_classes: 3, sprites_per_class: 60, seed: 1, ..Default::default() })?;
    let model = train_classifier(&data, &ClassifierTrainConfig { epochs: 4, ..Default::default() }, None)?.model;
    let (image, class) = (&data.images[0], data.labels[0]);
    let (h, w) = image.dims();
    let b = data.boxes.as_ref().unwrap()[0][0];
    let mut boxed = Mask::filled(h, w, 0.0);
    for y in b.y0..=b.y1 {
        for x in b.x0..=b.x1 {
            boxed.set(y, x, 1.0);
        }
    }
    let params = ObjectiveParams { lambda_tv: 0.05, lambda_area: 3.0, ..Default::default() };
    let alt = make_alternative(image, &AlternativeSpec::for_height(AlternativeMode::ColorNoise, h, 3))?;
    let x = image.to_tensor(DType::F32, &dev)?;
    let a = alt.to_tensor(DType::F32, &dev)?;
    for (name, mask) in [("empty", Mask::filled(h, w, 0.0)), ("full", Mask::filled(h, w, 1.0)), ("box", boxed)] {
        let m = mask.to_tensor(DType::F32, &dev)?;
        let (_, br) = saliency_loss(&m, &x, class, &model, &params, &a)?;
        println!(
            "{name:>5}: tv {:7.3}  av {:.3}  -log f_c(kept) {:7.3}  f_c(removed)^p {:.3}  total {:7.3}",
            br.tv, br.av, br.preserve_nll, br.destroy, br.total
        );
    }
    Ok(())
}
