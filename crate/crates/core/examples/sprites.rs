//! Generates a small boxed sprites dataset and writes it to disk in the
//! image-directory layout (`<class>/<n>.png` plus `boxes.txt`).
//!
//! Usage: `cargo run --example sprites [OUT_DIR]`

use std::path::PathBuf;

use fastsal::datasets::{generate_sprites, save_image_directory, SpriteConfig};

fn main() -> fastsal::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/sprites".into());
    let config = SpriteConfig { num_classes: 4, sprites_per_class: 5, seed: 7, ..Default::default() };
    let set = generate_sprites(&config)?;
    let boxes = set.boxes.as_ref().expect("sprites carry boxes");
    for (i, (label, b)) in set.labels.iter().zip(boxes).enumerate().take(8) {
        let b = b[0];
        println!(
            "image {i:2}  class {:<16} box ({:2},{:2})-({:2},{:2})  area {:.2}",
            set.class_names[*label],
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            b.area_fraction(config.image_size, config.image_size)
        );
    }
    save_image_directory(&set, &out)?;
    println!("wrote {} images to {}", set.len(), out.display());
    Ok(())
}
