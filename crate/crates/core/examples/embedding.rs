//! Exports the masker's class-selector embedding to CSV and reads it back.
//!
//! Usage: `cargo run --example embedding [OUT_CSV]`

use std::path::PathBuf;

use fastsal::datasets::sprite_class_name;
use fastsal::masker::{read_embedding_csv, Masker, MaskerConfig};

fn main() -> fastsal::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/embedding.csv".into());
    let names: Vec<String> = (0..10).map(|c| sprite_class_name(c, 10)).collect();
    let masker = Masker::new(MaskerConfig::cifar(10), names, 0)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    masker.export_embedding(&out)?;
    let (names, matrix) = read_embedding_csv(&out)?;
    println!("{} rows x {} columns written to {}", matrix.num_classes(), matrix.dim(), out.display());
    for (name, row) in names.iter().zip(&matrix.rows).take(3) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{name:<16} |e| = {norm:.3}  e0..e3 = {:?}", &row[..4]);
    }
    Ok(())
}
