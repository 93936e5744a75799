//! Generates a small synthetic layered dataset, writes it as PGM files with a
//! manifest, reads it back and prints the class histogram.
//!
//! cargo run --release -p mpgnet --example synth_dataset -- [out_dir]

use std::path::PathBuf;

use mpgnet::data::{class_name, generate, load_manifest_samples, write_dataset, SynthConfig};

fn main() -> mpgnet::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mpgnet-synth"));
    let cfg = SynthConfig { seed: 3, ..SynthConfig::default() };
    let samples = generate(&cfg, 6)?;
    let manifest = write_dataset(&samples, &dir)?;
    println!("wrote {} samples to {}", samples.len(), manifest.display());

    let back = load_manifest_samples(&manifest, cfg.classes())?;
    let mut counts = vec![0usize; cfg.classes()];
    for (orig, read) in samples.iter().zip(&back) {
        assert_eq!(orig.labels, read.labels);
        for (acc, n) in counts.iter_mut().zip(read.labels.histogram()) {
            *acc += n;
        }
    }
    let total: usize = counts.iter().sum();
    for (k, n) in counts.iter().enumerate() {
        println!("{k}  {:<10} {:>6.2}%", class_name(k), 100.0 * *n as f64 / total as f64);
    }
    let first = &back[0];
    let column: Vec<String> = (0..first.labels.height())
        .step_by(4)
        .map(|y| first.labels.at(0, y, first.labels.width() / 2).to_string())
        .collect();
    println!("centre column labels (every 4th row): {}", column.join(" "));
    Ok(())
}
