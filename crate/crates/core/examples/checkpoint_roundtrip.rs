//! Trains briefly, saves a checkpoint, restores it and confirms the restored
//! model predicts bit-identically.
//!
//! cargo run --release -p mpgnet --example checkpoint_roundtrip

use mpgnet::checkpoint::Checkpoint;
use mpgnet::data::{generate, SynthConfig};
use mpgnet::model::ModelConfig;
use mpgnet::train::{train, TrainConfig, TrainOptions};

fn main() -> mpgnet::Result<()> {
    let samples = generate(
        &SynthConfig {
            height: 64,
            width: 64,
            ..SynthConfig::default()
        },
        4,
    )?;
    let model = ModelConfig {
        stage_channels: [8, 16, 32, 64],
        ..ModelConfig::default()
    };
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let dir = std::env::temp_dir().join("mpgnet-checkpoint-example");
    let out = train(
        &model,
        &cfg,
        &samples,
        TrainOptions {
            checkpoint_dir: Some(&dir),
            ..TrainOptions::default()
        },
    )?;
    let path = out.checkpoint.expect("a checkpoint directory was given");
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("saved {} ({size} bytes) after {} steps", path.display(), out.progress.step);

    let loaded = Checkpoint::load(&path)?;
    let restored = loaded.restore()?;
    let image = samples[0].image.to_tensor();
    let a = out.model.predict(&image)?;
    let b = restored.predict(&image)?;
    let identical = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("restored epoch {}, step {}", loaded.progress.epoch, loaded.progress.step);
    println!("predictions bit-identical: {identical}");
    Ok(())
}
