//! Overfits the full model on four synthetic 64×128 images and reports the
//! loss curve and per-class F1 on those images.
//!
//! cargo run --release -p mpgnet --example overfit -- [steps]

use std::time::Instant;

use mpgnet::data::{generate, SynthConfig};
use mpgnet::model::ModelConfig;
use mpgnet::train::{evaluate, train, TrainConfig, TrainOptions};

fn main() -> mpgnet::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let samples = generate(&SynthConfig { seed: 1, ..SynthConfig::default() }, 4)?;
    let model = ModelConfig {
        stage_channels: [16, 32, 64, 128],
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: steps.div_ceil(2),
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut on_epoch = |e: &mpgnet::train::EpochRecord| {
        if e.epoch % 10 == 0 {
            println!("epoch {:>3}  loss {:.4}  ({:.1}s)", e.epoch, e.mean_loss, start.elapsed().as_secs_f64());
        }
    };
    let out = train(
        &model,
        &cfg,
        &samples,
        TrainOptions {
            on_epoch: Some(&mut on_epoch),
            ..TrainOptions::default()
        },
    )?;
    let losses = out.trace.losses();
    println!("loss at step 10: {:.4}, final: {:.4}", losses[9], losses[losses.len() - 1]);
    let report = evaluate(&out.model, &samples)?;
    print!("{}", report.to_text());
    println!("{} steps in {:.1}s", losses.len(), start.elapsed().as_secs_f64());
    Ok(())
}
