//! Trains baseline, +FRM, +MPGA and the full model on the same small synthetic
//! set and prints the per-class F1 table.
//!
//! cargo run --release -p mpgnet --example ablation -- [steps] [seeds]

use mpgnet::data::{generate, SynthConfig};
use mpgnet::model::ModelConfig;
use mpgnet::train::{ablate, TrainConfig};

fn main() -> mpgnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(60);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);

    let synth = SynthConfig {
        height: 64,
        width: 64,
        seed: 11,
        ..SynthConfig::default()
    };
    let data = generate(&synth, 20)?;
    let (train_set, eval_set) = data.split_at(16);
    let model = ModelConfig {
        stage_channels: [8, 16, 32, 64],
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: steps.div_ceil(8),
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = ablate(&model, &cfg, train_set, Some(eval_set), &seeds, |v, seed, r| {
        println!("{:<16} seed {seed}: {:.4}", v.label(), r.mean_foreground)
    })?;
    println!();
    print!("{}", report.to_text());
    Ok(())
}
