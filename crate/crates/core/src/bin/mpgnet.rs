use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpgnet::checkpoint::Checkpoint;
use mpgnet::checks::{format_results, gradient_suite};
use mpgnet::config::{KeyValues, RunConfig};
use mpgnet::data::{generate, load_manifest_samples, write_dataset};
use mpgnet::train::{ablate, evaluate_checkpoint, train, EpochRecord, TrainOptions};
use mpgnet::{Error, Result};

#[derive(Parser)]
#[command(name = "mpgnet", version, about = "Layer segmentation network: synthetic data, training, evaluation and ablation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PGM images and labels) plus manifest.tsv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synth: SynthFlags,
    },
    /// Train a model; writes last.ckpt, loss_trace.csv and epochs.csv.
    Train {
        /// Training manifest (image<TAB>label per line).
        #[arg(long)]
        train: PathBuf,
        /// Validation manifest, evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
    },
    /// Evaluate a checkpoint; prints the per-class F1 report as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate baseline, +FRM, +MPGA and full with one budget.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        /// Evaluation manifest; defaults to the training manifest.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Comma-separated seeds, one run per variant and seed.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Directory for ablation.csv and ablation.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train_flags: TrainFlags,
    },
    /// Finite-difference check of every operation and both attention blocks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    in_channels: Option<usize>,
    #[arg(long)]
    class_count: Option<usize>,
    /// Four comma-separated widths, each double the previous.
    #[arg(long)]
    stage_channels: Option<String>,
    #[arg(long)]
    frm_reduction: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    /// Decay steps as epoch:factor pairs, e.g. 50:0.1,80:0.1, or "none".
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// baseline, frm, mpga or full.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    input_height: Option<usize>,
    #[arg(long)]
    input_width: Option<usize>,
}

#[derive(Args)]
struct SynthFlags {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    layer_count: Option<usize>,
    #[arg(long)]
    boundary_components: Option<usize>,
    #[arg(long)]
    amplitude_min: Option<f64>,
    #[arg(long)]
    amplitude_max: Option<f64>,
    /// Comma-separated, background first.
    #[arg(long)]
    layer_intensity_means: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

macro_rules! set_some {
    ($kv:expr, $src:expr, $($field:ident),+) => {
        $(if let Some(v) = &$src.$field {
            $kv.set(stringify!($field), v);
        })+
    };
}

fn load_config(common: &Common, fill: impl FnOnce(&mut KeyValues)) -> Result<RunConfig> {
    let mut flags = KeyValues::new();
    set_some!(flags, common, seed);
    fill(&mut flags);
    RunConfig::load(common.config.as_deref(), &flags)
}

fn model_train_flags(kv: &mut KeyValues, m: &ModelFlags, t: &TrainFlags) {
    set_some!(kv, m, in_channels, class_count, stage_channels, frm_reduction);
    set_some!(
        kv, t, epochs, batch_size, lr_start, lr_schedule, weight_decay, alpha, beta, ablation, max_steps,
        checkpoint_every, input_height, input_width
    );
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { out, common, synth } => {
            let rc = load_config(&common, |kv| {
                set_some!(
                    kv, synth, samples, height, width, layer_count, boundary_components, amplitude_min,
                    amplitude_max, layer_intensity_means, noise_sigma
                );
            })?;
            let samples = generate(&rc.synth, rc.samples.unwrap_or(20))?;
            let manifest = write_dataset(&samples, &out)?;
            println!("wrote {} samples; manifest {}", samples.len(), manifest.display());
        }
        Command::Train {
            train: train_manifest,
            val,
            out,
            common,
            model,
            train_flags,
        } => {
            let rc = load_config(&common, |kv| model_train_flags(kv, &model, &train_flags))?;
            let k = rc.model.class_count;
            let samples = load_manifest_samples(&train_manifest, k)?;
            let validation = val.map(|v| load_manifest_samples(v, k)).transpose()?;
            let mut on_epoch = |e: &EpochRecord| match e.val_mean_f1 {
                Some(f1) => println!("epoch {:>4}  loss {:.5}  val mean F1 {:.4}", e.epoch, e.mean_loss, f1),
                None => println!("epoch {:>4}  loss {:.5}", e.epoch, e.mean_loss),
            };
            let outcome = train(
                &rc.model,
                &rc.train,
                &samples,
                TrainOptions {
                    validation: validation.as_deref(),
                    checkpoint_dir: Some(&out),
                    on_epoch: Some(&mut on_epoch),
                },
            )?;
            write(&out.join("loss_trace.csv"), &outcome.trace.steps_csv())?;
            write(&out.join("epochs.csv"), &outcome.trace.epochs_csv())?;
            println!(
                "{} steps; checkpoint {}",
                outcome.progress.step,
                outcome.checkpoint.as_deref().unwrap_or(&out).display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            // Read labels permissively so a class-count mismatch is reported as such.
            let samples = load_manifest_samples(&manifest, 256)?;
            let report = evaluate_checkpoint(&ck, &samples)?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(path) = out {
                write(&path, &csv)?;
            }
        }
        Command::Ablate {
            train: train_manifest,
            val,
            seeds,
            out,
            common,
            model,
            train_flags,
        } => {
            let rc = load_config(&common, |kv| model_train_flags(kv, &model, &train_flags))?;
            let k = rc.model.class_count;
            let samples = load_manifest_samples(&train_manifest, k)?;
            let evaluation = val.map(|v| load_manifest_samples(v, k)).transpose()?;
            let report = ablate(&rc.model, &rc.train, &samples, evaluation.as_deref(), &seeds, |v, seed, r| {
                println!("{:<16} seed {seed}: mean foreground F1 {:.4}", v.label(), r.mean_foreground)
            })?;
            println!();
            print!("{}", report.to_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                write(&dir.join("ablation.csv"), &report.to_csv())?;
                write(&dir.join("ablation.txt"), &report.to_text())?;
            }
        }
        Command::Gradcheck { seed } => {
            let results = gradient_suite(seed)?;
            print!("{}", format_results(&results));
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                eprintln!("{failed} of {} gradient checks exceeded tolerance", results.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("all {} checks passed", results.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
