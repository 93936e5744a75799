//! Training loop, evaluation report and the four-variant ablation harness.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, Progress};
use crate::data::{class_name, resize_to_model, stack_batch, Sample};
use crate::engine::{Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::loss::{f1_per_class, joint_loss, mean_foreground, LossWeights};
use crate::model::{Ablation, Model, ModelConfig, SPATIAL_DIVISOR};
use crate::optim::{adam_step, AdamState, LrSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    /// Seeds parameter initialization and the per-epoch shuffles.
    pub seed: u64,
    pub ablation: Ablation,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many epochs (when a directory is given).
    pub checkpoint_every: Option<usize>,
    /// Resize every sample to `(height, width)` before training.
    pub input_size: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 2,
            schedule: LrSchedule::default(),
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            seed: 0,
            ablation: Ablation::Full,
            max_steps: None,
            checkpoint_every: None,
            input_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        self.schedule.validate()?;
        self.loss_weights.validate()?;
        if let Some((h, w)) = self.input_size {
            if h == 0 || w == 0 || h % SPATIAL_DIVISOR != 0 || w % SPATIAL_DIVISOR != 0 {
                return Err(Error::Config(format!(
                    "input size {h}x{w} must be positive and divisible by {SPATIAL_DIVISOR}"
                )));
            }
        }
        Ok(())
    }

    /// Optimizer steps the run will take over `samples` samples.
    pub fn total_steps(&self, samples: usize) -> usize {
        let all = self.epochs * samples.div_ceil(self.batch_size);
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Final head first, then the auxiliary heads.
    pub head_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub val_mean_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl LossTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// One row per optimizer step: `step,epoch,lr,loss,head0,head1,...`.
    pub fn steps_csv(&self) -> String {
        let heads = self.steps.iter().map(|s| s.head_losses.len()).max().unwrap_or(0);
        let mut out = String::from("step,epoch,lr,loss");
        for h in 0..heads {
            write!(out, ",head{h}").unwrap();
        }
        out.push('\n');
        for s in &self.steps {
            write!(out, "{},{},{},{}", s.step, s.epoch, s.lr, s.loss).unwrap();
            for l in &s.head_losses {
                write!(out, ",{l}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// One row per epoch: `epoch,steps,mean_loss,val_mean_f1`.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,steps,mean_loss,val_mean_f1\n");
        for e in &self.epochs {
            let f1 = e.val_mean_f1.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{f1}", e.epoch, e.steps, e.mean_loss).unwrap();
        }
        out
    }
}

/// Optional side channels of a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<&'a [Sample]>,
    /// Directory receiving `last.ckpt` at the configured interval and at the end.
    pub checkpoint_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub trace: LossTrace,
    pub progress: Progress,
    pub checkpoint: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "last.ckpt";

/// Sample order for one epoch: a shuffle drawn from its own stream of `seed`.
pub fn epoch_order(samples: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    order
}

fn prepare(samples: &[Sample], size: Option<(usize, usize)>) -> Result<Vec<Sample>> {
    match size {
        Some((h, w)) => samples.iter().map(|s| resize_to_model(s, h, w)).collect(),
        None => Ok(samples.to_vec()),
    }
}

fn check_classes(samples: &[Sample], classes: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let top = s.labels.data().iter().copied().max().unwrap_or(0) as usize;
        if top >= classes {
            return Err(Error::Config(format!(
                "sample {i} contains label {top} but the model predicts only {classes} classes"
            )));
        }
    }
    Ok(())
}

fn batch_input(samples: &[Sample], order: &[usize]) -> Result<(Tensor<f32>, LabelMap)> {
    stack_batch(&order.iter().map(|&i| &samples[i]).collect::<Vec<_>>())
}

/// Trains a fresh model. Batches are assembled on a helper thread at most one
/// step ahead of the optimizer.
pub fn train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let model_config = model_config.clone().with_ablation(cfg.ablation);
    let data = prepare(samples, cfg.input_size)?;
    check_classes(&data, model_config.class_count)?;
    let validation = opts.validation.map(|v| prepare(v, cfg.input_size)).transpose()?;
    if let Some(v) = &validation {
        check_classes(v, model_config.class_count)?;
    }

    let mut model = Model::<f32>::build(model_config, cfg.seed)?;
    let mut optimizer = AdamState::new(model.store().params());
    let total_steps = cfg.total_steps(data.len());
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut trace = LossTrace::default();
    let mut progress = Progress {
        epoch: 0,
        step: 0,
        seed: cfg.seed,
    };
    let checkpoint_path = opts.checkpoint_dir.map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<(usize, Result<(Tensor<f32>, LabelMap)>)>(1);
        let data_ref = &data;
        scope.spawn(move || {
            let mut sent = 0;
            for epoch in 0..cfg.epochs {
                let order = epoch_order(data_ref.len(), cfg.seed, epoch);
                for chunk in order.chunks(cfg.batch_size) {
                    if sent == total_steps || tx.send((epoch, batch_input(data_ref, chunk))).is_err() {
                        return;
                    }
                    sent += 1;
                }
            }
        });

        let mut epoch_losses = Vec::with_capacity(per_epoch);
        let mut current = 0;
        for (epoch, batch) in rx {
            if epoch != current {
                finish_epoch(&model, &optimizer, cfg, &mut opts, validation.as_deref(), current, &mut epoch_losses, &mut trace, &mut progress, checkpoint_path.as_deref())?;
                current = epoch;
            }
            let (images, labels) = batch?;
            let lr = cfg.schedule.lr_at(epoch);
            let record = train_step(&mut model, &mut optimizer, cfg, &images, &labels, lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "{msg} at step {} (epoch {epoch}); training aborted{}",
                    progress.step + 1,
                    checkpoint_path
                        .as_ref()
                        .filter(|p| p.exists())
                        .map(|p| format!(", last good checkpoint kept at {}", p.display()))
                        .unwrap_or_default()
                )),
                other => other,
            })?;
            progress.step += 1;
            epoch_losses.push(record.0);
            trace.steps.push(StepRecord {
                step: progress.step as usize,
                epoch,
                lr,
                loss: record.0,
                head_losses: record.1,
            });
        }
        if !epoch_losses.is_empty() {
            finish_epoch(&model, &optimizer, cfg, &mut opts, validation.as_deref(), current, &mut epoch_losses, &mut trace, &mut progress, checkpoint_path.as_deref())?;
        }
        Ok(())
    })?;

    if let Some(path) = &checkpoint_path {
        Checkpoint::capture(&model, Some(&optimizer), Some(cfg), progress).save(path)?;
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        trace,
        progress,
        checkpoint: checkpoint_path,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    model: &Model<f32>,
    optimizer: &AdamState<f32>,
    cfg: &TrainConfig,
    opts: &mut TrainOptions<'_>,
    validation: Option<&[Sample]>,
    epoch: usize,
    losses: &mut Vec<f64>,
    trace: &mut LossTrace,
    progress: &mut Progress,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let val_mean_f1 = validation
        .map(|v| evaluate(model, v).map(|r| r.mean_foreground))
        .transpose()?;
    let record = EpochRecord {
        epoch,
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        steps: losses.len(),
        val_mean_f1,
    };
    losses.clear();
    progress.epoch = epoch + 1;
    if let Some(cb) = opts.on_epoch.as_mut() {
        cb(&record);
    }
    trace.epochs.push(record);
    if let (Some(path), Some(every)) = (checkpoint, cfg.checkpoint_every) {
        if progress.epoch % every == 0 {
            Checkpoint::capture(model, Some(optimizer), Some(cfg), *progress).save(path)?;
        }
    }
    Ok(())
}

/// Forward, joint loss, backward and one Adam update. Returns the loss and
/// its per-head terms. Nothing in the model changes unless the step succeeds.
pub fn train_step(
    model: &mut Model<f32>,
    optimizer: &mut AdamState<f32>,
    cfg: &TrainConfig,
    images: &Tensor<f32>,
    labels: &LabelMap,
    lr: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone())?;
    let (pass, updates) = model.forward_pure(&mut tape, x, Mode::Train)?;
    let loss = joint_loss(&mut tape, &pass.output, labels, cfg.loss_weights)?;
    let total = tape.value(loss.total).item()? as f64;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("joint loss is {total}")));
    }
    let heads = loss
        .heads
        .iter()
        .map(|&h| tape.value(h).item().map(|v| v as f64))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = tape.backward(loss.total)?;
    let grads = model.store().collect_grads(&pass.params, &mut grads);
    adam_step(model.store_mut().params_mut(), &grads, optimizer, lr, cfg.weight_decay)?;
    model.store_mut().apply_updates(updates);
    Ok((total, heads))
}

/// Per-class F1 averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub f1: Vec<f64>,
    pub mean_foreground: f64,
    pub samples: usize,
}

impl EvalReport {
    /// Columns `class_index,class_name,f1`; K class rows then a
    /// `summary,mean_foreground,<value>` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_index,class_name,f1\n");
        for (k, f) in self.f1.iter().enumerate() {
            writeln!(out, "{k},{},{f:.6}", class_name(k)).unwrap();
        }
        writeln!(out, "summary,mean_foreground,{:.6}", self.mean_foreground).unwrap();
        out
    }

    pub fn to_text(&self) -> String {
        let width = (0..self.f1.len()).map(|k| class_name(k).len()).max().unwrap_or(0).max(15);
        let mut out = String::new();
        for (k, f) in self.f1.iter().enumerate() {
            writeln!(out, "{:>2}  {:<width$}  {f:.4}", k, class_name(k)).unwrap();
        }
        writeln!(out, "    {:<width$}  {:.4}", "mean foreground", self.mean_foreground).unwrap();
        out
    }
}

/// Eval-mode prediction of every sample (fanned out across samples), argmax,
/// and per-class F1 averaged in sample order.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let k = model.config().class_count;
    check_classes(samples, k)?;
    let scores = samples
        .par_iter()
        .map(|s| {
            let probs = model.predict(&s.image.to_tensor())?;
            f1_per_class(&LabelMap::argmax(&probs)?, &s.labels, k)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut f1 = vec![0.0; k];
    for row in &scores {
        for (acc, v) in f1.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut f1 {
        *v /= scores.len() as f64;
    }
    Ok(EvalReport {
        mean_foreground: mean_foreground(&f1),
        f1,
        samples: samples.len(),
    })
}

/// Restores a checkpoint and evaluates it, resizing samples to the input size
/// the checkpoint was trained at.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, samples: &[Sample]) -> Result<EvalReport> {
    let model = checkpoint.restore()?;
    let size = checkpoint.train_config.as_ref().and_then(|t| t.input_size);
    evaluate(&model, &prepare(samples, size)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub parameters: usize,
    /// Per-class F1 averaged over seeds.
    pub f1: Vec<f64>,
    pub mean_foreground: f64,
    /// Mean foreground F1 of each seed's run, in seed order.
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub steps_per_run: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `variant,parameters,<class names>,mean_foreground`.
    pub fn to_csv(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.f1.len());
        let mut out = String::from("variant,parameters");
        for c in 0..k {
            write!(out, ",{}", class_name(c)).unwrap();
        }
        out.push_str(",mean_foreground\n");
        for r in &self.rows {
            write!(out, "{},{}", r.variant.name(), r.parameters).unwrap();
            for f in &r.f1 {
                write!(out, ",{f:.6}").unwrap();
            }
            writeln!(out, ",{:.6}", r.mean_foreground).unwrap();
        }
        out
    }

    /// Aligned table: one row per variant, one column per class.
    pub fn to_text(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.f1.len());
        let names: Vec<String> = (0..k).map(class_name).collect();
        let first = self.rows.iter().map(|r| r.variant.label().len()).max().unwrap_or(0);
        let mut out = format!("{:<first$}  {:>9}", "Variant", "Params");
        for n in &names {
            write!(out, "  {:>w$}", n, w = n.len().max(6)).unwrap();
        }
        out.push_str("  Mean FG\n");
        for r in &self.rows {
            write!(out, "{:<first$}  {:>9}", r.variant.label(), r.parameters).unwrap();
            for (f, n) in r.f1.iter().zip(&names) {
                write!(out, "  {:>w$.4}", f, w = n.len().max(6)).unwrap();
            }
            writeln!(out, "  {:>7.4}", r.mean_foreground).unwrap();
        }
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
        writeln!(out, "\n{} optimizer steps per run; seeds {seeds}", self.steps_per_run).unwrap();
        if let (Some(full), Some(base)) = (self.row(Ablation::Full), self.row(Ablation::Baseline)) {
            writeln!(
                out,
                "mean foreground F1 over seeds: full {:.4} vs baseline {:.4}",
                full.mean_foreground, base.mean_foreground
            )
            .unwrap();
        }
        out
    }
}

/// Trains and evaluates baseline, +FRM, +MPGA and the full model with the same
/// data, budget and seeds. `evaluation` defaults to the training samples.
pub fn ablate(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    train_samples: &[Sample],
    evaluation: Option<&[Sample]>,
    seeds: &[u64],
    mut on_run: impl FnMut(Ablation, u64, &EvalReport),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let eval_set = prepare(evaluation.unwrap_or(train_samples), cfg.input_size)?;
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for variant in Ablation::ALL {
        let mut sum = vec![0.0; model_config.class_count];
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut parameters = 0;
        for &seed in seeds {
            let run_cfg = TrainConfig {
                seed,
                ablation: variant,
                checkpoint_every: None,
                ..cfg.clone()
            };
            let outcome = train(model_config, &run_cfg, train_samples, TrainOptions::default())?;
            parameters = outcome.model.parameter_count();
            let report = evaluate(&outcome.model, &eval_set)?;
            on_run(variant, seed, &report);
            for (a, v) in sum.iter_mut().zip(&report.f1) {
                *a += v;
            }
            per_seed.push(report.mean_foreground);
        }
        let f1: Vec<f64> = sum.iter().map(|v| v / seeds.len() as f64).collect();
        rows.push(AblationRow {
            variant,
            parameters,
            mean_foreground: mean_foreground(&f1),
            f1,
            per_seed,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        steps_per_run: cfg.total_steps(train_samples.len()),
        rows,
    })
}
