//! Plain `key = value` configuration text.
//!
//! Keys match the field names of [`ModelConfig`], [`TrainConfig`] and
//! [`SynthConfig`]; `snake_case` and `kebab-case` spellings are equivalent.
//! Later entries override earlier ones, which is how command-line flags are
//! layered over a file.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::optim::{format_steps, parse_steps};
use crate::train::TrainConfig;

pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Ordered key/value pairs; a repeated key keeps its last value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
    /// `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected \"key = value\", got {raw:?}", i + 1)))?;
            if k.trim().is_empty() {
                return Err(Error::Config(format!("{origin}:{}: empty key", i + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let key = normalize_key(key);
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let key = normalize_key(key);
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    /// Every entry of `other` overrides the same key here.
    pub fn overlay(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
            })
            .transpose()
    }

    fn parsed_bool(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|raw| match raw.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {raw:?}"))),
            })
            .transpose()
    }

    fn parsed_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        self.get(key)
            .map(|raw| {
                raw.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("{key}: cannot parse list item {s:?}")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        if let Some(k) = self.keys().find(|k| !known.contains(k)) {
            return Err(Error::Config(format!(
                "unknown configuration key {k:?}; accepted keys: {}",
                known.join(", ")
            )));
        }
        Ok(())
    }
}

pub const MODEL_KEYS: [&str; 6] = [
    "in_channels",
    "class_count",
    "stage_channels",
    "frm_enabled",
    "mpga_enabled",
    "frm_reduction",
];

pub const TRAIN_KEYS: [&str; 13] = [
    "epochs",
    "batch_size",
    "lr_start",
    "lr_schedule",
    "weight_decay",
    "alpha",
    "beta",
    "seed",
    "ablation",
    "max_steps",
    "checkpoint_every",
    "input_height",
    "input_width",
];

pub const SYNTH_KEYS: [&str; 9] = [
    "height",
    "width",
    "layer_count",
    "boundary_components",
    "amplitude_min",
    "amplitude_max",
    "layer_intensity_means",
    "noise_sigma",
    "samples",
];

fn apply<V>(slot: &mut V, value: Option<V>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn apply_model(kv: &KeyValues, cfg: &mut ModelConfig) -> Result<()> {
    apply(&mut cfg.in_channels, kv.parsed("in_channels")?);
    apply(&mut cfg.class_count, kv.parsed("class_count")?);
    if let Some(w) = kv.parsed_list::<usize>("stage_channels")? {
        cfg.stage_channels = w
            .try_into()
            .map_err(|w: Vec<usize>| Error::Config(format!("stage_channels needs 4 widths, got {}", w.len())))?;
    }
    apply(&mut cfg.frm_enabled, kv.parsed_bool("frm_enabled")?);
    apply(&mut cfg.mpga_enabled, kv.parsed_bool("mpga_enabled")?);
    apply(&mut cfg.frm_reduction, kv.parsed("frm_reduction")?);
    if let Some(a) = kv.parsed::<Ablation>("ablation")? {
        *cfg = cfg.clone().with_ablation(a);
    }
    Ok(())
}

pub fn model_entries(cfg: &ModelConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("in_channels", cfg.in_channels);
    kv.set("class_count", cfg.class_count);
    kv.set(
        "stage_channels",
        cfg.stage_channels.map(|c| c.to_string()).join(","),
    );
    kv.set("frm_enabled", cfg.frm_enabled);
    kv.set("mpga_enabled", cfg.mpga_enabled);
    kv.set("frm_reduction", cfg.frm_reduction);
    kv
}

pub fn apply_train(kv: &KeyValues, cfg: &mut TrainConfig) -> Result<()> {
    apply(&mut cfg.epochs, kv.parsed("epochs")?);
    apply(&mut cfg.batch_size, kv.parsed("batch_size")?);
    apply(&mut cfg.schedule.start, kv.parsed("lr_start")?);
    if let Some(s) = kv.get("lr_schedule") {
        cfg.schedule.steps = parse_steps(s)?;
    }
    apply(&mut cfg.weight_decay, kv.parsed("weight_decay")?);
    apply(&mut cfg.loss_weights.alpha, kv.parsed("alpha")?);
    apply(&mut cfg.loss_weights.beta, kv.parsed("beta")?);
    apply(&mut cfg.seed, kv.parsed("seed")?);
    apply(&mut cfg.ablation, kv.parsed("ablation")?);
    if let Some(n) = kv.parsed::<usize>("max_steps")? {
        cfg.max_steps = (n > 0).then_some(n);
    }
    if let Some(n) = kv.parsed::<usize>("checkpoint_every")? {
        cfg.checkpoint_every = (n > 0).then_some(n);
    }
    match (kv.parsed::<usize>("input_height")?, kv.parsed::<usize>("input_width")?) {
        (Some(h), Some(w)) => cfg.input_size = Some((h, w)),
        (None, None) => {}
        _ => {
            return Err(Error::Config(
                "input_height and input_width must be given together".into(),
            ))
        }
    }
    Ok(())
}

pub fn train_entries(cfg: &TrainConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("epochs", cfg.epochs);
    kv.set("batch_size", cfg.batch_size);
    kv.set("lr_start", cfg.schedule.start);
    kv.set("lr_schedule", format_steps(&cfg.schedule.steps));
    kv.set("weight_decay", cfg.weight_decay);
    kv.set("alpha", cfg.loss_weights.alpha);
    kv.set("beta", cfg.loss_weights.beta);
    kv.set("seed", cfg.seed);
    kv.set("ablation", cfg.ablation.name());
    kv.set("max_steps", cfg.max_steps.unwrap_or(0));
    kv.set("checkpoint_every", cfg.checkpoint_every.unwrap_or(0));
    if let Some((h, w)) = cfg.input_size {
        kv.set("input_height", h);
        kv.set("input_width", w);
    }
    kv
}

/// Applies synthetic-data keys; returns the `samples` count if given.
pub fn apply_synth(kv: &KeyValues, cfg: &mut SynthConfig) -> Result<Option<usize>> {
    apply(&mut cfg.height, kv.parsed("height")?);
    apply(&mut cfg.width, kv.parsed("width")?);
    apply(&mut cfg.layer_count, kv.parsed("layer_count")?);
    apply(&mut cfg.boundary_components, kv.parsed("boundary_components")?);
    apply(&mut cfg.amplitude_min, kv.parsed("amplitude_min")?);
    apply(&mut cfg.amplitude_max, kv.parsed("amplitude_max")?);
    apply(&mut cfg.layer_intensity_means, kv.parsed_list("layer_intensity_means")?);
    apply(&mut cfg.noise_sigma, kv.parsed("noise_sigma")?);
    apply(&mut cfg.seed, kv.parsed("seed")?);
    kv.parsed("samples")
}

/// Everything one command can be configured with.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub samples: Option<usize>,
}

impl RunConfig {
    /// Builds a configuration from defaults plus `kv`; unknown keys are errors.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = MODEL_KEYS.iter().chain(&TRAIN_KEYS).chain(&SYNTH_KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        let mut rc = RunConfig::default();
        apply_model(kv, &mut rc.model)?;
        apply_train(kv, &mut rc.train)?;
        rc.samples = apply_synth(kv, &mut rc.synth)?;
        if kv.get("ablation").is_none() {
            rc.train.ablation = rc.model.ablation();
        }
        if kv.get("class_count").is_none() && kv.get("layer_count").is_some() {
            rc.model.class_count = rc.synth.classes();
        }
        Ok(rc)
    }

    /// Reads an optional file and layers `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &KeyValues) -> Result<Self> {
        let mut kv = match path {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::new(),
        };
        kv.overlay(overrides);
        Self::from_key_values(&kv)
    }
}
