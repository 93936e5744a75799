//! The assembled network: four encoder stages (the last acting as bottleneck),
//! three decoder stages with bilinear upsampling and skip concatenation, FRM
//! on the three skips, PGM after every decoder stage and a 1×1 softmax
//! classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{FrmBlock, PgmBlock};
use crate::engine::{Mode, Scalar, Shape4, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, BufferUpdate, Conv2d, ConvBnRelu, Forward, ParamId, ParamStore};

/// Number of pooling stages; inputs must be divisible by `2^POOLING_STAGES`.
pub const POOLING_STAGES: usize = 3;
pub const SPATIAL_DIVISOR: usize = 1 << POOLING_STAGES;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub class_count: usize,
    pub stage_channels: [usize; 4],
    pub frm_enabled: bool,
    pub mpga_enabled: bool,
    pub frm_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            class_count: 8,
            stage_channels: [32, 64, 128, 256],
            frm_enabled: true,
            mpga_enabled: true,
            frm_reduction: 8,
        }
    }
}

/// Which attention paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Baseline,
    Frm,
    Mpga,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::Frm, Ablation::Mpga, Ablation::Full];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::Baseline => (false, false),
            Ablation::Frm => (true, false),
            Ablation::Mpga => (false, true),
            Ablation::Full => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Frm => "frm",
            Ablation::Mpga => "mpga",
            Ablation::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "Baseline",
            Ablation::Frm => "Baseline + FRM",
            Ablation::Mpga => "Baseline + MPGA",
            Ablation::Full => "Full model",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}; expected baseline, frm, mpga or full")))
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.frm_enabled, self.mpga_enabled) = ablation.flags();
        self
    }

    pub fn ablation(&self) -> Ablation {
        match (self.frm_enabled, self.mpga_enabled) {
            (false, false) => Ablation::Baseline,
            (true, false) => Ablation::Frm,
            (false, true) => Ablation::Mpga,
            (true, true) => Ablation::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.class_count < 2 || self.class_count > 256 {
            return Err(Error::Config(format!(
                "class_count must be in 2..=256, got {}",
                self.class_count
            )));
        }
        let w = self.stage_channels;
        if w[0] == 0 || w.windows(2).any(|p| p[1] != 2 * p[0]) {
            return Err(Error::Config(format!(
                "stage_channels must double at every stage, got {w:?}"
            )));
        }
        if self.frm_enabled {
            let r = self.frm_reduction;
            if r == 0 || w[..3].iter().any(|c| c % r != 0) {
                return Err(Error::Config(format!(
                    "frm_reduction {r} must divide the skip widths {:?}",
                    &w[..3]
                )));
            }
        }
        Ok(())
    }

    /// Checks an input shape against the model: channel count and spatial divisibility.
    pub fn validate_input(&self, shape: Shape4) -> Result<()> {
        if shape.c != self.in_channels {
            return Err(Error::Config(format!(
                "model expects {} input channel(s), got input shape {shape}",
                self.in_channels
            )));
        }
        if shape.h == 0 || shape.w == 0 || shape.h % SPATIAL_DIVISOR != 0 || shape.w % SPATIAL_DIVISOR != 0 {
            return Err(Error::Config(format!(
                "input height and width must be divisible by {SPATIAL_DIVISOR} ({POOLING_STAGES} pooling stages), got {}x{}",
                shape.h, shape.w
            )));
        }
        Ok(())
    }
}

/// Tape handles of everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(N, K, H, W)` class probabilities.
    pub final_probs: Var,
    pub final_logits: Var,
    /// PGM logits at 1/4, 1/2 and 1/1 scale (decoder order); empty without MPGA.
    pub aux_logits: Vec<Var>,
    /// Output of the fourth encoder stage.
    pub bottleneck: Var,
    /// FRM gates of the three skips (encoder order) when FRM is active.
    pub frm_gates: Vec<Var>,
}

/// A forward pass and the parameter handles it was computed with.
pub struct ForwardPass {
    pub output: ForwardOutput,
    pub params: BoundParams,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoders: Vec<ConvBnRelu>,
    frms: Vec<Option<FrmBlock>>,
    decoders: Vec<ConvBnRelu>,
    pgms: Vec<Option<PgmBlock>>,
    head: Conv2d,
}

impl<T: Scalar> Model<T> {
    /// Builds a model with parameters drawn deterministically from `seed`.
    /// Disabled attention blocks are not instantiated.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.stage_channels;
        let k = config.class_count;

        let mut encoders = Vec::with_capacity(4);
        let mut in_c = config.in_channels;
        for (i, &out_c) in w.iter().enumerate() {
            encoders.push(ConvBnRelu::new(&mut store, &mut rng, &format!("enc{}", i + 1), in_c, out_c)?);
            in_c = out_c;
        }
        let mut frms = Vec::with_capacity(3);
        for (i, &c) in w[..3].iter().enumerate() {
            frms.push(if config.frm_enabled {
                Some(FrmBlock::new(&mut store, &mut rng, &format!("frm{}", i + 1), c, config.frm_reduction)?)
            } else {
                None
            });
        }
        let mut decoders = Vec::with_capacity(3);
        let mut pgms = Vec::with_capacity(3);
        for d in 0..3 {
            let skip_c = w[2 - d];
            let up_c = w[3 - d];
            let name = format!("dec{}", d + 1);
            decoders.push(ConvBnRelu::new(&mut store, &mut rng, &name, skip_c + up_c, skip_c)?);
            pgms.push(if config.mpga_enabled {
                Some(PgmBlock::new(&mut store, &mut rng, &format!("pgm{}", d + 1), skip_c, k)?)
            } else {
                None
            });
        }
        let head = Conv2d::new(&mut store, &mut rng, "head", w[0], k, 1, true)?;
        debug_assert!(store.names_are_unique());
        Ok(Model {
            config,
            store,
            encoders,
            frms,
            decoders,
            pgms,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Learned scalar count of the instantiated model.
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn frm_blocks(&self) -> impl Iterator<Item = &FrmBlock> {
        self.frms.iter().flatten()
    }

    pub fn pgm_blocks(&self) -> impl Iterator<Item = &PgmBlock> {
        self.pgms.iter().flatten()
    }

    pub fn frm_param_ids(&self) -> Vec<ParamId> {
        self.frm_blocks().flat_map(FrmBlock::param_ids).collect()
    }

    pub fn pgm_param_ids(&self) -> Vec<ParamId> {
        self.pgm_blocks().flat_map(PgmBlock::param_ids).collect()
    }

    /// Switches attention paths at run time. Disabling bypasses a block without
    /// touching its parameters; enabling requires the block to have been built.
    pub fn set_ablation(&mut self, frm_enabled: bool, mpga_enabled: bool) -> Result<()> {
        if frm_enabled && self.frms.iter().any(Option::is_none) {
            return Err(Error::Config("cannot enable FRM: the model was built without FRM blocks".into()));
        }
        if mpga_enabled && self.pgms.iter().any(Option::is_none) {
            return Err(Error::Config("cannot enable MPGA: the model was built without PGM blocks".into()));
        }
        self.config.frm_enabled = frm_enabled;
        self.config.mpga_enabled = mpga_enabled;
        Ok(())
    }

    /// Forward pass without mutating the model. In train mode the batch-norm
    /// running-statistics updates are returned instead of applied.
    pub fn forward_pure(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
    ) -> Result<(ForwardPass, Vec<BufferUpdate<T>>)> {
        self.config.validate_input(tape.shape(input))?;
        let mut f = Forward::new(tape, &self.store, mode)?;

        let mut skips = Vec::with_capacity(3);
        let mut x = input;
        for (i, enc) in self.encoders.iter().enumerate() {
            x = enc.forward(&mut f, x)?;
            if i < 3 {
                skips.push(x);
                x = f.tape.max_pool2(x)?;
            }
        }
        let bottleneck = x;

        let mut frm_gates = Vec::new();
        if self.config.frm_enabled {
            for (skip, frm) in skips.iter_mut().zip(&self.frms) {
                let frm = frm.as_ref().ok_or_else(|| Error::Internal("FRM enabled but not built".into()))?;
                let out = frm.forward_with_gate(&mut f, *skip)?;
                *skip = out.refined;
                frm_gates.push(out.gate);
            }
        }

        let mut aux_logits = Vec::new();
        for (d, dec) in self.decoders.iter().enumerate() {
            let up = f.tape.upsample_bilinear2(x)?;
            let merged = f.tape.concat_channels(skips[2 - d], up)?;
            x = dec.forward(&mut f, merged)?;
            if self.config.mpga_enabled {
                let pgm = self.pgms[d]
                    .as_ref()
                    .ok_or_else(|| Error::Internal("MPGA enabled but PGM not built".into()))?;
                let out = pgm.forward(&mut f, x)?;
                x = out.fused;
                aux_logits.push(out.aux_logits);
            }
        }
        let final_logits = self.head.forward(&mut f, x)?;
        let final_probs = f.tape.softmax_channels(final_logits)?;
        let Forward { params, updates, .. } = f;
        Ok((
            ForwardPass {
                output: ForwardOutput {
                    final_probs,
                    final_logits,
                    aux_logits,
                    bottleneck,
                    frm_gates,
                },
                params,
            },
            updates,
        ))
    }

    /// Forward pass; train mode folds the batch statistics into the running ones.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardPass> {
        let (pass, updates) = self.forward_pure(tape, input, mode)?;
        self.store.apply_updates(updates);
        Ok(pass)
    }

    /// Eval-mode class probabilities for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone())?;
        let (pass, _) = self.forward_pure(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(pass.output.final_probs).clone())
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            encoders: self.encoders.clone(),
            frms: self.frms.clone(),
            decoders: self.decoders.clone(),
            pgms: self.pgms.clone(),
            head: self.head.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            stage_channels: [4, 8, 16, 32],
            frm_reduction: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn rejects_non_doubling_widths() {
        let cfg = ModelConfig {
            stage_channels: [16, 32, 48, 96],
            ..ModelConfig::default()
        };
        assert!(matches!(Model::<f32>::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_indivisible_input() {
        let model = Model::<f32>::build(small(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape4::new(1, 1, 20, 32))).unwrap();
        let msg = model.forward_pure(&mut tape, x, Mode::Train).err().unwrap().to_string();
        assert!(msg.contains("divisible by 8"), "{msg}");
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("full".parse::<Ablation>().unwrap(), Ablation::Full);
        assert_eq!("Baseline".parse::<Ablation>().unwrap(), Ablation::Baseline);
        assert!("both".parse::<Ablation>().is_err());
    }

    #[test]
    fn cannot_enable_unbuilt_blocks() {
        let mut model = Model::<f32>::build(small().with_ablation(Ablation::Baseline), 0).unwrap();
        assert!(model.set_ablation(true, false).is_err());
        let mut full = Model::<f32>::build(small(), 0).unwrap();
        full.set_ablation(false, false).unwrap();
        assert_eq!(full.config().ablation(), Ablation::Baseline);
    }
}
