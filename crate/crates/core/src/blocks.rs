//! Attention blocks: channel-wise feature refinement (FRM) for encoder skips
//! and prediction guidance (PGM) for decoder outputs.

use rand::Rng;

use crate::engine::{Scalar, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, ParamId, ParamStore};

fn check_channels<T: Scalar>(f: &Forward<'_, T>, x: Var, expected: usize, block: &str) -> Result<()> {
    let s = f.tape.shape(x);
    if s.c != expected {
        return Err(Error::Config(format!(
            "{block} expects {expected} channels, got input shape {s}"
        )));
    }
    Ok(())
}

/// Feature refinement module.
///
/// Squeezes each channel to its spatial mean, passes the context vector
/// through a `C → C/r → C` bottleneck of 1×1 convolutions (ReLU, then
/// sigmoid) and rescales the input channels by the resulting gate.
#[derive(Debug, Clone)]
pub struct FrmBlock {
    pub channels: usize,
    pub reduction: usize,
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

/// Refined features together with the channel gate that produced them.
#[derive(Debug, Clone, Copy)]
pub struct FrmOutput {
    pub refined: Var,
    /// `(N, C, 1, 1)` gate, every entry in `(0, 1)`.
    pub gate: Var,
}

impl FrmBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "{name}: channel count {channels} is not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(FrmBlock {
            channels,
            reduction,
            conv_a: Conv2d::new(store, rng, &format!("{name}.conv_a"), channels, hidden, 1, true)?,
            conv_b: Conv2d::new(store, rng, &format!("{name}.conv_b"), hidden, channels, 1, true)?,
        })
    }

    pub fn forward_with_gate<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<FrmOutput> {
        check_channels(f, x, self.channels, "FRM")?;
        let context = f.tape.global_avg_pool(x)?;
        let squeezed = self.conv_a.forward(f, context)?;
        let squeezed = f.tape.relu(squeezed)?;
        let excited = self.conv_b.forward(f, squeezed)?;
        let gate = f.tape.sigmoid(excited)?;
        let refined = f.tape.mul(x, gate)?;
        Ok(FrmOutput { refined, gate })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_gate(f, x)?.refined)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv_a.param_ids();
        ids.extend(self.conv_b.param_ids());
        ids
    }
}

/// Prediction guidance module.
#[derive(Debug, Clone)]
pub struct PgmBlock {
    pub channels: usize,
    pub classes: usize,
    /// `C → K` per-class logits, also the auxiliary prediction head.
    pub conv_logits: Conv2d,
    /// `K → C`, followed by a sigmoid to form the pixel-wise attention map.
    pub conv_attn: Conv2d,
    /// `C → C` transform of the decoder feature that the attention reweights.
    pub conv_transform: Conv2d,
    /// `C → C` fusion applied after the residual add.
    pub conv_fuse: Conv2d,
}

#[derive(Debug, Clone, Copy)]
pub struct PgmOutput {
    /// Same shape as the decoder feature.
    pub fused: Var,
    /// `(N, K, H, W)` logits supervised by the auxiliary loss.
    pub aux_logits: Var,
    /// `(N, C, H, W)` attention map in `(0, 1)`.
    pub attention: Var,
}

impl PgmBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        classes: usize,
    ) -> Result<Self> {
        let conv = |store: &mut ParamStore<T>, rng: &mut _, part: &str, cin, cout| {
            Conv2d::new(store, rng, &format!("{name}.{part}"), cin, cout, 1, true)
        };
        Ok(PgmBlock {
            channels,
            classes,
            conv_logits: conv(store, rng, "conv_logits", channels, classes)?,
            conv_attn: conv(store, rng, "conv_attn", classes, channels)?,
            conv_transform: conv(store, rng, "conv_transform", channels, channels)?,
            conv_fuse: conv(store, rng, "conv_fuse", channels, channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, decoder: Var) -> Result<PgmOutput> {
        check_channels(f, decoder, self.channels, "PGM")?;
        let aux_logits = self.conv_logits.forward(f, decoder)?;
        let attn_pre = self.conv_attn.forward(f, aux_logits)?;
        let attention = f.tape.sigmoid(attn_pre)?;
        let transformed = self.conv_transform.forward(f, decoder)?;
        let reweighted = f.tape.mul(transformed, attention)?;
        let residual = f.tape.add(decoder, reweighted)?;
        let fused = self.conv_fuse.forward(f, residual)?;
        Ok(PgmOutput {
            fused,
            aux_logits,
            attention,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.conv_logits, &self.conv_attn, &self.conv_transform, &self.conv_fuse]
            .iter()
            .flat_map(|c| c.param_ids())
            .collect()
    }
}
