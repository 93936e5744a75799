//! Segmentation objective and evaluation metric.
//!
//! Every supervised head is scored by `alpha * CE + beta * Dice` against the
//! ground truth at the head's resolution, and the joint objective sums the
//! head losses. Cross-entropy is averaged over pixels; Dice is computed per
//! class over all pixels of the batch and averaged over classes.

use crate::engine::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::model::ForwardOutput;

/// Clamp applied to probabilities inside the logarithm.
pub const CE_EPSILON: f64 = 1e-12;
/// Denominator guard of the Dice ratio.
pub const DICE_EPSILON: f64 = 1e-6;

/// Weights of the cross-entropy and Dice terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(probs: &Tensor<T>, labels: &LabelMap) -> Result<()> {
    let s = probs.shape();
    if (s.n, s.h, s.w) != (labels.batch(), labels.height(), labels.width()) {
        return Err(Error::Config(format!(
            "prediction shape {s} does not match label map ({}, {}, {})",
            labels.batch(),
            labels.height(),
            labels.width()
        )));
    }
    labels.check_range(s.c)
}

/// Value and gradient of the pixel-mean cross-entropy.
pub fn cross_entropy_parts<T: Scalar>(probs: &Tensor<T>, labels: &LabelMap) -> Result<(T, Tensor<T>)> {
    check_pair(probs, labels)?;
    let s = probs.shape();
    let pixels = T::from_usize(s.n * s.plane()).unwrap();
    let eps = T::from_f64_lossy(CE_EPSILON);
    let upper = T::one() - eps;
    let mut total = T::zero();
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let k = labels.at(n, y, x) as usize;
                let p = probs.at(n, k, y, x);
                let clamped = p.max(eps).min(upper);
                total = total - clamped.ln();
                if p > eps && p < upper {
                    *grad.at_mut(n, k, y, x) = -(p * pixels).recip();
                }
            }
        }
    }
    Ok((total / pixels, grad))
}

/// Value and gradient of the class-averaged soft Dice loss.
pub fn dice_parts<T: Scalar>(probs: &Tensor<T>, labels: &LabelMap) -> Result<(T, Tensor<T>)> {
    check_pair(probs, labels)?;
    let s = probs.shape();
    let eps = T::from_f64_lossy(DICE_EPSILON);
    let classes = T::from_usize(s.c).unwrap();
    let two = T::from_f64_lossy(2.0);
    let mut intersect = vec![T::zero(); s.c];
    let mut pred_sq = vec![T::zero(); s.c];
    let mut truth = vec![T::zero(); s.c];
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let label = labels.at(n, y, x) as usize;
                truth[label] = truth[label] + T::one();
                for k in 0..s.c {
                    let p = probs.at(n, k, y, x);
                    pred_sq[k] = pred_sq[k] + p * p;
                    if k == label {
                        intersect[k] = intersect[k] + p;
                    }
                }
            }
        }
    }
    let denom: Vec<T> = (0..s.c).map(|k| pred_sq[k] + truth[k] + eps).collect();
    let loss = (0..s.c)
        .map(|k| T::one() - two * intersect[k] / denom[k])
        .sum::<T>()
        / classes;
    let grad = Tensor::from_fn(s, |n, k, y, x| {
        let yk = if labels.at(n, y, x) as usize == k { T::one() } else { T::zero() };
        let p = probs.at(n, k, y, x);
        let d = denom[k];
        -(two * yk * d - two * intersect[k] * two * p) / (d * d) / classes
    });
    Ok((loss, grad))
}

pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &LabelMap) -> Result<Var> {
    let (value, grad) = cross_entropy_parts(tape.value(probs), labels)?;
    tape.scalar_fn("cross_entropy", probs, value, grad)
}

pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &LabelMap) -> Result<Var> {
    let (value, grad) = dice_parts(tape.value(probs), labels)?;
    tape.scalar_fn("dice_loss", probs, value, grad)
}

/// `alpha * cross_entropy + beta * dice_loss`.
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &LabelMap, weights: LossWeights) -> Result<Var> {
    weights.validate()?;
    let ce = cross_entropy(tape, probs, labels)?;
    let dice = dice_loss(tape, probs, labels)?;
    let ce = tape.scale(ce, T::from_f64_lossy(weights.alpha))?;
    let dice = tape.scale(dice, T::from_f64_lossy(weights.beta))?;
    tape.add(ce, dice)
}

/// Joint deep-supervision loss and its per-head terms (final head first, then
/// the auxiliary heads in decoder order).
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: Var,
    pub heads: Vec<Var>,
}

/// Ground truth resampled to a head's resolution by nearest-neighbour subsampling.
pub fn labels_for_head(labels: &LabelMap, head_h: usize, head_w: usize) -> Result<LabelMap> {
    if head_h == labels.height() && head_w == labels.width() {
        return Ok(labels.clone());
    }
    let exact = head_h > 0
        && head_w > 0
        && labels.height() % head_h == 0
        && labels.width() % head_w == 0
        && labels.height() / head_h == labels.width() / head_w;
    if !exact {
        return Err(Error::Internal(format!(
            "head of spatial size {head_h}x{head_w} is not an integer downscale of labels {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    Ok(labels.resize_nearest(head_h, head_w))
}

pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    output: &ForwardOutput,
    labels: &LabelMap,
    weights: LossWeights,
) -> Result<JointLoss> {
    let mut heads = vec![seg_loss(tape, output.final_probs, labels, weights)?];
    for &logits in &output.aux_logits {
        let s = tape.shape(logits);
        let scaled = labels_for_head(labels, s.h, s.w)?;
        let probs = tape.softmax_channels(logits)?;
        heads.push(seg_loss(tape, probs, &scaled, weights)?);
    }
    let mut total = heads[0];
    for &h in &heads[1..] {
        total = tape.add(total, h)?;
    }
    Ok(JointLoss { total, heads })
}

/// Per-class F1 = 2TP / (2TP + FP + FN); a class absent from both maps scores 1.
pub fn f1_per_class(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<Vec<f64>> {
    if (pred.batch(), pred.height(), pred.width()) != (truth.batch(), truth.height(), truth.width()) {
        return Err(Error::Config(format!(
            "prediction ({}, {}, {}) and truth ({}, {}, {}) differ in shape",
            pred.batch(),
            pred.height(),
            pred.width(),
            truth.batch(),
            truth.height(),
            truth.width()
        )));
    }
    pred.check_range(classes)?;
    truth.check_range(classes)?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p as usize, t as usize);
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    Ok((0..classes)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fneg[k];
            if denom == 0 {
                1.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .collect())
}

/// Mean over classes `1..K` (class 0 is background).
pub fn mean_foreground(f1: &[f64]) -> f64 {
    if f1.len() < 2 {
        return f1.first().copied().unwrap_or(0.0);
    }
    f1[1..].iter().sum::<f64>() / (f1.len() - 1) as f64
}
