//! Adam with bias correction and decoupled weight decay, plus the step-decay
//! learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::Parameter;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check_matches(&self, params: &[Parameter<T>]) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state holds {} moment pairs for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "optimizer moments for {} have shape {} but the parameter is {}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One Adam update. A missing gradient counts as zero; parameters marked
/// `weight_decay_exempt` are not decayed.
pub fn adam_step<T: Scalar>(
    params: &mut [Parameter<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
    }
    if grads.len() != params.len() {
        return Err(Error::Config(format!(
            "{} gradients supplied for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.check_matches(params)?;
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "gradient for {} has shape {} but the parameter is {}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {} is {} at flat index {i}",
                    p.name,
                    g.data()[i]
                )));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.weight_decay_exempt { 0.0 } else { weight_decay };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j].to_f64_lossy());
            let mj = BETA1 * m[j].to_f64_lossy() + (1.0 - BETA1) * g;
            let vj = BETA2 * v[j].to_f64_lossy() + (1.0 - BETA2) * g * g;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let wj = w[j].to_f64_lossy();
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + EPSILON) + lr * decay * wj;
            w[j] = T::from_f64_lossy(wj - step);
        }
    }
    Ok(())
}

/// Piecewise-constant schedule: `start`, multiplied by each factor once its
/// epoch is reached.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    /// `(epoch, factor)` pairs in increasing epoch order.
    pub steps: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            start: 0.01,
            steps: vec![(50, 0.1), (80, 0.1)],
        }
    }
}

impl LrSchedule {
    pub fn constant(start: f64) -> Self {
        LrSchedule { start, steps: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.start.is_finite()) {
            return Err(Error::Config(format!("lr_start must be positive, got {}", self.start)));
        }
        if self.steps.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(Error::Config("lr_schedule epochs must be strictly increasing".into()));
        }
        if let Some(&(e, f)) = self.steps.iter().find(|s| !(s.1 > 0.0 && s.1 <= 1.0)) {
            return Err(Error::Config(format!(
                "lr_schedule factor {f} at epoch {e} must lie in (0, 1]"
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.steps
            .iter()
            .take_while(|&&(e, _)| e <= epoch)
            .fold(self.start, |lr, &(_, f)| lr * f)
    }
}

/// Text form of the decay steps: `epoch:factor` pairs separated by commas,
/// e.g. `50:0.1,80:0.1`; `none` for a constant rate.
pub fn format_steps(steps: &[(usize, f64)]) -> String {
    if steps.is_empty() {
        return "none".into();
    }
    steps.iter().map(|(e, f)| format!("{e}:{f}")).collect::<Vec<_>>().join(",")
}

pub fn parse_steps(s: &str) -> Result<Vec<(usize, f64)>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|part| {
            let bad = || Error::Config(format!("lr_schedule entry {part:?} is not epoch:factor"));
            let (e, f) = part.split_once(':').ok_or_else(bad)?;
            Ok((e.trim().parse().map_err(|_| bad())?, f.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} then {}", self.start, format_steps(&self.steps))
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    /// Parses only the decay steps; the start value comes from `lr_start`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(LrSchedule {
            steps: parse_steps(s)?,
            ..LrSchedule::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape4;

    fn param(name: &str, values: Vec<f64>, exempt: bool) -> Parameter<f64> {
        Parameter {
            name: name.into(),
            value: Tensor::from_vec(Shape4::new(1, 1, 1, values.len()), values).unwrap(),
            weight_decay_exempt: exempt,
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut ps = vec![param("w", vec![1.0, -2.0, 3.0], false)];
        let mut st = AdamState::new(&ps);
        let before = ps.clone();
        for _ in 0..5 {
            adam_step(&mut ps, &[Some(Tensor::zeros(Shape4::new(1, 1, 1, 3)))], &mut st, 0.01, 0.0).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [-3.0, 0.5, 40.0] {
            let mut ps = vec![param("w", vec![0.25], false)];
            let mut st = AdamState::new(&ps);
            let grad = Tensor::from_vec(Shape4::scalar(), vec![g]).unwrap();
            adam_step(&mut ps, &[Some(grad)], &mut st, 0.01, 0.0).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
            let expected = 0.25 - 0.01 * g / (g.abs() + EPSILON);
            assert!((ps[0].value.data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn exempt_parameters_do_not_decay() {
        let mut ps = vec![param("bias", vec![2.0], true), param("weight", vec![2.0], false)];
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &[None, None], &mut st, 0.1, 0.5).unwrap();
        assert_eq!(ps[0].value.data()[0], 2.0);
        assert!((ps[1].value.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = vec![param("enc1.conv.weight", vec![0.0, 0.0], false)];
        let mut st = AdamState::new(&ps);
        let g = Tensor::from_vec(Shape4::new(1, 1, 1, 2), vec![0.0, f64::NAN]).unwrap();
        let err = adam_step(&mut ps, &[Some(g)], &mut st, 0.01, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(err.to_string().contains("enc1.conv.weight"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn default_schedule() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(49), 0.01);
        assert!((s.lr_at(50) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(80) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn steps_text_round_trip() {
        let steps = vec![(50, 0.1), (80, 0.5)];
        assert_eq!(parse_steps(&format_steps(&steps)).unwrap(), steps);
        assert!(parse_steps("none").unwrap().is_empty());
        assert!(parse_steps("50-0.1").is_err());
    }
}
