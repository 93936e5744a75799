//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Magnitude below which the absolute error is reported instead of the relative one.
pub const ABSOLUTE_FLOOR: f64 = 1e-6;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABSOLUTE_FLOOR {
        diff
    } else {
        diff / scale
    }
}

fn evaluate<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false)?;
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item()?.to_f64_lossy())
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences over every coordinate; returns the worst relative error.
pub fn grad_check<T: Scalar, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.shape().numel()).collect();
    Ok(grad_check_at(f, x, step, &all)?.max_error)
}

/// Like [`grad_check`] but only probes the listed coordinates.
pub fn grad_check_at<T: Scalar, F>(f: F, x: &Tensor<T>, step: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true)?;
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let h = T::from_f64_lossy(step);
    let mut report = GradCheck {
        max_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i].to_f64_lossy();
        let err = relative_error(a, numeric);
        if err > report.max_error || coords.len() == 1 {
            report = GradCheck {
                max_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
