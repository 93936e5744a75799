//! Double-precision finite-difference checks of every differentiable operation
//! and of both attention blocks, with respect to inputs and parameters.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{FrmBlock, PgmBlock};
use crate::engine::{grad_check, Mode, RunningStats, Shape4, Tape, Tensor, Var};
use crate::error::Result;
use crate::labels::LabelMap;
use crate::loss::{cross_entropy, dice_loss, seg_loss, LossWeights};
use crate::nn::{Forward, ParamId, ParamStore};

pub const TOLERANCE: f64 = 1e-4;
pub const BATCH_NORM_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    /// Largest analytic gradient magnitude; zero means the check was vacuous.
    pub max_gradient: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance && self.max_gradient > 0.0
    }
}

pub fn format_results(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        writeln!(
            out,
            "{:<width$}  {:.3e}  (tol {:.0e}, |grad| {:.2e})  {}",
            r.name,
            r.max_error,
            r.tolerance,
            r.max_gradient,
            if r.passed() { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for checks across the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced far wider than the probe step, so max-pool winners
/// never switch under perturbation.
fn distinct(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor<f64> {
    let n = shape.numel();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, ranks.iter().map(|&r| r as f64 * 0.01 - 0.3).collect()).expect("matching length")
}

/// `sum(y ⊙ r)` for a fixed random `r`: a scalar whose gradient exercises
/// every output coordinate differently.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(r.clone())?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

struct Suite {
    rng: ChaCha8Rng,
    results: Vec<CheckResult>,
}

impl Suite {
    fn run<F>(&mut self, name: &str, tolerance: f64, x: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let max_gradient = {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true)?;
            let out = f(&mut tape, v)?;
            let grads = tape.backward(out)?;
            grads
                .get(v)
                .map_or(0.0, |g| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
        };
        let max_error = grad_check(f, x, STEP)?;
        self.results.push(CheckResult {
            name: name.into(),
            max_error,
            tolerance,
            max_gradient,
        });
        Ok(())
    }

    /// Projection weights for an output of `shape`.
    fn weights(&mut self, shape: Shape4) -> Tensor<f64> {
        uniform(&mut self.rng, shape, -1.0, 1.0)
    }
}

fn labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, k: usize) -> LabelMap {
    let data = (0..n * h * w).map(|_| rng.gen_range(0..k) as u8).collect();
    LabelMap::new(n, h, w, k, data).expect("labels below k")
}

/// Runs the whole suite; every entry should satisfy its tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };
    engine_checks(&mut s)?;
    loss_checks(&mut s)?;
    block_checks(&mut s)?;
    Ok(s.results)
}

fn engine_checks(s: &mut Suite) -> Result<()> {
    let t = TOLERANCE;
    // Convolution, each operand in turn.
    let x = uniform(&mut s.rng, Shape4::new(2, 3, 6, 5), -1.0, 1.0);
    let w = uniform(&mut s.rng, Shape4::new(4, 3, 3, 3), -0.5, 0.5);
    let b = uniform(&mut s.rng, Shape4::new(1, 4, 1, 1), -0.5, 0.5);
    let r = s.weights(Shape4::new(2, 4, 6, 5));
    s.run("conv2d / input", t, &x, |tape, v| {
        let (wv, bv) = (tape.constant(w.clone())?, tape.constant(b.clone())?);
        let y = tape.conv2d(v, wv, Some(bv), 1)?;
        project(tape, y, &r)
    })?;
    s.run("conv2d / weight", t, &w, |tape, v| {
        let (xv, bv) = (tape.constant(x.clone())?, tape.constant(b.clone())?);
        let y = tape.conv2d(xv, v, Some(bv), 1)?;
        project(tape, y, &r)
    })?;
    s.run("conv2d / bias", t, &b, |tape, v| {
        let (xv, wv) = (tape.constant(x.clone())?, tape.constant(w.clone())?);
        let y = tape.conv2d(xv, wv, Some(v), 1)?;
        project(tape, y, &r)
    })?;
    let w1 = uniform(&mut s.rng, Shape4::new(2, 3, 1, 1), -1.0, 1.0);
    let r1 = s.weights(Shape4::new(2, 2, 6, 5));
    s.run("conv2d 1x1 / input", t, &x, |tape, v| {
        let wv = tape.constant(w1.clone())?;
        let y = tape.conv2d(v, wv, None, 0)?;
        project(tape, y, &r1)
    })?;

    // Batch norm in both modes.
    let xb = uniform(&mut s.rng, Shape4::new(3, 2, 4, 4), -2.0, 2.0);
    let gamma = uniform(&mut s.rng, Shape4::new(1, 2, 1, 1), 0.5, 1.5);
    let beta = uniform(&mut s.rng, Shape4::new(1, 2, 1, 1), -0.5, 0.5);
    let rb = s.weights(xb.shape());
    let fresh = RunningStats::new(2);
    let bn = |tape: &mut Tape<f64>, x: Var, g: Var, b: Var, stats: &RunningStats<f64>, mode: Mode| {
        let (y, _) = tape.batch_norm(x, g, b, stats, mode, "bn")?;
        project(tape, y, &rb)
    };
    let bt = BATCH_NORM_TOLERANCE;
    s.run("batch_norm train / input", bt, &xb, |tape, v| {
        let (g, b) = (tape.constant(gamma.clone())?, tape.constant(beta.clone())?);
        bn(tape, v, g, b, &fresh, Mode::Train)
    })?;
    s.run("batch_norm train / gamma", bt, &gamma, |tape, v| {
        let (x, b) = (tape.constant(xb.clone())?, tape.constant(beta.clone())?);
        bn(tape, x, v, b, &fresh, Mode::Train)
    })?;
    s.run("batch_norm train / beta", bt, &beta, |tape, v| {
        let (x, g) = (tape.constant(xb.clone())?, tape.constant(gamma.clone())?);
        bn(tape, x, g, v, &fresh, Mode::Train)
    })?;
    let trained = RunningStats {
        mean: vec![0.3, -0.2],
        var: vec![1.7, 0.6],
        initialized: true,
    };
    s.run("batch_norm eval / input", bt, &xb, |tape, v| {
        let (g, b) = (tape.constant(gamma.clone())?, tape.constant(beta.clone())?);
        bn(tape, v, g, b, &trained, Mode::Eval)
    })?;
    s.run("batch_norm eval / gamma", bt, &gamma, |tape, v| {
        let (x, b) = (tape.constant(xb.clone())?, tape.constant(beta.clone())?);
        bn(tape, x, v, b, &trained, Mode::Eval)
    })?;

    // Pointwise and structural operations.
    let shape = Shape4::new(2, 3, 4, 4);
    let xr = away_from_zero(&mut s.rng, shape);
    let r = s.weights(shape);
    s.run("relu", t, &xr, |tape, v| {
        let y = tape.relu(v)?;
        project(tape, y, &r)
    })?;
    let xs = uniform(&mut s.rng, shape, -4.0, 4.0);
    s.run("sigmoid", t, &xs, |tape, v| {
        let y = tape.sigmoid(v)?;
        project(tape, y, &r)
    })?;
    s.run("softmax over channels", t, &xs, |tape, v| {
        let y = tape.softmax_channels(v)?;
        project(tape, y, &r)
    })?;
    let xp = distinct(&mut s.rng, Shape4::new(2, 2, 6, 8));
    let rp = s.weights(Shape4::new(2, 2, 3, 4));
    s.run("max_pool 2x2", t, &xp, |tape, v| {
        let y = tape.max_pool2(v)?;
        project(tape, y, &rp)
    })?;
    let xu = uniform(&mut s.rng, Shape4::new(1, 2, 3, 4), -1.0, 1.0);
    let ru = s.weights(Shape4::new(1, 2, 6, 8));
    s.run("bilinear upsample x2", t, &xu, |tape, v| {
        let y = tape.upsample_bilinear2(v)?;
        project(tape, y, &ru)
    })?;
    let rg = s.weights(Shape4::new(2, 3, 1, 1));
    s.run("global average pool", t, &xs, |tape, v| {
        let y = tape.global_avg_pool(v)?;
        project(tape, y, &rg)
    })?;
    let other = uniform(&mut s.rng, shape, -1.0, 1.0);
    s.run("mul / same shape", t, &xs, |tape, v| {
        let o = tape.constant(other.clone())?;
        let y = tape.mul(v, o)?;
        project(tape, y, &r)
    })?;
    let gate = uniform(&mut s.rng, Shape4::new(2, 3, 1, 1), 0.0, 1.0);
    s.run("mul / broadcast gate", t, &gate, |tape, v| {
        let o = tape.constant(other.clone())?;
        let y = tape.mul(o, v)?;
        project(tape, y, &r)
    })?;
    s.run("mul / gated feature", t, &other, |tape, v| {
        let g = tape.constant(gate.clone())?;
        let y = tape.mul(v, g)?;
        project(tape, y, &r)
    })?;
    s.run("mul / self", t, &xs, |tape, v| {
        let y = tape.mul(v, v)?;
        project(tape, y, &r)
    })?;
    s.run("add with fan-out", t, &xs, |tape, v| {
        let o = tape.constant(other.clone())?;
        let a = tape.add(v, o)?;
        let y = tape.add(a, v)?;
        project(tape, y, &r)
    })?;
    let rc = s.weights(Shape4::new(2, 6, 4, 4));
    s.run("concat / first", t, &xs, |tape, v| {
        let o = tape.constant(other.clone())?;
        let y = tape.concat_channels(v, o)?;
        project(tape, y, &rc)
    })?;
    s.run("concat / second", t, &xs, |tape, v| {
        let o = tape.constant(other.clone())?;
        let y = tape.concat_channels(o, v)?;
        project(tape, y, &rc)
    })?;
    s.run("scale", t, &xs, |tape, v| {
        let y = tape.scale(v, -1.7)?;
        project(tape, y, &r)
    })?;
    s.run("sum", t, &xs, |tape, v| tape.sum(v))?;
    Ok(())
}

fn loss_checks(s: &mut Suite) -> Result<()> {
    let t = TOLERANCE;
    let shape = Shape4::new(2, 4, 3, 5);
    let logits = uniform(&mut s.rng, shape, -2.0, 2.0);
    let y = labels(&mut s.rng, 2, 3, 5, 4);
    let probs_direct = {
        let raw = uniform(&mut s.rng, shape, 0.05, 1.0);
        crate::engine::kernels::softmax_channels(&raw.map(|v| v.ln()))
    };
    s.run("cross_entropy / probabilities", t, &probs_direct, |tape, v| cross_entropy(tape, v, &y))?;
    s.run("dice / probabilities", t, &probs_direct, |tape, v| dice_loss(tape, v, &y))?;
    s.run("cross_entropy through softmax", t, &logits, |tape, v| {
        let p = tape.softmax_channels(v)?;
        cross_entropy(tape, p, &y)
    })?;
    s.run("dice through softmax", t, &logits, |tape, v| {
        let p = tape.softmax_channels(v)?;
        dice_loss(tape, p, &y)
    })?;
    s.run("seg_loss (alpha 1, beta 0.5)", t, &logits, |tape, v| {
        let p = tape.softmax_channels(v)?;
        seg_loss(tape, p, &y, LossWeights::default())
    })?;
    Ok(())
}

/// Checks a block with respect to its input and to each of its parameters.
fn block_checks(s: &mut Suite) -> Result<()> {
    let mut store = ParamStore::<f64>::new();
    let frm = FrmBlock::new(&mut store, &mut s.rng, "frm", 8, 4)?;
    let pgm = PgmBlock::new(&mut store, &mut s.rng, "pgm", 6, 3)?;
    perturb_biases(&mut store, &mut s.rng);

    let xf = uniform(&mut s.rng, Shape4::new(2, 8, 5, 4), -1.0, 1.0);
    let rf = s.weights(xf.shape());
    let xg = uniform(&mut s.rng, Shape4::new(2, 6, 4, 5), -1.0, 1.0);
    let rg_fused = s.weights(xg.shape());
    let rg_logits = s.weights(Shape4::new(2, 3, 4, 5));

    let frm_out = |tape: &mut Tape<f64>, x: Var, sub: Option<(ParamId, Var)>| -> Result<Var> {
        let mut f = Forward::new(tape, &store, Mode::Train)?;
        if let Some((id, v)) = sub {
            f.params.substitute(id, v);
        }
        let y = frm.forward(&mut f, x)?;
        project(f.tape, y, &rf)
    };
    // Both PGM outputs feed the scalar so the logits path is checked too.
    let pgm_out = |tape: &mut Tape<f64>, x: Var, sub: Option<(ParamId, Var)>| -> Result<Var> {
        let mut f = Forward::new(tape, &store, Mode::Train)?;
        if let Some((id, v)) = sub {
            f.params.substitute(id, v);
        }
        let out = pgm.forward(&mut f, x)?;
        let a = project(f.tape, out.fused, &rg_fused)?;
        let b = project(f.tape, out.aux_logits, &rg_logits)?;
        f.tape.add(a, b)
    };

    s.run("FRM / input", TOLERANCE, &xf, |tape, v| frm_out(tape, v, None))?;
    for id in frm.param_ids() {
        let p = store.param(id);
        s.run(&format!("FRM / {}", p.name), TOLERANCE, &p.value, |tape, v| {
            let x = tape.constant(xf.clone())?;
            frm_out(tape, x, Some((id, v)))
        })?;
    }
    s.run("PGM / input", TOLERANCE, &xg, |tape, v| pgm_out(tape, v, None))?;
    for id in pgm.param_ids() {
        let p = store.param(id);
        s.run(&format!("PGM / {}", p.name), TOLERANCE, &p.value, |tape, v| {
            let x = tape.constant(xg.clone())?;
            pgm_out(tape, x, Some((id, v)))
        })?;
    }
    Ok(())
}

/// Fresh biases are zero; random ones keep every term of the check non-trivial.
/// The FRM squeeze bias is positive so its ReLU units are active.
fn perturb_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        let range = if p.name == "frm.conv_a.bias" { 0.5..1.0 } else { -0.3..0.3 };
        if p.name.ends_with(".bias") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(range.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = gradient_suite(0).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
        assert!(failed.is_empty(), "{}", format_results(&results));
        assert!(results.len() > 30);
    }
}
