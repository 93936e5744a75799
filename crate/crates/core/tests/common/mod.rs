//! Straight-line reference implementations shared by the integration tests.
//! Nothing here goes through the tape.
#![allow(dead_code)]

use mpgnet::blocks::{FrmBlock, PgmBlock};
use mpgnet::engine::{Shape4, Tensor};
use mpgnet::model::ModelConfig;
use mpgnet::nn::{Conv2d, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(seed: u64, shape: Shape4, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Overwrites every parameter of `conv` with uniform draws in `[-s, s)`.
pub fn randomize_conv(store: &mut ParamStore<f64>, conv: &Conv2d, rng: &mut ChaCha8Rng, s: f64) {
    for id in conv.param_ids() {
        for v in store.param_mut(id).value.data_mut() {
            *v = rng.gen_range(-s..s);
        }
    }
}

/// `out[n][o][p] = b[o] + Σ_i w[o][i] · x[n][i][p]` over flat pixel index `p`.
pub fn conv1x1(store: &ParamStore<f64>, conv: &Conv2d, x: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let w = &store.param(conv.weight).value;
    let b = conv.bias.map(|id| store.param(id).value.data().to_vec());
    x.iter()
        .map(|item| {
            let pixels = item[0].len();
            (0..conv.out_channels)
                .map(|o| {
                    (0..pixels)
                        .map(|p| {
                            let mut acc = b.as_ref().map_or(0.0, |b| b[o]);
                            for (i, ch) in item.iter().enumerate() {
                                acc += w.at(o, i, 0, 0) * ch[p];
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Nested `[n][c][pixel]` view of a tensor.
pub fn nested(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    (0..s.n)
        .map(|n| (0..s.c).map(|c| t.plane(n, c).to_vec()).collect())
        .collect()
}

pub fn flatten(x: &[Vec<Vec<f64>>]) -> Vec<f64> {
    x.iter().flatten().flatten().copied().collect()
}

/// FRM: mean over each channel plane, squeeze, ReLU, excite, sigmoid, rescale.
/// Returns the refined map and the per-item channel gate.
pub fn frm_reference(store: &ParamStore<f64>, block: &FrmBlock, x: &Tensor<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let f = nested(x);
    let context: Vec<Vec<Vec<f64>>> = f
        .iter()
        .map(|item| item.iter().map(|ch| vec![ch.iter().sum::<f64>() / ch.len() as f64]).collect())
        .collect();
    let hidden = conv1x1(store, &block.conv_a, &context);
    let hidden: Vec<Vec<Vec<f64>>> = hidden
        .into_iter()
        .map(|item| item.into_iter().map(|ch| ch.into_iter().map(|v| v.max(0.0)).collect()).collect())
        .collect();
    let excited = conv1x1(store, &block.conv_b, &hidden);
    let gate: Vec<Vec<f64>> = excited
        .iter()
        .map(|item| item.iter().map(|ch| sigmoid(ch[0])).collect())
        .collect();
    let refined: Vec<Vec<Vec<f64>>> = f
        .iter()
        .zip(&gate)
        .map(|(item, g)| item.iter().zip(g).map(|(ch, &s)| ch.iter().map(|v| v * s).collect()).collect())
        .collect();
    (flatten(&refined), gate)
}

/// PGM: logits, sigmoid attention from the logits, reweighted transform,
/// residual add, fuse. Returns `(fused, logits)` flattened in tensor order.
pub fn pgm_reference(store: &ParamStore<f64>, block: &PgmBlock, x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let f = nested(x);
    let logits = conv1x1(store, &block.conv_logits, &f);
    let attention = conv1x1(store, &block.conv_attn, &logits);
    let transformed = conv1x1(store, &block.conv_transform, &f);
    let residual: Vec<Vec<Vec<f64>>> = f
        .iter()
        .zip(&transformed)
        .zip(&attention)
        .map(|((fi, ti), ai)| {
            fi.iter()
                .zip(ti)
                .zip(ai)
                .map(|((fc, tc), ac)| {
                    fc.iter().zip(tc).zip(ac).map(|((&v, &t), &a)| v + t * sigmoid(a)).collect()
                })
                .collect()
        })
        .collect();
    let fused = conv1x1(store, &block.conv_fuse, &residual);
    (flatten(&fused), flatten(&logits))
}

/// Parameter count of the network, summed layer by layer from the
/// architecture description.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let [c1, c2, c3, c4] = cfg.stage_channels;
    let k = cfg.class_count;
    let conv3 = |cin: usize, cout: usize| cin * cout * 9;
    let bn = |c: usize| 2 * c;
    let conv1 = |cin: usize, cout: usize| cin * cout + cout;

    let mut total = conv3(cfg.in_channels, c1) + bn(c1);
    total += conv3(c1, c2) + bn(c2);
    total += conv3(c2, c3) + bn(c3);
    total += conv3(c3, c4) + bn(c4);
    for (skip, up) in [(c3, c4), (c2, c3), (c1, c2)] {
        total += conv3(skip + up, skip) + bn(skip);
        if cfg.mpga_enabled {
            total += conv1(skip, k) + conv1(k, skip) + 2 * conv1(skip, skip);
        }
    }
    if cfg.frm_enabled {
        for c in [c1, c2, c3] {
            let hidden = c / cfg.frm_reduction;
            total += conv1(c, hidden) + conv1(hidden, c);
        }
    }
    total + conv1(c1, k)
}
