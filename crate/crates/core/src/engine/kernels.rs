//! Forward and backward kernels on plain tensors.
//!
//! Nothing here knows about the tape; `tape.rs` records which kernel ran and
//! calls the matching backward kernel during the reverse sweep.

use rayon::prelude::*;

use super::tensor::{Scalar, Shape4, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance stabilizer.
pub const BN_EPSILON: f64 = 1e-5;
/// Fraction of the previous running statistic kept on each update.
pub const BN_MOMENTUM: f64 = 0.9;

// ---------------------------------------------------------------------------
// Convolution

/// Geometry of a stride-1 square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_shape: Shape4,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape4, weight: Shape4, bias: Option<Shape4>, padding: usize) -> Result<Self> {
        if weight.h != weight.w {
            return Err(Error::Config(format!(
                "conv2d kernel must be square, weight shape {weight}"
            )));
        }
        if weight.c != input.c {
            return Err(Error::Config(format!(
                "conv2d input shape {input} has {} channels but weight shape {weight} expects {}",
                input.c, weight.c
            )));
        }
        if let Some(b) = bias {
            if b != Shape4::new(1, weight.n, 1, 1) {
                return Err(Error::Config(format!(
                    "conv2d bias shape {b} does not match weight shape {weight} (expected (1, {}, 1, 1))",
                    weight.n
                )));
            }
        }
        let k = weight.h;
        let padded_h = input.h + 2 * padding;
        let padded_w = input.w + 2 * padding;
        if padded_h < k || padded_w < k {
            return Err(Error::Config(format!(
                "conv2d kernel {k}x{k} larger than padded input shape {input} (padding {padding})"
            )));
        }
        Ok(ConvGeometry {
            in_shape: input,
            out_channels: weight.n,
            kernel: k,
            padding,
            out_h: padded_h - k + 1,
            out_w: padded_w - k + 1,
        })
    }

    pub fn out_shape(&self) -> Shape4 {
        Shape4::new(self.in_shape.n, self.out_channels, self.out_h, self.out_w)
    }

    fn patch_len(&self) -> usize {
        self.in_shape.c * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1 kernels without padding read the input directly as the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.padding == 0
    }
}

/// Expands one batch item into a `(C_in·k·k) × (H_out·W_out)` patch matrix.
fn im2col<T: Scalar>(geo: &ConvGeometry, item: &[T], col: &mut [T]) {
    let (h, w) = (geo.in_shape.h, geo.in_shape.w);
    let k = geo.kernel;
    let p = geo.padding as isize;
    let plane = geo.out_plane();
    for ci in 0..geo.in_shape.c {
        let src = &item[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..geo.out_h {
                    let iy = oy as isize + ky as isize - p;
                    let dst_row = &mut dst[oy * geo.out_w..(oy + 1) * geo.out_w];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - p;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one batch item.
fn col2im<T: Scalar>(geo: &ConvGeometry, col: &[T], item: &mut [T]) {
    let (h, w) = (geo.in_shape.h, geo.in_shape.w);
    let k = geo.kernel;
    let p = geo.padding as isize;
    let plane = geo.out_plane();
    for ci in 0..geo.in_shape.c {
        let dst = &mut item[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..geo.out_h {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * geo.out_w..(oy + 1) * geo.out_w];
                    for (ox, &g) in src_row.iter().enumerate() {
                        let ix = ox as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution through patch expansion and a matrix product per batch item.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(
        input.shape(),
        weight.shape(),
        bias.map(Tensor::shape),
        padding,
    )?;
    let out_shape = geo.out_shape();
    let mut out = Tensor::zeros(out_shape);
    let item_in = geo.in_shape.c * geo.in_shape.plane();
    let item_out = out_shape.c * out_shape.plane();
    let (m, kk, n) = (geo.out_channels, geo.patch_len(), geo.out_plane());
    let wdata = weight.data();
    out.data_mut()
        .par_chunks_mut(item_out.max(1))
        .enumerate()
        .for_each(|(b, dst)| {
            let item = &input.data()[b * item_in..(b + 1) * item_in];
            let mut scratch;
            let col: &[T] = if geo.is_pointwise() {
                item
            } else {
                scratch = vec![T::zero(); kk * n];
                im2col(&geo, item, &mut scratch);
                &scratch
            };
            if let Some(bias) = bias {
                for (co, row) in dst.chunks_mut(n).enumerate() {
                    row.fill(bias.data()[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                m, kk, n, T::one(), wdata, kk as isize, 1, col, n as isize, 1, beta, dst, n as isize, 1,
            );
        });
    Ok(out)
}

/// Gradients of a convolution with respect to its three operands.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let geo = ConvGeometry::new(input.shape(), weight.shape(), None, padding)?;
    if grad_out.shape() != geo.out_shape() {
        return Err(Error::Internal(format!(
            "conv2d backward: gradient shape {} does not match output shape {}",
            grad_out.shape(),
            geo.out_shape()
        )));
    }
    let item_in = geo.in_shape.c * geo.in_shape.plane();
    let (m, kk, n) = (geo.out_channels, geo.patch_len(), geo.out_plane());
    let wdata = weight.data();

    // Per-item partial weight gradients are summed afterwards in batch order so
    // the reduction order does not depend on scheduling.
    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..geo.in_shape.n)
        .into_par_iter()
        .map(|b| {
            let item = &input.data()[b * item_in..(b + 1) * item_in];
            let gy = &grad_out.data()[b * m * n..(b + 1) * m * n];
            let mut scratch;
            let col: &[T] = if geo.is_pointwise() {
                item
            } else {
                scratch = vec![T::zero(); kk * n];
                im2col(&geo, item, &mut scratch);
                &scratch
            };
            let mut gw = vec![T::zero(); m * kk];
            T::gemm(
                m, n, kk, T::one(), gy, n as isize, 1, col, 1, n as isize, T::zero(), &mut gw,
                kk as isize, 1,
            );
            let gb: Vec<T> = gy.chunks(n).map(|row| row.iter().copied().sum()).collect();
            let mut gcol = vec![T::zero(); kk * n];
            T::gemm(
                kk, m, n, T::one(), wdata, 1, kk as isize, gy, n as isize, 1, T::zero(),
                &mut gcol, n as isize, 1,
            );
            let gx = if geo.is_pointwise() {
                gcol
            } else {
                let mut gx = vec![T::zero(); item_in];
                col2im(&geo, &gcol, &mut gx);
                gx
            };
            (gx, gw, gb)
        })
        .collect();

    let mut gin = Vec::with_capacity(input.shape().numel());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape4::new(1, m, 1, 1));
    for (gx, w, b) in per_item {
        gin.extend_from_slice(&gx);
        for (acc, v) in gw.data_mut().iter_mut().zip(w) {
            *acc = *acc + v;
        }
        for (acc, v) in gb.data_mut().iter_mut().zip(b) {
            *acc = *acc + v;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gin)?,
        weight: gw,
        bias: gb,
    })
}

/// Reference convolution by explicit loops; cross-checks the patch-matrix path.
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(
        input.shape(),
        weight.shape(),
        bias.map(Tensor::shape),
        padding,
    )?;
    let s = geo.in_shape;
    let k = geo.kernel;
    let p = padding as isize;
    let out = Tensor::from_fn(geo.out_shape(), |b, co, oy, ox| {
        let mut acc = bias.map_or(T::zero(), |bias| bias.data()[co]);
        for ci in 0..s.c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = oy as isize + ky as isize - p;
                    let ix = ox as isize + kx as isize - p;
                    if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                        acc = acc
                            + weight.at(co, ci, ky, kx) * input.at(b, ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Saved state of a train-mode batch-norm forward pass.
pub struct BatchNormTrain<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub batch_var: Vec<T>,
}

fn check_affine<T: Scalar>(input: Shape4, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let expected = Shape4::new(1, input.c, 1, 1);
    if gamma.shape() != expected || beta.shape() != expected {
        return Err(Error::Config(format!(
            "batch_norm on input {input} needs gamma/beta of shape {expected}, got {} and {}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<BatchNormTrain<T>> {
    let s = input.shape();
    check_affine(s, gamma, beta)?;
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let eps = T::from_f64_lossy(BN_EPSILON);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut sum = T::zero();
        for b in 0..s.n {
            sum = sum + input.plane(b, c).iter().copied().sum::<T>();
        }
        let mu = sum / count;
        let mut sq = T::zero();
        for b in 0..s.n {
            for &v in input.plane(b, c) {
                sq = sq + (v - mu) * (v - mu);
            }
        }
        mean[c] = mu;
        var[c] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let normalized = Tensor::from_fn(s, |b, c, y, x| (input.at(b, c, y, x) - mean[c]) * inv_std[c]);
    let output = Tensor::from_fn(s, |b, c, y, x| {
        gamma.data()[c] * normalized.at(b, c, y, x) + beta.data()[c]
    });
    Ok(BatchNormTrain {
        output,
        normalized,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    })
}

/// Eval-mode normalization with fixed statistics. Returns output and `1/sqrt(var+eps)`.
pub fn batch_norm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let s = input.shape();
    check_affine(s, gamma, beta)?;
    if running_mean.len() != s.c || running_var.len() != s.c {
        return Err(Error::Config(format!(
            "batch_norm running statistics have {} entries, input {s} has {} channels",
            running_mean.len(),
            s.c
        )));
    }
    let eps = T::from_f64_lossy(BN_EPSILON);
    let inv_std: Vec<T> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let output = Tensor::from_fn(s, |b, c, y, x| {
        gamma.data()[c] * (input.at(b, c, y, x) - running_mean[c]) * inv_std[c] + beta.data()[c]
    });
    Ok((output, inv_std))
}

/// Backward of train-mode batch norm: `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let mut d_gamma = Tensor::zeros(Shape4::new(1, s.c, 1, 1));
    let mut d_beta = Tensor::zeros(Shape4::new(1, s.c, 1, 1));
    for c in 0..s.c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..s.n {
            for (&g, &xh) in grad_out.plane(b, c).iter().zip(normalized.plane(b, c)) {
                sg = sg + g;
                sgx = sgx + g * xh;
            }
        }
        d_beta.data_mut()[c] = sg;
        d_gamma.data_mut()[c] = sgx;
    }
    let d_input = Tensor::from_fn(s, |b, c, y, x| {
        let scale = gamma.data()[c] * inv_std[c] / count;
        let g = grad_out.at(b, c, y, x);
        let xh = normalized.at(b, c, y, x);
        scale * (count * g - d_beta.data()[c] - xh * d_gamma.data()[c])
    });
    (d_input, d_gamma, d_beta)
}

// ---------------------------------------------------------------------------
// Pointwise and channel ops

pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    for b in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (b * s.c + c) * plane + p;
            let mut max = T::neg_infinity();
            for c in 0..s.c {
                max = max.max(input.data()[idx(c)]);
            }
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (input.data()[idx(c)] - max).exp();
                out.data_mut()[idx(c)] = e;
                total = total + e;
            }
            for c in 0..s.c {
                out.data_mut()[idx(c)] = out.data()[idx(c)] / total;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = output.shape();
    let plane = s.plane();
    let mut gin = Tensor::zeros(s);
    for b in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (b * s.c + c) * plane + p;
            let dot: T = (0..s.c)
                .map(|c| output.data()[idx(c)] * grad_out.data()[idx(c)])
                .sum();
            for c in 0..s.c {
                let y = output.data()[idx(c)];
                gin.data_mut()[idx(c)] = y * (grad_out.data()[idx(c)] - dot);
            }
        }
    }
    gin
}

/// 2×2 stride-2 max pooling. Returns the output and, per output element, the
/// flat input index that won (first maximum in row-major window order).
pub fn max_pool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::Config(format!(
            "max_pool2 needs even height and width, got input shape {s}"
        )));
    }
    let os = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.numel()];
    let mut o = 0;
    for b in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best_i = s.index(b, c, 2 * oy, 2 * ox);
                    let mut best = input.data()[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = s.index(b, c, 2 * oy + dy, 2 * ox + dx);
                        if input.data()[i] > best {
                            best = input.data()[i];
                            best_i = i;
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2_backward<T: Scalar>(
    in_shape: Shape4,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gin = Tensor::zeros(in_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gin.data_mut()[i] = gin.data()[i] + g;
    }
    gin
}

/// One output coordinate's two source taps and the weight of the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre (align-corners = false) sampling taps for resizing one axis.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<LinearTap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            LinearTap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = input.shape();
    let ty = linear_taps(s.h, out_h);
    let tx = linear_taps(s.w, out_w);
    Tensor::from_fn(Shape4::new(s.n, s.c, out_h, out_w), |b, c, y, x| {
        let plane = input.plane(b, c);
        let (ry, rx) = (ty[y], tx[x]);
        let (fy, fx) = (T::from_f64_lossy(ry.frac), T::from_f64_lossy(rx.frac));
        let one = T::one();
        let top = plane[ry.lo * s.w + rx.lo] * (one - fx) + plane[ry.lo * s.w + rx.hi] * fx;
        let bottom = plane[ry.hi * s.w + rx.lo] * (one - fx) + plane[ry.hi * s.w + rx.hi] * fx;
        top * (one - fy) + bottom * fy
    })
}

pub fn resize_bilinear_backward<T: Scalar>(in_shape: Shape4, grad_out: &Tensor<T>) -> Tensor<T> {
    let os = grad_out.shape();
    let ty = linear_taps(in_shape.h, os.h);
    let tx = linear_taps(in_shape.w, os.w);
    let mut gin = Tensor::zeros(in_shape);
    let one = T::one();
    for b in 0..os.n {
        for c in 0..os.c {
            for (y, ry) in ty.iter().enumerate() {
                for (x, rx) in tx.iter().enumerate() {
                    let g = grad_out.at(b, c, y, x);
                    let (fy, fx) = (T::from_f64_lossy(ry.frac), T::from_f64_lossy(rx.frac));
                    for (yy, wy) in [(ry.lo, one - fy), (ry.hi, fy)] {
                        for (xx, wx) in [(rx.lo, one - fx), (rx.hi, fx)] {
                            *gin.at_mut(b, c, yy, xx) = gin.at(b, c, yy, xx) + g * wy * wx;
                        }
                    }
                }
            }
        }
    }
    gin
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let area = T::from_usize(s.plane()).unwrap();
    Tensor::from_fn(Shape4::new(s.n, s.c, 1, 1), |b, c, _, _| {
        input.plane(b, c).iter().copied().sum::<T>() / area
    })
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::Config(format!(
            "concat_channels needs equal batch and spatial extents, got {sa} and {sb}"
        )));
    }
    let out_shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.n {
        data.extend_from_slice(a.item_slice(n));
        data.extend_from_slice(b.item_slice(n));
    }
    Tensor::from_vec(out_shape, data)
}
