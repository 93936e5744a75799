//! Dynamic computation tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the backward rule. Nodes only reference earlier nodes, so a single
//! reverse sweep over the node list visits each node once in a valid order.

use super::kernels;
use super::tensor::{Scalar, Shape4, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode uses batch statistics in batch norm; eval mode uses running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// Exponential moving average update from one batch; `count` is the number
    /// of values per channel the biased variance was computed over.
    pub fn updated(&self, batch_mean: &[T], batch_var: &[T], count: usize) -> Self {
        let keep = T::from_f64_lossy(kernels::BN_MOMENTUM);
        let take = T::one() - keep;
        let correction = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        RunningStats {
            mean: self
                .mean
                .iter()
                .zip(batch_mean)
                .map(|(&r, &b)| keep * r + take * b)
                .collect(),
            var: self
                .var
                .iter()
                .zip(batch_var)
                .map(|(&r, &b)| keep * r + take * b * correction)
                .collect(),
            initialized: true,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    GlobalAvgPool(Var),
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum(Var),
    /// Scalar function whose gradient w.r.t. its input was computed in the forward pass.
    ScalarFn {
        input: Var,
        local_grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of forward ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf handles.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape4 {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{name} produced a non-finite value (output shape {})",
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "leaf of shape {} holds a non-finite value",
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
        )
    }

    /// Batch normalization. In train mode the returned statistics are the
    /// running statistics after this batch; the caller decides whether to keep them.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        mode: Mode,
        layer: &str,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        match mode {
            Mode::Train => {
                let bn = kernels::batch_norm_train(self.value(input), self.value(gamma), self.value(beta))?;
                let s = self.shape(input);
                let next = stats.updated(&bn.batch_mean, &bn.batch_var, s.n * s.plane());
                let var = self.push(
                    "batch_norm",
                    bn.output,
                    &[input, gamma, beta],
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        normalized: bn.normalized,
                        inv_std: bn.inv_std,
                    },
                )?;
                Ok((var, Some(next)))
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::UninitializedStatistics(layer.to_string()));
                }
                let (out, inv_std) = kernels::batch_norm_eval(
                    self.value(input),
                    self.value(gamma),
                    self.value(beta),
                    &stats.mean,
                    &stats.var,
                )?;
                let var = self.push(
                    "batch_norm",
                    out,
                    &[input, gamma, beta],
                    Op::BatchNormEval {
                        input,
                        gamma,
                        beta,
                        running_mean: stats.mean.clone(),
                        inv_std,
                    },
                )?;
                Ok((var, None))
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v.max(T::zero()));
        self.push("relu", out, &[input], Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| {
            // Branch on sign so exp never overflows.
            if v >= T::zero() {
                (T::one() + (-v).exp()).recip()
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", out, &[input], Op::Sigmoid(input))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        if self.shape(input).c < 2 {
            return Err(Error::Config(format!(
                "softmax_channels needs at least 2 channels, got shape {}",
                self.shape(input)
            )));
        }
        let out = kernels::softmax_channels(self.value(input));
        self.push("softmax_channels", out, &[input], Op::Softmax(input))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2(self.value(input))?;
        self.push("max_pool2", out, &[input], Op::MaxPool { input, argmax })
    }

    pub fn upsample_bilinear2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let out = kernels::resize_bilinear(self.value(input), 2 * s.h, 2 * s.w);
        self.push("upsample_bilinear2", out, &[input], Op::Upsample(input))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input));
        self.push("global_avg_pool", out, &[input], Op::GlobalAvgPool(input))
    }

    /// Element-wise product. Either operand may instead be a `(N, C, 1, 1)`
    /// gate broadcast over the other's spatial extent.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect();
            Tensor::from_vec(sa, data)?
        } else if let Some((full, gate)) = self.broadcast_pair(a, b) {
            let (fv, gv) = (self.value(full), self.value(gate));
            let fs = fv.shape();
            Tensor::from_fn(fs, |n, c, y, x| fv.at(n, c, y, x) * gv.at(n, c, 0, 0))
        } else {
            return Err(Error::Config(format!(
                "elementwise_mul needs equal shapes or a (N, C, 1, 1) gate, got {sa} and {sb}"
            )));
        };
        self.push("elementwise_mul", out, &[a, b], Op::Mul { a, b })
    }

    fn broadcast_pair(&self, a: Var, b: Var) -> Option<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let is_gate_for = |g: Shape4, f: Shape4| g.n == f.n && g.c == f.c && g.h == 1 && g.w == 1;
        if is_gate_for(sb, sa) {
            Some((a, b))
        } else if is_gate_for(sa, sb) {
            Some((b, a))
        } else {
            None
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Config(format!(
                "elementwise_add needs equal shapes, got {sa} and {sb}"
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("elementwise_add", out, &[a, b], Op::Add { a, b })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        self.push("concat_channels", out, &[a, b], Op::Concat { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        self.push("scale", out, &[input], Op::Scale { input, factor })
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push("sum", out, &[input], Op::Sum(input))
    }

    /// Records a scalar-valued function of `input` whose gradient the caller
    /// already evaluated. Used by the segmentation losses.
    pub fn scalar_fn(&mut self, name: &str, input: Var, value: T, local_grad: Tensor<T>) -> Result<Var> {
        if local_grad.shape() != self.shape(input) {
            return Err(Error::Internal(format!(
                "{name}: local gradient shape {} differs from input shape {}",
                local_grad.shape(),
                self.shape(input)
            )));
        }
        if !local_grad.is_finite() {
            return Err(Error::NonFinite(format!("{name} produced a non-finite gradient")));
        }
        self.push(name, Tensor::scalar(value), &[input], Op::ScalarFn { input, local_grad })
    }

    /// Reverse sweep from a scalar loss. Gradients of every leaf that requires
    /// them are returned; the tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("loss handle {} is not on this tape", loss.0)));
        }
        let shape = self.shape(loss);
        if shape != Shape4::scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss of shape (1, 1, 1, 1), got {shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (var, contribution) in self.node_backward(idx, &g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }
        for (i, slot) in grads.iter().enumerate() {
            if let Some(g) = slot {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of tape value {i}")));
                }
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), *padding, g)?;
                let mut v = vec![(*input, cg.input), (*weight, cg.weight)];
                if let Some(b) = bias {
                    v.push((*b, cg.bias));
                }
                v
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (gi, gg, gb) =
                    kernels::batch_norm_train_backward(g, normalized, inv_std, self.value(*gamma));
                vec![(*input, gi), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                running_mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let gm = self.value(*gamma);
                let s = g.shape();
                let gi = Tensor::from_fn(s, |n, c, y, xx| g.at(n, c, y, xx) * gm.data()[c] * inv_std[c]);
                let mut gg = Tensor::zeros(gm.shape());
                let mut gb = Tensor::zeros(gm.shape());
                for n in 0..s.n {
                    for c in 0..s.c {
                        for (&gv, &xv) in g.plane(n, c).iter().zip(x.plane(n, c)) {
                            gg.data_mut()[c] = gg.data()[c] + gv * (xv - running_mean[c]) * inv_std[c];
                            gb.data_mut()[c] = gb.data()[c] + gv;
                        }
                    }
                }
                vec![(*input, gi), (*gamma, gg), (*beta, gb)]
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*input, Tensor::from_vec(x.shape(), data)?)]
            }
            Op::Sigmoid(input) => {
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                vec![(*input, Tensor::from_vec(out.shape(), data)?)]
            }
            Op::Softmax(input) => vec![(*input, kernels::softmax_channels_backward(out, g))],
            Op::MaxPool { input, argmax } => {
                vec![(*input, kernels::max_pool2_backward(self.shape(*input), argmax, g))]
            }
            Op::Upsample(input) => {
                vec![(*input, kernels::resize_bilinear_backward(self.shape(*input), g))]
            }
            Op::GlobalAvgPool(input) => {
                let s = self.shape(*input);
                let area = T::from_usize(s.plane()).unwrap();
                vec![(*input, Tensor::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) / area))]
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.shape() == vb.shape() {
                    let ga = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    let gb = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    vec![
                        (*a, Tensor::from_vec(va.shape(), ga)?),
                        (*b, Tensor::from_vec(vb.shape(), gb)?),
                    ]
                } else {
                    let (full, gate) = self
                        .broadcast_pair(*a, *b)
                        .ok_or_else(|| Error::Internal("mul backward lost its broadcast pair".into()))?;
                    let (fv, gv) = (self.value(full), self.value(gate));
                    let fs = fv.shape();
                    let g_full = Tensor::from_fn(fs, |n, c, y, x| g.at(n, c, y, x) * gv.at(n, c, 0, 0));
                    let g_gate = Tensor::from_fn(gv.shape(), |n, c, _, _| {
                        g.plane(n, c)
                            .iter()
                            .zip(fv.plane(n, c))
                            .map(|(&x, &y)| x * y)
                            .sum()
                    });
                    vec![(full, g_full), (gate, g_gate)]
                }
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
                for n in 0..sa.n {
                    let item = g.item_slice(n);
                    ga.extend_from_slice(&item[..la]);
                    gb.extend_from_slice(&item[la..la + lb]);
                }
                vec![(*a, Tensor::from_vec(sa, ga)?), (*b, Tensor::from_vec(sb, gb)?)]
            }
            Op::Scale { input, factor } => vec![(*input, g.map(|v| v * *factor))],
            Op::Sum(input) => {
                let upstream = g.item()?;
                vec![(*input, Tensor::full(self.shape(*input), upstream))]
            }
            Op::ScalarFn { input, local_grad } => {
                let upstream = g.item()?;
                vec![(*input, local_grad.map(|v| v * upstream))]
            }
        };
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape4, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape4::new(1, 1, 2, 2), &[1.0, -2.0, 3.0, 0.5]), true).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 2.0));
        assert!(tape.is_empty());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape4::new(1, 1, 1, 3), &[1.0, 2.0, 3.0]), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape4::new(1, 2, 1, 1)), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        tape.clear();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape4::new(1, 1, 1, 2), &[1.0, 2.0]), true).unwrap();
        let c = tape.constant(t(Shape4::new(1, 1, 1, 2), &[5.0, 7.0])).unwrap();
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 7.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape4::new(1, 1, 1, 3), &[-2.0, 3.0, 0.0]), true).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[2], 0.5);
        let loss = tape.sum(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Subgradient at the kink is zero.
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval_for_moderate_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(Shape4::new(1, 1, 1, 4), &[-30.0, -5.0, 5.0, 30.0]), false).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gate_broadcast_identity() {
        let mut tape = Tape::<f32>::new();
        let f = tape
            .leaf(Tensor::from_fn(Shape4::new(2, 3, 2, 2), |n, c, y, x| (n + c + y + x) as f32), false)
            .unwrap();
        let gate = tape.constant(Tensor::full(Shape4::new(2, 3, 1, 1), 1.0)).unwrap();
        let out = tape.mul(f, gate).unwrap();
        assert_eq!(tape.value(out), tape.value(f));
        let bad = tape.constant(Tensor::full(Shape4::new(2, 4, 1, 1), 1.0)).unwrap();
        assert!(matches!(tape.mul(f, bad), Err(Error::Config(_))));
    }

    #[test]
    fn add_negation_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(Shape4::new(1, 2, 2, 2), |_, c, y, x| (c + y * x) as f32), false).unwrap();
        let neg = tape.scale(x, -1.0).unwrap();
        let z = tape.add(x, neg).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_batch_norm_requires_statistics() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape4::new(1, 2, 2, 2)), false).unwrap();
        let g = tape.leaf(Tensor::full(Shape4::new(1, 2, 1, 1), 1.0), true).unwrap();
        let b = tape.leaf(Tensor::zeros(Shape4::new(1, 2, 1, 1)), true).unwrap();
        let stats = RunningStats::new(2);
        let err = tape.batch_norm(x, g, b, &stats, Mode::Eval, "enc1.bn").unwrap_err();
        assert!(matches!(err, Error::UninitializedStatistics(_)));
        let (_, next) = tape.batch_norm(x, g, b, &stats, Mode::Train, "enc1.bn").unwrap();
        assert!(next.unwrap().initialized);
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let err = tape.leaf(Tensor::full(Shape4::scalar(), f32::NAN), false).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
