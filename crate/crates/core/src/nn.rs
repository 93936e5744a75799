//! Parameter storage and the basic layers built on the tape.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Gradients, Mode, RunningStats, Scalar, Shape4, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A learned tensor with a unique dotted name such as `enc2.conv.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Biases and batch-norm affine terms are not weight-decayed.
    pub weight_decay_exempt: bool,
}

/// Non-learned state that still belongs to the model (batch-norm statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn check_unique(&self, name: &str) -> Result<()> {
        let taken = self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name);
        if taken {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>, weight_decay_exempt: bool) -> Result<ParamId> {
        let name = name.into();
        self.check_unique(&name)?;
        self.params.push(Parameter {
            name,
            value,
            weight_decay_exempt,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.check_unique(&name)?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of learned scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }

    /// Scalar count of the parameters whose ids are listed.
    pub fn scalar_count_of(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.param(id).value.shape().numel()).sum()
    }

    /// Records every parameter on the tape as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }

    /// Gradient per parameter in store order; parameters the loss did not
    /// reach get `None`.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn apply_updates(&mut self, updates: Vec<BufferUpdate<T>>) {
        for u in updates {
            self.buffers[u.id.0].value = u.value;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    weight_decay_exempt: p.weight_decay_exempt,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        }
    }

    pub(crate) fn names_are_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.params
            .iter()
            .map(|p| &p.name)
            .chain(self.buffers.iter().map(|b| &b.name))
            .all(|n| seen.insert(n))
    }
}

/// Tape handles of every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes parameter `id` to another tape value, e.g. a probe leaf in a
    /// gradient check.
    pub fn substitute(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

#[derive(Debug, Clone)]
pub struct BufferUpdate<T> {
    pub id: BufferId,
    pub value: Tensor<T>,
}

/// Everything a layer needs during one forward pass.
pub struct Forward<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub params: BoundParams,
    pub mode: Mode,
    pub updates: Vec<BufferUpdate<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Result<Self> {
        let params = store.bind(tape)?;
        Ok(Forward {
            tape,
            store,
            params,
            mode,
            updates: Vec::new(),
        })
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params.get(id)
    }
}

/// He-normal initialization for a weight with `fan_in` inputs per output.
pub fn he_normal<T: Scalar>(shape: Shape4, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive standard deviation");
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(dist.sample(rng)))
}

/// Square stride-1 convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel size {kernel} must be odd")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{name}: channel counts must be positive")));
        }
        let shape = Shape4::new(out_channels, in_channels, kernel, kernel);
        let weight = store.add_param(
            format!("{name}.weight"),
            he_normal(shape, in_channels * kernel * kernel, rng),
            false,
        )?;
        let bias = if with_bias {
            Some(store.add_param(
                format!("{name}.bias"),
                Tensor::zeros(Shape4::new(1, out_channels, 1, 1)),
                true,
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.tape.conv2d(x, w, b, (self.kernel - 1) / 2)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    /// Number of batches folded into the running statistics.
    pub tracked: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let vec_shape = Shape4::new(1, channels, 1, 1);
        Ok(BatchNorm2d {
            name: name.to_string(),
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(vec_shape, T::one()), true)?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(vec_shape), true)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec_shape))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vec_shape, T::one()))?,
            tracked: store.add_buffer(format!("{name}.tracked"), Tensor::zeros(Shape4::scalar()))?,
            channels,
        })
    }

    pub fn running_stats<T: Scalar>(&self, store: &ParamStore<T>) -> RunningStats<T> {
        RunningStats {
            mean: store.buffer(self.running_mean).value.data().to_vec(),
            var: store.buffer(self.running_var).value.data().to_vec(),
            initialized: store.buffer(self.tracked).value.data()[0] > T::zero(),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let stats = self.running_stats(f.store);
        let (gamma, beta) = (f.param(self.gamma), f.param(self.beta));
        let (out, next) = f.tape.batch_norm(x, gamma, beta, &stats, f.mode, &self.name)?;
        if let Some(next) = next {
            let vec_shape = Shape4::new(1, self.channels, 1, 1);
            let count = f.store.buffer(self.tracked).value.data()[0] + T::one();
            f.updates.push(BufferUpdate {
                id: self.running_mean,
                value: Tensor::from_vec(vec_shape, next.mean)?,
            });
            f.updates.push(BufferUpdate {
                id: self.running_var,
                value: Tensor::from_vec(vec_shape, next.var)?,
            });
            f.updates.push(BufferUpdate {
                id: self.tracked,
                value: Tensor::scalar(count),
            });
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// 3×3 convolution (no bias; the following batch norm absorbs it), batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, 3, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.tape.relu(y)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        ids.extend(self.bn.param_ids());
        ids
    }
}
