//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MPGN"  u32 version  u32 tensor_count
//! per tensor: u16 name_len, name bytes, u8 rank, rank × u32 dims, f32 payload
//! u32 trailer_len, trailer bytes (UTF-8 `key = value` lines)
//! ```
//!
//! Tensors are the model parameters, then the model buffers (batch-norm
//! statistics), then the Adam moments under `m.` and `v.` prefixes. The
//! trailer records the model configuration, training configuration and the
//! epoch / step / seed counters.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{apply_model, apply_train, model_entries, train_entries, KeyValues};
use crate::engine::{Shape4, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MPGN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Where training stood when the checkpoint was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Seed of the run; the per-epoch shuffle streams derive from it.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub progress: Progress,
    /// Parameters followed by buffers, in model store order.
    pub state: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

/// Adam moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model<f32>,
        optimizer: Option<&AdamState<f32>>,
        train_config: Option<&TrainConfig>,
        progress: Progress,
    ) -> Self {
        let store = model.store();
        let state = store
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .chain(store.buffers().iter().map(|b| NamedTensor {
                name: b.name.clone(),
                value: b.value.clone(),
            }))
            .collect();
        let optimizer = optimizer.map(|st| {
            let named = |ts: &[Tensor<f32>]| {
                store
                    .params()
                    .iter()
                    .zip(ts)
                    .map(|(p, t)| NamedTensor {
                        name: p.name.clone(),
                        value: t.clone(),
                    })
                    .collect()
            };
            OptimizerState {
                step: st.step,
                m: named(&st.m),
                v: named(&st.v),
            }
        });
        Checkpoint {
            model_config: model.config().clone(),
            train_config: train_config.cloned(),
            progress,
            state,
            optimizer,
        }
    }

    /// Rebuilds the model and loads every parameter and buffer by name.
    pub fn restore(&self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::build(self.model_config.clone(), 0)?;
        let store = model.store_mut();
        let expected = store.params().len() + store.buffers().len();
        if self.state.len() != expected {
            return Err(Error::Data(format!(
                "checkpoint holds {} model tensors but the configured architecture has {expected}",
                self.state.len()
            )));
        }
        let find = |name: &str| {
            self.state
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Data(format!("checkpoint has no tensor named {name}")))
        };
        for p in store.params_mut() {
            p.value = checked(find(&p.name)?, p.value.shape())?;
        }
        for b in store.buffers_mut() {
            b.value = checked(find(&b.name)?, b.value.shape())?;
        }
        Ok(model)
    }

    /// Adam state aligned with `model`'s parameter order.
    pub fn optimizer_state(&self, model: &Model<f32>) -> Result<Option<AdamState<f32>>> {
        let Some(opt) = &self.optimizer else {
            return Ok(None);
        };
        let gather = |list: &[NamedTensor]| {
            model
                .store()
                .params()
                .iter()
                .map(|p| {
                    let t = list
                        .iter()
                        .find(|t| t.name == p.name)
                        .ok_or_else(|| Error::Data(format!("checkpoint has no optimizer moment for {}", p.name)))?;
                    checked(t, p.value.shape())
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Some(AdamState {
            step: opt.step,
            m: gather(&opt.m)?,
            v: gather(&opt.v)?,
        }))
    }

    fn trailer(&self) -> KeyValues {
        let mut kv = model_entries(&self.model_config);
        if let Some(t) = &self.train_config {
            kv.overlay(&train_entries(t));
        }
        kv.set("epoch", self.progress.epoch);
        kv.set("step", self.progress.step);
        kv.set("rng_seed", self.progress.seed);
        if let Some(o) = &self.optimizer {
            kv.set("adam_step", o.step);
        }
        kv
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.state.iter().map(|t| (t.name.clone(), &t.value)).collect();
        if let Some(o) = &self.optimizer {
            tensors.extend(o.m.iter().map(|t| (format!("m.{}", t.name), &t.value)));
            tensors.extend(o.v.iter().map(|t| (format!("v.{}", t.name), &t.value)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Usage(format!("tensor name {name} is too long to store")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().dims();
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let trailer = self.trailer().to_text();
        out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
        out.extend_from_slice(trailer.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Data("not a checkpoint: missing MPGN magic at byte offset 0".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut state = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Data(format!("tensor name at byte offset {at} is not UTF-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Data(format!("tensor {name} has unsupported rank {rank}")));
            }
            let mut dims = [1usize; 4];
            for i in 0..rank {
                dims[4 - rank + i] = r.u32("dimension")? as usize;
            }
            let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
            let payload = r.take(shape.numel() * 4, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let value = Tensor::from_vec(shape, data)?;
            if let Some(base) = name.strip_prefix("m.") {
                m.push(NamedTensor { name: base.into(), value });
            } else if let Some(base) = name.strip_prefix("v.") {
                v.push(NamedTensor { name: base.into(), value });
            } else {
                state.push(NamedTensor { name, value });
            }
        }
        let trailer_len = r.u32("trailer length")? as usize;
        let trailer_text = std::str::from_utf8(r.take(trailer_len, "trailer")?)
            .map_err(|_| Error::Data("checkpoint trailer is not UTF-8".into()))?;
        let kv = KeyValues::parse(trailer_text, "checkpoint trailer")?;

        let mut model_config = ModelConfig::default();
        apply_model(&kv, &mut model_config)?;
        model_config.validate()?;
        let train_config = if kv.get("epochs").is_some() {
            let mut t = TrainConfig::default();
            apply_train(&kv, &mut t)?;
            Some(t)
        } else {
            None
        };
        let num = |key: &str| -> Result<u64> {
            kv.get(key)
                .unwrap_or("0")
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint trailer: bad {key}")))
        };
        let progress = Progress {
            epoch: num("epoch")? as usize,
            step: num("step")?,
            seed: num("rng_seed")?,
        };
        let optimizer = match (m.is_empty(), v.is_empty()) {
            (true, true) => None,
            (false, false) => Some(OptimizerState {
                step: num("adam_step")?,
                m,
                v,
            }),
            _ => return Err(Error::Data("checkpoint has only one of the two Adam moment sets".into())),
        };
        Ok(Checkpoint {
            model_config,
            train_config,
            progress,
            state,
            optimizer,
        })
    }

    /// Writes to a temporary sibling then renames, so an existing file at
    /// `path` is only ever replaced by a complete checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn checked(t: &NamedTensor, shape: Shape4) -> Result<Tensor<f32>> {
    if t.value.shape() != shape {
        return Err(Error::Data(format!(
            "checkpoint tensor {} has shape {} but the model expects {shape}",
            t.name,
            t.value.shape()
        )));
    }
    Ok(t.value.clone())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Data(format!(
                "checkpoint truncated reading {what}: need {n} bytes at byte offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stage_channels: [8, 16, 32, 64],
            class_count: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn header_layout() {
        let model = Model::<f32>::build(tiny(), 1).unwrap();
        let bytes = Checkpoint::capture(&model, None, None, Progress::default()).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MPGN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let count = model.store().params().len() + model.store().buffers().len();
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, count);
        let first = &model.store().params()[0];
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], first.name.as_bytes());
        assert_eq!(bytes[14 + name_len], 4);
    }

    #[test]
    fn round_trip_restores_values_and_moments() {
        let model = Model::<f32>::build(tiny(), 2).unwrap();
        let mut adam = AdamState::new(model.store().params());
        adam.step = 3;
        adam.m[0].data_mut()[0] = 0.5;
        adam.v[1].data_mut()[0] = 0.25;
        let progress = Progress { epoch: 4, step: 8, seed: 9 };
        let ck = Checkpoint::capture(&model, Some(&adam), Some(&TrainConfig::default()), progress);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore().unwrap();
        assert_eq!(restored.store(), model.store());
        assert_eq!(back.optimizer_state(&restored).unwrap().unwrap(), adam);
    }

    #[test]
    fn truncation_reports_offset() {
        let model = Model::<f32>::build(tiny(), 1).unwrap();
        let bytes = Checkpoint::capture(&model, None, None, Progress::default()).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..100]).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("byte offset"), "{err}");
        assert!(Checkpoint::from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let model = Model::<f32>::build(tiny(), 1).unwrap();
        let mut ck = Checkpoint::capture(&model, None, None, Progress::default());
        ck.model_config.mpga_enabled = false;
        assert!(matches!(ck.restore(), Err(Error::Data(_))));
    }
}
