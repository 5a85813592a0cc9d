//! Binary checkpoints: model config, parameters, running statistics, optimizer state.
//!
//! ```text
//! "STIM" | version u16 | config_len u32 | config JSON | epoch u64 | seed u64 | adam_step u64
//! | tensor_count u32 | tensor_count × ( name_len u16 | name | tensor )
//! ```
//!
//! Tensors are written in name order with prefixes `param/`, `stats/<layer>/{mean,var}`,
//! `adam_m/` and `adam_v/`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};
use crate::train::{AdamwState, Trainer, TrainingConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STIM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub optimizer: AdamwState<F>,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
}

impl<F: Element> Checkpoint<F> {
    pub fn from_trainer(trainer: &Trainer<F>) -> Self {
        Checkpoint {
            config: *trainer.model.config(),
            store: trainer.model.store.clone(),
            optimizer: trainer.optimizer.clone(),
            epoch: trainer.epoch as u64,
            seed: trainer.config.seed,
        }
    }

    /// Rebuilds a trainer positioned after `self.epoch` epochs.
    pub fn into_trainer(self, config: TrainingConfig) -> Result<Trainer<F>> {
        if config.seed != self.seed {
            return Err(Error::config(format!(
                "checkpoint seed {} differs from configured seed {}",
                self.seed, config.seed
            )));
        }
        let mut model = Model::new(self.config, self.seed)?;
        if model.store.params.keys().ne(self.store.params.keys())
            || model.store.stats.keys().ne(self.store.stats.keys())
        {
            return Err(Error::config(
                "checkpoint tensors do not match the model layout",
            ));
        }
        for (k, v) in self.store.params {
            model.store.set(&k, v)?;
        }
        for (k, s) in self.store.stats {
            let slot = model.store.stats.get_mut(&k).unwrap();
            if slot.mean.shape() != s.mean.shape() || slot.var.shape() != s.var.shape() {
                return Err(Error::shape(
                    "checkpoint stats",
                    slot.mean.shape(),
                    s.mean.shape(),
                ));
            }
            *slot = s;
        }
        let mut t = Trainer::new(model, config)?;
        t.optimizer = self.optimizer;
        t.epoch = self.epoch as usize;
        Ok(t)
    }

    fn tensors(&self) -> BTreeMap<String, &Tensor<F>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.store.params {
            out.insert(format!("param/{k}"), v);
        }
        for (k, s) in &self.store.stats {
            out.insert(format!("stats/{k}/mean"), &s.mean);
            out.insert(format!("stats/{k}/var"), &s.var);
        }
        for (k, v) in &self.optimizer.m {
            out.insert(format!("adam_m/{k}"), v);
        }
        for (k, v) in &self.optimizer.v {
            out.insert(format!("adam_v/{k}"), v);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.write_bytes(&mut out);
        }
        Ok(out)
    }

    /// Parses a checkpoint; with `expected`, its model config must match exactly.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| {
                Error::parse(*pos as u64, format!("truncated while reading {what}"))
            })?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        if take(&mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "bad magic, expected \"STIM\""));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                4,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let len =
            u32::from_le_bytes(take(&mut pos, 4, "config length")?.try_into().unwrap()) as usize;
        let json_at = pos;
        let config: ModelConfig = serde_json::from_slice(take(&mut pos, len, "config")?)
            .map_err(|e| Error::parse(json_at as u64, format!("config: {e}")))?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(Error::config(
                    "checkpoint model config differs from the configured model",
                ));
            }
        }
        let u64_at = |pos: &mut usize, what: &str| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8, what)?.try_into().unwrap()))
        };
        let epoch = u64_at(&mut pos, "epoch")?;
        let seed = u64_at(&mut pos, "seed")?;
        let step = u64_at(&mut pos, "optimizer step")?;
        let count = u32::from_le_bytes(take(&mut pos, 4, "tensor count")?.try_into().unwrap());
        let mut store = ParamStore {
            params: BTreeMap::new(),
            stats: BTreeMap::new(),
        };
        let mut optimizer = AdamwState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step,
        };
        let mut means = BTreeMap::new();
        let mut vars = BTreeMap::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let at = pos;
            let n =
                u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, n, "name")?)
                .map_err(|_| Error::parse(at as u64, "tensor name is not UTF-8"))?
                .to_string();
            if previous.as_ref().is_some_and(|p| p >= &name) {
                return Err(Error::parse(
                    at as u64,
                    format!("tensor {name} out of order"),
                ));
            }
            let t = Tensor::<F>::read_bytes(bytes, &mut pos)?;
            if let Some(k) = name.strip_prefix("param/") {
                store.params.insert(k.into(), t);
            } else if let Some(k) = name.strip_prefix("adam_m/") {
                optimizer.m.insert(k.into(), t);
            } else if let Some(k) = name.strip_prefix("adam_v/") {
                optimizer.v.insert(k.into(), t);
            } else if let Some(k) = name
                .strip_prefix("stats/")
                .and_then(|k| k.strip_suffix("/mean"))
            {
                means.insert(k.to_string(), t);
            } else if let Some(k) = name
                .strip_prefix("stats/")
                .and_then(|k| k.strip_suffix("/var"))
            {
                vars.insert(k.to_string(), t);
            } else {
                return Err(Error::parse(at as u64, format!("unknown tensor {name}")));
            }
            previous = Some(name);
        }
        if pos != bytes.len() {
            return Err(Error::parse(pos as u64, "trailing bytes after last tensor"));
        }
        if means.keys().ne(vars.keys()) {
            return Err(Error::parse(
                pos as u64,
                "running mean and variance sets differ",
            ));
        }
        for (k, mean) in means {
            let var = vars.remove(&k).unwrap();
            store.stats.insert(k, RunningStats { mean, var });
        }
        for (k, p) in &store.params {
            let ok = |t: Option<&Tensor<F>>| t.is_some_and(|t| t.shape() == p.shape());
            if !ok(optimizer.m.get(k)) || !ok(optimizer.v.get(k)) {
                return Err(Error::parse(
                    pos as u64,
                    format!("optimizer moments missing or misshapen for {k}"),
                ));
            }
        }
        if optimizer.m.len() != store.params.len() || optimizer.v.len() != store.params.len() {
            return Err(Error::parse(
                pos as u64,
                "optimizer moments for unknown parameters",
            ));
        }
        Ok(Checkpoint {
            config,
            store,
            optimizer,
            epoch,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected)
    }
}
