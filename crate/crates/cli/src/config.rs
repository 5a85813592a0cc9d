//! Run configuration: JSON file, presets, dotted overrides and seed resolution.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spiketim::data::{split, Dataset};
use spiketim::events::{read_events, Accumulate, EventStream};
use spiketim::model::ModelConfig;
use spiketim::synth::{synth_temporal_order, SyntheticTaskSpec};
use spiketim::train::{AdamwConfig, TrainingConfig};
use spiketim::Element;

pub const SEED_ENV: &str = "SPIKETIM_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// A full model config, or one of the preset names `paper_scale`, `desk`, `micro`.
    pub model: ModelConfig,
    pub training: TrainSection,
    pub data: DataSection,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default)]
    pub lr_min: f64,
    pub seed: u64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub optimizer: AdamwConfig,
    /// Replaces `model.tim.alpha` when set.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Write `epoch_NNNN.ckpt` every this many epochs; 0 keeps only `final.ckpt`.
    #[serde(default)]
    pub save_every: usize,
    #[serde(default)]
    pub precision: Precision,
}

fn d_epochs() -> usize {
    50
}
fn d_batch() -> usize {
    16
}
fn d_lr0() -> f64 {
    0.005
}

impl TrainSection {
    pub fn core(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            lr_min: self.lr_min,
            seed: self.seed,
            warmup_epochs: self.warmup_epochs,
            grad_clip: self.grad_clip,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub synthetic: Option<SyntheticTaskSpec>,
    /// EVS1/CSV file or directory of files; unlabelled files take the label of
    /// their parent directory when it is an integer.
    #[serde(default)]
    pub train: Option<PathBuf>,
    /// Separate validation data; without it the training data is split.
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default = "d_split")]
    pub split: [f64; 2],
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub accumulate: Accumulate,
}

fn d_split() -> [f64; 2] {
    [5.0 / 6.0, 1.0 / 6.0]
}

pub fn preset(name: &str) -> anyhow::Result<ModelConfig> {
    match name {
        "paper_scale" | "paper" => Ok(ModelConfig::paper_scale()),
        "desk" => Ok(ModelConfig::desk()),
        "micro" => Ok(ModelConfig::micro()),
        other => bail!("unknown model preset {other:?} (expected paper_scale, desk or micro)"),
    }
}

/// Sets `path` (dot separated, numeric segments index arrays) to `value`.
pub fn apply_override(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| anyhow!("{key}: {seg:?} is not an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| anyhow!("{key}: index {idx} out of range for length {len}"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("{key}: cannot descend into a scalar at {seg:?}"),
        };
    }
    unreachable!("segments is non-empty")
}

fn expand_preset(root: &mut Value) -> anyhow::Result<()> {
    if let Some(slot) = root.get_mut("model") {
        if let Value::String(name) = slot {
            *slot = serde_json::to_value(preset(name)?)?;
        }
    }
    Ok(())
}

/// Seed precedence: flag, then `SPIKETIM_SEED`, then the config file.
pub fn resolve_seed(flag: Option<u64>, config: u64) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(config),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String], seed: Option<u64>) -> anyhow::Result<Self> {
        let mut root: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        expand_preset(&mut root)?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        expand_preset(&mut root)?;
        let mut cfg: RunConfig = serde_json::from_value(root).context("invalid config")?;
        cfg.training.seed = resolve_seed(seed, cfg.training.seed)?;
        if let Some(a) = cfg.training.alpha {
            cfg.model.tim.alpha = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        Self::parse(&text, overrides, seed).with_context(|| format!("config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.training.core().validate()?;
        let d = &self.data;
        match (&d.synthetic, &d.train) {
            (Some(_), Some(_)) => bail!("data: set either synthetic or train, not both"),
            (None, None) => bail!("data: one of synthetic or train is required"),
            (Some(s), None) => {
                s.validate()?;
                if d.val.is_some() {
                    bail!("data.val cannot be combined with synthetic data");
                }
                if s.num_classes != self.model.num_classes {
                    bail!(
                        "data.synthetic has {} classes but the model has {}",
                        s.num_classes,
                        self.model.num_classes
                    );
                }
            }
            (None, Some(_)) => {}
        }
        for p in d.train.iter().chain(&d.val) {
            if !p.exists() {
                bail!("data path {} does not exist", p.display());
            }
        }
        Ok(())
    }

    /// Train and validation sets binned to the model geometry.
    pub fn datasets<F: Element>(&self) -> anyhow::Result<(Dataset<F>, Dataset<F>)> {
        let m = &self.model;
        let d = &self.data;
        let bin = |streams: &[EventStream]| {
            Dataset::from_streams(streams, m.time_steps, m.height, m.width, d.accumulate)
        };
        if let Some(spec) = &d.synthetic {
            let all = bin(&synth_temporal_order(spec)?)?;
            return Ok(split(&all, d.split, d.split_seed)?);
        }
        let train = bin(&load_streams(d.train.as_ref().expect("validated"))?)?;
        let out = match &d.val {
            Some(v) => (train, bin(&load_streams(v)?)?),
            None => split(&train, d.split, d.split_seed)?,
        };
        for ds in [&out.0, &out.1] {
            if let Some(l) = ds.labels().into_iter().find(|&l| l >= m.num_classes) {
                bail!("label {l} is out of range for {} classes", m.num_classes);
            }
        }
        Ok(out)
    }
}

fn is_event_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("evs1" | "csv"))
}

/// Reads a file or every event file below a directory, in path order.
pub fn load_streams(path: &Path) -> anyhow::Result<Vec<EventStream>> {
    let mut files = Vec::new();
    if path.is_dir() {
        let mut stack = vec![path.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in
                std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?
            {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if is_event_file(&p) {
                    files.push(p);
                }
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    if files.is_empty() {
        bail!("no .evs1 or .csv files under {}", path.display());
    }
    files
        .iter()
        .map(|f| {
            let mut s = read_events(f).with_context(|| format!("reading {}", f.display()))?;
            if s.label.is_none() {
                s.label = f
                    .parent()
                    .and_then(|d| d.file_name())
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.parse().ok());
            }
            if s.label.is_none() {
                bail!("{} has no label", f.display());
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "model": "micro",
        "training": {"seed": 3, "epochs": 2},
        "data": {"synthetic": {"samples": 12, "time_steps": 3}},
        "output_dir": "out"
    }"#;

    #[test]
    fn presets_and_overrides() {
        let cfg = RunConfig::parse(
            BASE,
            &[
                "model.depth=2".into(),
                "training.alpha=0.0".into(),
                "data.split=[0.5,0.5]".into(),
                "data.split.1=0.5".into(),
            ],
            Some(1),
        )
        .unwrap();
        assert_eq!(cfg.model.depth, 2);
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.model.tim.alpha, 0.0);
        assert_eq!(cfg.data.split[0], 0.5);
        assert_eq!(cfg.training.seed, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(BASE, &["training.epoch=3".into()], None).is_err());
        assert!(RunConfig::parse(BASE, &["model.tim.beta=3".into()], None).is_err());
        assert!(RunConfig::parse(BASE, &["nonsense".into()], None).is_err());
    }

    #[test]
    fn seed_is_required() {
        let text = BASE.replace(r#""seed": 3, "#, "");
        assert!(RunConfig::parse(&text, &[], None).is_err());
    }

    #[test]
    fn string_override_values() {
        let cfg = RunConfig::parse(
            BASE,
            &[
                "model.tim.mode=local_tim".into(),
                "output_dir=elsewhere".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(
            cfg.model.tim.mode,
            spiketim::attention::AttentionMode::LocalTim
        );
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }
}
