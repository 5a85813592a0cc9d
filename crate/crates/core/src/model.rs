//! The classifier backbone: spiking patch splitting, encoder blocks, linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, SsaBlock, SsaConfig, TimConfig};
use crate::autodiff::{NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{LifConfig, NeuronMode};
use crate::nn::{Conv2d, Forward, Linear, Norm, ParamStore, Registry};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub time_steps: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub sps_stages: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default = "default_scale")]
    pub attention_scale: f64,
    #[serde(default)]
    pub tim: TimConfig,
    #[serde(default)]
    pub lif: LifConfig,
}

fn default_scale() -> f64 {
    0.125
}

impl ModelConfig {
    /// Spikformer-2-256 geometry at 10 steps, 10 classes, 128×128 event frames.
    pub fn paper_scale() -> Self {
        ModelConfig {
            time_steps: 10,
            in_channels: 2,
            height: 128,
            width: 128,
            sps_stages: 4,
            embed_dim: 256,
            num_heads: 16,
            depth: 2,
            mlp_ratio: 4,
            num_classes: 10,
            attention_scale: 0.125,
            tim: TimConfig::default(),
            lif: LifConfig::default(),
        }
    }

    /// The smallest useful geometry; gradient checks run on it.
    ///
    /// With 16 tokens and 8 channels per head, `QKᵀV` is far smaller than at
    /// paper scale, so the attention scale is raised to 1 to keep the attention
    /// neurons within reach of threshold.
    pub fn micro() -> Self {
        ModelConfig {
            time_steps: 3,
            in_channels: 2,
            height: 8,
            width: 8,
            sps_stages: 1,
            embed_dim: 16,
            num_heads: 2,
            depth: 1,
            mlp_ratio: 2,
            num_classes: 2,
            attention_scale: 1.0,
            tim: TimConfig::default(),
            lif: LifConfig::default(),
        }
    }

    /// Geometry used for the synthetic temporal-order task.
    pub fn desk() -> Self {
        ModelConfig {
            time_steps: 10,
            in_channels: 2,
            height: 8,
            width: 8,
            sps_stages: 1,
            embed_dim: 16,
            num_heads: 2,
            depth: 1,
            mlp_ratio: 4,
            num_classes: 2,
            attention_scale: 1.0,
            tim: TimConfig::default(),
            lif: LifConfig::default(),
        }
    }

    pub fn ssa(&self) -> SsaConfig {
        SsaConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            scale: self.attention_scale,
        }
    }

    /// Channel width of each patch-splitting stage, doubling up to `embed_dim`.
    pub fn sps_channels(&self) -> Vec<usize> {
        (0..self.sps_stages)
            .map(|i| self.embed_dim >> (self.sps_stages - 1 - i))
            .collect()
    }

    /// Spatial token grid after patch splitting.
    pub fn token_grid(&self) -> (usize, usize) {
        (
            self.height >> self.sps_stages,
            self.width >> self.sps_stages,
        )
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config(m));
        if self.time_steps == 0 {
            return err("time_steps must be at least 1".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.depth == 0 || self.mlp_ratio == 0
        {
            return err("in_channels, num_classes, depth and mlp_ratio must be positive".into());
        }
        if self.sps_stages == 0 {
            return err("sps_stages must be at least 1".into());
        }
        let div = 1usize << self.sps_stages;
        if !self.height.is_multiple_of(div)
            || !self.width.is_multiple_of(div)
            || self.height == 0
            || self.width == 0
        {
            return err(format!(
                "input {}x{} not divisible by 2^{} patch-splitting stages",
                self.height, self.width, self.sps_stages
            ));
        }
        if !self.embed_dim.is_multiple_of(1 << (self.sps_stages - 1)) {
            return err(format!(
                "embed_dim {} cannot be halved across {} stages",
                self.embed_dim, self.sps_stages
            ));
        }
        self.ssa().validate()?;
        self.tim.validate()?;
        self.lif.validate()
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attn: SsaBlock,
    fc1: Linear,
    fc1_bn: Norm,
    fc2: Linear,
    fc2_bn: Norm,
}

/// Layer layout of the classifier; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    sps: Vec<(Conv2d, Norm)>,
    pos: (Conv2d, Norm),
    blocks: Vec<EncoderBlock>,
    head: Linear,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let sps = config
            .sps_channels()
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let conv = Conv2d {
                    name: format!("sps.{i}.conv"),
                    c_in,
                    c_out: c,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                };
                c_in = c;
                (conv, Norm::new(format!("sps.{i}.bn"), c, false))
            })
            .collect();
        let d = config.embed_dim;
        let pos = (
            Conv2d {
                name: "sps.pos.conv".into(),
                c_in: d,
                c_out: d,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            Norm::new("sps.pos.bn", d, false),
        );
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|i| EncoderBlock {
                attn: SsaBlock::new(
                    format!("blocks.{i}.attn"),
                    config.ssa(),
                    config.tim,
                    config.lif,
                ),
                fc1: Linear::new(format!("blocks.{i}.mlp.fc1"), d, hidden, true),
                fc1_bn: Norm::new(format!("blocks.{i}.mlp.fc1_bn"), hidden, true),
                fc2: Linear::new(format!("blocks.{i}.mlp.fc2"), hidden, d, true),
                fc2_bn: Norm::new(format!("blocks.{i}.mlp.fc2_bn"), d, true),
            })
            .collect();
        Ok(Network {
            config,
            sps,
            pos,
            blocks,
            head: Linear::new("head", d, config.num_classes, true),
        })
    }

    pub fn registry(&self) -> Registry {
        let mut reg = Registry::default();
        for (conv, bn) in self.sps.iter().chain(std::iter::once(&self.pos)) {
            conv.register(&mut reg);
            bn.register(&mut reg);
        }
        for b in &self.blocks {
            b.attn.register(&mut reg);
            b.fc1.register(&mut reg);
            b.fc1_bn.register(&mut reg);
            b.fc2.register(&mut reg);
            b.fc2_bn.register(&mut reg);
        }
        self.head.register(&mut reg);
        reg
    }

    /// Names of the temporal interaction kernels, one per block (empty in baseline mode).
    pub fn tim_kernels(&self) -> Vec<String> {
        if self.config.tim.mode == AttentionMode::Baseline {
            return vec![];
        }
        self.blocks.iter().map(|b| b.attn.kernel_name()).collect()
    }

    fn check_frames(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        match *shape {
            [t, n, ch, h, w]
                if t == c.time_steps && ch == c.in_channels && h == c.height && w == c.width =>
            {
                Ok(n)
            }
            _ => Err(Error::shape(
                "frames",
                shape,
                &[c.time_steps, 0, c.in_channels, c.height, c.width],
            )),
        }
    }

    /// Patch splitting of `[T, N, 2, H, W]` frames into `[T, N, L, C]` tokens.
    ///
    /// Conv-BN-LIF-pool stages, then a positional Conv-BN-LIF branch added back
    /// onto its input, so tokens take values in {0, 1, 2}.
    pub fn sps_forward<'t, F: Element>(
        &self,
        f: &Forward<'t, '_, F>,
        frames: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let n = self.check_frames(&frames.shape())?;
        let c = &self.config;
        let steps = c.time_steps;
        let mut x = frames.reshape(&[steps * n, c.in_channels, c.height, c.width])?;
        for (conv, bn) in &self.sps {
            let y = bn.forward(f, conv.forward(f, x)?)?;
            x = f.lif_seq(y, steps, &c.lif)?.maxpool2d()?;
        }
        let y = self.pos.1.forward(f, self.pos.0.forward(f, x)?)?;
        let x = x.add(f.lif_seq(y, steps, &c.lif)?)?;
        let l = c.tokens();
        x.reshape(&[steps * n, c.embed_dim, l])?
            .transpose_last()?
            .reshape(&[steps, n, l, c.embed_dim])
    }

    /// Logits `[N, num_classes]` for time-major frames `[T, N, 2, H, W]`.
    ///
    /// Every call starts from zero membranes and an empty query history.
    pub fn forward<'t, F: Element>(
        &self,
        f: &Forward<'t, '_, F>,
        frames: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let steps = self.config.time_steps;
        let lif = &self.config.lif;
        let mut x = self.sps_forward(f, frames)?;
        for b in &self.blocks {
            x = x.add(b.attn.forward_seq(f, x)?)?;
            let h = f.lif_seq(b.fc1_bn.forward(f, b.fc1.forward(f, x)?)?, steps, lif)?;
            let o = f.lif_seq(b.fc2_bn.forward(f, b.fc2.forward(f, h)?)?, steps, lif)?;
            x = x.add(o)?;
        }
        let pooled = x.mean_axes(&[0, 2])?;
        self.head.forward(f, pooled)
    }

    pub fn block_attention(&self, index: usize) -> Option<&SsaBlock> {
        self.blocks.get(index).map(|b| &b.attn)
    }
}

/// Exact number of trainable scalars of a configuration.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(Network::new(*config)?.registry().trainable_count())
}

/// A network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Element> {
    pub net: Network,
    pub store: ParamStore<F>,
}

impl<F: Element> Model<F> {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let net = Network::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::init(&net.registry(), &mut rng);
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    /// Logits without gradient tracking.
    pub fn logits(&mut self, frames: &Tensor<F>, norm: NormMode) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let f = self.store.bind(&tape, false, norm, NeuronMode::spiking());
        let x = tape.constant(frames.clone());
        let out = self.net.forward(&f, x)?;
        let value = (*out.value()).clone();
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sps_channels_double_up_to_embed_dim() {
        assert_eq!(
            ModelConfig::paper_scale().sps_channels(),
            vec![32, 64, 128, 256]
        );
    }

    #[test]
    fn invalid_geometry_is_a_config_error() {
        let mut c = ModelConfig::micro();
        c.height = 12;
        c.sps_stages = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::micro();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tim_and_local_tim_have_equal_counts() {
        let mut c = ModelConfig::paper_scale();
        c.tim.mode = AttentionMode::Tim;
        let tim = count_parameters(&c).unwrap();
        c.tim.mode = AttentionMode::LocalTim;
        assert_eq!(count_parameters(&c).unwrap(), tim);
        c.tim.mode = AttentionMode::Baseline;
        assert_eq!(count_parameters(&c).unwrap(), tim - 2 * 256 * 3);
    }
}
