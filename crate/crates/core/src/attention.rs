//! Spiking self-attention and the temporal interaction module (TIM).
//!
//! Attention is softmax-free: `A = scale · Q Kᵀ V` per head, with `Q`, `K`, `V`
//! spike tensors. In `tim` mode the query is replaced by a running mix of
//! history and present,
//!
//! ```text
//! Q_tim[0] = Q[0]
//! Q_tim[t] = alpha * f(Q_tim[t-1]) + (1 - alpha) * Q[t]
//! ```
//!
//! where `f` is a learnable depthwise 1-D convolution along the token axis.
//! `local_tim` applies `f` to the query pre-activation of the current step only.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::neuron::{lif_step, LifConfig, LifState};
use crate::nn::{register_raw, Forward, Init, Linear, Norm, Registry};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Plain spiking self-attention.
    Baseline,
    /// Query recurrence across time steps.
    Tim,
    /// Query convolution within the current step only.
    LocalTim,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AttentionMode::Baseline),
            "tim" => Ok(AttentionMode::Tim),
            "local_tim" => Ok(AttentionMode::LocalTim),
            other => Err(Error::config(format!("unknown attention mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionMode::Baseline => "baseline",
            AttentionMode::Tim => "tim",
            AttentionMode::LocalTim => "local_tim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsaConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub scale: f64,
}

impl Default for SsaConfig {
    fn default() -> Self {
        SsaConfig {
            embed_dim: 256,
            num_heads: 16,
            scale: 0.125,
        }
    }
}

impl SsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("attention scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimConfig {
    pub alpha: f64,
    pub kernel_size: usize,
    pub mode: AttentionMode,
    /// Amplitude of the uniform noise added to the delta-initialized kernel.
    pub init_noise: f64,
}

impl Default for TimConfig {
    fn default() -> Self {
        TimConfig {
            alpha: 0.5,
            kernel_size: 3,
            mode: AttentionMode::Tim,
            init_noise: 0.01,
        }
    }
}

impl TimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "tim.alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "tim.kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.init_noise < 0.0 {
            return Err(Error::config("tim.init_noise must be non-negative"));
        }
        Ok(())
    }
}

/// The previous mixed query `Q_tim[t-1]`, absent before the first step.
#[derive(Debug, Clone, Default)]
pub struct TimState<'t, F: Element> {
    q_prev: Option<Var<'t, F>>,
    steps: usize,
    horizon: Option<usize>,
}

impl<'t, F: Element> TimState<'t, F> {
    pub fn new() -> Self {
        TimState {
            q_prev: None,
            steps: 0,
            horizon: None,
        }
    }

    /// A state that refuses to run past `steps` updates without a reset.
    pub fn with_horizon(steps: usize) -> Self {
        TimState {
            horizon: Some(steps),
            ..Self::new()
        }
    }

    pub fn q_prev(&self) -> Option<Var<'t, F>> {
        self.q_prev
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn reset(&mut self) {
        self.q_prev = None;
        self.steps = 0;
    }
}

/// Depthwise 'same' convolution along the token axis of `[.., L, C]`, kernel `[C, k]`.
pub fn token_conv<'t, F: Element>(x: Var<'t, F>, kernel: Var<'t, F>) -> Result<Var<'t, F>> {
    x.transpose_last()?
        .conv1d_depthwise(kernel)?
        .transpose_last()
}

/// One step of the query recurrence; `q_t` is `[.., L, C]`.
pub fn tim_update<'t, F: Element>(
    state: &mut TimState<'t, F>,
    q_t: Var<'t, F>,
    kernel: Var<'t, F>,
    alpha: f64,
) -> Result<Var<'t, F>> {
    if let Some(h) = state.horizon {
        if state.steps >= h {
            return Err(Error::contract(format!(
                "temporal state carried past its {h}-step horizon; reset between samples"
            )));
        }
    }
    let q_tim = match state.q_prev {
        None => q_t,
        Some(prev) => {
            if prev.shape() != q_t.shape() {
                return Err(Error::contract(format!(
                    "query shape drifted from {:?} to {:?} across steps",
                    prev.shape(),
                    q_t.shape()
                )));
            }
            let history = token_conv(prev, kernel)?.scale(F::lit(alpha));
            history.add(q_t.scale(F::lit(1.0 - alpha)))?
        }
    };
    state.q_prev = Some(q_tim);
    state.steps += 1;
    Ok(q_tim)
}

/// Runs the recurrence over axis 0 of `q` (`[T, .., L, C]`) from a fresh state.
pub fn tim_sequence<'t, F: Element>(
    q: Var<'t, F>,
    kernel: Var<'t, F>,
    alpha: f64,
) -> Result<Var<'t, F>> {
    let steps = q.shape()[0];
    let mut state = TimState::with_horizon(steps);
    let mixed = (0..steps)
        .map(|t| tim_update(&mut state, q.select0(t)?, kernel, alpha))
        .collect::<Result<Vec<_>>>()?;
    Var::stack0(&mixed)
}

/// `scale · Q Kᵀ V` per head over `[.., L, C]` inputs, heads split along `C`.
pub fn spike_attention<'t, F: Element>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    heads: usize,
    scale: f64,
) -> Result<Var<'t, F>> {
    let shape = q.shape();
    if shape.len() < 2 || k.shape() != shape || v.shape() != shape {
        return Err(Error::shape("spike_attention", &shape, &k.shape()));
    }
    let (l, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!(
            "{c} channels do not split into {heads} heads"
        )));
    }
    let d = c / heads;
    let n: usize = shape[..shape.len() - 2].iter().product();
    let split = |x: Var<'t, F>| -> Result<Var<'t, F>> {
        x.reshape(&[n, l, heads, d])?.permute(&[0, 2, 1, 3])
    };
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
    let scores = qh.matmul(kh.transpose_last()?)?;
    let mixed = scores.matmul(vh)?.scale(F::lit(scale));
    mixed.permute(&[0, 2, 1, 3])?.reshape(&shape)
}

/// Spiking self-attention sub-block with an optional temporal interaction module.
#[derive(Debug, Clone)]
pub struct SsaBlock {
    pub prefix: String,
    pub ssa: SsaConfig,
    pub tim: TimConfig,
    pub lif: LifConfig,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    q_bn: Norm,
    k_bn: Norm,
    v_bn: Norm,
    proj_bn: Norm,
}

/// Per-step recurrent state of an [`SsaBlock`] driven one step at a time.
#[derive(Debug, Clone, Default)]
pub struct SsaState<'t, F: Element> {
    lif: [Option<LifState<'t, F>>; 5],
    pub tim: TimState<'t, F>,
}

impl<'t, F: Element> SsaState<'t, F> {
    pub fn new() -> Self {
        SsaState {
            lif: [None; 5],
            tim: TimState::new(),
        }
    }

    /// Clears every membrane and the query history.
    pub fn reset(&mut self) {
        self.lif = [None; 5];
        self.tim.reset();
    }
}

impl SsaBlock {
    pub fn new(prefix: impl Into<String>, ssa: SsaConfig, tim: TimConfig, lif: LifConfig) -> Self {
        let prefix = prefix.into();
        let d = ssa.embed_dim;
        let lin = |n: &str, bias| Linear::new(format!("{prefix}.{n}"), d, d, bias);
        let bn = |n: &str| Norm::new(format!("{prefix}.{n}"), d, true);
        SsaBlock {
            q: lin("q", false),
            k: lin("k", false),
            v: lin("v", false),
            proj: lin("proj", true),
            q_bn: bn("q_bn"),
            k_bn: bn("k_bn"),
            v_bn: bn("v_bn"),
            proj_bn: bn("proj_bn"),
            prefix,
            ssa,
            tim,
            lif,
        }
    }

    pub fn kernel_name(&self) -> String {
        format!("{}.tim_kernel", self.prefix)
    }

    pub fn register(&self, reg: &mut Registry) {
        for l in [&self.q, &self.k, &self.v, &self.proj] {
            l.register(reg);
        }
        for n in [&self.q_bn, &self.k_bn, &self.v_bn, &self.proj_bn] {
            n.register(reg);
        }
        if self.tim.mode != AttentionMode::Baseline {
            register_raw(
                reg,
                self.kernel_name(),
                &[self.ssa.embed_dim, self.tim.kernel_size],
                Init::Delta(self.tim.init_noise),
            );
        }
    }

    /// Multi-step forward over `[T, N, L, C]` from a fresh state.
    pub fn forward_seq<'t, F: Element>(
        &self,
        f: &Forward<'t, '_, F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[3] != self.ssa.embed_dim {
            return Err(Error::shape("ssa_forward", &shape, &[self.ssa.embed_dim]));
        }
        let steps = shape[0];
        let gate =
            |lin: &Linear, bn: &Norm| -> Result<Var<'t, F>> { bn.forward(f, lin.forward(f, x)?) };
        let q_pre = gate(&self.q, &self.q_bn)?;
        let q = match self.tim.mode {
            AttentionMode::Baseline => f.lif_seq(q_pre, steps, &self.lif)?,
            AttentionMode::Tim => {
                let q = f.lif_seq(q_pre, steps, &self.lif)?;
                tim_sequence(q, f.param(&self.kernel_name())?, self.tim.alpha)?
            }
            AttentionMode::LocalTim => {
                let mixed = token_conv(q_pre, f.param(&self.kernel_name())?)?;
                f.lif_seq(mixed, steps, &self.lif)?
            }
        };
        let k = f.lif_seq(gate(&self.k, &self.k_bn)?, steps, &self.lif)?;
        let v = f.lif_seq(gate(&self.v, &self.v_bn)?, steps, &self.lif)?;
        let attn = spike_attention(q, k, v, self.ssa.num_heads, self.ssa.scale)?;
        let attn = f.lif_seq(attn, steps, &self.lif)?;
        let out = self.proj_bn.forward(f, self.proj.forward(f, attn)?)?;
        f.lif_seq(out, steps, &self.lif)
    }

    /// One time step over `[N, L, C]`, threading membranes and query history in `state`.
    pub fn step<'t, F: Element>(
        &self,
        f: &Forward<'t, '_, F>,
        state: &mut SsaState<'t, F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.ssa.embed_dim {
            return Err(Error::shape("ssa_step", &shape, &[self.ssa.embed_dim]));
        }
        let fire = |slot: &mut Option<LifState<'t, F>>, input: Var<'t, F>| -> Result<Var<'t, F>> {
            let (s, next) = lif_step(slot.as_ref(), input, &self.lif, &f.neuron)?;
            *slot = Some(next);
            Ok(s)
        };
        let gate =
            |lin: &Linear, bn: &Norm| -> Result<Var<'t, F>> { bn.forward(f, lin.forward(f, x)?) };
        let [q_lif, k_lif, v_lif, attn_lif, out_lif] = &mut state.lif;
        let q_pre = gate(&self.q, &self.q_bn)?;
        let q = match self.tim.mode {
            AttentionMode::Baseline => fire(q_lif, q_pre)?,
            AttentionMode::Tim => {
                let q = fire(q_lif, q_pre)?;
                tim_update(
                    &mut state.tim,
                    q,
                    f.param(&self.kernel_name())?,
                    self.tim.alpha,
                )?
            }
            AttentionMode::LocalTim => {
                fire(q_lif, token_conv(q_pre, f.param(&self.kernel_name())?)?)?
            }
        };
        let k = fire(k_lif, gate(&self.k, &self.k_bn)?)?;
        let v = fire(v_lif, gate(&self.v, &self.v_bn)?)?;
        let attn = spike_attention(q, k, v, self.ssa.num_heads, self.ssa.scale)?;
        let attn = fire(attn_lif, attn)?;
        let out = self.proj_bn.forward(f, self.proj.forward(f, attn)?)?;
        fire(out_lif, out)
    }
}
