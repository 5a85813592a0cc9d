//! Leaky integrate-and-fire dynamics with a triangular surrogate gradient.
//!
//! Per step, with membrane `v` and input `x`:
//!
//! ```text
//! h  = v + (x - v) / tau          charge
//! s  = H(h - v_th)                fire, H(0) = 1
//! v' = h * (1 - s)                hard reset to 0, reset gate detached
//! ```
//!
//! The backward pass replaces `dH/du` by `a - a^2 |u|` on `|u| <= 1/a` and 0 elsewhere.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{custom_grad, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub surrogate_a: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            tau: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_a: 2.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0) {
            return Err(Error::config(format!(
                "lif.tau must exceed 1, got {}",
                self.tau
            )));
        }
        if self.v_reset != 0.0 {
            return Err(Error::config("lif.v_reset is fixed at 0"));
        }
        if !(self.v_threshold > self.v_reset) {
            return Err(Error::config("lif.v_threshold must exceed v_reset"));
        }
        if !(self.surrogate_a > 0.0) {
            return Err(Error::config("lif.surrogate_a must be positive"));
        }
        Ok(())
    }
}

/// Triangular surrogate derivative of the spike function at `u = v - v_th`.
#[inline]
pub fn surrogate_grad(u: f64, a: f64) -> f64 {
    if u.abs() > 1.0 / a {
        0.0
    } else {
        -a * a * u.abs() + a
    }
}

/// Antiderivative of [`surrogate_grad`]: a C¹ ramp from 0 to 1 on `[-1/a, 1/a]`.
#[inline]
pub fn smooth_spike(u: f64, a: f64) -> f64 {
    if u < -1.0 / a {
        0.0
    } else if u <= 0.0 {
        0.5 * (a * u + 1.0).powi(2)
    } else if u <= 1.0 / a {
        1.0 - 0.5 * (1.0 - a * u).powi(2)
    } else {
        1.0
    }
}

enum ResetTrace<F> {
    Off,
    Record(Vec<Tensor<F>>),
    Replay(Vec<Tensor<F>>, usize),
}

/// How neurons fire during one forward pass.
///
/// [`NeuronMode::spiking`] is the real network. [`NeuronMode::smooth_twin`]
/// swaps the Heaviside for [`smooth_spike`], whose exact derivative is the
/// surrogate, and records every reset gate so that finite-difference
/// evaluations can replay them as constants ([`NeuronMode::replay`]). That
/// twin is differentiable in the ordinary sense and is what gradient checks
/// compare autodiff against.
pub struct NeuronMode<F> {
    smooth: bool,
    resets: RefCell<ResetTrace<F>>,
}

impl<F: Element> NeuronMode<F> {
    pub fn spiking() -> Self {
        NeuronMode {
            smooth: false,
            resets: RefCell::new(ResetTrace::Off),
        }
    }

    pub fn smooth_twin() -> Self {
        NeuronMode {
            smooth: true,
            resets: RefCell::new(ResetTrace::Record(Vec::new())),
        }
    }

    pub fn replay(resets: Vec<Tensor<F>>) -> Self {
        NeuronMode {
            smooth: true,
            resets: RefCell::new(ResetTrace::Replay(resets, 0)),
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.smooth
    }

    /// Reset gates recorded so far by a recording twin.
    pub fn recorded(&self) -> Vec<Tensor<F>> {
        match &*self.resets.borrow() {
            ResetTrace::Record(v) => v.clone(),
            _ => Vec::new(),
        }
    }

    fn fire(&self, u: F, a: f64) -> F {
        if self.smooth {
            F::lit(smooth_spike(u.as_f64(), a))
        } else if u >= F::zero() {
            F::one()
        } else {
            F::zero()
        }
    }

    /// The reset gate `1 - s`, or the replayed constant.
    fn reset_gate(&self, spikes: &Tensor<F>) -> Result<Tensor<F>> {
        let gate = match self.next_replay(spikes.shape())? {
            Some(g) => g,
            None => spikes.map(|s| F::one() - s),
        };
        self.record(spikes.shape(), gate.data())?;
        Ok(gate)
    }

    fn next_replay(&self, shape: &[usize]) -> Result<Option<Tensor<F>>> {
        let mut trace = self.resets.borrow_mut();
        let ResetTrace::Replay(log, cursor) = &mut *trace else {
            return Ok(None);
        };
        let gate = log
            .get(*cursor)
            .cloned()
            .ok_or_else(|| Error::contract("reset replay exhausted"))?;
        if gate.shape() != shape {
            return Err(Error::shape("reset replay", gate.shape(), shape));
        }
        *cursor += 1;
        Ok(Some(gate))
    }

    fn record(&self, shape: &[usize], gates: &[F]) -> Result<()> {
        if let ResetTrace::Record(log) = &mut *self.resets.borrow_mut() {
            log.push(Tensor::from_vec(shape, gates.to_vec())?);
        }
        Ok(())
    }
}

/// Spike function `H(v - v_th)` with the surrogate backward.
pub fn spike<'t, F: Element>(
    v: Var<'t, F>,
    cfg: &LifConfig,
    mode: &NeuronMode<F>,
) -> Result<Var<'t, F>> {
    let (th, a) = (F::lit(cfg.v_threshold), cfg.surrogate_a);
    custom_grad(
        "spike",
        &[v],
        |x| Ok(x[0].map(|h| mode.fire(h - th, a))),
        move |x, _, g| {
            let g = x[0]
                .zip(g, "spike_backward", |h, g| {
                    g * F::lit(surrogate_grad((h - th).as_f64(), a))
                })
                .expect("same shape");
            vec![g]
        },
    )
}

/// Membrane potential of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LifState<'t, F: Element> {
    pub v: Var<'t, F>,
}

/// One LIF step. A missing state is the zero membrane.
pub fn lif_step<'t, F: Element>(
    state: Option<&LifState<'t, F>>,
    x: Var<'t, F>,
    cfg: &LifConfig,
    mode: &NeuronMode<F>,
) -> Result<(Var<'t, F>, LifState<'t, F>)> {
    let v = match state {
        Some(s) => {
            if s.v.shape() != x.shape() {
                return Err(Error::shape("lif_step", &s.v.shape(), &x.shape()));
            }
            s.v
        }
        None => x.tape().constant(Tensor::zeros(&x.shape())),
    };
    let inv_tau = F::lit(1.0 / cfg.tau);
    let h = v.add(x.sub(v)?.scale(inv_tau))?;
    let s = spike(h, cfg, mode)?;
    let gate = mode.reset_gate(&s.value())?;
    let v_next = h.mul(x.tape().constant(gate))?;
    Ok((s, LifState { v: v_next }))
}

/// Folds [`lif_step`] over a sequence from the zero membrane.
pub fn lif_forward<'t, F: Element>(
    xs: &[Var<'t, F>],
    cfg: &LifConfig,
    mode: &NeuronMode<F>,
) -> Result<Vec<Var<'t, F>>> {
    if xs.is_empty() {
        return Err(Error::contract("lif_forward over an empty sequence"));
    }
    let mut state: Option<LifState<'t, F>> = None;
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let (s, next) = lif_step(state.as_ref(), x, cfg, mode)?;
        out.push(s);
        state = Some(next);
    }
    Ok(out)
}

/// Fused multi-step LIF over axis 0 of `x` (`[T, ...]`), fresh zero membrane.
///
/// Same arithmetic as folding [`lif_step`], recorded as a single node whose
/// backward runs the membrane recurrence in reverse.
pub fn lif_multistep<'t, F: Element>(
    x: Var<'t, F>,
    cfg: &LifConfig,
    mode: &NeuronMode<F>,
) -> Result<Var<'t, F>> {
    let shape = x.shape();
    let steps = *shape
        .first()
        .ok_or_else(|| Error::contract("lif_multistep needs a leading time axis"))?;
    if steps == 0 {
        return Err(Error::contract("lif_multistep over zero steps"));
    }
    let xv = x.value();
    let per = xv.numel() / steps;
    let inv_tau = F::lit(1.0 / cfg.tau);
    let (th, a) = (F::lit(cfg.v_threshold), cfg.surrogate_a);
    let replayed = mode.next_replay(&shape)?;
    let mut h_all = vec![F::zero(); xv.numel()];
    let mut s_all = vec![F::zero(); xv.numel()];
    let mut gates = vec![F::zero(); xv.numel()];
    let mut v = vec![F::zero(); per];
    for t in 0..steps {
        for (i, &xi) in xv.data()[t * per..(t + 1) * per].iter().enumerate() {
            let k = t * per + i;
            let h = v[i] + (xi - v[i]) * inv_tau;
            let s = mode.fire(h - th, a);
            let gate = match &replayed {
                Some(g) => g.data()[k],
                None => F::one() - s,
            };
            h_all[k] = h;
            s_all[k] = s;
            gates[k] = gate;
            v[i] = h * gate;
        }
    }
    mode.record(&shape, &gates)?;
    let out = Tensor::from_vec(&shape, s_all)?;
    Ok(x.tape().push(
        "lif_multistep",
        out,
        &[x],
        Box::new(move |args| {
            let g = args.grad.data();
            let mut gx = vec![F::zero(); g.len()];
            let mut gv = vec![F::zero(); per];
            let keep = F::one() - inv_tau;
            for t in (0..steps).rev() {
                for i in 0..per {
                    let k = t * per + i;
                    let sg = F::lit(surrogate_grad((h_all[k] - th).as_f64(), a));
                    let gh = g[k] * sg + gv[i] * gates[k];
                    gx[k] = gh * inv_tau;
                    gv[i] = gh * keep;
                }
            }
            Ok(vec![Some(Tensor::from_vec(args.inputs[0].shape(), gx)?)])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn cfg() -> LifConfig {
        LifConfig::default()
    }

    fn step_scalar(v: f64, x: f64) -> (f64, f64, f64) {
        let tape = Tape::<f64>::new();
        let mode = NeuronMode::spiking();
        let state = LifState {
            v: tape.constant(Tensor::scalar(v)),
        };
        let xv = tape.constant(Tensor::scalar(x));
        let inv = 1.0 / cfg().tau;
        let pre = v + (x - v) * inv;
        let (s, next) = lif_step(Some(&state), xv, &cfg(), &mode).unwrap();
        (pre, s.value().item(), next.v.value().item())
    }

    #[test]
    fn charge_below_threshold() {
        let (pre, s, post) = step_scalar(0.0, 1.0);
        assert_eq!((pre, s, post), (0.5, 0.0, 0.5));
    }

    #[test]
    fn threshold_equality_fires_and_resets() {
        let (pre, s, post) = step_scalar(1.0, 1.0);
        assert_eq!((pre, s, post), (1.0, 1.0, 0.0));
    }

    #[test]
    fn three_steps_of_half_input() {
        let tape = Tape::<f64>::new();
        let mode = NeuronMode::spiking();
        let x = tape.constant(Tensor::scalar(0.5));
        let mut state = None;
        for _ in 0..3 {
            let (_, next) = lif_step(state.as_ref(), x, &cfg(), &mode).unwrap();
            state = Some(next);
        }
        let v = state.unwrap().v.value().item();
        assert!((v - 0.4375).abs() < 1e-15);
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_grad(0.0, 2.0), 2.0);
        assert_eq!(surrogate_grad(0.6, 2.0), 0.0);
        assert_eq!(surrogate_grad(-0.6, 2.0), 0.0);
        assert_eq!(surrogate_grad(0.25, 2.0), 1.0);
        assert_eq!(surrogate_grad(0.5, 2.0), 0.0);
    }

    #[test]
    fn smooth_spike_is_antiderivative_of_surrogate() {
        let a = 2.0;
        let h = 1e-6;
        for i in -40..=40 {
            let u = i as f64 * 0.0173;
            let fd = (smooth_spike(u + h, a) - smooth_spike(u - h, a)) / (2.0 * h);
            assert!((fd - surrogate_grad(u, a)).abs() < 1e-5, "u={u}");
        }
        assert_eq!(smooth_spike(-0.5, a), 0.0);
        assert_eq!(smooth_spike(0.0, a), 0.5);
        assert_eq!(smooth_spike(0.5, a), 1.0);
    }

    #[test]
    fn spike_forward_and_backward() {
        let tape = Tape::<f64>::new();
        let v = tape.param(Tensor::from_f64(&[4], &[0.5, 1.0, 1.6, 0.4]).unwrap());
        let s = spike(v, &cfg(), &NeuronMode::spiking()).unwrap();
        assert_eq!(s.value().to_f64_vec(), vec![0.0, 1.0, 1.0, 0.0]);
        tape.backward(s.sum()).unwrap();
        assert_eq!(v.grad().unwrap().to_f64_vec(), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(lif_forward::<f64>(&[], &cfg(), &NeuronMode::spiking()).is_err());
    }

    #[test]
    fn state_shape_mismatch_is_rejected() {
        let tape = Tape::<f64>::new();
        let state = LifState {
            v: tape.constant(Tensor::zeros(&[3])),
        };
        let x = tape.constant(Tensor::zeros(&[4]));
        let err = lif_step(Some(&state), x, &cfg(), &NeuronMode::spiking()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(LifConfig::default().validate().is_ok());
        assert!(LifConfig { tau: 1.0, ..cfg() }.validate().is_err());
        assert!(LifConfig {
            v_threshold: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(LifConfig {
            surrogate_a: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }
}
