//! Central finite-difference conformance suite for the autodiff.
//!
//! Spiking layers are checked on their smooth twin: the Heaviside becomes the
//! antiderivative of the surrogate, and reset gates recorded at the base point
//! are replayed as constants, so autodiff and finite differences see the same
//! differentiable function.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{spike_attention, tim_sequence, token_conv, AttentionMode};
use crate::autodiff::{batch_norm, NormMode, RunningStats, Tape, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::neuron::{lif_multistep, spike, surrogate_grad, LifConfig, NeuronMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    TensorOps,
    LifSurrogate,
    TimRecurrence,
    EndToEnd,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Group::TensorOps => "tensor ops",
            Group::LifSurrogate => "LIF surrogate",
            Group::TimRecurrence => "TIM recurrence",
            Group::EndToEnd => "end-to-end",
        })
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    /// Finite-difference step for plain tensor ops and the TIM recurrence.
    pub op_step: f64,
    /// Step for smooth-twin checks (LIF and end-to-end).
    pub twin_step: f64,
    pub op_tolerance: f64,
    pub e2e_tolerance: f64,
    pub model: ModelConfig,
    pub batch: usize,
    /// Cap on coordinates probed per end-to-end parameter tensor; `None` probes all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            op_step: 1e-3,
            twin_step: 1e-5,
            op_tolerance: 1e-4,
            e2e_tolerance: 1e-3,
            model: ModelConfig::micro(),
            batch: 2,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Norm-wise relative error of one gradient tensor.
#[derive(Debug, Clone)]
pub struct Check {
    pub group: Group,
    pub path: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: Group,
    pub checks: usize,
    pub worst_error: f64,
    pub worst_path: String,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checks: Vec<Check>,
    /// The spike backward equals the surrogate formula bit for bit.
    pub spike_backward_exact: bool,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn groups(&self) -> Vec<GroupReport> {
        [
            Group::TensorOps,
            Group::LifSurrogate,
            Group::TimRecurrence,
            Group::EndToEnd,
        ]
        .into_iter()
        .map(|g| {
            let mine: Vec<&Check> = self.checks.iter().filter(|c| c.group == g).collect();
            let worst = mine
                .iter()
                .copied()
                .max_by(|a, b| a.error.total_cmp(&b.error));
            GroupReport {
                group: g,
                checks: mine.len(),
                worst_error: worst.map_or(0.0, |c| c.error),
                worst_path: worst.map_or_else(String::new, |c| c.path.clone()),
                tolerance: worst.map_or(0.0, |c| c.tolerance),
            }
        })
        .collect()
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn passed(&self) -> bool {
        self.spike_backward_exact && self.failures().is_empty()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in self.groups() {
            writeln!(
                f,
                "{:<15} checks {:>3}  worst rel err {:.3e} (tol {:.0e})  at {}",
                g.group, g.checks, g.worst_error, g.tolerance, g.worst_path
            )?;
        }
        writeln!(f, "spike backward exact: {}", self.spike_backward_exact)?;
        for c in self.failures() {
            writeln!(f, "FAIL {}: {} rel err {:.3e}", c.group, c.path, c.error)?;
        }
        write!(f, "{:.1}s", self.seconds)
    }
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, 1e-6)`; below the floor the comparison is absolute.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

type LossFn =
    dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>], &NeuronMode<f64>) -> Result<Var<'t, f64>>;

/// Autodiff versus central differences for every input of a scalar function.
///
/// With `twin` the function runs on the smooth twin and replays the reset gates
/// recorded during the autodiff pass.
fn compare(
    group: Group,
    name: &str,
    inputs: &[(&str, Tensor<f64>)],
    loss: &LossFn,
    step: f64,
    tolerance: f64,
    twin: bool,
) -> Result<Vec<Check>> {
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let mode = if twin {
        NeuronMode::smooth_twin()
    } else {
        NeuronMode::spiking()
    };
    let out = loss(&tape, &leaves, &mode)?;
    tape.backward(out)?;
    let resets = mode.recorded();
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let mode = if twin {
            NeuronMode::replay(resets.clone())
        } else {
            NeuronMode::spiking()
        };
        Ok(loss(&tape, &vars, &mode)?.value().item())
    };
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut checks = Vec::new();
    for (i, (input, _)) in inputs.iter().enumerate() {
        let analytic = leaves[i]
            .grad()
            .unwrap_or_else(|| Tensor::zeros(&leaves[i].shape()));
        let mut numeric = vec![0.0; analytic.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let up = eval(&values)?;
            values[i].data_mut()[j] = orig - step;
            let down = eval(&values)?;
            values[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        checks.push(Check {
            group,
            path: format!("{name}.{input}"),
            error: relative_error(analytic.data(), &numeric),
            tolerance,
        });
    }
    Ok(checks)
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn t(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::uniform(shape, lo, hi, &mut self.0)
    }

    /// Distinct values on a 0.05 grid, so max-pool ties are far from the step.
    fn distinct(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
        for i in (1..n).rev() {
            v.swap(i, self.0.random_range(0..=i));
        }
        Tensor::from_vec(shape, v).unwrap()
    }
}

/// `sum(out ⊙ w)` with a fixed random weight, so every output element matters.
fn weighted<'t>(out: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(out
        .mul(out.tape().constant(w.reshape(&out.shape())?))?
        .sum())
}

fn op_checks(cfg: &GradcheckConfig, g: &mut Gen) -> Result<Vec<Check>> {
    let (h, tol) = (cfg.op_step, cfg.op_tolerance);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<(&str, Tensor<f64>)>, f: &LossFn| -> Result<()> {
        out.extend(compare(Group::TensorOps, name, &inputs, f, h, tol, false)?);
        Ok(())
    };
    let w34 = g.t(&[12], -1.0, 1.0);
    run(
        "add",
        vec![("a", g.t(&[3, 4], -1.0, 1.0)), ("b", g.t(&[4], -1.0, 1.0))],
        &move |_, v, _| weighted(v[0].add(v[1])?, &w34),
    )?;
    let w24 = g.t(&[24], -1.0, 1.0);
    run(
        "mul",
        vec![
            ("a", g.t(&[2, 3, 4], -1.0, 1.0)),
            ("b", g.t(&[3, 1], -1.0, 1.0)),
        ],
        &move |_, v, _| weighted(v[0].mul(v[1])?.sub(v[0].scale(0.5))?, &w24),
    )?;
    run(
        "sum_of_product",
        vec![
            ("a", g.t(&[3, 3], -1.0, 1.0)),
            ("b", g.t(&[3, 3], -1.0, 1.0)),
        ],
        &|_, v, _| Ok(v[0].mul(v[1])?.sum()),
    )?;
    let w15 = g.t(&[15], -1.0, 1.0);
    run(
        "matmul",
        vec![
            ("a", g.t(&[3, 4], -1.0, 1.0)),
            ("b", g.t(&[4, 5], -1.0, 1.0)),
        ],
        &move |_, v, _| weighted(v[0].matmul(v[1])?, &w15),
    )?;
    let w12 = g.t(&[12], -1.0, 1.0);
    run(
        "matmul_batched",
        vec![
            ("a", g.t(&[2, 3, 4], -1.0, 1.0)),
            ("b", g.t(&[2, 4, 2], -1.0, 1.0)),
        ],
        &move |_, v, _| weighted(v[0].matmul(v[1])?, &w12),
    )?;
    let w_perm = g.t(&[24], -1.0, 1.0);
    run(
        "permute_reshape",
        vec![("x", g.t(&[2, 3, 4], -1.0, 1.0))],
        &move |_, v, _| {
            weighted(
                v[0].permute(&[2, 0, 1])?
                    .reshape(&[4, 6])?
                    .transpose_last()?,
                &w_perm,
            )
        },
    )?;
    let w_stack = g.t(&[12], -1.0, 1.0);
    run(
        "select_stack",
        vec![("x", g.t(&[3, 4], -1.0, 1.0))],
        &move |_, v, _| {
            let rows = [
                v[0].select0(2)?,
                v[0].select0(0)?.scale(2.0),
                v[0].select0(2)?,
            ];
            weighted(Var::stack0(&rows)?, &w_stack)
        },
    )?;
    let w_mean = g.t(&[3], -1.0, 1.0);
    run(
        "mean_axes",
        vec![("x", g.t(&[2, 3, 4], -1.0, 1.0))],
        &move |_, v, _| weighted(v[0].mean_axes(&[0, 2])?, &w_mean),
    )?;
    let w_conv = g.t(&[75], -1.0, 1.0);
    run(
        "conv2d",
        vec![
            ("input", g.t(&[2, 5, 5], -1.0, 1.0)),
            ("kernel", g.t(&[3, 2, 3, 3], -1.0, 1.0)),
        ],
        &move |_, v, _| weighted(v[0].conv2d(v[1], 1, 1)?, &w_conv),
    )?;
    let w_conv_s = g.t(&[2 * 3 * 2 * 2], -1.0, 1.0);
    run(
        "conv2d_strided",
        vec![
            ("input", g.t(&[2, 2, 5, 5], -1.0, 1.0)),
            ("kernel", g.t(&[3, 2, 3, 3], -1.0, 1.0)),
        ],
        &move |_, v, _| weighted(v[0].conv2d(v[1], 2, 0)?, &w_conv_s),
    )?;
    let w_c1 = g.t(&[14], -1.0, 1.0);
    run(
        "conv1d_depthwise",
        vec![
            ("input", g.t(&[2, 7], -1.0, 1.0)),
            ("kernel", g.t(&[2, 3], -1.0, 1.0)),
        ],
        &move |_, v, _| weighted(v[0].conv1d_depthwise(v[1])?, &w_c1),
    )?;
    let w_pool = g.t(&[8], -1.0, 1.0);
    run(
        "maxpool2d",
        vec![("input", g.distinct(&[1, 2, 4, 4]))],
        &move |_, v, _| weighted(v[0].maxpool2d()?, &w_pool),
    )?;
    let w_bn = g.t(&[48], -1.0, 1.0);
    run(
        "batch_norm",
        vec![
            ("input", g.t(&[4, 3, 2, 2], -2.0, 2.0)),
            ("gamma", g.t(&[3], 0.5, 1.5)),
            ("beta", g.t(&[3], -0.5, 0.5)),
        ],
        &move |_, v, _| {
            let mut rs = RunningStats::new(3);
            weighted(
                batch_norm(v[0], v[1], v[2], &mut rs, 1, NormMode::Train)?,
                &w_bn,
            )
        },
    )?;
    let w_bn_last = g.t(&[30], -1.0, 1.0);
    let eval_stats = RunningStats {
        mean: g.t(&[5], -0.5, 0.5),
        var: g.t(&[5], 0.5, 2.0),
    };
    run(
        "batch_norm_eval",
        vec![
            ("input", g.t(&[2, 3, 5], -2.0, 2.0)),
            ("gamma", g.t(&[5], 0.5, 1.5)),
            ("beta", g.t(&[5], -0.5, 0.5)),
        ],
        &move |_, v, _| {
            let mut rs = eval_stats.clone();
            weighted(
                batch_norm(v[0], v[1], v[2], &mut rs, 2, NormMode::Eval)?,
                &w_bn_last,
            )
        },
    )?;
    run(
        "cross_entropy",
        vec![("logits", g.t(&[4, 3], -2.0, 2.0))],
        &|_, v, _| v[0].cross_entropy(&[0, 2, 1, 2]),
    )?;
    let w_att = g.t(&[32], -1.0, 1.0);
    run(
        "spike_attention",
        vec![
            ("q", g.t(&[2, 4, 4], 0.0, 1.0)),
            ("k", g.t(&[2, 4, 4], 0.0, 1.0)),
            ("v", g.t(&[2, 4, 4], 0.0, 1.0)),
        ],
        &move |_, v, _| weighted(spike_attention(v[0], v[1], v[2], 2, 0.125)?, &w_att),
    )?;
    Ok(out)
}

fn spike_backward_exact(g: &mut Gen) -> Result<bool> {
    let lif = LifConfig::default();
    let mut h: Vec<f64> = g.t(&[64], 0.0, 2.0).into_data();
    h.extend([0.5, 1.0, 1.5, 0.75, 1.25, 0.49999, 1.50001]);
    let upstream = g.t(&[h.len()], -2.0, 2.0);
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[h.len()], h.clone())?, true);
    let s = spike(x, &lif, &NeuronMode::spiking())?;
    tape.backward(s.mul(tape.constant(upstream.clone()))?.sum())?;
    let grad = x.grad().unwrap();
    Ok(h.iter()
        .zip(upstream.data())
        .zip(grad.data())
        .all(|((&hi, &gi), &got)| {
            got == gi * surrogate_grad(hi - lif.v_threshold, lif.surrogate_a)
        }))
}

fn lif_checks(cfg: &GradcheckConfig, g: &mut Gen) -> Result<Vec<Check>> {
    let (h, tol) = (cfg.twin_step, cfg.op_tolerance);
    let lif = LifConfig::default();
    let mut out = Vec::new();
    let w = g.t(&[4 * 6], -1.0, 1.0);
    out.extend(compare(
        Group::LifSurrogate,
        "lif_multistep",
        &[("input", g.t(&[4, 6], 0.0, 3.0))],
        &move |_, v, mode| weighted(lif_multistep(v[0], &lif, mode)?, &w),
        h,
        tol,
        true,
    )?);
    let w = g.t(&[3 * 2 * 4], -1.0, 1.0);
    out.extend(compare(
        Group::LifSurrogate,
        "lif_mlp",
        &[
            ("input", g.t(&[3, 2, 5], 0.0, 2.0)),
            ("w1", g.t(&[5, 6], -0.2, 1.0)),
            ("w2", g.t(&[6, 4], -0.2, 1.5)),
        ],
        &move |_, v, mode| {
            let hidden = lif_multistep(v[0].matmul(v[1])?, &lif, mode)?;
            weighted(lif_multistep(hidden.matmul(v[2])?, &lif, mode)?, &w)
        },
        h,
        tol,
        true,
    )?);
    Ok(out)
}

fn tim_checks(cfg: &GradcheckConfig, g: &mut Gen) -> Result<Vec<Check>> {
    let (h, tol) = (cfg.op_step, cfg.op_tolerance);
    let mut out = Vec::new();
    for alpha in [0.0, 0.5, 0.9] {
        let w = g.t(&[4 * 2 * 5 * 3], -1.0, 1.0);
        out.extend(compare(
            Group::TimRecurrence,
            &format!("tim_sequence[alpha={alpha}]"),
            &[
                ("q", g.t(&[4, 2, 5, 3], 0.0, 1.0)),
                ("kernel", g.t(&[3, 3], -0.5, 1.0)),
            ],
            &move |_, v, _| weighted(tim_sequence(v[0], v[1], alpha)?, &w),
            h,
            tol,
            false,
        )?);
    }
    let w = g.t(&[2 * 5 * 3], -1.0, 1.0);
    out.extend(compare(
        Group::TimRecurrence,
        "token_conv",
        &[
            ("x", g.t(&[2, 5, 3], -1.0, 1.0)),
            ("kernel", g.t(&[3, 3], -0.5, 1.0)),
        ],
        &move |_, v, _| weighted(token_conv(v[0], v[1])?, &w),
        h,
        tol,
        false,
    )?);
    Ok(out)
}

fn end_to_end(cfg: &GradcheckConfig, g: &mut Gen) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for mode in [
        AttentionMode::Baseline,
        AttentionMode::Tim,
        AttentionMode::LocalTim,
    ] {
        let mut mc = cfg.model;
        mc.tim.mode = mode;
        mc.tim.init_noise = 0.2;
        let mut model = Model::<f64>::new(mc, cfg.seed)?;
        let shape = [
            mc.time_steps,
            cfg.batch,
            mc.in_channels,
            mc.height,
            mc.width,
        ];
        let frames = g.t(&shape, 0.0, 3.0);
        let labels: Vec<usize> = (0..cfg.batch).map(|i| i % mc.num_classes).collect();

        let tape = Tape::new();
        let twin = NeuronMode::smooth_twin();
        let f = model.store.bind(&tape, true, NormMode::Train, twin);
        let loss = model
            .net
            .forward(&f, tape.constant(frames.clone()))?
            .cross_entropy(&labels)?;
        tape.backward(loss)?;
        let grads = f.grads();
        let resets = f.neuron.recorded();
        drop(f);

        let mut store = model.store.clone();
        let eval = |store: &mut crate::nn::ParamStore<f64>| -> Result<f64> {
            let tape = Tape::new();
            let f = store.bind(
                &tape,
                false,
                NormMode::Train,
                NeuronMode::replay(resets.clone()),
            );
            let l = model
                .net
                .forward(&f, tape.constant(frames.clone()))?
                .cross_entropy(&labels)?;
            let v = l.value().item();
            Ok(v)
        };
        let step = cfg.twin_step;
        for (name, analytic) in &grads {
            let n = analytic.numel();
            let coords: Vec<usize> = match cfg.max_coords {
                Some(m) if m < n => {
                    let mut all: Vec<usize> = (0..n).collect();
                    for i in 0..m {
                        let j = g.0.random_range(i..n);
                        all.swap(i, j);
                    }
                    all.truncate(m);
                    all
                }
                _ => (0..n).collect(),
            };
            let mut a = Vec::with_capacity(coords.len());
            let mut num = Vec::with_capacity(coords.len());
            for &j in &coords {
                let orig = store.params[name].data()[j];
                store.params.get_mut(name).unwrap().data_mut()[j] = orig + step;
                let up = eval(&mut store)?;
                store.params.get_mut(name).unwrap().data_mut()[j] = orig - step;
                let down = eval(&mut store)?;
                store.params.get_mut(name).unwrap().data_mut()[j] = orig;
                a.push(analytic.data()[j]);
                num.push((up - down) / (2.0 * step));
            }
            out.push(Check {
                group: Group::EndToEnd,
                path: format!("{mode}/{name}"),
                error: relative_error(&a, &num),
                tolerance: cfg.e2e_tolerance,
            });
        }
    }
    Ok(out)
}

/// Runs all four groups.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut g = Gen(ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut checks = op_checks(cfg, &mut g)?;
    let exact = spike_backward_exact(&mut g)?;
    checks.extend(lif_checks(cfg, &mut g)?);
    checks.extend(tim_checks(cfg, &mut g)?);
    checks.extend(end_to_end(cfg, &mut g)?);
    Ok(GradcheckReport {
        checks,
        spike_backward_exact: exact,
        seconds: start.elapsed().as_secs_f64(),
    })
}
