use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::tape::Var;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean and (unbiased) variance per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

impl<F: Element> RunningStats<F> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics only.
    Eval,
}

/// Batch normalization over every axis except `channel_axis`.
pub fn batch_norm<'t, F: Element>(
    x: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    stats: &mut RunningStats<F>,
    channel_axis: usize,
    mode: NormMode,
) -> Result<Var<'t, F>> {
    x.check_tape(&gamma)?;
    x.check_tape(&beta)?;
    let xv = x.value();
    let shape = xv.shape().to_vec();
    if channel_axis >= shape.len() {
        return Err(Error::shape("batch_norm", &shape, &[channel_axis]));
    }
    let c = shape[channel_axis];
    for p in [&gamma, &beta] {
        if p.shape() != [c] {
            return Err(Error::shape("batch_norm", &shape, &p.shape()));
        }
    }
    if stats.mean.shape() != [c] || stats.var.shape() != [c] {
        return Err(Error::shape("batch_norm", &shape, stats.mean.shape()));
    }
    let outer: usize = shape[..channel_axis].iter().product();
    let inner: usize = shape[channel_axis + 1..].iter().product();
    let count = outer * inner;
    let eps = F::lit(BN_EPS);
    let (gv, bv) = (gamma.value(), beta.value());
    let xd = xv.data();

    let (mean, var) = match mode {
        NormMode::Train => {
            if count == 0 {
                return Err(Error::contract("batch_norm over an empty batch"));
            }
            let n = F::lit(count as f64);
            let mut mean = vec![F::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    mean[ch] += xd[base..base + inner].iter().copied().sum::<F>();
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![F::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    var[ch] += xd[base..base + inner]
                        .iter()
                        .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<F>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / n);
            let mom = F::lit(BN_MOMENTUM);
            let unbias = if count > 1 {
                n / F::lit((count - 1) as f64)
            } else {
                F::one()
            };
            for ch in 0..c {
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = (F::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut stats.var.data_mut()[ch];
                *rv = (F::one() - mom) * *rv + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        NormMode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); xd.len()];
    let mut out = vec![F::zero(); xd.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let (g, b) = (gv.data()[ch], bv.data()[ch]);
            for i in base..base + inner {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = g * xhat[i] + b;
            }
        }
    }
    let out = Tensor::from_vec(&shape, out)?;
    Ok(x.tape.push(
        "batch_norm",
        out,
        &[x, gamma, beta],
        Box::new(move |args| {
            let g = args.grad.data();
            let gamma = args.inputs[1].data();
            let mut dgamma = vec![F::zero(); c];
            let mut dbeta = vec![F::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        dbeta[ch] += g[i];
                        dgamma[ch] += g[i] * xhat[i];
                    }
                }
            }
            let mut dx = vec![F::zero(); g.len()];
            match mode {
                NormMode::Train => {
                    let n = F::lit(count as f64);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gamma[ch] * inv_std[ch] / n;
                            for i in base..base + inner {
                                dx[i] = k * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                }
                NormMode::Eval => {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gamma[ch] * inv_std[ch];
                            for i in base..base + inner {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                }
            }
            Ok(vec![
                Some(Tensor::from_vec(&shape, dx)?),
                Some(Tensor::from_vec(&[c], dgamma)?),
                Some(Tensor::from_vec(&[c], dbeta)?),
            ])
        }),
    ))
}
