//! AdamW, cosine learning-rate decay, the epoch loop and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::neuron::NeuronMode;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamwConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments keyed like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamwState<F> {
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
    pub step: u64,
}

impl<F: Element> AdamwState<F> {
    pub fn new(params: &BTreeMap<String, Tensor<F>>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
            .collect();
        AdamwState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update of every parameter in `grads`.
pub fn adamw_step<F: Element>(
    params: &mut BTreeMap<String, Tensor<F>>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamwState<F>,
    lr: f64,
    cfg: &AdamwConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::config(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (one_b1, one_b2) = (F::lit(1.0 - cfg.beta1), F::lit(1.0 - cfg.beta2));
    let (bc1, bc2, eps, lr_f, decay) = (
        F::lit(bc1),
        F::lit(bc2),
        F::lit(cfg.eps),
        F::lit(lr),
        F::lit(lr * cfg.weight_decay),
    );
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no moments for {name}")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no moments for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        let update_params = lr != 0.0;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            if update_params {
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let old = *pi;
                *pi = old - lr_f * m_hat / (v_hat.sqrt() + eps) - decay * old;
            }
        }
    }
    Ok(())
}

/// `lr_min + (lr0 - lr_min)(1 + cos(π·epoch/total))/2` for `0 ≤ epoch < total`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::contract(format!(
            "epoch {epoch} outside schedule of {total_epochs}"
        )));
    }
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    Ok(lr_min + (lr0 - lr_min) * (1.0 + phase.cos()) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Linear warmup epochs; 0 disables.
    pub warmup_epochs: usize,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub optimizer: AdamwConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: 16,
            lr0: 0.005,
            lr_min: 0.0,
            seed: 0,
            warmup_epochs: 0,
            grad_clip: None,
            optimizer: AdamwConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::config("need 0 <= lr_min <= lr0"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0
            && o.weight_decay >= 0.0)
        {
            return Err(Error::config(
                "optimizer betas must lie in [0, 1), eps > 0, weight_decay >= 0",
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        let lr = cosine_lr(epoch, self.epochs, self.lr0, self.lr_min)?;
        if epoch < self.warmup_epochs {
            Ok(lr * (epoch + 1) as f64 / self.warmup_epochs as f64)
        } else {
            Ok(lr)
        }
    }
}

/// Sample order of an epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<F: Element>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::contract("evaluation over an empty dataset"));
        }
        let trace: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        Ok(Evaluation {
            accuracy: trace as f64 / total as f64,
            confusion,
        })
    }
}

/// Adds argmax predictions of `[N, C]` logits into `confusion`.
pub fn tally<F: Element>(
    logits: &Tensor<F>,
    labels: &[usize],
    confusion: &mut [Vec<u64>],
) -> Result<()> {
    let classes = confusion.len();
    if logits.shape() != [labels.len(), classes] {
        return Err(Error::shape(
            "tally",
            logits.shape(),
            &[labels.len(), classes],
        ));
    }
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::contract(format!(
                "label {label} outside {classes} classes"
            )));
        }
        confusion[label][argmax(row)] += 1;
    }
    Ok(())
}

/// Eval-mode accuracy and confusion matrix, sharded over `threads` contiguous chunks.
pub fn evaluate<F: Element>(
    model: &Model<F>,
    data: &Dataset<F>,
    batch_size: usize,
    threads: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::contract("evaluation over an empty dataset"));
    }
    let classes = model.config().num_classes;
    let indices: Vec<usize> = (0..data.len()).collect();
    let shard = data.len().div_ceil(threads.max(1));
    let run = |ids: &[usize]| -> Result<Vec<Vec<u64>>> {
        let mut m = model.clone();
        let mut confusion = vec![vec![0u64; classes]; classes];
        for chunk in ids.chunks(batch_size.max(1)) {
            let (x, labels) = data.batch(chunk)?;
            let logits = m.logits(&x, NormMode::Eval)?;
            tally(&logits, &labels, &mut confusion)?;
        }
        Ok(confusion)
    };
    let parts: Vec<Result<Vec<Vec<u64>>>> = if threads <= 1 {
        vec![run(&indices)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(shard)
                .map(|ids| s.spawn(move || run(ids)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::contract("evaluation worker panicked")))
                })
                .collect()
        })
    };
    let mut confusion = vec![vec![0u64; classes]; classes];
    for part in parts {
        for (row, add) in confusion.iter_mut().zip(part?) {
            for (c, a) in row.iter_mut().zip(add) {
                *c += a;
            }
        }
    }
    Evaluation::from_confusion(confusion)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub confusion: Vec<Vec<u64>>,
}

/// Model, optimizer and schedule position; everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct Trainer<F: Element> {
    pub model: Model<F>,
    pub optimizer: AdamwState<F>,
    pub config: TrainingConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub eval_threads: usize,
}

impl<F: Element> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamwState::new(&model.store.params);
        Ok(Trainer {
            model,
            optimizer,
            config,
            epoch: 0,
            eval_threads: 1,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Trains one epoch and returns the sample-weighted mean loss.
    pub fn train_epoch(&mut self, data: &Dataset<F>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::contract("training over an empty dataset"));
        }
        let lr = self.config.lr_at(self.epoch)?;
        let order = epoch_order(data.len(), self.config.seed, self.epoch);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let (x, labels) = data.batch(chunk)?;
            let (loss, mut grads) = self.loss_and_grads(&x, &labels)?;
            let norms: Vec<(String, f64)> = grads
                .iter()
                .map(|(k, g)| (k.clone(), g.l2_norm()))
                .collect();
            if !loss.is_finite() || norms.iter().any(|(_, n)| !n.is_finite()) {
                return Err(non_finite(self.epoch, b, loss, lr, norms));
            }
            if let Some(clip) = self.config.grad_clip {
                let global = norms.iter().map(|(_, n)| n * n).sum::<f64>().sqrt();
                if global > clip {
                    let s = F::lit(clip / global);
                    for g in grads.values_mut() {
                        *g = g.scale(s);
                    }
                }
            }
            adamw_step(
                &mut self.model.store.params,
                &grads,
                &mut self.optimizer,
                lr,
                &self.config.optimizer,
            )?;
            total += loss * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(total / data.len() as f64)
    }

    /// Train-mode loss and parameter gradients of one batch; updates running statistics.
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor<F>,
        labels: &[usize],
    ) -> Result<(f64, BTreeMap<String, Tensor<F>>)> {
        let tape = Tape::new();
        let f = self
            .model
            .store
            .bind(&tape, true, NormMode::Train, NeuronMode::spiking());
        let logits = self.model.net.forward(&f, tape.constant(x.clone()))?;
        let loss = logits.cross_entropy(labels)?;
        let value = loss.value().item().as_f64();
        tape.backward(loss)?;
        Ok((value, f.grads()))
    }

    pub fn evaluate(&self, data: &Dataset<F>) -> Result<Evaluation> {
        evaluate(&self.model, data, self.config.batch_size, self.eval_threads)
    }

    /// Runs the remaining epochs. `on_epoch` sees each epoch's metrics and may stop early by returning `false`.
    pub fn fit(
        &mut self,
        train: &Dataset<F>,
        val: &Dataset<F>,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<bool>,
    ) -> Result<TrainReport> {
        let mut epochs = Vec::new();
        let mut last = None;
        while !self.finished() {
            let start = Instant::now();
            let lr = self.config.lr_at(self.epoch)?;
            let train_loss = self.train_epoch(train)?;
            let eval = self.evaluate(val)?;
            let m = EpochMetrics {
                epoch: self.epoch,
                train_loss,
                val_acc: eval.accuracy,
                lr,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {} loss {:.4} val_acc {:.4} lr {:.5}",
                m.epoch,
                m.train_loss,
                m.val_acc,
                m.lr
            );
            epochs.push(m);
            last = Some(eval);
            if !on_epoch(self, &m)? {
                break;
            }
        }
        let confusion = match last {
            Some(e) => e.confusion,
            None => self.evaluate(val)?.confusion,
        };
        Ok(TrainReport { epochs, confusion })
    }
}

fn non_finite(epoch: usize, batch: usize, loss: f64, lr: f64, norms: Vec<(String, f64)>) -> Error {
    let (mut bad, mut good): (Vec<_>, Vec<_>) =
        norms.into_iter().partition(|(_, n)| !n.is_finite());
    good.sort_by(|a, b| b.1.total_cmp(&a.1));
    bad.extend(good);
    let worst: Vec<String> = bad
        .iter()
        .take(4)
        .map(|(k, n)| format!("{k}={n:.3e}"))
        .collect();
    Error::NonFinite(format!(
        "epoch {epoch} batch {batch}: loss {loss}, lr {lr:.3e}, grad norms [{}]",
        worst.join(", ")
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(p))])
    }

    #[test]
    fn one_step_hand_computation() {
        let mut params = one(1.0);
        let mut st = AdamwState::new(&params);
        adamw_step(
            &mut params,
            &one(1.0),
            &mut st,
            0.1,
            &AdamwConfig::default(),
        )
        .unwrap();
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.001;
        assert!((params["p"].item() - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut params = one(2.0);
        let mut st = AdamwState::new(&params);
        adamw_step(
            &mut params,
            &one(0.0),
            &mut st,
            0.1,
            &AdamwConfig::default(),
        )
        .unwrap();
        assert!((params["p"].item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let c = AdamwConfig::default();
        let mut params = one(0.5);
        let mut st = AdamwState::new(&params);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            adamw_step(&mut params, &one(1.0), &mut st, 0.01, &c).unwrap();
            m = c.beta1 * m + (1.0 - c.beta1);
            v = c.beta2 * v + (1.0 - c.beta2);
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p = p - 0.01 * mh / (vh.sqrt() + c.eps) - 0.01 * c.weight_decay * p;
        }
        assert!((params["p"].item() - p).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut params = one(0.123456789);
        let before = params.clone();
        let mut st = AdamwState::new(&params);
        adamw_step(
            &mut params,
            &one(3.0),
            &mut st,
            0.0,
            &AdamwConfig::default(),
        )
        .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn negative_lr_is_a_config_error() {
        let mut params = one(1.0);
        let mut st = AdamwState::new(&params);
        let r = adamw_step(
            &mut params,
            &one(1.0),
            &mut st,
            -0.1,
            &AdamwConfig::default(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.005, 0.0).unwrap(), 0.005);
        assert!((cosine_lr(50, 100, 0.005, 0.0).unwrap() - 0.0025).abs() < 1e-15);
        assert!(cosine_lr(99, 100, 0.005, 0.0).unwrap() < 2e-6);
        assert!(matches!(
            cosine_lr(100, 100, 0.005, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn confusion_from_hand_logits() {
        let logits = Tensor::<f64>::from_f64(&[2, 2], &[2., 1., 0., 3.]).unwrap();
        let mut c = vec![vec![0; 2]; 2];
        tally(&logits, &[0, 1], &mut c).unwrap();
        let e = Evaluation::from_confusion(c).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.confusion, vec![vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        assert_eq!(argmax(&[1.0f64, 1.0, 0.5]), 0);
        let logits = Tensor::<f64>::zeros(&[4, 2]);
        let mut c = vec![vec![0; 2]; 2];
        tally(&logits, &[0, 1, 0, 1], &mut c).unwrap();
        assert_eq!(Evaluation::from_confusion(c).unwrap().accuracy, 0.5);
    }

    #[test]
    fn empty_evaluation_is_a_contract_error() {
        assert!(Evaluation::from_confusion(vec![vec![0; 2]; 2]).is_err());
    }

    #[test]
    fn epoch_order_is_seeded() {
        assert_eq!(epoch_order(20, 1, 3), epoch_order(20, 1, 3));
        assert_ne!(epoch_order(20, 1, 3), epoch_order(20, 1, 4));
    }
}
