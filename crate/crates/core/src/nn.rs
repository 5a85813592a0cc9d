//! Parameter storage and the small set of layers the backbone is built from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{batch_norm, NormMode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{lif_multistep, LifConfig, NeuronMode};
use crate::tensor::{numel, Element, Tensor};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound)`.
    Uniform(f64),
    Ones,
    Zeros,
    /// Centre tap 1, other taps 0, plus uniform noise of the given amplitude, per row.
    Delta(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    fn materialize<F: Element>(&self, rng: &mut impl Rng) -> Tensor<F> {
        match self.init {
            Init::Uniform(b) => Tensor::uniform(&self.shape, -b, b, rng),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Delta(noise) => {
                let k = *self.shape.last().unwrap();
                let mut t = if noise > 0.0 {
                    Tensor::uniform(&self.shape, -noise, noise, rng)
                } else {
                    Tensor::zeros(&self.shape)
                };
                for row in t.data_mut().chunks_exact_mut(k) {
                    row[k / 2] += F::one();
                }
                t
            }
        }
    }
}

/// Declares the parameters and normalization buffers of a network.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    pub params: Vec<ParamSpec>,
    /// Batch-norm buffer names with their channel counts.
    pub norms: Vec<(String, usize)>,
}

impl Registry {
    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }
}

/// Named parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    pub params: BTreeMap<String, Tensor<F>>,
    pub stats: BTreeMap<String, RunningStats<F>>,
}

impl<F: Element> ParamStore<F> {
    /// Materializes a registry, drawing parameters in declaration order.
    pub fn init(registry: &Registry, rng: &mut impl Rng) -> Self {
        let params = registry
            .params
            .iter()
            .map(|p| (p.name.clone(), p.materialize(rng)))
            .collect();
        let stats = registry
            .norms
            .iter()
            .map(|(n, c)| (n.clone(), RunningStats::new(*c)))
            .collect();
        ParamStore { params, stats }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: s.mean.cast(),
                            var: s.var.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Records every parameter as a leaf of `tape` for one forward pass.
    pub fn bind<'t, 's>(
        &'s mut self,
        tape: &'t Tape<F>,
        requires_grad: bool,
        norm: NormMode,
        neuron: NeuronMode<F>,
    ) -> Forward<'t, 's, F> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
            .collect();
        Forward {
            tape,
            vars,
            stats: RefCell::new(&mut self.stats),
            norm,
            neuron,
        }
    }
}

/// State of one forward pass: bound parameters, normalization mode and neuron mode.
pub struct Forward<'t, 's, F: Element> {
    pub tape: &'t Tape<F>,
    vars: BTreeMap<String, Var<'t, F>>,
    stats: RefCell<&'s mut BTreeMap<String, RunningStats<F>>>,
    pub norm: NormMode,
    pub neuron: NeuronMode<F>,
}

impl<'t, F: Element> Forward<'t, '_, F> {
    pub fn param(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} is not bound")))
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'t, F> {
        self.tape.constant(value)
    }

    /// Gradients accumulated on every bound parameter.
    pub fn grads(&self) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (k.clone(), g)
            })
            .collect()
    }

    pub(crate) fn norm(&self, layer: &Norm, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let gamma = self.param(&format!("{}.gamma", layer.name))?;
        let beta = self.param(&format!("{}.beta", layer.name))?;
        let mut stats = self.stats.borrow_mut();
        let rs = stats
            .get_mut(&layer.name)
            .ok_or_else(|| Error::contract(format!("missing running stats {}", layer.name)))?;
        let axis = if layer.channel_last {
            x.shape().len() - 1
        } else {
            1
        };
        batch_norm(x, gamma, beta, rs, axis, self.norm)
    }

    /// Multi-step LIF over a `[T * rest..]` tensor laid out time-major.
    pub(crate) fn lif_seq(
        &self,
        x: Var<'t, F>,
        steps: usize,
        cfg: &LifConfig,
    ) -> Result<Var<'t, F>> {
        let shape = x.shape();
        let total = numel(&shape);
        if steps == 0 || !total.is_multiple_of(steps) {
            return Err(Error::shape("lif_seq", &shape, &[steps]));
        }
        let s = lif_multistep(x.reshape(&[steps, total / steps])?, cfg, &self.neuron)?;
        s.reshape(&shape)
    }
}

/// `x · W + b` over the last axis, `W` stored `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            d_in,
            d_out,
            bias,
        }
    }

    pub fn register(&self, reg: &mut Registry) {
        let bound = 1.0 / (self.d_in as f64).sqrt();
        reg.params.push(ParamSpec::new(
            format!("{}.weight", self.name),
            &[self.d_in, self.d_out],
            Init::Uniform(bound),
        ));
        if self.bias {
            reg.params.push(ParamSpec::new(
                format!("{}.bias", self.name),
                &[self.d_out],
                Init::Uniform(bound),
            ));
        }
    }

    pub fn forward<'t, F: Element>(
        &self,
        f: &Forward<'t, '_, F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let y = x.matmul(f.param(&format!("{}.weight", self.name))?)?;
        if self.bias {
            y.add(f.param(&format!("{}.bias", self.name))?)
        } else {
            Ok(y)
        }
    }
}

/// Bias-free square-kernel convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn register(&self, reg: &mut Registry) {
        let fan_in = self.c_in * self.kernel * self.kernel;
        reg.params.push(ParamSpec::new(
            format!("{}.weight", self.name),
            &[self.c_out, self.c_in, self.kernel, self.kernel],
            Init::Uniform(1.0 / (fan_in as f64).sqrt()),
        ));
    }

    pub fn forward<'t, F: Element>(
        &self,
        f: &Forward<'t, '_, F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        x.conv2d(
            f.param(&format!("{}.weight", self.name))?,
            self.stride,
            self.padding,
        )
    }
}

/// Batch normalization; channel axis 1 or the last axis.
#[derive(Debug, Clone)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub channel_last: bool,
}

impl Norm {
    pub fn new(name: impl Into<String>, channels: usize, channel_last: bool) -> Self {
        Norm {
            name: name.into(),
            channels,
            channel_last,
        }
    }

    pub fn register(&self, reg: &mut Registry) {
        reg.params.push(ParamSpec::new(
            format!("{}.gamma", self.name),
            &[self.channels],
            Init::Ones,
        ));
        reg.params.push(ParamSpec::new(
            format!("{}.beta", self.name),
            &[self.channels],
            Init::Zeros,
        ));
        reg.norms.push((self.name.clone(), self.channels));
    }

    pub fn forward<'t, F: Element>(
        &self,
        f: &Forward<'t, '_, F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        f.norm(self, x)
    }
}

/// A free-standing parameter such as the temporal interaction kernel.
pub(crate) fn register_raw(reg: &mut Registry, name: String, shape: &[usize], init: Init) {
    reg.params.push(ParamSpec::new(name, shape, init));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_with_bias_counts_fifteen() {
        let mut reg = Registry::default();
        Linear::new("fc", 4, 3, true).register(&mut reg);
        assert_eq!(reg.trainable_count(), 15);
    }

    #[test]
    fn delta_init_without_noise_is_exact() {
        let spec = ParamSpec::new("k", &[2, 3], Init::Delta(0.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = spec.materialize(&mut rng);
        assert_eq!(t.to_f64_vec(), vec![0., 1., 0., 0., 1., 0.]);
    }

    #[test]
    fn unknown_parameter_is_a_contract_error() {
        let mut store = ParamStore::<f64>::init(
            &Registry::default(),
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        );
        assert!(store.set("nope", Tensor::zeros(&[1])).is_err());
        let tape = Tape::new();
        let f = store.bind(&tape, false, NormMode::Eval, NeuronMode::spiking());
        assert!(f.param("nope").is_err());
    }
}
