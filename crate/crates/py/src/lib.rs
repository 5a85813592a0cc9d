//! Python bindings: configs, event streams, datasets, models, training and checks.
//!
//! Tensors cross the boundary as `(flat list, shape)` pairs in row-major order.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use stim::attention::AttentionMode;
use stim::autodiff::{NormMode, Tape};
use stim::checkpoint::Checkpoint;
use stim::data::{split, Dataset as CoreDataset};
use stim::events::{
    bin_to_frames, read_events, write_events, Accumulate, Event, EventStream as CoreStream,
};
use stim::gradcheck::{run as run_gradcheck, GradcheckConfig};
use stim::model::{count_parameters, Model as CoreModel, ModelConfig as CoreConfig};
use stim::neuron::{lif_multistep, LifConfig, NeuronMode};
use stim::synth::{self, SyntheticTaskSpec};
use stim::train::{cosine_lr as core_cosine_lr, Trainer as CoreTrainer, TrainingConfig};
use stim::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NonFinite(m) => PyArithmeticError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for stim::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn flat(t: &Tensor<f32>) -> (Vec<f32>, Vec<usize>) {
    (t.data().to_vec(), t.shape().to_vec())
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct ModelConfig {
    inner: CoreConfig,
}

#[pymethods]
impl ModelConfig {
    /// `paper_scale`, `desk` or `micro`.
    #[new]
    #[pyo3(signature = (preset = "desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "paper_scale" => CoreConfig::paper_scale(),
            "desk" => CoreConfig::desk(),
            "micro" => CoreConfig::micro(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(ModelConfig { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CoreConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().py()?;
        Ok(ModelConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn time_steps(&self) -> usize {
        self.inner.time_steps
    }
    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }
    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim
    }
    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }
    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.tim.mode.to_string()
    }
    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.tim.mode = mode.parse::<AttentionMode>().py()?;
        Ok(())
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.tim.alpha
    }
    #[setter]
    fn set_alpha(&mut self, alpha: f64) -> PyResult<()> {
        let mut next = self.inner;
        next.tim.alpha = alpha;
        next.validate().py()?;
        self.inner = next;
        Ok(())
    }

    fn param_count(&self) -> PyResult<usize> {
        count_parameters(&self.inner).py()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.to_json())
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct EventStream {
    inner: CoreStream,
}

#[pymethods]
impl EventStream {
    /// `events` is a list of `(t, x, y, p)` tuples sorted by `t`.
    #[new]
    #[pyo3(signature = (width, height, events, label = None))]
    fn new(
        width: u16,
        height: u16,
        events: Vec<(u32, u16, u16, u8)>,
        label: Option<i32>,
    ) -> PyResult<Self> {
        let mut inner = CoreStream::new(width, height, label);
        inner.events = events
            .into_iter()
            .map(|(t, x, y, p)| Event { t, x, y, p })
            .collect();
        inner.validate().py()?;
        Ok(EventStream { inner })
    }

    #[getter]
    fn width(&self) -> u16 {
        self.inner.width
    }
    #[getter]
    fn height(&self) -> u16 {
        self.inner.height
    }
    #[getter]
    fn label(&self) -> Option<i32> {
        self.inner.label
    }
    #[getter]
    fn events(&self) -> Vec<(u32, u16, u16, u8)> {
        self.inner
            .events
            .iter()
            .map(|e| (e.t, e.x, e.y, e.p))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.events.len()
    }

    fn __eq__(&self, other: &EventStream) -> bool {
        self.inner == other.inner
    }

    fn to_evs1<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_evs1().py()?))
    }

    #[staticmethod]
    fn from_evs1(data: &[u8]) -> PyResult<Self> {
        Ok(EventStream {
            inner: CoreStream::from_evs1(data).py()?,
        })
    }

    fn to_csv<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_csv().py()?))
    }

    #[staticmethod]
    fn from_csv(data: &[u8]) -> PyResult<Self> {
        Ok(EventStream {
            inner: CoreStream::from_csv(data).py()?,
        })
    }

    /// Reads `.evs1`, or `.csv` by extension.
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(EventStream {
            inner: read_events(path).py()?,
        })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        write_events(path, &self.inner).py()
    }

    /// Frames `[steps, 2, height, width]` as `(values, shape)`.
    #[pyo3(signature = (steps, height, width, binary = false))]
    fn bin(
        &self,
        steps: usize,
        height: usize,
        width: usize,
        binary: bool,
    ) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let acc = if binary {
            Accumulate::Binary
        } else {
            Accumulate::Count
        };
        Ok(flat(
            &bin_to_frames(&self.inner, steps, height, width, acc).py()?,
        ))
    }
}

/// Streams of the two-class temporal-order task; labels alternate 0, 1, 0, ...
#[pyfunction]
#[pyo3(signature = (samples = 1200, seed = 0, time_steps = 10, grid = 8, pattern_events = 12, noise_rate = 4.0))]
fn synth_temporal_order(
    samples: usize,
    seed: u64,
    time_steps: usize,
    grid: usize,
    pattern_events: usize,
    noise_rate: f64,
) -> PyResult<Vec<EventStream>> {
    let spec = SyntheticTaskSpec {
        samples,
        seed,
        time_steps,
        grid,
        pattern_events,
        noise_rate,
        ..Default::default()
    };
    Ok(synth::synth_temporal_order(&spec)
        .py()?
        .into_iter()
        .map(|inner| EventStream { inner })
        .collect())
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset<f32>,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (streams, steps, height, width, binary = false))]
    fn from_streams(
        streams: Vec<EventStream>,
        steps: usize,
        height: usize,
        width: usize,
        binary: bool,
    ) -> PyResult<Self> {
        let streams: Vec<CoreStream> = streams.into_iter().map(|s| s.inner).collect();
        let acc = if binary {
            Accumulate::Binary
        } else {
            Accumulate::Count
        };
        Ok(Dataset {
            inner: CoreDataset::from_streams(&streams, steps, height, width, acc).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    /// Seeded split into `(first, rest)` with `fraction` of the samples first.
    fn split(&self, fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = split(&self.inner, [fraction, 1.0 - fraction], seed).py()?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }

    /// Time-major batch `[T, N, 2, H, W]` plus labels.
    fn batch(&self, indices: Vec<usize>) -> PyResult<((Vec<f32>, Vec<usize>), Vec<usize>)> {
        let (x, labels) = self.inner.batch(&indices).py()?;
        Ok((flat(&x), labels))
    }
}

#[pyclass]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    fn new(config: &ModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Model {
            inner: CoreModel::new(config.inner, seed).py()?,
        })
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.store.params.keys().cloned().collect()
    }

    /// Logits `[N, classes]` for frames `[T, N, 2, H, W]`; `train` uses batch statistics.
    #[pyo3(signature = (frames, shape, train = false))]
    fn logits(
        &mut self,
        frames: Vec<f32>,
        shape: Vec<usize>,
        train: bool,
    ) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let x = Tensor::from_vec(&shape, frames).py()?;
        let norm = if train {
            NormMode::Train
        } else {
            NormMode::Eval
        };
        Ok(flat(&self.inner.logits(&x, norm).py()?))
    }
}

#[pyclass]
struct Trainer {
    inner: CoreTrainer<f32>,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (config, seed, epochs = 50, batch_size = 16, lr0 = 0.005))]
    fn new(
        config: &ModelConfig,
        seed: u64,
        epochs: usize,
        batch_size: usize,
        lr0: f64,
    ) -> PyResult<Self> {
        let tc = TrainingConfig {
            epochs,
            batch_size,
            lr0,
            seed,
            ..Default::default()
        };
        let model = CoreModel::new(config.inner, seed).py()?;
        Ok(Trainer {
            inner: CoreTrainer::new(model, tc).py()?,
        })
    }

    /// Completed epochs.
    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    /// Runs one epoch and returns the mean training loss.
    fn train_epoch(&mut self, data: &Dataset) -> PyResult<f64> {
        if self.inner.finished() {
            return Err(PyValueError::new_err("all configured epochs are done"));
        }
        self.inner.train_epoch(&data.inner).py()
    }

    /// `(accuracy, confusion)`; rows are true classes.
    fn evaluate(&self, data: &Dataset) -> PyResult<(f64, Vec<Vec<u64>>)> {
        let e = self.inner.evaluate(&data.inner).py()?;
        Ok((e.accuracy, e.confusion))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::from_trainer(&self.inner).save(path).py()
    }

    #[staticmethod]
    #[pyo3(signature = (path, epochs = 50, batch_size = 16, lr0 = 0.005))]
    fn load(path: &str, epochs: usize, batch_size: usize, lr0: f64) -> PyResult<Self> {
        let ck = Checkpoint::<f32>::load(path, None).py()?;
        let tc = TrainingConfig {
            epochs,
            batch_size,
            lr0,
            seed: ck.seed,
            ..Default::default()
        };
        Ok(Trainer {
            inner: ck.into_trainer(tc).py()?,
        })
    }

    fn checkpoint_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(
            py,
            &Checkpoint::from_trainer(&self.inner).to_bytes().py()?,
        ))
    }
}

#[pyfunction]
#[pyo3(signature = (epoch, total_epochs, lr0 = 0.005, lr_min = 0.0))]
fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> PyResult<f64> {
    core_cosine_lr(epoch, total_epochs, lr0, lr_min).py()
}

/// Spike trains of LIF neurons driven by `inputs` with a leading time axis.
#[pyfunction]
#[pyo3(signature = (inputs, shape, tau = 2.0, v_threshold = 1.0))]
fn lif(inputs: Vec<f64>, shape: Vec<usize>, tau: f64, v_threshold: f64) -> PyResult<Vec<f64>> {
    let cfg = LifConfig {
        tau,
        v_threshold,
        ..Default::default()
    };
    cfg.validate().py()?;
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&shape, inputs).py()?);
    Ok(lif_multistep(x, &cfg, &NeuronMode::spiking())
        .py()?
        .value()
        .to_f64_vec())
}

#[pyfunction]
#[pyo3(signature = (train, test, iterations = 300))]
fn order_blind_oracle(train: &Dataset, test: &Dataset, iterations: usize) -> PyResult<f64> {
    synth::order_blind_oracle(&train.inner, &test.inner, iterations).py()
}

/// Finite-difference gradient suite on the micro model; returns a report dict.
#[pyfunction]
#[pyo3(signature = (max_coords = None, seed = 0))]
fn gradcheck<'py>(
    py: Python<'py>,
    max_coords: Option<usize>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let report = run_gradcheck(&GradcheckConfig {
        max_coords,
        seed,
        ..Default::default()
    })
    .py()?;
    let out = PyDict::new(py);
    out.set_item("passed", report.passed())?;
    out.set_item("spike_backward_exact", report.spike_backward_exact)?;
    let groups = PyDict::new(py);
    for g in report.groups() {
        let d = PyDict::new(py);
        d.set_item("checks", g.checks)?;
        d.set_item("worst_error", g.worst_error)?;
        d.set_item("worst_path", g.worst_path)?;
        d.set_item("tolerance", g.tolerance)?;
        groups.set_item(g.group.to_string(), d)?;
    }
    out.set_item("groups", groups)?;
    let failures: Vec<String> = report.failures().iter().map(|c| c.path.clone()).collect();
    out.set_item("failures", failures)?;
    out.set_item("seconds", report.seconds)?;
    Ok(out)
}

#[pymodule]
fn spiketim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ModelConfig>()?;
    m.add_class::<EventStream>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(synth_temporal_order, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(lif, m)?)?;
    m.add_function(wrap_pyfunction!(order_blind_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
