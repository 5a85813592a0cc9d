use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use spiketim::attention::AttentionMode;
use spiketim::autodiff::set_conv_backward_fault;
use spiketim::checkpoint::Checkpoint;
use spiketim::data::Dataset;
use spiketim::events::{write_events, EventStream};
use spiketim::gradcheck::{self, GradcheckConfig};
use spiketim::model::{count_parameters, Model, ModelConfig};
use spiketim::synth::{synth_temporal_order, SyntheticTaskSpec};
use spiketim::train::{evaluate, TrainReport, Trainer};
use spiketim::{Element, Error};

use crate::config::{preset, resolve_seed, Precision, RunConfig};
use crate::{ConfigArgs, Fault, Format, OptionalConfigArgs, Split};

pub const METRICS_HEADER: &str = "epoch,train_loss,val_acc,lr,seconds";

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite(_) => 3,
                Error::Contract(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn load(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    RunConfig::load(&args.config, &args.overrides, args.seed)
}

fn create_output(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| {
        format!(
            "cannot create output directory {}",
            cfg.output_dir.display()
        )
    })
}

pub fn train(args: &ConfigArgs, resume: Option<&Path>, threads: usize) -> anyhow::Result<u8> {
    let cfg = load(args)?;
    match cfg.training.precision {
        Precision::F32 => train_as::<f32>(&cfg, resume, threads),
        Precision::F64 => train_as::<f64>(&cfg, resume, threads),
    }
}

fn train_as<F: Element>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    threads: usize,
) -> anyhow::Result<u8> {
    let (train, val) = cfg.datasets::<F>()?;
    create_output(cfg)?;
    let out = &cfg.output_dir;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut trainer = match resume {
        Some(p) => Checkpoint::<F>::load(p, Some(&cfg.model))
            .with_context(|| format!("loading checkpoint {}", p.display()))?
            .into_trainer(cfg.training.core())?,
        None => Trainer::new(
            Model::new(cfg.model, cfg.training.seed)?,
            cfg.training.core(),
        )?,
    };
    trainer.eval_threads = threads;
    log::info!(
        "{} train / {} val samples, {} parameters, mode {}, alpha {}",
        train.len(),
        val.len(),
        trainer.model.num_parameters(),
        cfg.model.tim.mode,
        cfg.model.tim.alpha
    );
    let metrics_path = out.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    let save_every = cfg.training.save_every;
    let report = trainer.fit(&train, &val, |t, m| {
        writeln!(
            metrics,
            "{},{},{},{},{}",
            m.epoch, m.train_loss, m.val_acc, m.lr, m.seconds
        )?;
        metrics.flush()?;
        if save_every > 0 && t.epoch % save_every == 0 {
            Checkpoint::from_trainer(t).save(out.join(format!("epoch_{:04}.ckpt", t.epoch)))?;
        }
        Ok(true)
    })?;
    Checkpoint::from_trainer(&trainer).save(out.join("final.ckpt"))?;
    fs::write(
        out.join("confusion.json"),
        serde_json::to_string(&report.confusion)?,
    )?;
    if let Some(last) = report.epochs.last() {
        println!(
            "final val_acc {} after {} epochs",
            last.val_acc, trainer.epoch
        );
    }
    Ok(0)
}

pub fn eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    split: Split,
    threads: usize,
) -> anyhow::Result<u8> {
    let cfg = load(args)?;
    match cfg.training.precision {
        Precision::F32 => eval_as::<f32>(&cfg, checkpoint, split, threads),
        Precision::F64 => eval_as::<f64>(&cfg, checkpoint, split, threads),
    }
}

fn eval_as<F: Element>(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    threads: usize,
) -> anyhow::Result<u8> {
    let ck = Checkpoint::<F>::load(checkpoint, Some(&cfg.model))
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut tc = cfg.training.core();
    tc.seed = ck.seed;
    let trainer = ck.into_trainer(tc)?;
    let (train, val) = cfg.datasets::<F>()?;
    let (name, data) = match split {
        Split::Train => ("train", train),
        Split::Val => ("val", val),
        Split::All => {
            let mut samples = train.samples;
            samples.extend(val.samples);
            ("all", Dataset::new(samples)?)
        }
    };
    let e = evaluate(&trainer.model, &data, cfg.training.batch_size, threads)?;
    let json = serde_json::json!({
        "split": name,
        "samples": data.len(),
        "accuracy": e.accuracy,
        "confusion": e.confusion,
    });
    create_output(cfg)?;
    fs::write(
        cfg.output_dir.join(format!("eval_{name}.json")),
        serde_json::to_string_pretty(&json)?,
    )?;
    println!("{json}");
    Ok(0)
}

pub fn gradcheck(
    args: &OptionalConfigArgs,
    max_coords: Option<usize>,
    fault: Option<Fault>,
) -> anyhow::Result<u8> {
    let mut gc = GradcheckConfig {
        max_coords,
        ..Default::default()
    };
    if let Some(path) = &args.config {
        let cfg = RunConfig::load(path, &args.overrides, args.seed)?;
        gc.model.tim = cfg.model.tim;
        gc.model.lif = cfg.model.lif;
        gc.seed = cfg.training.seed;
    } else {
        gc.seed = resolve_seed(args.seed, 0)?;
    }
    gc.model.validate()?;
    let injected = matches!(fault, Some(Fault::ConvBackward));
    set_conv_backward_fault(injected);
    let report = gradcheck::run(&gc);
    set_conv_backward_fault(false);
    let report = report?;
    println!("{report}");
    if report.passed() {
        return Ok(0);
    }
    let mut paths: Vec<&str> = report.failures().iter().map(|c| c.path.as_str()).collect();
    if !report.spike_backward_exact {
        paths.push("spike backward");
    }
    eprintln!("gradcheck failed: {}", paths.join(", "));
    Ok(1)
}

pub fn ablate(
    args: &ConfigArgs,
    alphas: &[f64],
    modes: &[AttentionMode],
    seeds: &[u64],
    threads: usize,
) -> anyhow::Result<u8> {
    let cfg = load(args)?;
    match cfg.training.precision {
        Precision::F32 => ablate_as::<f32>(&cfg, alphas, modes, seeds, threads),
        Precision::F64 => ablate_as::<f64>(&cfg, alphas, modes, seeds, threads),
    }
}

fn dedup<T: PartialEq + Copy + std::fmt::Display>(what: &str, items: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for &x in items {
        if out.contains(&x) {
            log::warn!("duplicate {what} {x} ignored");
        } else {
            out.push(x);
        }
    }
    out
}

fn run_once<F: Element>(
    model: ModelConfig,
    cfg: &RunConfig,
    seed: u64,
    data: &(Dataset<F>, Dataset<F>),
    threads: usize,
) -> anyhow::Result<TrainReport> {
    let mut tc = cfg.training.core();
    tc.seed = seed;
    let mut t = Trainer::new(Model::new(model, seed)?, tc)?;
    t.eval_threads = threads;
    Ok(t.fit(&data.0, &data.1, |_, _| Ok(true))?)
}

fn final_acc(r: &TrainReport) -> f64 {
    r.epochs.last().map_or(0.0, |m| m.val_acc)
}

fn ablate_as<F: Element>(
    cfg: &RunConfig,
    alphas: &[f64],
    modes: &[AttentionMode],
    seeds: &[u64],
    threads: usize,
) -> anyhow::Result<u8> {
    if alphas.is_empty() && modes.is_empty() {
        bail!("nothing to do: pass --alphas and/or --modes");
    }
    let alphas = dedup("alpha", alphas);
    if !alphas.is_empty() && alphas.len() < 2 {
        bail!("an alpha sweep needs at least two distinct alphas");
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        bail!("alpha {a} is outside [0, 1]");
    }
    let modes = dedup("mode", modes);
    let seeds = if seeds.is_empty() {
        vec![cfg.training.seed]
    } else {
        dedup("seed", seeds)
    };
    let data = cfg.datasets::<F>()?;
    create_output(cfg)?;
    let out = &cfg.output_dir;
    if !alphas.is_empty() {
        if cfg.model.tim.mode != AttentionMode::Tim {
            log::warn!("alpha sweep runs in tim mode regardless of model.tim.mode");
        }
        let mut rows = String::from("alpha,val_acc\n");
        for &alpha in &alphas {
            let mut model = cfg.model;
            model.tim.mode = AttentionMode::Tim;
            model.tim.alpha = alpha;
            let report = run_once(model, cfg, cfg.training.seed, &data, threads)?;
            log::info!("alpha {alpha}: val_acc {}", final_acc(&report));
            rows.push_str(&format!("{alpha},{}\n", final_acc(&report)));
        }
        fs::write(out.join("alpha_sweep.csv"), rows)?;
    }
    if !modes.is_empty() {
        let mut rows = String::from("mode,seed,alpha,val_acc,param_count\n");
        for &mode in &modes {
            let mut model = cfg.model;
            model.tim.mode = mode;
            let params = count_parameters(&model)?;
            for &seed in &seeds {
                let report = run_once(model, cfg, seed, &data, threads)?;
                log::info!("mode {mode} seed {seed}: val_acc {}", final_acc(&report));
                rows.push_str(&format!(
                    "{mode},{seed},{},{},{params}\n",
                    model.tim.alpha,
                    final_acc(&report)
                ));
            }
        }
        fs::write(out.join("mode_sweep.csv"), rows)?;
    }
    Ok(0)
}

pub fn synth_data(
    args: &OptionalConfigArgs,
    out: Option<PathBuf>,
    samples: Option<usize>,
    format: Format,
) -> anyhow::Result<u8> {
    let (mut spec, default_out) = match &args.config {
        Some(path) => {
            let cfg = RunConfig::load(path, &args.overrides, None)?;
            let spec = cfg.data.synthetic.unwrap_or_default();
            (spec, Some(cfg.output_dir.join("synthetic")))
        }
        None => (SyntheticTaskSpec::default(), None),
    };
    spec.seed = resolve_seed(args.seed, spec.seed)?;
    if let Some(n) = samples {
        spec.samples = n;
    }
    let dir = match out.or(default_out) {
        Some(d) => d,
        None => bail!("pass --out or a --config with an output_dir"),
    };
    let streams: Vec<EventStream> = synth_temporal_order(&spec)?;
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let ext = match format {
        Format::Evs1 => "evs1",
        Format::Csv => "csv",
    };
    for (i, s) in streams.iter().enumerate() {
        let path = match format {
            Format::Evs1 => dir.join(format!("sample_{i:05}.{ext}")),
            Format::Csv => {
                let class_dir = dir.join(s.label.unwrap_or_default().to_string());
                fs::create_dir_all(&class_dir)?;
                class_dir.join(format!("sample_{i:05}.{ext}"))
            }
        };
        write_events(&path, s)?;
    }
    println!("wrote {} samples to {}", streams.len(), dir.display());
    Ok(0)
}

pub fn param_count(
    config: Option<&Path>,
    overrides: &[String],
    preset_name: Option<&str>,
    mode: Option<AttentionMode>,
) -> anyhow::Result<u8> {
    let mut model = match (config, preset_name) {
        (Some(path), _) => RunConfig::load(path, overrides, None)?.model,
        (None, name) => preset(name.unwrap_or("paper_scale"))?,
    };
    if let Some(m) = mode {
        model.tim.mode = m;
    }
    println!("{}", count_parameters(&model)?);
    Ok(0)
}
