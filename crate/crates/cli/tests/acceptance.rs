//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use spiketim::attention::AttentionMode;
use spiketim::autodiff::{NormMode, Tape};
use spiketim::data::{split, Dataset};
use spiketim::events::{bin_to_frames, read_events, Accumulate, EventStream};
use spiketim::model::{Model, ModelConfig};
use spiketim::neuron::{lif_multistep, lif_step, LifConfig, LifState, NeuronMode};
use spiketim::synth::{order_blind_oracle, synth_temporal_order, SyntheticTaskSpec};
use spiketim::train::{Trainer, TrainingConfig};
use spiketim::Tensor;

const SWEEP_EPOCHS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn spiketim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_spiketim"))
        .args(args)
        .env_remove("SPIKETIM_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spiketim")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn desk_config(
    dir: &Path,
    name: &str,
    epochs: usize,
    samples: usize,
    save_every: usize,
) -> PathBuf {
    let cfg = json!({
        "model": "desk",
        "training": {"seed": 0, "epochs": epochs, "save_every": save_every},
        "data": {"synthetic": {"samples": samples}},
        "output_dir": dir.join(format!("{name}_out")),
    });
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn gradient_conformance() -> Outcome {
    let start = Instant::now();
    let o = spiketim(&["gradcheck"]);
    let secs = start.elapsed().as_secs_f64();
    let out = String::from_utf8_lossy(&o.stdout);
    let groups = [
        "tensor ops",
        "LIF surrogate",
        "TIM recurrence",
        "end-to-end",
    ];
    let listed = groups.iter().all(|g| out.lines().any(|l| l.starts_with(g)));
    let exact = out.contains("spike backward exact: true");
    let worst: Vec<String> = out
        .lines()
        .filter(|l| groups.iter().any(|g| l.starts_with(g)))
        .filter_map(|l| {
            l.split("worst rel err ")
                .nth(1)
                .and_then(|r| r.split(' ').next())
        })
        .map(str::to_string)
        .collect();
    outcome(
        o.status.success() && listed && exact && secs < 120.0,
        format!(
            "exit {:?}, worst rel err per group [{}], spike backward exact {exact}, {secs:.1}s",
            o.status.code(),
            worst.join(", ")
        ),
    )
}

fn alpha_zero_equivalence() -> Outcome {
    let cfg = |mode| {
        let mut c = ModelConfig::micro();
        c.tim.mode = mode;
        c.tim.alpha = 0.0;
        c
    };
    let mut base = Model::<f64>::new(cfg(AttentionMode::Baseline), 21).unwrap();
    let mut tim = Model::<f64>::new(cfg(AttentionMode::Tim), 21).unwrap();
    for (k, v) in &base.store.params {
        tim.store.set(k, v.clone()).unwrap();
    }
    let run = |m: &mut Model<f64>, x: &Tensor<f64>| {
        let tape = Tape::new();
        let f = m
            .store
            .bind(&tape, true, NormMode::Train, NeuronMode::spiking());
        let logits = m.net.forward(&f, tape.constant(x.clone())).unwrap();
        let loss = logits.cross_entropy(&[1]).unwrap();
        tape.backward(loss).unwrap();
        ((*logits.value()).clone(), f.grads())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut worst_logit, mut worst_grad) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = Tensor::<f64>::uniform(&[3, 1, 2, 8, 8], 0.0, 4.0, &mut rng).map(f64::floor);
        let (lb, gb) = run(&mut base, &x);
        let (lt, gt) = run(&mut tim, &x);
        worst_logit = worst_logit.max(lb.sub(&lt).unwrap().max_abs());
        for (k, g) in &gb {
            worst_grad = worst_grad.max(g.sub(&gt[k]).unwrap().max_abs());
        }
    }
    outcome(
        worst_logit <= 1e-12 && worst_grad <= 1e-12,
        format!("100 inputs, max |Δlogit| {worst_logit:.1e}, max |Δgrad| {worst_grad:.1e}"),
    )
}

fn lif_analytic() -> Outcome {
    let cfg = LifConfig::default();
    let mode = NeuronMode::spiking();
    let tape = Tape::<f64>::new();
    let xv = 0.8;
    let x = tape.constant(Tensor::scalar(xv));
    let mut state: Option<LifState<f64>> = None;
    let mut worst = 0.0f64;
    let mut silent = true;
    for t in 1..=50 {
        let (sp, next) = lif_step(state.as_ref(), x, &cfg, &mode).unwrap();
        silent &= sp.value().item() == 0.0;
        let expect = xv * (1.0 - (1.0 - 1.0 / cfg.tau).powi(t));
        worst = worst.max(((next.v.value().item() - expect) / expect).abs());
        state = Some(next);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = Tensor::<f64>::uniform(&[50, 64], 0.0, 3.0, &mut rng);
    let spikes = lif_multistep(tape.constant(input.clone()), &cfg, &mode)
        .unwrap()
        .value()
        .to_f64_vec();
    let binary = spikes.iter().all(|&v| v == 0.0 || v == 1.0);
    let xs = input.to_f64_vec();
    let mut v = vec![cfg.v_reset; 64];
    let mut reference = Vec::with_capacity(xs.len());
    for t in 0..50 {
        for j in 0..64 {
            let h = v[j] + (xs[t * 64 + j] - v[j]) / cfg.tau;
            let fired = h >= cfg.v_threshold;
            reference.push(if fired { 1.0 } else { 0.0 });
            v[j] = if fired { 0.0 } else { h };
        }
    }
    let reset_exact = reference == spikes;
    let fired = spikes.iter().filter(|&&v| v == 1.0).count();
    outcome(
        worst <= 1e-6 && silent && binary && reset_exact,
        format!(
            "max rel err {worst:.1e} over T=50, binary {binary}, exact-reset replay matches {reset_exact} ({fired} spikes)"
        ),
    )
}

fn parameter_count() -> Outcome {
    let start = Instant::now();
    let count = |mode: &str| -> u64 {
        let o = spiketim(&["param-count", "--preset", "paper_scale", "--mode", mode]);
        String::from_utf8_lossy(&o.stdout)
            .trim()
            .parse()
            .unwrap_or(0)
    };
    let (tim, local) = (count("tim"), count("local_tim"));
    let rel = (tim as f64 - 2.59e6).abs() / 2.59e6;
    outcome(
        rel <= 0.10 && tim == local,
        format!(
            "tim {tim}, local_tim {local}, {:+.2}% vs 2.59M, {:.1}s",
            100.0 * (tim as f64 / 2.59e6 - 1.0),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn task_split() -> (Dataset<f32>, Dataset<f32>) {
    let streams = synth_temporal_order(&SyntheticTaskSpec::default()).unwrap();
    let ds = Dataset::from_streams(&streams, 10, 8, 8, Accumulate::Count).unwrap();
    split(&ds, [5.0 / 6.0, 1.0 / 6.0], 0).unwrap()
}

fn temporal_capability(dir: &Path) -> Outcome {
    let (train, val) = task_split();
    let oracle = order_blind_oracle(&train, &val, 500).unwrap();

    let start = Instant::now();
    let mut model = ModelConfig::desk();
    model.tim.alpha = 0.5;
    let tc = TrainingConfig {
        epochs: 50,
        seed: 0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(Model::<f32>::new(model, 0).unwrap(), tc).unwrap();
    let mut reached = None;
    let report = trainer
        .fit(&train, &val, |_, m| {
            if m.val_acc >= 0.9 && reached.is_none() {
                reached = Some(m.epoch);
            }
            Ok(reached.is_none())
        })
        .unwrap();
    let tim_secs = start.elapsed().as_secs_f64();
    let best = report.epochs.iter().map(|m| m.val_acc).fold(0.0, f64::max);

    let cfg = desk_config(dir, "modes", SWEEP_EPOCHS, 1200, 0);
    let o = spiketim(&[
        "ablate-alpha",
        "-c",
        s(&cfg),
        "--modes",
        "tim,local_tim",
        "--seeds",
        "0,1,2",
    ]);
    let rows = csv_rows(&dir.join("modes_out/mode_sweep.csv"));
    let correct = |mode: &str| -> Vec<u64> {
        rows.iter()
            .filter(|r| r[0] == mode)
            .map(|r| (r[3].parse::<f64>().unwrap() * val.len() as f64).round() as u64)
            .collect()
    };
    let (tim, local) = (correct("tim"), correct("local_tim"));
    let mean = |c: &[u64]| c.iter().sum::<u64>() as f64 / (c.len() * val.len()) as f64;
    let sweep_ok = o.status.success() && tim.len() == 3 && local.len() == 3;
    let c_pass = sweep_ok && tim.iter().sum::<u64>() >= local.iter().sum::<u64>();
    let a_pass = oracle <= 0.55;
    let b_pass = reached.is_some() && tim_secs < 900.0;
    outcome(
        a_pass && b_pass && c_pass,
        format!(
            "(a) oracle {oracle:.3} [{}]; (b) tim alpha=0.5 reached {best:.3} at epoch {} in {tim_secs:.0}s [{}]; \
             (c) mean val acc over seeds 0-2 at {SWEEP_EPOCHS} epochs: tim {:.4} vs local_tim {:.4} [{}]",
            pf(a_pass),
            reached.map_or("none".into(), |e| e.to_string()),
            pf(b_pass),
            mean(&tim),
            mean(&local),
            pf(c_pass)
        ),
    )
}

fn alpha_sweep(dir: &Path) -> Outcome {
    let cfg = desk_config(dir, "alphas", SWEEP_EPOCHS, 1200, 0);
    let o = spiketim(&[
        "ablate-alpha",
        "-c",
        s(&cfg),
        "--alphas",
        "0,0.2,0.4,0.6,0.8",
    ]);
    if !o.status.success() {
        return outcome(false, format!("ablate-alpha exited {:?}", o.status.code()));
    }
    let rows: Vec<(f64, f64)> = csv_rows(&dir.join("alphas_out/alpha_sweep.csv"))
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
        .collect();
    let base = rows
        .iter()
        .find(|r| r.0 == 0.0)
        .map(|r| r.1)
        .unwrap_or(f64::NAN);
    let pass = rows.len() == 5 && rows.iter().all(|r| r.1 >= base - 0.02 - 1e-9);
    let listing: Vec<String> = rows.iter().map(|(a, v)| format!("{a}:{v:.3}")).collect();
    outcome(
        pass,
        format!(
            "val acc by alpha [{}], floor {:.3}",
            listing.join(" "),
            base - 0.02
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = desk_config(dir, "det", 4, 120, 2);
    let train_into = |out: &str, extra: &[&str]| {
        let o_dir = dir.join(out);
        let over = format!("output_dir={}", s(&o_dir));
        let mut args = vec!["train", "-c", s(&cfg), "--override", &over];
        args.extend_from_slice(extra);
        let o = spiketim(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o_dir
    };
    let a = train_into("a", &[]);
    let b = train_into("b", &[]);
    let resume_from = a.join("epoch_0002.ckpt");
    let c = train_into("c", &["--resume", s(&resume_from)]);
    let no_time = |d: &Path| -> Vec<Vec<String>> {
        csv_rows(&d.join("metrics.csv"))
            .into_iter()
            .map(|mut r| {
                r.truncate(4);
                r
            })
            .collect()
    };
    let ckpt = |d: &Path| std::fs::read(d.join("final.ckpt")).unwrap();
    let reproducible = no_time(&a) == no_time(&b) && ckpt(&a) == ckpt(&b);
    let resumed = ckpt(&c) == ckpt(&a) && no_time(&c)[..] == no_time(&a)[2..];

    let data = dir.join("events");
    let o = spiketim(&[
        "synth-data",
        "--samples",
        "50",
        "--seed",
        "11",
        "--out",
        s(&data),
    ]);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let mut round_trip = o.status.success() && files.len() == 50;
    let mut conserved = true;
    for f in &files {
        let bytes = std::fs::read(f).unwrap();
        let stream = EventStream::from_evs1(&bytes).unwrap();
        round_trip &= stream.to_evs1().unwrap() == bytes && read_events(f).unwrap() == stream;
        let frames: Tensor<f64> = bin_to_frames(&stream, 10, 8, 8, Accumulate::Count).unwrap();
        conserved &= frames.sum() == stream.events.len() as f64;
    }
    outcome(
        reproducible && resumed && round_trip && conserved,
        format!(
            "seeded reruns identical {reproducible}, resume from epoch 2 matches {resumed}, \
             EVS1 byte-exact over {} files {round_trip}, binning conserves counts {conserved}",
            files.len()
        ),
    )
}

fn pf(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let criteria: [(&str, Box<dyn Fn() -> Outcome>); 7] = [
        ("gradient conformance", Box::new(gradient_conformance)),
        ("alpha=0 equivalence", Box::new(alpha_zero_equivalence)),
        ("LIF analytic check", Box::new(lif_analytic)),
        ("parameter count", Box::new(parameter_count)),
        (
            "temporal capability",
            Box::new(|| temporal_capability(dir.path())),
        ),
        ("alpha sweep", Box::new(|| alpha_sweep(dir.path()))),
        (
            "determinism and persistence",
            Box::new(|| determinism(dir.path())),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let r = check();
        failed += !r.pass as usize;
        println!("[{}] criterion {} {name}: {}", pf(r.pass), i + 1, r.detail);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
