use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spiketim"));
    c.env_remove("SPIKETIM_SEED").env("RUST_LOG", "warn");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("spawn spiketim")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn micro_config(out: &Path, epochs: usize) -> Value {
    json!({
        "model": "micro",
        "training": {"seed": 3, "epochs": epochs, "batch_size": 4},
        "data": {"synthetic": {"samples": 16, "time_steps": 3}},
        "output_dir": out,
    })
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expect: [(&str, &[&str]); 6] = [
        (
            "train",
            &["--config", "--override", "--seed", "--resume", "--threads"],
        ),
        (
            "eval",
            &["--config", "--checkpoint", "--split", "--threads"],
        ),
        ("gradcheck", &["--config", "--max-coords", "--inject-fault"]),
        (
            "ablate-alpha",
            &["--alphas", "--modes", "--seeds", "--threads"],
        ),
        ("synth-data", &["--out", "--samples", "--format", "--seed"]),
        (
            "param-count",
            &["--config", "--preset", "--mode", "--override"],
        ),
    ];
    for (cmd, flags) in expect {
        let o = run(bin().args([cmd, "--help"]));
        assert!(o.status.success(), "{cmd}");
        let help = String::from_utf8(o.stdout).unwrap();
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let o = run(bin().args(["train", "--config", "/definitely/not/here.json"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.json"));
}

#[test]
fn unknown_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = micro_config(&dir.path().join("out"), 1);
    v["training"]["momentum"] = json!(0.9);
    let cfg = write_config(dir.path(), "bad.json", &v);
    let o = run(bin().args(["train", "-c"]).arg(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("momentum"));

    let cfg = write_config(
        dir.path(),
        "ok.json",
        &micro_config(&dir.path().join("out"), 1),
    );
    let o = run(bin()
        .args(["train", "-c"])
        .arg(&cfg)
        .args(["--override", "model.tim.gamma=1"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn train_writes_artifacts_inside_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut v = micro_config(&out, 3);
    v["training"]["save_every"] = json!(2);
    let cfg = write_config(dir.path(), "run.json", &v);
    let o = run(bin().args(["train", "-c"]).arg(&cfg));
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_acc,lr,seconds");
    assert_eq!(lines.len(), 4);
    let confusion: Vec<Vec<u64>> =
        serde_json::from_str(&std::fs::read_to_string(out.join("confusion.json")).unwrap())
            .unwrap();
    assert_eq!(confusion.iter().flatten().sum::<u64>(), 3);
    let mut files: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "config.json",
            "confusion.json",
            "epoch_0002.ckpt",
            "final.ckpt",
            "metrics.csv"
        ]
    );
    let mut top: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["out", "run.json"]);
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |args: &[&str], env: Option<&str>| -> u64 {
        let out = dir
            .path()
            .join(format!("out{}", args.len() * 10 + env.map_or(0, |_| 1)));
        let cfg = write_config(dir.path(), "run.json", &micro_config(&out, 1));
        let mut c = bin();
        c.args(["train", "-c"]).arg(&cfg).args(args);
        if let Some(e) = env {
            c.env("SPIKETIM_SEED", e);
        }
        let o = run(&mut c);
        assert!(o.status.success(), "{}", stderr(&o));
        let resolved: Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap())
                .unwrap();
        resolved["training"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[], None), 3);
    assert_eq!(seed_of(&[], Some("7")), 7);
    assert_eq!(seed_of(&["--seed", "9"], Some("7")), 9);
    let cfg = write_config(
        dir.path(),
        "run.json",
        &micro_config(&dir.path().join("x"), 1),
    );
    let o = run(bin()
        .args(["train", "-c"])
        .arg(&cfg)
        .env("SPIKETIM_SEED", "abc"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn alpha_override_reaches_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "run.json", &micro_config(&out, 1));
    let o = run(bin()
        .args(["train", "-c"])
        .arg(&cfg)
        .args(["--override", "training.alpha=0.0"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["tim"]["alpha"], json!(0.0));
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        &micro_config(&dir.path().join("out"), 2),
    );
    let o = run(bin()
        .args(["train", "-c"])
        .arg(&cfg)
        .args(["--override", "training.lr0=1e300"]));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("grad norms"));
}

#[test]
fn gradcheck_fault_hook_exits_1_naming_conv() {
    let o = run(bin().args([
        "gradcheck",
        "--max-coords",
        "3",
        "--inject-fault",
        "conv-backward",
    ]));
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let line = err
        .lines()
        .find(|l| l.starts_with("gradcheck failed"))
        .unwrap();
    assert!(line.contains("conv"), "{line}");
}

#[test]
fn synth_data_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = run(bin()
            .args(["synth-data", "--samples", "8", "--seed", "5", "--out"])
            .arg(dir.path().join(name)));
        assert!(o.status.success());
    }
    let o = run(bin()
        .args(["synth-data", "--samples", "8", "--seed", "6", "--out"])
        .arg(dir.path().join("c")));
    assert!(o.status.success());
    let read = |d: &str, i: usize| {
        std::fs::read(dir.path().join(d).join(format!("sample_{i:05}.evs1"))).unwrap()
    };
    for i in 0..8 {
        assert_eq!(read("a", i), read("b", i));
    }
    assert!((0..8).any(|i| read("a", i) != read("c", i)));
}

#[test]
fn synthetic_files_train_like_in_memory_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(bin()
        .args([
            "synth-data",
            "--samples",
            "16",
            "--seed",
            "0",
            "--format",
            "csv",
            "--out",
        ])
        .arg(&data));
    assert!(o.status.success());
    let mut v = micro_config(&dir.path().join("out"), 1);
    v["data"] = json!({"train": data});
    let cfg = write_config(dir.path(), "run.json", &v);
    let o = run(bin().args(["train", "-c"]).arg(&cfg));
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn param_count_prints_exact_integers() {
    let count = |args: &[&str]| -> u64 {
        let o = run(bin().arg("param-count").args(args));
        assert!(o.status.success());
        String::from_utf8(o.stdout).unwrap().trim().parse().unwrap()
    };
    assert_eq!(count(&[]), 2_568_202);
    assert_eq!(count(&["--mode", "local_tim"]), 2_568_202);
    assert_eq!(count(&["--mode", "baseline"]), 2_568_202 - 2 * 768);
}

#[test]
fn ablate_alpha_dedups_and_rejects_single_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "run.json", &micro_config(&out, 1));
    let o = run(bin()
        .args(["ablate-alpha", "-c"])
        .arg(&cfg)
        .args(["--alphas", "0.0,0.5,0.5"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("duplicate alpha 0.5"));
    let csv = std::fs::read_to_string(out.join("alpha_sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,"));
    let o = run(bin()
        .args(["ablate-alpha", "-c"])
        .arg(&cfg)
        .args(["--alphas", "0.5,0.5"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_on_training_data_of_a_converged_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let v = json!({
        "model": "desk",
        "training": {"seed": 0, "epochs": 8},
        "data": {"synthetic": {"samples": 480}},
        "output_dir": out,
    });
    let cfg = write_config(dir.path(), "run.json", &v);
    let o = run(bin().args(["train", "-c"]).arg(&cfg));
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let final_val: f64 = metrics
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    let o = run(bin()
        .args(["eval", "-c"])
        .arg(&cfg)
        .args(["--split", "train", "--checkpoint"])
        .arg(out.join("final.ckpt")));
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert_eq!(report["samples"], json!(400));
    assert!(
        acc >= final_val - 0.01,
        "train acc {acc} vs final val {final_val}"
    );
    assert!(out.join("eval_train.json").exists());
}
