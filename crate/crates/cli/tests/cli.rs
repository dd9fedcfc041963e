use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn avsk() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_avsk"));
    c.env_remove("AVSK_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn avsk")
}

fn ok(cmd: &mut Command) -> String {
    let o = run(cmd);
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn preset(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name);
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// A VSR config small enough to train in well under a second.
fn tiny_config(dir: &Path, steps: u64) -> PathBuf {
    let mut v = preset("vsr-desk.json");
    v["encoder"]["depth"] = 1.into();
    v["encoder"]["model_dim"] = 16.into();
    v["encoder"]["heads"] = 2.into();
    v["frontend"]["out_dim"] = 16.into();
    v["decoder"]["cell_size"] = 16.into();
    v["train"]["steps"] = steps.into();
    v["train"]["batch"] = 2.into();
    v["train"]["warmup_steps"] = 1.into();
    v["data"]["train_examples"] = 8.into();
    v["data"]["test_examples"] = 3.into();
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn train(cfg: &Path, out: &Path) -> Output {
    run(avsk().args(["train", "--quiet", "--config"]).arg(cfg).arg("--out").arg(out))
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 4);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&cfg, &a).status.success());
    assert!(train(&cfg, &b).status.success());
    for f in ["checkpoint.bin", "loss.csv", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "step,lr,loss,grad_norm,batch,masked_clips");
    assert_eq!(loss.lines().count(), 5);
    assert_eq!(&fs::read(a.join("checkpoint.bin")).unwrap()[..8], b"AVSKCKPT");

    let m: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["metrics"]["steps"], 4.0);
    assert_eq!(m["metrics"]["masked_clip_fraction"], 0.0);
    assert!(m["version"].as_str().unwrap().starts_with('v'));

    // The seed override changes the run.
    let c = dir.path().join("c");
    assert!(run(avsk().env("AVSK_SEED", "9").args(["train", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(&c))
        .status
        .success());
    assert_ne!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(c.join("checkpoint.bin")).unwrap());
}

#[test]
fn evaluate_reports_and_enforces_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let out = dir.path().join("run");
    assert!(train(&cfg, &out).status.success());
    let ck = out.join("checkpoint.bin");
    let ev = dir.path().join("eval");
    let stdout = ok(avsk().args(["evaluate", "--mode", "vsr", "--beam", "1", "--checkpoint"]).arg(&ck).arg("--out").arg(&ev));
    assert!(stdout.contains("wer="), "{stdout}");
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3, "{csv}");
    let again = dir.path().join("eval2");
    ok(avsk().args(["evaluate", "--mode", "vsr", "--beam", "1", "--checkpoint"]).arg(&ck).arg("--out").arg(&again));
    assert_eq!(csv, fs::read_to_string(again.join("eval.csv")).unwrap());

    let bad = run(avsk().args(["evaluate", "--mode", "avsr", "--checkpoint"]).arg(&ck));
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("avsr"));
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let out = dir.path().join("run");
    assert!(train(&cfg, &out).status.success());
    let x = dir.path().join("x");
    fs::create_dir_all(&x).unwrap();
    let other = tiny_config(&x, 3);
    let o = run(avsk()
        .args(["train", "--quiet", "--config"])
        .arg(&other)
        .arg("--out")
        .arg(dir.path().join("r"))
        .arg("--resume")
        .arg(out.join("checkpoint.bin")));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_inputs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = preset("vsr-desk.json");
    v["encoder"]["heads"] = 5.into();
    let p = dir.path().join("bad.json");
    fs::write(&p, v.to_string()).unwrap();
    let o = run(avsk().args(["train", "--config"]).arg(&p).arg("--out").arg(dir.path().join("o")));
    assert_eq!(o.status.code(), Some(2));

    v = preset("vsr-desk.json");
    v["surprise"] = 1.into();
    fs::write(&p, v.to_string()).unwrap();
    let o = run(avsk().args(["train", "--config"]).arg(&p).arg("--out").arg(dir.path().join("o")));
    assert_eq!(o.status.code(), Some(2));

    let o = run(avsk().args(["profile", "--trials", "1", "--render-only", "/nonexistent"]));
    assert_ne!(o.status.code(), Some(0));
    let o = run(avsk().args(["profile", "--trials", "1", "--frontends", "lp", "--batches", "1"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn features_generate_is_deterministic_and_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.avsk"), dir.path().join("b.avsk"));
    for p in [&a, &b] {
        ok(avsk().args(["features", "generate", "--examples", "4", "--speakers", "2", "--seed", "3", "--out"]).arg(p));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(&fs::read(&a).unwrap()[..5], b"AVSK1");
    let csv = dir.path().join("f.csv");
    let text = ok(avsk().args(["features", "inspect"]).arg(&a).arg("--features-csv").arg(&csv));
    assert!(!text.is_empty());
    assert!(fs::metadata(&csv).unwrap().len() > 0);
}

#[test]
fn profile_renders_identically_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let stdout = ok(avsk()
        .args([
            "profile", "--frontends", "lp,conformer", "--batches", "1,2", "--trials", "5", "--warmup", "2",
            "--input-size", "8", "--out-dim", "16", "--clip-frames", "4", "--out",
        ])
        .arg(&out));
    assert!(stdout.contains("reported, not asserted"));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(csv.starts_with("arch,batch,wall_ns,relative,peak_bytes,params,bytes_per_param"));
    let again = dir.path().join("q");
    ok(avsk().arg("profile").arg("--render-only").arg(out.join("records.jsonl")).arg("--out").arg(&again));
    for f in ["bench.csv", "bench.txt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let capped = dir.path().join("cap");
    ok(avsk()
        .args([
            "profile", "--frontends", "lp", "--batches", "1,2", "--input-size", "8", "--out-dim", "16",
            "--clip-frames", "4", "--memory-limit", "1000", "--out",
        ])
        .arg(&capped));
    assert!(fs::read_to_string(capped.join("bench.csv")).unwrap().contains("capacity"));
}
