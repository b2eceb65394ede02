//! End-to-end runs of the `ecg-bnn` binary: outputs, determinism and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecg_bnn::bintensor::BinaryTensor;
use ecg_bnn::data::{load_csv, standardize, LabelScheme};
use ecg_bnn::model::{build_default_config, forward_reference, fuse, Mode, ModelInput, TrainedParams};
use ecg_bnn::modelfile::{load_checkpoint, load_model, save_model};
use ecg_bnn::ops::{argmax_head, RealFeatureMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecg-bnn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let mut all = vec!["--json"];
    all.extend_from_slice(args);
    let out = run(&all);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, classes: u32, per_class: u32, length: u32) -> PathBuf {
        let out = self.path(name);
        let (c, n, l) = (classes.to_string(), per_class.to_string(), length.to_string());
        ok_json(&["synth", "--classes", &c, "--per-class", &n, "--length", &l, "--seed", "1", "--out", p(&out)]);
        out
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> (PathBuf, Value) {
        let model = self.path(out);
        let mut args = vec!["train", "--data", p(data), "--out", p(&model), "--seed", "7"];
        args.extend_from_slice(extra);
        (model.clone(), ok_json(&args))
    }
}

#[test]
fn train_is_deterministic_and_writes_both_files() {
    let fx = Fixture::new();
    let data = fx.synth("d.csv", 5, 12, 360);
    let flags = ["--epochs", "3", "--batch-size", "16", "--lr", "0.01"];
    let (m1, r1) = fx.train(&data, "a.becg", &flags);
    let (m2, r2) = fx.train(&data, "b.becg", &flags);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    assert_eq!(r1["history"], r2["history"]);
    assert_eq!(r1["history"].as_array().unwrap().len(), 3);
    assert!(fx.path("a.ckpt").exists());
    assert_eq!(r1["model_bytes"], 4012);
    for key in ["acc", "sen", "spe", "pre", "f1", "per_class", "undefined"] {
        assert!(r1["metrics"].get(key).is_some(), "metrics.{key}");
    }
}

#[test]
fn text_mode_prints_epoch_lines() {
    let fx = Fixture::new();
    let data = fx.synth("d.csv", 5, 4, 360);
    let out = run(&["train", "--data", p(&data), "--epochs", "2", "--out", p(&fx.path("m.becg"))]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("epoch 1/2 loss"));
    assert!(text.contains("rows = true class, columns = predicted class"));
}

#[test]
fn seventeen_class_defaults() {
    let fx = Fixture::new();
    let data = fx.synth("d17.csv", 17, 2, 360);
    fx.train(&data, "m17.becg", &["--classes", "17", "--epochs", "1"]);
    let ck = load_checkpoint(&fx.path("m17.ckpt")).unwrap();
    assert_eq!(ck.train.batch_size, 64);
    assert_eq!(ck.train.learning_rate, 0.002);
    assert_eq!(ck.train.epochs, 1);
    let data5 = fx.synth("d5.csv", 5, 2, 360);
    fx.train(&data5, "m5.becg", &["--epochs", "1"]);
    let ck = load_checkpoint(&fx.path("m5.ckpt")).unwrap();
    assert_eq!((ck.train.batch_size, ck.train.learning_rate), (512, 0.02));
    assert_eq!(ck.net.mode, Mode::Bp);
}

#[test]
fn resume_continues_to_the_same_model() {
    let fx = Fixture::new();
    let data = fx.synth("d.csv", 5, 6, 360);
    let flags = ["--batch-size", "8", "--lr", "0.01"];
    let (full, _) = fx.train(&data, "full.becg", &[&flags[..], &["--epochs", "4"]].concat());
    fx.train(&data, "half.becg", &[&flags[..], &["--epochs", "2"]].concat());
    let ck = fx.path("half.ckpt");
    let (resumed, r) = fx.train(&data, "resumed.becg", &["--epochs", "4", "--resume", p(&ck)]);
    assert_eq!(r["history"].as_array().unwrap().len(), 4);
    assert_eq!(std::fs::read(full).unwrap(), std::fs::read(resumed).unwrap());
}

#[test]
fn fuse_verifies_and_matches_reference() {
    let fx = Fixture::new();
    let data = fx.synth("d.csv", 5, 6, 360);
    let (model, _) = fx.train(&data, "m.becg", &["--epochs", "2", "--batch-size", "8"]);
    let fused = fx.path("fused.becg");
    let r = ok_json(&["fuse", "--checkpoint", p(&fx.path("m.ckpt")), "--out", p(&fused)]);
    assert_eq!(r["channels_verified"], 8 + 16 + 32 + 32 + 64 + 5);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&fused).unwrap());

    let ck = load_checkpoint(&fx.path("m.ckpt")).unwrap();
    let m = load_model(&fused).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let x: Vec<f32> = (0..360).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let want = argmax_head(&forward_reference(&ck.params, &ck.net, &RealFeatureMap::from_segment(&x)).unwrap()).unwrap();
        assert_eq!(m.classify(&x).unwrap().class, want);
    }

    let mut bytes = std::fs::read(fx.path("m.ckpt")).unwrap();
    bytes[40] ^= 0x10;
    let bad = fx.path("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(code(&["fuse", "--checkpoint", p(&bad), "--out", p(&fx.path("x.becg"))]), 2);
}

#[test]
fn eval_reports_and_validates() {
    let fx = Fixture::new();
    let data = fx.synth("d.csv", 5, 20, 360);
    let (model, r) = fx.train(&data, "m.becg", &["--epochs", "25", "--batch-size", "16", "--lr", "0.01"]);
    let train_acc = r["history"].as_array().unwrap().last().unwrap()["train_accuracy"].as_f64().unwrap();
    let e = ok_json(&["eval", "--model", p(&model), "--data", p(&data)]);
    assert_eq!(e["schema"], "ecg-bnn/eval");
    assert_eq!(e["version"], 1);
    assert_eq!(e["n_segments"], 100);
    let acc = e["metrics"]["acc"].as_f64().unwrap();
    assert!(acc >= train_acc - 0.05, "eval {acc} vs train {train_acc}");
    let counts: u64 = e["confusion"]["counts"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(counts, 100);
    for key in ["packed_weight_bits", "threshold_bytes", "total_bytes", "fp32_baseline_bytes", "compression_ratio"] {
        assert!(e["storage"].get(key).is_some(), "storage.{key}");
    }

    let long = fx.synth("long.csv", 5, 1, 400);
    assert_eq!(code(&["eval", "--model", p(&model), "--data", p(&long)]), 1);
    let many = fx.synth("many.csv", 17, 1, 360);
    assert_eq!(code(&["eval", "--model", p(&model), "--data", p(&many)]), 1);
    let packed = fx.path("d.ecgs");
    ok_json(&["synth", "--per-class", "3", "--length", "360", "--out", p(&packed)]);
    assert_eq!(ok_json(&["eval", "--model", p(&model), "--data", p(&packed)])["n_segments"], 15);
}

fn write_lp_model(fx: &Fixture) -> PathBuf {
    let cfg = ecg_bnn::model::build_config(5, Mode::Lp, 360);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = fuse(&TrainedParams::random(&cfg, &mut rng), &cfg).unwrap();
    let path = fx.path("lp.becg");
    save_model(&m, &path).unwrap();
    path
}

#[test]
fn predict_is_deterministic_and_binarizes_in_lp() {
    let fx = Fixture::new();
    let data = fx.synth("d.csv", 5, 3, 360);
    let ds = load_csv(&data, LabelScheme::Aami5, None).unwrap();
    let model = write_lp_model(&fx);
    let m = load_model(&model).unwrap();
    for (i, seg) in ds.segments.iter().enumerate() {
        let one = fx.path(&format!("s{i}.csv"));
        let row: Vec<String> = seg.samples.iter().map(|v| v.to_string()).collect();
        std::fs::write(&one, row.join(",")).unwrap();
        let a = ok_json(&["predict", "--model", p(&model), "--input", p(&one)]);
        let b = ok_json(&["predict", "--model", p(&model), "--input", p(&one)]);
        assert_eq!(a, b);
        let z = standardize(&seg.samples);
        let bits = BinaryTensor::from_fn(1, z.len(), |_, t| z[t] >= 0.0);
        let want = m.forward(ModelInput::Binary(&bits)).unwrap().class;
        assert_eq!(a["class"].as_u64().unwrap() as usize, want);
        assert_eq!(a["logits"].as_array().unwrap().len(), 5);
        assert!(a["name"].is_string());
    }
    let bad = fx.path("bad.csv");
    std::fs::write(&bad, "1,2,x").unwrap();
    assert_eq!(code(&["predict", "--model", p(&model), "--input", p(&bad)]), 2);
    assert_eq!(code(&["predict", "--model", p(&model), "--input", p(&fx.path("missing.csv"))]), 2);
}

#[test]
fn bench_reports_positive_throughput() {
    let fx = Fixture::new();
    let model = write_lp_model(&fx);
    let r = ok_json(&["bench", "--model", p(&model), "--iters", "20", "--compare-reference"]);
    assert!(r["fused_segments_per_second"].as_f64().unwrap() > 0.0);
    assert!(r["reference_segments_per_second"].as_f64().unwrap() > 0.0);
    assert!(r["speedup"].as_f64().unwrap() > 0.0);
    let r = ok_json(&["bench", "--model", p(&model), "--iters", "5"]);
    assert!(r["reference_segments_per_second"].is_null());
    assert_eq!(code(&["bench", "--model", p(&model), "--iters", "0"]), 1);
}

#[test]
fn inspect_default_model() {
    let fx = Fixture::new();
    for (n, file_limit) in [(5usize, 4096u64), (17, 4800 + 73 + 4)] {
        let cfg = build_default_config(n, Mode::Bp);
        let path = fx.path(&format!("m{n}.becg"));
        save_model(&fuse(&TrainedParams::identity(&cfg), &cfg).unwrap(), &path).unwrap();
        let r = ok_json(&["inspect", "--model", p(&path)]);
        let blocks = r["blocks"].as_array().unwrap();
        assert_eq!(blocks.len(), 6);
        assert_eq!(blocks[5]["out_channels"], n);
        assert_eq!(r["gsp_length"], 27);
        assert!(r["storage"]["compression_ratio"].as_f64().unwrap() >= 25.0);
        assert!(r["file_bytes"].as_u64().unwrap() <= file_limit);
        let text = String::from_utf8(run(&["inspect", "--model", p(&path)]).stdout).unwrap();
        assert!(text.contains("compression"));
    }
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    let out = run(&["train", "--classes", "5", "--out", p(&fx.path("m.becg"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--data", "x", "--out", "y", "--mode", "fast"]), 1);
    assert_eq!(code(&["train", "--data", p(&fx.path("nope.csv")), "--out", p(&fx.path("m.becg"))]), 2);
    let garbage = fx.path("g.csv");
    std::fs::write(&garbage, "1,2,3\n1,2\n").unwrap();
    assert_eq!(code(&["train", "--data", p(&garbage), "--out", p(&fx.path("m.becg"))]), 2);
    let data = fx.synth("d.csv", 5, 2, 360);
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&fx.path("m.becg")), "--lr", "-1"]), 1);
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&fx.path("m.becg")), "--input-length", "100"]), 2);
    let junk = fx.path("junk.becg");
    std::fs::write(&junk, b"not a model").unwrap();
    for cmd in ["inspect", "bench"] {
        assert_eq!(code(&[cmd, "--model", p(&junk)]), 2);
    }
    assert_eq!(code(&["eval", "--model", p(&junk), "--data", p(&data)]), 2);
}
