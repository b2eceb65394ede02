//! Acceptance suite: one `[PASS]` or `[FAIL]` line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ecg_bnn::bintensor::{BinaryTensor, BinaryWeights};
use ecg_bnn::data::{split, synth_dataset, EcgSegment, LabelScheme};
use ecg_bnn::fusion::{fuse_channel, BnPrelu, Domain, FusedChannelParams, IntDomain};
use ecg_bnn::metrics::storage_report;
use ecg_bnn::model::{
    build_config, build_default_config, forward_reference_trace, fuse, BlockConfig, Mode, ModelInput,
    NetConfig, TrainedParams,
};
use ecg_bnn::modelfile::{
    decode_checkpoint, decode_model, encode_checkpoint, encode_model, Checkpoint,
};
use ecg_bnn::ops::{binary_conv1d, fused_activation, ConvSpec, RealFeatureMap};
use ecg_bnn::train::{evaluate, forward_backward, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1_TUPLES: usize = 10_000;
const C1_BOUND: i32 = 448;
const C1_EPS: f64 = 1e-5;
const C2_SHAPES: usize = 1_000;
const C3_PAIRS: usize = 1_000;
const C4_EXPECTED: [(usize, usize); 6] = [(1802, 898), (902, 448), (452, 223), (227, 111), (115, 55), (59, 27)];
const C5_BITS: [(usize, u64); 2] = [(5, 28_280), (17, 33_656)];
const C5_FILE_LIMIT_BYTES: [(usize, f64); 2] = [(5, 4.0 * 1024.0), (17, 4.8 * 1024.0)];
const C5_MIN_RATIO: f64 = 25.0;
const C6_STEP: f32 = 1e-3;
const C6_REL_TOL: f64 = 1e-4;
const C6_ABS_FLOOR: f64 = 1e-6;
const C7_MIN_ACCURACY: f64 = 0.90;
const C7_EPOCHS: usize = 100;
const C7_SEED: u64 = 7;
const C10_CHECKPOINT_FLIPS: usize = 2_000;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn signed_log_uniform(rng: &mut impl Rng) -> f64 {
    let m = 10f64.powf(rng.random_range(-3.0..=3.0));
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

fn unfused_sign(x: i32, u: &BnPrelu) -> i8 {
    let x = f64::from(x);
    let y = if x >= 0.0 { x } else { u.slope * x };
    let z = (y - u.mean) / (u.var + u.eps).sqrt() * u.gamma + u.beta;
    if z >= 0.0 {
        1
    } else {
        -1
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let domain = IntDomain::full(C1_BOUND);
    let mut mismatches = 0usize;
    let mut first = None;
    let mut degenerate = [0usize; 4];
    for i in 0..C1_TUPLES {
        let mut u = BnPrelu {
            gamma: signed_log_uniform(&mut rng),
            beta: signed_log_uniform(&mut rng),
            mean: signed_log_uniform(&mut rng),
            var: 10f64.powf(rng.random_range(-3.0..=3.0)),
            eps: C1_EPS,
            slope: signed_log_uniform(&mut rng),
        };
        match i % 10 {
            0 => {
                u.gamma = 0.0;
                degenerate[0] += 1;
            }
            1 => {
                u.slope = 0.0;
                degenerate[1] += 1;
            }
            2 => {
                u.slope = -u.slope.abs();
                degenerate[2] += 1;
            }
            3 => {
                // beta = 0 with an integral mean puts -b/k on an integer.
                u.beta = 0.0;
                u.mean = f64::from(rng.random_range(-C1_BOUND..=C1_BOUND));
                degenerate[3] += 1;
            }
            _ => {}
        }
        let t = match fuse_channel(&u, Domain::Int(domain)).map_err(e2s)? {
            FusedChannelParams::Int(t) => t,
            other => return Err(format!("integer domain gave {other:?}")),
        };
        for x in domain.points() {
            if fused_activation(x, &t) != unfused_sign(x, &u) {
                mismatches += 1;
                first.get_or_insert((u, x));
            }
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatches, first {first:?}"))?;
    Ok(format!(
        "{C1_TUPLES} tuples x {} points, 0 mismatches (gamma=0: {}, a=0: {}, a<0: {}, integral -b/k: {})",
        domain.count(),
        degenerate[0],
        degenerate[1],
        degenerate[2],
        degenerate[3]
    ))
}

fn float_conv_oracle(x: &[f32], cin: usize, len: usize, w: &[f32], cout: usize, spec: &ConvSpec) -> Vec<f32> {
    let k = spec.taps;
    let padded_len = len + 2 * spec.padding;
    let out_len = (padded_len - k) / spec.stride + 1;
    let at = |c: usize, t: usize| {
        if t < spec.padding || t >= spec.padding + len {
            spec.pad_value
        } else {
            x[c * len + t - spec.padding]
        }
    };
    let mut out = vec![0.0f32; cout * out_len];
    for o in 0..cout {
        for t in 0..out_len {
            let mut acc = 0.0f32;
            for c in 0..cin {
                for j in 0..k {
                    acc += w[(o * cin + c) * k + j] * at(c, t * spec.stride + j);
                }
            }
            out[o * out_len + t] = acc;
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut table_shapes = 0;
    for s in 0..C2_SHAPES {
        let table = s % 4 == 0;
        let (cin, cout, spec) = if table {
            table_shapes += 1;
            let cin = [1, 8, 16, 32, 32, 64][rng.random_range(0..6)];
            let stride = if rng.random::<bool>() { 1 } else { 2 };
            (cin, rng.random_range(1..=8), ConvSpec::new(7, stride, 5, 1.0))
        } else {
            let k = rng.random_range(1..=9);
            let pad_value = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (
                rng.random_range(1..=70),
                rng.random_range(1..=6),
                ConvSpec::new(k, rng.random_range(1..=3), rng.random_range(0..=6), pad_value),
            )
        };
        let min_len = spec.taps.saturating_sub(2 * spec.padding).max(1);
        let len = rng.random_range(min_len..=min_len + 150);
        let xs: Vec<i8> = (0..cin * len).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let ws: Vec<i8> = (0..cout * cin * spec.taps).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let x = BinaryTensor::from_signs(cin, len, &xs).map_err(e2s)?;
        let w = BinaryWeights::from_signs(cout, cin, spec.taps, &ws).map_err(e2s)?;
        let got = binary_conv1d(&x, &w, &spec).map_err(e2s)?;
        let xf: Vec<f32> = xs.iter().map(|&v| f32::from(v)).collect();
        let wf: Vec<f32> = ws.iter().map(|&v| f32::from(v)).collect();
        let want = float_conv_oracle(&xf, cin, len, &wf, cout, &spec);
        ensure(got.data().len() == want.len(), || format!("shape {s}: output size differs"))?;
        for (i, (&g, &f)) in got.data().iter().zip(&want).enumerate() {
            ensure(g as f32 == f, || {
                format!("shape {s} ({cin}->{cout}, {spec:?}, len {len}) element {i}: {g} vs {f}")
            })?;
        }
    }
    Ok(format!("{C2_SHAPES} shapes ({table_shapes} with K=7, P=5, pad +1), 0 mismatches"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let configs = [
        build_default_config(5, Mode::Bp),
        build_default_config(5, Mode::Lp),
        build_default_config(17, Mode::Bp),
        build_default_config(17, Mode::Lp),
    ];
    for pair in 0..C3_PAIRS {
        let cfg = &configs[pair % configs.len()];
        let p = TrainedParams::random(cfg, &mut rng);
        let m = fuse(&p, cfg).map_err(e2s)?;
        let samples: Vec<f32> = (0..cfg.input_length).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let x = RealFeatureMap::from_segment(&samples);
        let r = forward_reference_trace(&p, cfg, &x).map_err(e2s)?;
        let f = match cfg.mode {
            Mode::Bp => m.forward_trace(ModelInput::Real(&x)),
            Mode::Lp => m.forward_trace(ModelInput::Binary(&BinaryTensor::from_fn(1, samples.len(), |_, t| {
                samples[t] >= 0.0
            }))),
        }
        .map_err(e2s)?;
        for b in 1..=4 {
            ensure(r.block_outputs[b] == f.block_outputs[b], || {
                format!("pair {pair} ({} {}): block {} map differs", cfg.n_classes, cfg.mode, b + 1)
            })?;
        }
        ensure(r.prediction.class == f.prediction.class, || {
            format!("pair {pair}: class {} vs {}", r.prediction.class, f.prediction.class)
        })?;
    }
    Ok(format!("{C3_PAIRS} pairs over 5/17 classes x BP/LP, classes and block 2-5 maps identical"))
}

fn criterion_4() -> Outcome {
    let cfg = build_default_config(5, Mode::Bp);
    let mut len = cfg.input_length;
    let mut oracle = Vec::new();
    for b in &cfg.blocks {
        let conv = (len + 2 * b.conv.padding - b.conv.taps) / b.conv.stride + 1;
        let pool = (conv - b.pool_size) / b.pool_stride + 1;
        oracle.push((conv, pool));
        len = pool;
    }
    let got = cfg.block_lengths().map_err(e2s)?;
    ensure(oracle == C4_EXPECTED, || format!("recurrence oracle gives {oracle:?}"))?;
    ensure(got == C4_EXPECTED, || format!("pipeline gives {got:?}"))?;
    Ok(format!("{got:?}"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut detail = Vec::new();
    for ((n, bits), (_, limit)) in C5_BITS.iter().zip(C5_FILE_LIMIT_BYTES) {
        let cfg = build_default_config(*n, Mode::Bp);
        let table_bits: u64 = cfg
            .blocks
            .iter()
            .map(|b: &BlockConfig| (b.in_channels * b.out_channels * b.conv.taps) as u64)
            .sum();
        let m = fuse(&TrainedParams::random(&cfg, &mut rng), &cfg).map_err(e2s)?;
        let file = encode_model(&m).map_err(e2s)?.len();
        let r = storage_report(&m);
        ensure(table_bits == *bits && r.packed_weight_bits == *bits, || {
            format!("{n}-class: {} weight bits, table sum {table_bits}, expected {bits}", r.packed_weight_bits)
        })?;
        ensure(file as f64 <= limit, || format!("{n}-class file {file} bytes > {limit}"))?;
        ensure(r.compression_ratio >= C5_MIN_RATIO, || {
            format!("{n}-class compression {:.2}x", r.compression_ratio)
        })?;
        detail.push(format!(
            "{n}-class: {bits} bits, file {file} B (<= {limit} B), {:.2}x",
            r.compression_ratio
        ));
    }
    Ok(detail.join("; "))
}

fn toy_net() -> NetConfig {
    let block = |cin, cout, stride| BlockConfig {
        in_channels: cin,
        out_channels: cout,
        conv: ConvSpec::new(7, stride, 5, 1.0),
        pool_size: 3,
        pool_stride: 2,
    };
    NetConfig {
        blocks: vec![block(1, 4, 2), block(4, 3, 1)],
        n_classes: 3,
        mode: Mode::Bp,
        input_length: 48,
        bp_pad_value: 1.0,
    }
}

fn tensor_mut(p: &mut TrainedParams, block: usize, which: usize) -> &mut Vec<f32> {
    let bp = &mut p.blocks[block];
    match which {
        0 => &mut bp.weights,
        1 => &mut bp.slope,
        2 => &mut bp.gamma,
        _ => &mut bp.beta,
    }
}

fn criterion_6() -> Outcome {
    let net = toy_net();
    net.validate().map_err(e2s)?;
    let cfg = TrainConfig {
        binarize: false,
        ..TrainConfig::for_classes(3)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut p = TrainedParams::random(&net, &mut rng);
    let batch: Vec<EcgSegment> = (0..4)
        .map(|i| EcgSegment {
            samples: (0..net.input_length).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
            label: i % 3,
        })
        .collect();
    let refs: Vec<&EcgSegment> = batch.iter().collect();
    let loss = |p: &TrainedParams| forward_backward(p, &net, &refs, &cfg).map(|g| g.loss).map_err(e2s);
    let g = forward_backward(&p, &net, &refs, &cfg).map_err(e2s)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for b in 0..net.blocks.len() {
        let analytic = [
            g.blocks[b].weights.clone(),
            g.blocks[b].slope.clone(),
            g.blocks[b].gamma.clone(),
            g.blocks[b].beta.clone(),
        ];
        for (which, grads) in analytic.iter().enumerate() {
            for (j, &a) in grads.iter().enumerate() {
                let w0 = tensor_mut(&mut p, b, which)[j];
                let (up, dn) = (w0 + C6_STEP, w0 - C6_STEP);
                tensor_mut(&mut p, b, which)[j] = up;
                let lu = loss(&p)?;
                tensor_mut(&mut p, b, which)[j] = dn;
                let ld = loss(&p)?;
                tensor_mut(&mut p, b, which)[j] = w0;
                let fd = (lu - ld) / (f64::from(up) - f64::from(dn));
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(C6_ABS_FLOOR);
                worst = worst.max(rel);
                ensure(rel <= C6_REL_TOL, || {
                    format!("block {} tensor {which} entry {j}: analytic {a:e} vs fd {fd:e}", b + 1)
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} parameters, worst relative error {worst:.2e} (tolerance {C6_REL_TOL:e})"))
}

fn criterion_7() -> Outcome {
    let ds = synth_dataset(LabelScheme::Aami5, 200, 360, 0.1, C7_SEED).map_err(e2s)?.standardized();
    let sp = split(&ds, 0.8, C7_SEED).map_err(e2s)?;
    let run = || -> Result<(Trainer, f64), String> {
        let cfg = TrainConfig {
            epochs: C7_EPOCHS,
            seed: C7_SEED,
            ..TrainConfig::for_classes(5)
        };
        let mut t = Trainer::new(build_config(5, Mode::Bp, 360), cfg).map_err(e2s)?;
        t.run(&sp.train.segments, None, &mut |_, _| true).map_err(e2s)?;
        let acc = evaluate(&t.params, &t.net, &sp.test.segments).map_err(e2s)?.0;
        Ok((t, acc))
    };
    let start = Instant::now();
    let (a, b) = std::thread::scope(|s| {
        let h = s.spawn(run);
        let b = run();
        (h.join().expect("training thread"), b)
    });
    let ((ta, acc), (tb, acc_b)) = (a?, b?);
    ensure(ta.history == tb.history && ta.params == tb.params && acc == acc_b, || {
        "two runs with the same seed diverged".into()
    })?;
    ensure(acc >= C7_MIN_ACCURACY, || format!("test accuracy {acc:.4} < {C7_MIN_ACCURACY}"))?;
    Ok(format!(
        "test accuracy {acc:.4} after {C7_EPOCHS} epochs on {} test segments, reproduced by a second run ({:.0} s)",
        sp.test.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let exe = env!("CARGO_BIN_EXE_ecg-bnn");
    let path = |n: &str| dir.path().join(n);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let run = |args: &[String]| -> Result<Vec<u8>, String> {
        let out = Command::new(exe).args(args).output().map_err(e2s)?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        Ok(out.stdout)
    };
    let data = path("synth.csv");
    run(&["synth", "--per-class", "20", "--length", "360", "--seed", "7", "--out", &s(&data)].map(String::from))?;
    let train = |out: &Path| -> Result<serde_json::Value, String> {
        let args = ["--json", "train", "--data", &s(&data), "--classes", "5", "--epochs", "5", "--batch-size", "16", "--seed", "7", "--out", &s(out)];
        serde_json::from_slice(&run(&args.map(String::from))?).map_err(e2s)
    };
    let (a, b) = (path("a.becg"), path("b.becg"));
    let (ra, rb) = (train(&a)?, train(&b)?);
    let (ba, bb) = (std::fs::read(&a).map_err(e2s)?, std::fs::read(&b).map_err(e2s)?);
    ensure(ba == bb, || "model files differ".into())?;
    ensure(ra["history"] == rb["history"], || "epoch histories differ".into())?;
    let (ca, cb) = (std::fs::read(path("a.ckpt")).map_err(e2s)?, std::fs::read(path("b.ckpt")).map_err(e2s)?);
    ensure(ca == cb, || "checkpoints differ".into())?;
    Ok(format!(
        "two CLI runs: identical {}-byte models, checkpoints and {}-epoch histories",
        ba.len(),
        ra["history"].as_array().map_or(0, Vec::len)
    ))
}

fn criterion_9() -> Outcome {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).map_err(e2s)?;
    ensure(readme.contains("## Reproducing full-scale results"), || {
        "README lacks the reproduction procedure".into()
    })?;
    Ok("reproduction procedure documented; full-scale accuracy needs the MIT-BIH-derived sets and is not measured here".into())
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for (n, mode) in [(5, Mode::Bp), (17, Mode::Bp), (5, Mode::Lp), (17, Mode::Lp)] {
        let cfg = build_default_config(n, mode);
        let m = fuse(&TrainedParams::random(&cfg, &mut rng), &cfg).map_err(e2s)?;
        let bytes = encode_model(&m).map_err(e2s)?;
        let back = decode_model(&bytes).map_err(e2s)?;
        ensure(back == m && encode_model(&back).map_err(e2s)? == bytes, || {
            format!("{n}-class {mode} model round trip differs")
        })?;
        for pos in 0..bytes.len() {
            let mut b = bytes.clone();
            b[pos] ^= rng.random_range(1..=255u8);
            ensure(decode_model(&b).is_err(), || format!("model corruption at byte {pos} accepted"))?;
        }
    }

    let ds = synth_dataset(LabelScheme::Aami5, 10, 360, 0.1, 10).map_err(e2s)?.standardized();
    let cfg = TrainConfig {
        batch_size: 8,
        learning_rate: 0.01,
        epochs: 4,
        seed: 10,
        ..TrainConfig::for_classes(5)
    };
    let fresh = || Trainer::new(build_config(5, Mode::Bp, 360), cfg.clone()).map_err(e2s);
    let mut full = fresh()?;
    full.run(&ds.segments, Some(&ds.segments), &mut |_, _| true).map_err(e2s)?;
    let mut half = fresh()?;
    half.run(&ds.segments, Some(&ds.segments), &mut |t, _| t.epoch < 2).map_err(e2s)?;
    let ck_bytes = encode_checkpoint(&Checkpoint::from_trainer(&half)).map_err(e2s)?;
    let ck = decode_checkpoint(&ck_bytes).map_err(e2s)?;
    ensure(encode_checkpoint(&ck).map_err(e2s)? == ck_bytes, || "checkpoint round trip differs".into())?;
    let mut resumed = ck.into_trainer();
    resumed.run(&ds.segments, Some(&ds.segments), &mut |_, _| true).map_err(e2s)?;
    ensure(
        resumed.history == full.history && resumed.params == full.params && resumed.opt == full.opt,
        || "resumed trajectory differs from the uninterrupted one".into(),
    )?;
    for _ in 0..C10_CHECKPOINT_FLIPS {
        let pos = rng.random_range(0..ck_bytes.len());
        let mut b = ck_bytes.clone();
        b[pos] ^= rng.random_range(1..=255u8);
        ensure(decode_checkpoint(&b).is_err(), || format!("checkpoint corruption at byte {pos} accepted"))?;
    }
    Ok(format!(
        "4 model layouts round trip; every model byte flip and {C10_CHECKPOINT_FLIPS} checkpoint byte flips rejected; resume after epoch 2 of 4 bit-exact"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("fusion soundness", criterion_1),
        ("kernel exactness", criterion_2),
        ("cross-path equivalence", criterion_3),
        ("shape pipeline", criterion_4),
        ("storage", criterion_5),
        ("gradient fidelity", criterion_6),
        ("desk-scale training", criterion_7),
        ("determinism", criterion_8),
        ("full-scale accuracy (documented)", criterion_9),
        ("serialization", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] criterion {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
