//! Command-line front end: train, fuse, eval, predict, bench, inspect and synth.
//!
//! Reports go to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 usage or validation, 2 unreadable or malformed files, 3 internal failure.

use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use ecg_bnn::data::{self, Dataset, LabelScheme};
use ecg_bnn::fusion::{verify_fusion, FusionReport};
use ecg_bnn::metrics::{
    confusion, metric_report, render_confusion, render_metrics, render_storage, storage_report,
    ConfusionMatrix, MetricReport, StorageReport,
};
use ecg_bnn::model::{build_config, fuse, FusedModel, Mode};
use ecg_bnn::modelfile::{self, Checkpoint};
use ecg_bnn::train::{EpochRecord, OptimizerKind, SurrogateKind, TrainConfig, Trainer};

/// Version tag carried by every JSON report.
pub const JSON_SCHEMA_VERSION: u32 = 1;

/// Environment variable holding the log filter (e.g. `info`, `ecg_bnn=debug`).
pub const LOG_ENV: &str = "ECG_BNN_LOG";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ecg_bnn::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use ecg_bnn::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::Io(_) | E::Format(_) | E::Parse { .. }) => 2,
            CliError::Core(_) => 1,
            CliError::Internal(_) => 3,
        }
    }
}

fn internal(e: ecg_bnn::Error) -> CliError {
    CliError::Internal(e.to_string())
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ecg-bnn", version, about = "Binary neural network ECG classifier")]
pub struct Cli {
    /// Emit the final report as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write a checkpoint plus the fused model.
    Train(TrainArgs),
    /// Fuse a checkpoint into a deployable model, verifying every channel.
    Fuse(FuseArgs),
    /// Score a model on a labelled dataset.
    Eval(EvalArgs),
    /// Classify a single segment.
    Predict(PredictArgs),
    /// Measure inference throughput.
    Bench(BenchArgs),
    /// Print the architecture, block shapes and storage footprint of a model.
    Inspect(InspectArgs),
    /// Write a synthetic labelled dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset: CSV rows of samples plus a final label, or a packed ECGS file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u16).range(2..=255))]
    pub classes: u16,
    #[arg(long, default_value = "bp", value_parser = parse_mode)]
    pub mode: Mode,
    /// Total epochs [default: 1000].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 512 for 5 classes, 64 otherwise]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.02 for 5 classes, 0.002 otherwise]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds initialization, shuffling and the train/test split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// clipped_ste or polynomial.
    #[arg(long, default_value = "clipped_ste", value_parser = parse_surrogate)]
    pub surrogate: SurrogateKind,
    /// Surrogate gradient support `[-clip, clip]`.
    #[arg(long, default_value_t = 1.0)]
    pub surrogate_clip: f64,
    /// adam or sgd (momentum 0.9).
    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    pub optimizer: String,
    /// Fraction of each class used for training; the rest is the test split.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Fused model output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint output path [default: --out with extension .ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the checkpoint every N epochs (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint; its network and hyperparameters are kept, --epochs may extend the run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Required segment length [default: the dataset's].
    #[arg(long)]
    pub input_length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV holding one segment; a trailing label column and an `s0,...` header are ignored.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub iters: u64,
    /// Also time the dense real-arithmetic path.
    #[arg(long)]
    pub compare_reference: bool,
    /// Seeds the synthetic benchmark inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u16).range(2..=255))]
    pub classes: u16,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 3600)]
    pub length: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path; `.ecgs` selects the packed format, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: ecg_bnn::Error| e.to_string())
}

fn parse_surrogate(s: &str) -> Result<SurrogateKind, String> {
    s.parse().map_err(|e: ecg_bnn::Error| e.to_string())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let json = cli.json;
    match cli.command {
        Command::Train(a) => cmd_train(&a, json),
        Command::Fuse(a) => cmd_fuse(&a, json),
        Command::Eval(a) => cmd_eval(&a, json),
        Command::Predict(a) => cmd_predict(&a, json),
        Command::Bench(a) => cmd_bench(&a, json),
        Command::Inspect(a) => cmd_inspect(&a, json),
        Command::Synth(a) => cmd_synth(&a, json),
    }
}

fn print_json(v: &impl Serialize) -> CliResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn class_name(n_classes: usize) -> impl Fn(usize) -> String {
    let scheme = LabelScheme::for_classes(n_classes);
    move |c| scheme.name(c).map_or_else(|| c.to_string(), str::to_string)
}

fn checkpoint_path(a: &TrainArgs) -> CliResult<PathBuf> {
    let p = a.checkpoint.clone().unwrap_or_else(|| a.out.with_extension("ckpt"));
    if p == a.out {
        return Err(CliError::Usage("checkpoint and model paths must differ".into()));
    }
    Ok(p)
}

fn build_trainer(a: &TrainArgs, length: usize) -> CliResult<Trainer> {
    if let Some(path) = &a.resume {
        let mut t = modelfile::load_checkpoint(path)?.into_trainer();
        if let Some(e) = a.epochs {
            t.cfg.epochs = e;
        }
        if t.net.input_length != length {
            return Err(CliError::Usage(format!(
                "checkpoint expects segments of length {}, dataset has {length}",
                t.net.input_length
            )));
        }
        if t.net.n_classes != usize::from(a.classes) {
            return Err(CliError::Usage(format!(
                "checkpoint has {} classes, --classes is {}",
                t.net.n_classes, a.classes
            )));
        }
        return Ok(t);
    }
    let n = usize::from(a.classes);
    let mut cfg = TrainConfig::for_classes(n);
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    cfg.surrogate.kind = a.surrogate;
    cfg.surrogate.clip = a.surrogate_clip;
    if a.optimizer == "sgd" {
        cfg.optimizer = OptimizerKind::Sgd { momentum: 0.9 };
    }
    Ok(Trainer::new(build_config(n, a.mode, length), cfg)?)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    schema: &'static str,
    version: u32,
    model: &'a Path,
    checkpoint: &'a Path,
    model_bytes: usize,
    mode: Mode,
    n_classes: usize,
    epochs: usize,
    history: &'a [EpochRecord],
    /// `test` or `train` (when the test split is empty).
    eval_set: &'static str,
    confusion: &'a ConfusionMatrix,
    metrics: &'a MetricReport,
    storage: &'a StorageReport,
}

fn cmd_train(a: &TrainArgs, json: bool) -> CliResult<()> {
    let n = usize::from(a.classes);
    let ck_path = checkpoint_path(a)?;
    let ds = data::load_any(&a.data, LabelScheme::for_classes(n), a.input_length)?.standardized();
    let sp = data::split(&ds, a.train_fraction, a.seed)?;
    for w in &sp.warnings {
        log::warn!("{w}");
    }
    let mut t = build_trainer(a, ds.length)?;
    let eval = (!sp.test.is_empty()).then_some(&sp.test.segments[..]);
    let total = t.cfg.epochs;
    let mut save_err = None;
    t.run(&sp.train.segments, eval, &mut |t, r| {
        let line = format!(
            "epoch {}/{total} loss {:.6} train_acc {:.4}{}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.eval_accuracy.map_or(String::new(), |v| format!(" test_acc {v:.4}"))
        );
        if json {
            eprintln!("{line}");
        } else {
            println!("{line}");
        }
        if a.checkpoint_every > 0 && r.epoch % a.checkpoint_every == 0 {
            if let Err(e) = modelfile::save_checkpoint(&Checkpoint::from_trainer(t), &ck_path) {
                save_err = Some(e);
                return false;
            }
        }
        true
    })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    modelfile::save_checkpoint(&Checkpoint::from_trainer(&t), &ck_path)?;
    let model = fuse(&t.params, &t.net).map_err(internal)?;
    let model_bytes = modelfile::save_model(&model, &a.out)?;

    let (eval_set, segs) = match eval {
        Some(e) => ("test", e),
        None => ("train", &sp.train.segments[..]),
    };
    let (cm, report) = score(&model, segs)?;
    let storage = storage_report(&model);
    if json {
        print_json(&TrainReport {
            schema: "ecg-bnn/train",
            version: JSON_SCHEMA_VERSION,
            model: &a.out,
            checkpoint: &ck_path,
            model_bytes,
            mode: t.net.mode,
            n_classes: n,
            epochs: t.epoch,
            history: &t.history,
            eval_set,
            confusion: &cm,
            metrics: &report,
            storage: &storage,
        })
    } else {
        println!(
            "wrote {} ({model_bytes} bytes) and {}",
            a.out.display(),
            ck_path.display()
        );
        println!("{eval_set} split, {} segments", segs.len());
        print!("{}", render_confusion(&cm, &class_name(n)));
        print!("{}", render_metrics(&report, &class_name(n)));
        print!("{}", render_storage(&storage));
        Ok(())
    }
}

/// Classifies standardized segments with the fused model.
fn score(m: &FusedModel, segs: &[data::EcgSegment]) -> CliResult<(ConfusionMatrix, MetricReport)> {
    let preds = segs
        .iter()
        .map(|s| m.classify(&s.samples).map(|p| p.class))
        .collect::<ecg_bnn::Result<Vec<_>>>()?;
    let labels: Vec<usize> = segs.iter().map(|s| s.label).collect();
    let cm = confusion(&preds, &labels, m.n_classes())?;
    let report = metric_report(&cm)?;
    Ok((cm, report))
}

/// Verifies every fused channel against its unfused composition; returns the points checked.
fn verify_model(ck: &Checkpoint, m: &FusedModel) -> CliResult<u64> {
    let mut checked = 0u64;
    for (i, (bp, fb)) in ck.params.blocks.iter().zip(&m.blocks).enumerate() {
        let domain = ck.net.fusion_domain(i);
        for (c, fused) in fb.params.iter().enumerate() {
            match verify_fusion(fused, &bp.channel(c, ck.params.eps), domain) {
                FusionReport::Sound { points_checked } => checked += points_checked as u64,
                other => {
                    return Err(CliError::Internal(format!(
                        "fusion verification failed for block {} channel {c}: {other:?}",
                        i + 1
                    )))
                }
            }
        }
    }
    Ok(checked)
}

fn cmd_fuse(a: &FuseArgs, json: bool) -> CliResult<()> {
    let ck = modelfile::load_checkpoint(&a.checkpoint)?;
    let m = fuse(&ck.params, &ck.net).map_err(internal)?;
    let checked = verify_model(&ck, &m)?;
    let bytes = modelfile::save_model(&m, &a.out)?;
    let storage = storage_report(&m);
    if json {
        print_json(&json!({
            "schema": "ecg-bnn/fuse",
            "version": JSON_SCHEMA_VERSION,
            "model": a.out,
            "model_bytes": bytes,
            "channels_verified": ck.net.total_channels(),
            "points_checked": checked,
            "storage": storage,
        }))
    } else {
        println!(
            "verified {} channels ({checked} points); wrote {} ({bytes} bytes)",
            ck.net.total_channels(),
            a.out.display()
        );
        print!("{}", render_storage(&storage));
        Ok(())
    }
}

fn is_packed(path: &Path) -> CliResult<bool> {
    let mut head = [0u8; 4];
    let n = File::open(path).map_err(ecg_bnn::Error::from)?.read(&mut head).map_err(ecg_bnn::Error::from)?;
    Ok(n == 4 && &head == b"ECGS")
}

/// Loads labelled data for `m`, reporting length and class mismatches as usage errors.
fn load_for_model(path: &Path, m: &FusedModel) -> CliResult<Dataset> {
    let n = m.n_classes();
    let ds = if is_packed(path)? {
        data::load_any(path, LabelScheme::for_classes(n), None)?
    } else {
        data::load_csv(path, LabelScheme::Custom(255), None)?
    };
    if ds.length != m.config.input_length {
        return Err(CliError::Usage(format!(
            "model expects segments of length {}, {} holds length {}",
            m.config.input_length,
            path.display(),
            ds.length
        )));
    }
    if let Some(bad) = ds.segments.iter().find(|s| s.label >= n) {
        return Err(CliError::Usage(format!(
            "{} contains label {} but the model has {n} classes",
            path.display(),
            bad.label
        )));
    }
    Ok(Dataset::new(ds.segments, LabelScheme::for_classes(n), ds.length)?.standardized())
}

fn cmd_eval(a: &EvalArgs, json: bool) -> CliResult<()> {
    let m = modelfile::load_model(&a.model)?;
    let ds = load_for_model(&a.data, &m)?;
    let (cm, report) = score(&m, &ds.segments)?;
    let storage = storage_report(&m);
    if json {
        print_json(&json!({
            "schema": "ecg-bnn/eval",
            "version": JSON_SCHEMA_VERSION,
            "n_segments": ds.len(),
            "confusion": cm,
            "metrics": report,
            "storage": storage,
        }))
    } else {
        let names = class_name(m.n_classes());
        println!("{} segments", ds.len());
        print!("{}", render_confusion(&cm, &names));
        print!("{}", render_metrics(&report, &names));
        print!("{}", render_storage(&storage));
        Ok(())
    }
}

/// Samples of a one-segment CSV file.
fn read_segment(path: &Path, length: usize) -> CliResult<Vec<f32>> {
    let text = fs::read_to_string(path).map_err(ecg_bnn::Error::from)?;
    let bad = |row: usize, message: String| {
        CliError::Core(ecg_bnn::Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        })
    };
    let rows: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .filter(|l| !l.starts_with("s0"))
        .collect();
    if rows.len() != 1 {
        return Err(bad(rows.len(), format!("expected exactly one segment row, found {}", rows.len())));
    }
    let fields: Vec<&str> = rows[0].split(',').map(str::trim).collect();
    if fields.len() != length && fields.len() != length + 1 {
        return Err(bad(1, format!("{} fields, expected {length} samples", fields.len())));
    }
    fields[..length]
        .iter()
        .enumerate()
        .map(|(j, f)| match f.parse::<f32>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(bad(1, format!("column {}: {f:?} is not a finite number", j + 1))),
        })
        .collect()
}

fn cmd_predict(a: &PredictArgs, json: bool) -> CliResult<()> {
    let m = modelfile::load_model(&a.model)?;
    let samples = read_segment(&a.input, m.config.input_length)?;
    let p = m.classify(&data::standardize(&samples))?;
    let name = LabelScheme::for_classes(m.n_classes()).name(p.class);
    if json {
        print_json(&json!({
            "schema": "ecg-bnn/predict",
            "version": JSON_SCHEMA_VERSION,
            "class": p.class,
            "name": name,
            "logits": p.logits,
        }))
    } else {
        match name {
            Some(n) => println!("class {} ({n})", p.class),
            None => println!("class {}", p.class),
        }
        let logits: Vec<String> = p.logits.iter().map(|v| format!("{v:.6}")).collect();
        println!("logits {}", logits.join(" "));
        Ok(())
    }
}

/// Segments per second over `iters` calls cycling through `inputs`.
fn throughput(
    inputs: &[Vec<f32>],
    iters: u64,
    f: &dyn Fn(&[f32]) -> ecg_bnn::Result<usize>,
) -> CliResult<(f64, u64)> {
    let mut checksum = 0u64;
    let start = Instant::now();
    for i in 0..iters {
        checksum += f(&inputs[(i as usize) % inputs.len()])? as u64;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok((iters as f64 / secs, checksum))
}

fn cmd_bench(a: &BenchArgs, json: bool) -> CliResult<()> {
    let m = modelfile::load_model(&a.model)?;
    let scheme = LabelScheme::for_classes(m.n_classes());
    let inputs: Vec<Vec<f32>> = data::synth_dataset(scheme, 1, m.config.input_length, 0.1, a.seed)?
        .standardized()
        .segments
        .into_iter()
        .map(|s| s.samples)
        .collect();
    let (fused, fused_sum) = throughput(&inputs, a.iters, &|x| m.classify(x).map(|p| p.class))?;
    let reference = if a.compare_reference {
        let (r, ref_sum) = throughput(&inputs, a.iters, &|x| m.forward_dense(x).map(|p| p.class))?;
        if ref_sum != fused_sum {
            return Err(CliError::Internal("fused and dense paths disagree".into()));
        }
        Some(r)
    } else {
        None
    };
    let ratio = reference.map(|r| fused / r);
    if json {
        print_json(&json!({
            "schema": "ecg-bnn/bench",
            "version": JSON_SCHEMA_VERSION,
            "iters": a.iters,
            "fused_segments_per_second": fused,
            "reference_segments_per_second": reference,
            "speedup": ratio,
        }))
    } else {
        println!("fused      {fused:.1} segments/s ({} iterations)", a.iters);
        if let (Some(r), Some(q)) = (reference, ratio) {
            println!("reference  {r:.1} segments/s");
            println!("speedup    {q:.2}x");
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct BlockRow {
    block: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pool_size: usize,
    pool_stride: usize,
    conv_length: usize,
    pool_length: usize,
    weight_bits: usize,
    param_bytes: usize,
}

fn cmd_inspect(a: &InspectArgs, json: bool) -> CliResult<()> {
    let m = modelfile::load_model(&a.model)?;
    let cfg = &m.config;
    let lengths = cfg.block_lengths()?;
    let rows: Vec<BlockRow> = cfg
        .blocks
        .iter()
        .zip(&lengths)
        .enumerate()
        .map(|(i, (b, &(conv_length, pool_length)))| BlockRow {
            block: i + 1,
            in_channels: b.in_channels,
            out_channels: b.out_channels,
            kernel: b.conv.taps,
            stride: b.conv.stride,
            padding: b.conv.padding,
            pool_size: b.pool_size,
            pool_stride: b.pool_stride,
            conv_length,
            pool_length,
            weight_bits: b.weight_count(),
            param_bytes: modelfile::params_section_len(cfg, i),
        })
        .collect();
    let gsp_length = lengths.last().map_or(0, |l| l.1);
    let storage = storage_report(&m);
    let file_bytes = modelfile::model_file_len(cfg);
    if json {
        return print_json(&json!({
            "schema": "ecg-bnn/inspect",
            "version": JSON_SCHEMA_VERSION,
            "mode": cfg.mode,
            "n_classes": cfg.n_classes,
            "input_length": cfg.input_length,
            "blocks": rows,
            "gsp_length": gsp_length,
            "file_bytes": file_bytes,
            "storage": storage,
        }));
    }
    println!(
        "mode {}  classes {}  input length {}",
        cfg.mode, cfg.n_classes, cfg.input_length
    );
    println!(
        "{:>5} {:>4} {:>4} {:>2} {:>2} {:>2} {:>6} {:>6} {:>6} {:>7} {:>7}",
        "block", "in", "out", "K", "S", "P", "pool", "conv", "pooled", "w bits", "params"
    );
    for r in &rows {
        println!(
            "{:>5} {:>4} {:>4} {:>2} {:>2} {:>2} {:>6} {:>6} {:>6} {:>7} {:>7}",
            r.block,
            r.in_channels,
            r.out_channels,
            r.kernel,
            r.stride,
            r.padding,
            format!("{}/{}", r.pool_size, r.pool_stride),
            r.conv_length,
            r.pool_length,
            r.weight_bits,
            r.param_bytes
        );
    }
    println!("GSP over length {gsp_length}, argmax over {} classes", cfg.n_classes);
    println!("model file {file_bytes} bytes");
    print!("{}", render_storage(&storage));
    Ok(())
}

fn cmd_synth(a: &SynthArgs, json: bool) -> CliResult<()> {
    let ds = data::synth_dataset(
        LabelScheme::for_classes(usize::from(a.classes)),
        a.per_class,
        a.length,
        a.noise,
        a.seed,
    )?;
    let packed = a.out.extension().is_some_and(|e| e == "ecgs");
    if packed {
        data::save_packed(&ds, &a.out)?;
    } else {
        data::save_csv(&ds, &a.out)?;
    }
    if json {
        print_json(&json!({
            "schema": "ecg-bnn/synth",
            "version": JSON_SCHEMA_VERSION,
            "path": a.out,
            "segments": ds.len(),
            "length": ds.length,
            "format": if packed { "ecgs" } else { "csv" },
        }))
    } else {
        println!("wrote {} segments of length {} to {}", ds.len(), ds.length, a.out.display());
        Ok(())
    }
}
