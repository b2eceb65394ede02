//! Architecture description, parameter containers and the two inference paths.
//!
//! Every block is `conv → maxpool → PReLU → batch norm`; the `sign` that
//! binarizes a block's output is attached to the input of the next conv.
//! The first block sees the standardized signal directly in [`Mode::Bp`]
//! and its sign in [`Mode::Lp`]. The last block has no following `sign`:
//! its outputs are summed over time (GSP) and the comparator picks the class.
//!
//! [`forward_reference`] evaluates the trained network densely in real
//! arithmetic. [`FusedModel::forward`] runs the deployable network: packed
//! XNOR-POPCOUNT convolutions and per-channel threshold decisions, with
//! real arithmetic only in the first BP convolution and the last block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bintensor::{BinaryTensor, BinaryWeights};
use crate::error::{Error, Result};
use crate::fusion::{self, BnPrelu, Domain, FusedChannelParams, IntDomain};
use crate::ops::{
    self, argmax_head, conv_output_length, gsp, maxpool1d, pool_output_length, ConvSpec, FeatureMap,
    RealFeatureMap,
};

/// Input treatment of the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Real standardized input, real-arithmetic first convolution.
    Bp,
    /// Sign-binarized input, every convolution is XNOR-POPCOUNT.
    Lp,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Bp => 0,
            Mode::Lp => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Mode::Bp),
            1 => Some(Mode::Lp),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Bp => "bp",
            Mode::Lp => "lp",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bp" => Ok(Mode::Bp),
            "lp" => Ok(Mode::Lp),
            other => Err(Error::InvalidValue(format!("unknown mode {other:?} (expected bp or lp)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv: ConvSpec,
    pub pool_size: usize,
    pub pool_stride: usize,
}

impl BlockConfig {
    /// Length of the popcount domain `in_channels * taps`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.conv.taps
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    /// `(conv, pool)` output lengths for an input of `len` steps.
    pub fn lengths(&self, len: usize) -> Result<(usize, usize)> {
        let c = conv_output_length(len, self.conv.taps, self.conv.stride, self.conv.padding)?;
        let p = pool_output_length(c, self.pool_size, self.pool_stride)?;
        Ok((c, p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub blocks: Vec<BlockConfig>,
    pub n_classes: usize,
    pub mode: Mode,
    pub input_length: usize,
    /// Border value of the first convolution in BP mode.
    pub bp_pad_value: f32,
}

/// Output channels of blocks 1–5; block 6 emits one channel per class.
pub const DEFAULT_CHANNELS: [usize; 5] = [8, 16, 32, 32, 64];
pub const DEFAULT_TAPS: usize = 7;
pub const DEFAULT_PADDING: usize = 5;
pub const DEFAULT_POOL: (usize, usize) = (7, 2);
/// 10 s at 360 Hz.
pub const DEFAULT_INPUT_LENGTH: usize = 3600;

/// The six-block network for `n_classes` outputs.
pub fn build_default_config(n_classes: usize, mode: Mode) -> NetConfig {
    build_config(n_classes, mode, DEFAULT_INPUT_LENGTH)
}

/// [`build_default_config`] with a different input length.
pub fn build_config(n_classes: usize, mode: Mode, input_length: usize) -> NetConfig {
    let mut ins = vec![1];
    ins.extend_from_slice(&DEFAULT_CHANNELS);
    let mut outs = DEFAULT_CHANNELS.to_vec();
    outs.push(n_classes);
    let blocks = ins
        .iter()
        .zip(&outs)
        .enumerate()
        .map(|(i, (&cin, &cout))| BlockConfig {
            in_channels: cin,
            out_channels: cout,
            conv: ConvSpec::new(DEFAULT_TAPS, if i == 0 { 2 } else { 1 }, DEFAULT_PADDING, 1.0),
            pool_size: DEFAULT_POOL.0,
            pool_stride: DEFAULT_POOL.1,
        })
        .collect();
    NetConfig {
        blocks,
        n_classes,
        mode,
        input_length,
        bp_pad_value: 1.0,
    }
}

impl NetConfig {
    /// Whether block `i` convolves real values rather than packed bits.
    pub fn real_input_block(&self, i: usize) -> bool {
        i == 0 && self.mode == Mode::Bp
    }

    pub fn last_block(&self) -> usize {
        self.blocks.len() - 1
    }

    /// Domain of the values a block's fused activation sees.
    pub fn fusion_domain(&self, i: usize) -> Domain {
        if self.real_input_block(i) {
            Domain::Real
        } else {
            Domain::Int(IntDomain::lattice(self.blocks[i].fan_in() as i32))
        }
    }

    /// Per-block `(conv, pool)` lengths for `input_length`.
    pub fn block_lengths(&self) -> Result<Vec<(usize, usize)>> {
        let mut len = self.input_length;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let l = b.lengths(len).map_err(|e| match e {
                Error::EmptyOutput(m) => Error::EmptyOutput(format!(
                    "block {} with input length {}: {m}",
                    i + 1,
                    self.input_length
                )),
                other => other,
            })?;
            out.push(l);
            len = l.1;
        }
        Ok(out)
    }

    pub fn weight_bits(&self) -> usize {
        self.blocks.iter().map(BlockConfig::weight_count).sum()
    }

    pub fn total_channels(&self) -> usize {
        self.blocks.iter().map(|b| b.out_channels).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidValue("network has no blocks".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidValue(format!("{} classes; need at least 2", self.n_classes)));
        }
        if self.blocks[0].in_channels != 1 {
            return Err(Error::Dimension("first block must take one input channel".into()));
        }
        for (i, pair) in self.blocks.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Dimension(format!(
                    "block {} emits {} channels but block {} expects {}",
                    i + 1,
                    pair[0].out_channels,
                    i + 2,
                    pair[1].in_channels
                )));
            }
        }
        let last = &self.blocks[self.last_block()];
        if last.out_channels != self.n_classes {
            return Err(Error::Dimension(format!(
                "last block emits {} channels for {} classes",
                last.out_channels, self.n_classes
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.in_channels == 0 {
                return Err(Error::Dimension(format!("block {} has zero channels", i + 1)));
            }
            b.conv.check()?;
            if b.fan_in() > i16::MAX as usize {
                return Err(Error::InvalidValue(format!("block {} fan-in too large", i + 1)));
            }
            if self.real_input_block(i) {
                if b.conv.pad_value != self.bp_pad_value {
                    return Err(Error::InvalidValue(format!(
                        "first-block pad value {} disagrees with bp_pad_value {}",
                        b.conv.pad_value, self.bp_pad_value
                    )));
                }
            } else if b.conv.pad_value != 1.0 && b.conv.pad_value != -1.0 {
                return Err(Error::InvalidValue(format!(
                    "block {} convolves bits and needs a ±1 pad value, got {}",
                    i + 1,
                    b.conv.pad_value
                )));
            }
        }
        if self.mode == Mode::Bp {
            let v = self.bp_pad_value;
            if v.fract() != 0.0 || !(-128.0..=127.0).contains(&v) {
                return Err(Error::InvalidValue(format!(
                    "BP pad value {v} must be an integer in [-128, 127]"
                )));
            }
        }
        self.block_lengths().map(|_| ())
    }
}

/// Latent weights, PReLU slopes and batch-norm state of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// `[out, in, taps]`, row-major.
    pub weights: Vec<f32>,
    pub slope: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BlockParams {
    fn filled(cfg: &BlockConfig, weight: impl FnMut() -> f32) -> Self {
        let c = cfg.out_channels;
        Self {
            weights: std::iter::repeat_with(weight).take(cfg.weight_count()).collect(),
            slope: vec![0.25; c],
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.gamma.len()
    }

    /// Channel `c` in the form consumed by fusion and the reference path.
    pub fn channel(&self, c: usize, eps: f32) -> BnPrelu {
        BnPrelu {
            gamma: f64::from(self.gamma[c]),
            beta: f64::from(self.beta[c]),
            mean: f64::from(self.running_mean[c]),
            var: f64::from(self.running_var[c]),
            eps: f64::from(eps),
            slope: f64::from(self.slope[c]),
        }
    }

    pub fn channels(&self, eps: f32) -> Vec<BnPrelu> {
        (0..self.out_channels()).map(|c| self.channel(c, eps)).collect()
    }

    pub fn binary_weights(&self, cfg: &BlockConfig) -> Result<BinaryWeights> {
        BinaryWeights::from_latent(cfg.out_channels, cfg.in_channels, cfg.conv.taps, &self.weights)
    }
}

/// Real-valued training state of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedParams {
    pub blocks: Vec<BlockParams>,
    pub eps: f32,
}

pub const DEFAULT_EPS: f32 = 1e-5;

impl TrainedParams {
    /// Latent weights uniform in `[-scale, scale]`; slopes 0.25; identity batch norm.
    pub fn init(cfg: &NetConfig, scale: f32, rng: &mut impl Rng) -> Self {
        let blocks = cfg
            .blocks
            .iter()
            .map(|b| BlockParams::filled(b, || rng.random_range(-scale..=scale)))
            .collect();
        Self {
            blocks,
            eps: DEFAULT_EPS,
        }
    }

    /// All weights `+1`, slope 1, identity batch norm.
    pub fn identity(cfg: &NetConfig) -> Self {
        let blocks = cfg
            .blocks
            .iter()
            .map(|b| {
                let mut p = BlockParams::filled(b, || 0.5);
                p.slope.fill(1.0);
                p
            })
            .collect();
        Self {
            blocks,
            eps: DEFAULT_EPS,
        }
    }

    /// Parameters with varied weights and batch-norm state scaled to each
    /// block's input range, so that decisions are neither constant nor trivial.
    pub fn random(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let blocks = cfg
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut p = BlockParams::filled(b, || rng.random_range(-1.0f32..1.0));
                let scale = if cfg.real_input_block(i) {
                    (b.conv.taps as f32).sqrt()
                } else {
                    (b.fan_in() as f32).sqrt()
                };
                for c in 0..b.out_channels {
                    p.slope[c] = rng.random_range(-1.0f32..1.0);
                    let g: f32 = rng.random_range(0.2f32..2.0);
                    p.gamma[c] = if rng.random_bool(0.2) { -g } else { g };
                    p.beta[c] = rng.random_range(-0.5f32..0.5);
                    p.running_mean[c] = scale * rng.random_range(-1.0f32..2.0);
                    p.running_var[c] = scale * scale * rng.random_range(0.1f32..2.0);
                }
                p
            })
            .collect();
        Self {
            blocks,
            eps: DEFAULT_EPS,
        }
    }

    pub fn check(&self, cfg: &NetConfig) -> Result<()> {
        if self.blocks.len() != cfg.blocks.len() {
            return Err(Error::Dimension(format!(
                "{} parameter blocks for a {}-block network",
                self.blocks.len(),
                cfg.blocks.len()
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidValue(format!("batch norm eps {} must be positive", self.eps)));
        }
        for (i, (p, b)) in self.blocks.iter().zip(&cfg.blocks).enumerate() {
            let c = b.out_channels;
            let per_channel = [&p.slope, &p.gamma, &p.beta, &p.running_mean, &p.running_var];
            if p.weights.len() != b.weight_count() || per_channel.iter().any(|v| v.len() != c) {
                return Err(Error::Dimension(format!(
                    "block {} parameters do not match [{}, {}, {}]",
                    i + 1,
                    c,
                    b.in_channels,
                    b.conv.taps
                )));
            }
            let all = p.weights.iter().chain(per_channel.iter().flat_map(|v| v.iter()));
            if all.clone().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!("block {} has non-finite parameters", i + 1)));
            }
            if p.running_var.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidValue(format!("block {} has a negative running variance", i + 1)));
            }
        }
        Ok(())
    }

    /// Flat view of every trainable value, in a fixed order.
    pub fn values(&self) -> impl Iterator<Item = &f32> {
        self.blocks.iter().flat_map(|b| {
            b.weights
                .iter()
                .chain(&b.slope)
                .chain(&b.gamma)
                .chain(&b.beta)
                .chain(&b.running_mean)
                .chain(&b.running_var)
        })
    }
}

/// Deployable block: packed weights and fused per-channel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBlock {
    pub weights: BinaryWeights,
    pub params: Vec<FusedChannelParams>,
}

/// Frozen, bit-exact inference model.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel {
    pub config: NetConfig,
    pub blocks: Vec<FusedBlock>,
}

/// Input to [`FusedModel::forward`].
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Real(&'a RealFeatureMap),
    Binary(&'a BinaryTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f64>,
}

/// Prediction plus the `±1` output map of every block except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub prediction: Prediction,
    pub block_outputs: Vec<BinaryTensor>,
}

/// Fuses trained parameters into a deployable model.
pub fn fuse(p: &TrainedParams, cfg: &NetConfig) -> Result<FusedModel> {
    cfg.validate()?;
    p.check(cfg)?;
    let last = cfg.last_block();
    let blocks = cfg
        .blocks
        .iter()
        .zip(&p.blocks)
        .enumerate()
        .map(|(i, (b, bp))| {
            Ok(FusedBlock {
                weights: bp.binary_weights(b)?,
                params: fusion::fuse_block(&bp.channels(p.eps), b.out_channels, i != last, cfg.fusion_domain(i))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedModel {
        config: cfg.clone(),
        blocks,
    })
}

fn check_input_length(cfg: &NetConfig, channels: usize, length: usize) -> Result<()> {
    if channels != 1 || length != cfg.input_length {
        return Err(Error::Dimension(format!(
            "input is [{channels}, {length}], the model expects [1, {}]",
            cfg.input_length
        )));
    }
    Ok(())
}

/// Dense convolution with ±1 weights in `f32`, accumulated over `(in, tap)` in order.
fn dense_conv(x: &RealFeatureMap, w: &BinaryWeights, spec: &ConvSpec) -> Result<RealFeatureMap> {
    let len = x.length();
    let out_len = conv_output_length(len, spec.taps, spec.stride, spec.padding)?;
    let at = |i: usize, pos: usize| -> f32 {
        if pos < spec.padding || pos >= spec.padding + len {
            spec.pad_value
        } else {
            x.get(i, pos - spec.padding)
        }
    };
    Ok(FeatureMap::from_fn(w.out_channels(), out_len, |o, t| {
        let mut acc = 0.0f32;
        for i in 0..w.in_channels() {
            for k in 0..spec.taps {
                acc += f32::from(w.sign(o, i, k)) * at(i, t * spec.stride + k);
            }
        }
        acc
    }))
}

fn signs_as_real(x: &RealFeatureMap) -> RealFeatureMap {
    FeatureMap::from_fn(x.channels(), x.length(), |c, t| f32::from(ops::sign(x.get(c, t))))
}

/// Dense real-arithmetic forward pass of the trained network.
///
/// Weights are `sign(latent)`; activations pass through `sign` before every
/// convolution except the first one in BP mode; batch norm uses running statistics.
pub fn forward_reference(p: &TrainedParams, cfg: &NetConfig, input: &RealFeatureMap) -> Result<Vec<f64>> {
    Ok(forward_reference_trace(p, cfg, input)?.prediction.logits)
}

/// [`forward_reference`] that also records every block's `±1` output.
pub fn forward_reference_trace(p: &TrainedParams, cfg: &NetConfig, input: &RealFeatureMap) -> Result<Trace> {
    cfg.validate()?;
    p.check(cfg)?;
    check_input_length(cfg, input.channels(), input.length())?;
    let last = cfg.last_block();
    let mut act = if cfg.real_input_block(0) {
        input.clone()
    } else {
        signs_as_real(input)
    };
    let mut block_outputs = Vec::with_capacity(last);
    for (i, (b, bp)) in cfg.blocks.iter().zip(&p.blocks).enumerate() {
        let w = bp.binary_weights(b)?;
        let pooled = maxpool1d(&dense_conv(&act, &w, &b.conv)?, b.pool_size, b.pool_stride)?;
        let chans = bp.channels(p.eps);
        let y = FeatureMap::from_fn(pooled.channels(), pooled.length(), |c, t| {
            chans[c].eval(f64::from(pooled.get(c, t)))
        });
        if i == last {
            let logits = gsp(&y)?;
            let class = argmax_head(&logits)?;
            return Ok(Trace {
                prediction: Prediction { class, logits },
                block_outputs,
            });
        }
        block_outputs.push(BinaryTensor::from_fn(y.channels(), y.length(), |c, t| {
            ops::sign(y.get(c, t)) > 0
        }));
        act = FeatureMap::from_fn(y.channels(), y.length(), |c, t| f32::from(ops::sign(y.get(c, t))));
    }
    unreachable!("validated networks have at least one block")
}

enum Activation {
    Real(RealFeatureMap),
    Binary(BinaryTensor),
}

/// Pooled block pre-activations.
enum Pooled {
    Real(RealFeatureMap),
    Int(FeatureMap<i32>),
}

impl FusedModel {
    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Structural checks tying blocks, weights and parameter kinds to the config.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.blocks.len() {
            return Err(Error::Dimension("fused block count differs from the config".into()));
        }
        let last = self.config.last_block();
        for (i, (fb, b)) in self.blocks.iter().zip(&self.config.blocks).enumerate() {
            let w = &fb.weights;
            if (w.out_channels(), w.in_channels(), w.taps()) != (b.out_channels, b.in_channels, b.conv.taps)
                || fb.params.len() != b.out_channels
            {
                return Err(Error::Dimension(format!("fused block {} does not match its config", i + 1)));
            }
            let ok = fb.params.iter().all(|p| match p {
                FusedChannelParams::Affine(_) => i == last,
                FusedChannelParams::Real(_) => i != last && self.config.real_input_block(i),
                FusedChannelParams::Int(_) => i != last && !self.config.real_input_block(i),
            });
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "fused block {} holds parameters of the wrong kind",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Class and logits for one input.
    pub fn forward(&self, input: ModelInput<'_>) -> Result<Prediction> {
        self.run(input, false).map(|t| t.prediction)
    }

    /// [`FusedModel::forward`] that also records every block's `±1` output.
    pub fn forward_trace(&self, input: ModelInput<'_>) -> Result<Trace> {
        self.run(input, true)
    }

    /// Classifies a standardized segment, binarizing it first in LP mode.
    pub fn classify(&self, standardized: &[f32]) -> Result<Prediction> {
        let x = RealFeatureMap::from_segment(standardized);
        match self.config.mode {
            Mode::Bp => self.forward(ModelInput::Real(&x)),
            Mode::Lp => {
                let bits = BinaryTensor::from_fn(1, standardized.len(), |_, t| standardized[t] >= 0.0);
                self.forward(ModelInput::Binary(&bits))
            }
        }
    }

    fn run(&self, input: ModelInput<'_>, keep: bool) -> Result<Trace> {
        let cfg = &self.config;
        let mut act = match (cfg.mode, input) {
            (Mode::Bp, ModelInput::Real(x)) => {
                check_input_length(cfg, x.channels(), x.length())?;
                Activation::Real(x.clone())
            }
            (Mode::Lp, ModelInput::Binary(x)) => {
                check_input_length(cfg, x.channels(), x.length())?;
                Activation::Binary(x.clone())
            }
            (Mode::Bp, ModelInput::Binary(_)) => {
                return Err(Error::InvalidInput("BP models take a real-valued input".into()))
            }
            (Mode::Lp, ModelInput::Real(_)) => {
                return Err(Error::InvalidInput("LP models take a binarized input".into()))
            }
        };
        let last = cfg.last_block();
        let mut block_outputs = Vec::new();
        for (i, (fb, b)) in self.blocks.iter().zip(&cfg.blocks).enumerate() {
            let pooled = match &act {
                Activation::Real(x) => Pooled::Real(maxpool1d(
                    &ops::real_input_conv1d(x, &fb.weights, &b.conv)?,
                    b.pool_size,
                    b.pool_stride,
                )?),
                Activation::Binary(x) => Pooled::Int(maxpool1d(
                    &ops::binary_conv1d(x, &fb.weights, &b.conv)?,
                    b.pool_size,
                    b.pool_stride,
                )?),
            };
            if i == last {
                let logits = match &pooled {
                    Pooled::Real(m) => affine_gsp(m, &fb.params)?,
                    Pooled::Int(m) => affine_gsp(m, &fb.params)?,
                };
                let class = argmax_head(&logits)?;
                return Ok(Trace {
                    prediction: Prediction { class, logits },
                    block_outputs,
                });
            }
            let bits = match &pooled {
                Pooled::Real(m) => threshold_map(m, &fb.params, |p| match p {
                    FusedChannelParams::Real(t) => Some(t),
                    _ => None,
                })?,
                Pooled::Int(m) => threshold_map(m, &fb.params, |p| match p {
                    FusedChannelParams::Int(t) => Some(t),
                    _ => None,
                })?,
            };
            if keep {
                block_outputs.push(bits.clone());
            }
            act = Activation::Binary(bits);
        }
        unreachable!("validated networks have at least one block")
    }

    /// Same decisions as [`FusedModel::forward`] but every convolution is a
    /// dense `f32` loop over unpacked ±1 weights. Benchmark baseline.
    pub fn forward_dense(&self, standardized: &[f32]) -> Result<Prediction> {
        let cfg = &self.config;
        check_input_length(cfg, 1, standardized.len())?;
        let x = RealFeatureMap::from_segment(standardized);
        let mut act = if cfg.real_input_block(0) { x } else { signs_as_real(&x) };
        let last = cfg.last_block();
        for (i, (fb, b)) in self.blocks.iter().zip(&cfg.blocks).enumerate() {
            let pooled = maxpool1d(&dense_conv(&act, &fb.weights, &b.conv)?, b.pool_size, b.pool_stride)?;
            if i == last {
                let logits = affine_gsp(&pooled, &fb.params)?;
                return Ok(Prediction {
                    class: argmax_head(&logits)?,
                    logits,
                });
            }
            act = FeatureMap::from_fn(pooled.channels(), pooled.length(), |c, t| {
                let v = pooled.get(c, t);
                let fires = match &fb.params[c] {
                    FusedChannelParams::Real(p) => p.fires(v),
                    FusedChannelParams::Int(p) => p.fires(v as i32),
                    FusedChannelParams::Affine(_) => false,
                };
                if fires {
                    1.0
                } else {
                    -1.0
                }
            });
        }
        unreachable!("validated networks have at least one block")
    }
}

fn threshold_map<T: fusion::Threshold>(
    m: &FeatureMap<T>,
    params: &[FusedChannelParams],
    pick: impl Fn(&FusedChannelParams) -> Option<&fusion::ThresholdParams<T>>,
) -> Result<BinaryTensor> {
    let ts = params
        .iter()
        .map(|p| pick(p).ok_or_else(|| Error::InvalidInput(format!("unexpected parameter kind {p:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(BinaryTensor::from_fn(m.channels(), m.length(), |c, t| ts[c].fires(m.get(c, t))))
}

fn affine_gsp<T: Copy + Into<f64>>(m: &FeatureMap<T>, params: &[FusedChannelParams]) -> Result<Vec<f64>> {
    let aff = params
        .iter()
        .map(|p| match p {
            FusedChannelParams::Affine(a) => Ok(*a),
            other => Err(Error::InvalidInput(format!("last block needs affine parameters, got {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    gsp(&FeatureMap::from_fn(m.channels(), m.length(), |c, t| aff[c].apply(m.get(c, t).into())))
}
