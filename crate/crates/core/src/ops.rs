//! Layer primitives: convolutions, pooling, PReLU, inference batch norm,
//! `sign`, the fused threshold activation, global sum pooling and the
//! comparator head.
//!
//! Feature maps are channel-major `[channels, length]`. Integer maps carry
//! popcount-domain values from binary convolutions; real maps carry the
//! standardized input and the real-input first block.

use serde::{Deserialize, Serialize};

use crate::bintensor::{agreements, BinaryTensor, BinaryWeights, BitWriter, PackedBitVector, WORD_BITS};
use crate::error::{Error, Result};
use crate::fusion::{Threshold, ThresholdParams};

/// Dense `[channels, length]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    length: usize,
    data: Vec<T>,
}

/// Popcount-domain accumulations.
pub type IntFeatureMap = FeatureMap<i32>;
/// Real activations.
pub type RealFeatureMap = FeatureMap<f32>;

impl<T: Copy> FeatureMap<T> {
    pub fn new(channels: usize, length: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * length {
            return Err(Error::Dimension(format!(
                "{} values for a [{channels}, {length}] map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            length,
            data,
        })
    }

    pub fn from_fn(channels: usize, length: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(channels * length);
        for c in 0..channels {
            for t in 0..length {
                data.push(f(c, t));
            }
        }
        Self {
            channels,
            length,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, c: usize) -> &[T] {
        &self.data[c * self.length..(c + 1) * self.length]
    }

    pub fn get(&self, c: usize, t: usize) -> T {
        self.data[c * self.length + t]
    }
}

impl RealFeatureMap {
    /// A single-channel map over one input segment.
    pub fn from_segment(samples: &[f32]) -> Self {
        Self {
            channels: 1,
            length: samples.len(),
            data: samples.to_vec(),
        }
    }
}

/// Convolution geometry shared by the binary and real-input kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub taps: usize,
    pub stride: usize,
    pub padding: usize,
    /// Value used for the padded border. Binary kernels accept only `+1.0` or `-1.0`.
    pub pad_value: f32,
}

impl ConvSpec {
    pub fn new(taps: usize, stride: usize, padding: usize, pad_value: f32) -> Self {
        Self {
            taps,
            stride,
            padding,
            pad_value,
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.taps == 0 || self.stride == 0 {
            return Err(Error::InvalidValue(format!(
                "kernel taps ({}) and stride ({}) must be positive",
                self.taps, self.stride
            )));
        }
        if !self.pad_value.is_finite() {
            return Err(Error::InvalidValue("non-finite pad value".into()));
        }
        Ok(())
    }

    fn binary_pad(&self) -> Result<bool> {
        match self.pad_value {
            1.0 => Ok(true),
            -1.0 => Ok(false),
            v => Err(Error::InvalidValue(format!(
                "binary convolution pad value must be +1 or -1, got {v}"
            ))),
        }
    }
}

/// `floor((len + 2 * padding - taps) / stride) + 1`.
pub fn conv_output_length(len: usize, taps: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidValue("stride must be positive".into()));
    }
    let padded = len + 2 * padding;
    if taps == 0 || padded < taps {
        return Err(Error::EmptyOutput(format!(
            "length {len} with padding {padding} is shorter than kernel {taps}"
        )));
    }
    Ok((padded - taps) / stride + 1)
}

/// `floor((len - size) / stride) + 1`; pooling never pads.
pub fn pool_output_length(len: usize, size: usize, stride: usize) -> Result<usize> {
    if stride == 0 || size == 0 {
        return Err(Error::InvalidValue("pool size and stride must be positive".into()));
    }
    if len < size {
        return Err(Error::EmptyOutput(format!(
            "length {len} is shorter than pool window {size}"
        )));
    }
    Ok((len - size) / stride + 1)
}

fn padded_row(row: &PackedBitVector, padding: usize, pad: bool) -> PackedBitVector {
    let len = row.len();
    let mut w = BitWriter::new(len + 2 * padding);
    if pad {
        for i in (0..padding).chain(padding + len..len + 2 * padding) {
            w.set(i);
        }
    }
    let mut pos = 0;
    while pos < len {
        let width = (len - pos).min(WORD_BITS);
        w.write(padding + pos, row.extract(pos, width), width);
        pos += width;
    }
    w.finish()
}

/// XNOR-POPCOUNT 1-D convolution of a ±1 map with ±1 weights.
///
/// Each output is the exact ±1 dot product of the padded input window with
/// the weight row, so it lies in `[-n, n]` with the parity of
/// `n = in_channels * taps`. No bias.
pub fn binary_conv1d(
    input: &BinaryTensor,
    weights: &BinaryWeights,
    spec: &ConvSpec,
) -> Result<IntFeatureMap> {
    spec.check()?;
    let pad = spec.binary_pad()?;
    if weights.in_channels() != input.channels() || weights.taps() != spec.taps {
        return Err(Error::Dimension(format!(
            "weights [{}, {}, {}] do not fit input with {} channels and kernel {}",
            weights.out_channels(),
            weights.in_channels(),
            weights.taps(),
            input.channels(),
            spec.taps
        )));
    }
    let out_len = conv_output_length(input.length(), spec.taps, spec.stride, spec.padding)?;
    let taps = spec.taps;
    let n_bits = input.channels() * taps;
    let padded: Vec<PackedBitVector> = input
        .rows()
        .iter()
        .map(|r| padded_row(r, spec.padding, pad))
        .collect();

    let cout = weights.out_channels();
    let mut data = vec![0i32; cout * out_len];
    let mut window = BitWriter::new(n_bits);
    for t in 0..out_len {
        window.clear();
        let start = t * spec.stride;
        for (i, row) in padded.iter().enumerate() {
            let mut k = 0;
            while k < taps {
                let width = (taps - k).min(WORD_BITS);
                window.write(i * taps + k, row.extract(start + k, width), width);
                k += width;
            }
        }
        for o in 0..cout {
            let agree = agreements(weights.row(o).words(), window.words(), n_bits);
            data[o * out_len + t] = 2 * agree as i32 - n_bits as i32;
        }
    }
    FeatureMap::new(cout, out_len, data)
}

/// Convolution of a real single-channel input with ±1 weights.
///
/// Only signed additions are performed, accumulated in tap order.
pub fn real_input_conv1d(
    input: &RealFeatureMap,
    weights: &BinaryWeights,
    spec: &ConvSpec,
) -> Result<RealFeatureMap> {
    spec.check()?;
    if input.channels() != 1 || weights.in_channels() != 1 || weights.taps() != spec.taps {
        return Err(Error::Dimension(format!(
            "real-input convolution needs one input channel and [{}, 1, {}] weights, got {} channels and [{}, {}, {}]",
            weights.out_channels(),
            spec.taps,
            input.channels(),
            weights.out_channels(),
            weights.in_channels(),
            weights.taps()
        )));
    }
    let len = input.length();
    let out_len = conv_output_length(len, spec.taps, spec.stride, spec.padding)?;
    let x = input.data();
    let sample = |pos: usize| -> f32 {
        if pos < spec.padding || pos >= spec.padding + len {
            spec.pad_value
        } else {
            x[pos - spec.padding]
        }
    };
    let cout = weights.out_channels();
    let mut data = Vec::with_capacity(cout * out_len);
    for o in 0..cout {
        let signs: Vec<bool> = (0..spec.taps).map(|k| weights.row(o).bit(k)).collect();
        for t in 0..out_len {
            let start = t * spec.stride;
            let mut acc = 0.0f32;
            for (k, plus) in signs.iter().enumerate() {
                let v = sample(start + k);
                if *plus {
                    acc += v;
                } else {
                    acc -= v;
                }
            }
            data.push(acc);
        }
    }
    FeatureMap::new(cout, out_len, data)
}

/// Max pooling without padding; ties keep the first maximum.
pub fn maxpool1d<T: Copy + PartialOrd>(
    x: &FeatureMap<T>,
    size: usize,
    stride: usize,
) -> Result<FeatureMap<T>> {
    let out_len = pool_output_length(x.length(), size, stride)?;
    let mut data = Vec::with_capacity(x.channels() * out_len);
    for c in 0..x.channels() {
        let row = x.row(c);
        for t in 0..out_len {
            let window = &row[t * stride..t * stride + size];
            let mut best = window[0];
            for &v in &window[1..] {
                if v > best {
                    best = v;
                }
            }
            data.push(best);
        }
    }
    FeatureMap::new(x.channels(), out_len, data)
}

/// `x` for `x >= 0`, `a * x` otherwise.
#[inline]
pub fn prelu(x: f64, a: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a * x
    }
}

/// Batch normalization with frozen statistics: `(x - mu) / sqrt(var + eps) * gamma + beta`.
#[inline]
pub fn batchnorm_infer(x: f64, mu: f64, var: f64, gamma: f64, beta: f64, eps: f64) -> f64 {
    (x - mu) / (var + eps).sqrt() * gamma + beta
}

/// `+1` for `x >= 0` (including zero), `-1` otherwise.
#[inline]
pub fn sign<T: PartialOrd + Default>(x: T) -> i8 {
    if x >= T::default() {
        1
    } else {
        -1
    }
}

/// Thresholded activation replacing `sign(BN(PReLU(x)))` for one channel.
#[inline]
pub fn fused_activation<T: Threshold>(x: T, p: &ThresholdParams<T>) -> i8 {
    if p.fires(x) {
        1
    } else {
        -1
    }
}

/// PReLU followed by batch norm folded into one piecewise-affine map.
#[inline]
pub fn fused_affine(x: f64, k: f64, b: f64, a: f64) -> f64 {
    if x >= 0.0 {
        k * x + b
    } else {
        a * k * x + b
    }
}

/// Global sum pooling: per-channel sum over time, no division.
pub fn gsp<T: Copy + Into<f64>>(x: &FeatureMap<T>) -> Result<Vec<f64>> {
    if x.length() == 0 {
        return Err(Error::EmptyOutput("global sum pooling over zero steps".into()));
    }
    Ok((0..x.channels())
        .map(|c| x.row(c).iter().map(|&v| v.into()).sum())
        .collect())
}

/// Comparator head: index of the largest logit, lowest index on ties.
pub fn argmax_head(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Dimension("argmax of an empty vector".into()));
    }
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}
