//! Bit-packed ±1 vectors and the word-level XNOR-POPCOUNT dot product.
//!
//! Bit convention: `+1` is stored as a set bit, `-1` as a clear bit. Logical
//! bit `i` lives in word `i / 64` at position `i % 64` (least significant
//! first). Bits past `len` in the last word are always zero.

use crate::error::{Error, Result};

/// Bits per storage word.
pub const WORD_BITS: usize = 64;

#[inline]
pub(crate) fn words_for(n_bits: usize) -> usize {
    n_bits.div_ceil(WORD_BITS)
}

#[inline]
fn low_mask(n: usize) -> u64 {
    if n >= WORD_BITS {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// A ±1 vector stored one bit per element.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PackedBitVector {
    words: Vec<u64>,
    len: usize,
}

impl PackedBitVector {
    /// All `-1`.
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    /// All `+1`.
    pub fn ones(len: usize) -> Self {
        Self::from_fn(len, |_| true)
    }

    /// Builds a vector where bit `i` is `f(i)` (`true` meaning `+1`).
    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut words = vec![0u64; words_for(len)];
        for i in 0..len {
            if f(i) {
                words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        Self { words, len }
    }

    /// Packs a sequence of `+1`/`-1` values.
    pub fn from_signs(values: &[i8]) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| **v != 1 && **v != -1) {
            return Err(Error::InvalidValue(format!(
                "element {i} is {v}, expected +1 or -1"
            )));
        }
        Ok(Self::from_fn(values.len(), |i| values[i] == 1))
    }

    /// Wraps raw words, rejecting set bits beyond `len`.
    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::Dimension(format!(
                "{} words cannot hold exactly {len} bits",
                words.len()
            )));
        }
        let tail = len % WORD_BITS;
        if tail != 0 && words[words.len() - 1] & !low_mask(tail) != 0 {
            return Err(Error::InvalidValue(
                "set bits beyond the logical length".into(),
            ));
        }
        Ok(Self { words, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// `true` when element `i` is `+1`.
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    /// Element `i` as `+1`/`-1`.
    pub fn sign(&self, i: usize) -> i8 {
        if self.bit(i) {
            1
        } else {
            -1
        }
    }

    /// Number of `+1` elements.
    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Reads `width <= 64` consecutive bits starting at `offset`, LSB first.
    #[inline]
    pub fn extract(&self, offset: usize, width: usize) -> u64 {
        debug_assert!(width <= WORD_BITS && offset + width <= self.len);
        if width == 0 {
            return 0;
        }
        let word = offset / WORD_BITS;
        let shift = offset % WORD_BITS;
        let mut bits = self.words[word] >> shift;
        if shift != 0 && shift + width > WORD_BITS {
            bits |= self.words[word + 1] << (WORD_BITS - shift);
        }
        bits & low_mask(width)
    }

    /// Unpacks into `+1`/`-1` values.
    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.sign(i)).collect()
    }

    /// Copies out `len` bits starting at `offset`.
    pub fn slice(&self, offset: usize, len: usize) -> Self {
        assert!(offset + len <= self.len, "slice out of range");
        let mut out = BitWriter::new(len);
        let mut pos = 0;
        while pos < len {
            let width = (len - pos).min(WORD_BITS);
            out.write(pos, self.extract(offset + pos, width), width);
            pos += width;
        }
        out.finish()
    }
}

/// Packs `+1`/`-1` values into a [`PackedBitVector`].
pub fn pack(values: &[i8]) -> Result<PackedBitVector> {
    PackedBitVector::from_signs(values)
}

/// Inverse of [`pack`].
pub fn unpack(v: &PackedBitVector) -> Vec<i8> {
    v.to_signs()
}

/// Number of agreeing positions between two word slices holding `n_bits`
/// valid bits each (trailing bits must be zero in both).
#[inline]
pub(crate) fn agreements(a: &[u64], b: &[u64], n_bits: usize) -> u32 {
    let raw: u32 = a.iter().zip(b).map(|(x, y)| (!(x ^ y)).count_ones()).sum();
    // Trailing zero bits agree in both operands and must not be counted.
    raw - (a.len() * WORD_BITS - n_bits) as u32
}

/// ±1 dot product of two packed vectors: `2 * popcount(xnor(a, b)) - n`.
pub fn xnor_popcount_dot(a: &PackedBitVector, b: &PackedBitVector) -> Result<i32> {
    if a.len != b.len {
        return Err(Error::Dimension(format!(
            "xnor_popcount_dot on lengths {} and {}",
            a.len, b.len
        )));
    }
    Ok(2 * agreements(&a.words, &b.words, a.len) as i32 - a.len as i32)
}

/// Incremental builder used by the convolution kernels to assemble windows.
#[derive(Debug, Clone)]
pub(crate) struct BitWriter {
    words: Vec<u64>,
    len: usize,
}

impl BitWriter {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    pub(crate) fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    /// ORs the low `width` bits of `bits` in at `offset`. The target range must be clear.
    #[inline]
    pub(crate) fn write(&mut self, offset: usize, bits: u64, width: usize) {
        debug_assert!(offset + width <= self.len);
        if width == 0 {
            return;
        }
        let bits = bits & low_mask(width);
        let word = offset / WORD_BITS;
        let shift = offset % WORD_BITS;
        self.words[word] |= bits << shift;
        if shift != 0 && shift + width > WORD_BITS {
            self.words[word + 1] |= bits >> (WORD_BITS - shift);
        }
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize) {
        self.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
    }

    pub(crate) fn words(&self) -> &[u64] {
        &self.words
    }

    pub(crate) fn finish(self) -> PackedBitVector {
        PackedBitVector {
            words: self.words,
            len: self.len,
        }
    }
}

/// A `[channels, length]` map of ±1 activations, one packed vector per channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryTensor {
    channels: usize,
    length: usize,
    rows: Vec<PackedBitVector>,
}

impl BinaryTensor {
    pub fn from_rows(rows: Vec<PackedBitVector>) -> Result<Self> {
        let length = rows.first().map_or(0, PackedBitVector::len);
        if rows.iter().any(|r| r.len() != length) {
            return Err(Error::Dimension("rows of a binary tensor differ in length".into()));
        }
        Ok(Self {
            channels: rows.len(),
            length,
            rows,
        })
    }

    pub fn from_fn(channels: usize, length: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let rows = (0..channels)
            .map(|c| PackedBitVector::from_fn(length, |t| f(c, t)))
            .collect();
        Self {
            channels,
            length,
            rows,
        }
    }

    /// Packs a channel-major `[channels * length]` slice of ±1 values.
    pub fn from_signs(channels: usize, length: usize, values: &[i8]) -> Result<Self> {
        if values.len() != channels * length {
            return Err(Error::Dimension(format!(
                "{} values for a [{channels}, {length}] tensor",
                values.len()
            )));
        }
        let rows = values
            .chunks(length.max(1))
            .take(channels)
            .map(PackedBitVector::from_signs)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            length,
            rows,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn row(&self, c: usize) -> &PackedBitVector {
        &self.rows[c]
    }

    pub fn rows(&self) -> &[PackedBitVector] {
        &self.rows
    }

    pub fn sign(&self, c: usize, t: usize) -> i8 {
        self.rows[c].sign(t)
    }

    /// Channel-major ±1 values.
    pub fn to_signs(&self) -> Vec<i8> {
        self.rows.iter().flat_map(PackedBitVector::to_signs).collect()
    }
}

/// Binarized convolution weights `[out_channels, in_channels, taps]`.
///
/// Each output channel is one packed row of `in_channels * taps` bits laid out
/// in-channel-major, so bit `i * taps + k` is tap `k` of input channel `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryWeights {
    out_channels: usize,
    in_channels: usize,
    taps: usize,
    rows: Vec<PackedBitVector>,
}

impl BinaryWeights {
    pub fn from_rows(
        in_channels: usize,
        taps: usize,
        rows: Vec<PackedBitVector>,
    ) -> Result<Self> {
        let width = in_channels * taps;
        if let Some(r) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::Dimension(format!(
                "weight row of {} bits, expected {in_channels} x {taps}",
                r.len()
            )));
        }
        Ok(Self {
            out_channels: rows.len(),
            in_channels,
            taps,
            rows,
        })
    }

    /// Packs `[out, in, taps]` ±1 values given in row-major order.
    pub fn from_signs(
        out_channels: usize,
        in_channels: usize,
        taps: usize,
        values: &[i8],
    ) -> Result<Self> {
        let width = in_channels * taps;
        if values.len() != out_channels * width {
            return Err(Error::Dimension(format!(
                "{} values for [{out_channels}, {in_channels}, {taps}] weights",
                values.len()
            )));
        }
        let rows = (0..out_channels)
            .map(|o| PackedBitVector::from_signs(&values[o * width..(o + 1) * width]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(in_channels, taps, rows)
    }

    /// Binarizes real latent weights with `sign` (zero maps to `+1`).
    pub fn from_latent(
        out_channels: usize,
        in_channels: usize,
        taps: usize,
        latent: &[f32],
    ) -> Result<Self> {
        let width = in_channels * taps;
        if latent.len() != out_channels * width {
            return Err(Error::Dimension(format!(
                "{} latent weights for [{out_channels}, {in_channels}, {taps}]",
                latent.len()
            )));
        }
        let rows = (0..out_channels)
            .map(|o| PackedBitVector::from_fn(width, |j| latent[o * width + j] >= 0.0))
            .collect();
        Self::from_rows(in_channels, taps, rows)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn row(&self, o: usize) -> &PackedBitVector {
        &self.rows[o]
    }

    pub fn rows(&self) -> &[PackedBitVector] {
        &self.rows
    }

    /// Weight `(o, i, k)` as ±1.
    pub fn sign(&self, o: usize, i: usize, k: usize) -> i8 {
        self.rows[o].sign(i * self.taps + k)
    }

    /// Row-major ±1 values.
    pub fn to_signs(&self) -> Vec<i8> {
        self.rows.iter().flat_map(PackedBitVector::to_signs).collect()
    }

    /// Total number of weight bits.
    pub fn n_bits(&self) -> usize {
        self.out_channels * self.in_channels * self.taps
    }
}
