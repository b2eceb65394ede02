//! On-disk formats for fused models (`BECG`) and training checkpoints (`BECK`).
//!
//! All integers and floats are little-endian. Both files end with a CRC32 of
//! every preceding byte.
//!
//! # Model file
//!
//! ```text
//! header   "BECG" | version u8 | mode u8 | n_blocks u8 | n_classes u16 | input_length u32
//!          per block: Cin u16 | Cout u16 | K u8 | stride u8 | padding u8 | pad i8 | pool u8 | pool stride u8
//! weights  per block: Cout·Cin·K bits in (out, in, tap) order, LSB-first, zero-padded to a byte
//! params   per block, zero-padded to a byte:
//!            integer thresholds  per channel: pos code, neg code (bit-packed, see below)
//!            real thresholds     per channel a 4-bit direction nibble, then t_pos f32, t_neg f32
//!            affine              per channel: k f32, b f32, a f32
//! crc32
//! ```
//!
//! An integer branch code indexes the lattice points of its half domain
//! (`m` points): `0` always −1, `1` always +1, `2 + i` is `x >= p_i` and
//! `2 + m + i` is `x <= p_i`. Codes are `ceil(log2(2m + 2))` bits wide.
//! Direction nibbles hold the pos direction in bits 0–1 and the neg
//! direction in bits 2–3 (`0` ≥, `1` ≤, `2` always +1, `3` always −1).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bintensor::{BinaryWeights, PackedBitVector};
use crate::error::{Error, FormatError, Result};
use crate::fusion::{AffineParams, Branch, Domain, FusedChannelParams, IntDomain, ThresholdParams};
use crate::model::{BlockConfig, BlockParams, FusedBlock, FusedModel, Mode, NetConfig, TrainedParams};
use crate::ops::ConvSpec;
use crate::train::{EpochRecord, OptimizerKind, OptimizerState, Surrogate, SurrogateKind, TrainConfig, Trainer};

pub const MODEL_MAGIC: [u8; 4] = *b"BECG";
pub const MODEL_VERSION: u8 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BECK";
pub const CHECKPOINT_VERSION: u8 = 1;

const HEADER_FIXED: usize = 13;
const HEADER_PER_BLOCK: usize = 10;
const CRC_LEN: usize = 4;

/// LSB-first bit appender over bytes.
struct BitSink {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitSink {
    fn new() -> Self {
        Self { bytes: Vec::new(), bit: 0 }
    }

    fn push(&mut self, value: u64, width: usize) {
        for j in 0..width {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if value >> j & 1 == 1 {
                *self.bytes.last_mut().expect("byte pushed above") |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitSource<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitSource<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, bit: 0 }
    }

    fn pull(&mut self, width: usize) -> u64 {
        let mut v = 0u64;
        for j in 0..width {
            let b = self.bytes[self.bit / 8] >> (self.bit % 8) & 1;
            v |= u64::from(b) << j;
            self.bit += 1;
        }
        v
    }
}

/// Bounds-checked little-endian reader reporting [`FormatError::Truncated`].
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.bytes.len(),
                needed: n - (self.bytes.len() - self.pos),
            }
            .into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    FormatError::Malformed(msg.into()).into()
}

fn check_magic_version(bytes: &[u8], magic: [u8; 4], version: u8) -> Result<()> {
    let mut r = Reader::new(bytes);
    let found = r.array::<4>()?;
    if found != magic {
        return Err(FormatError::BadMagic { expected: magic, found }.into());
    }
    let v = r.u8()?;
    if v != version {
        return Err(FormatError::UnsupportedVersion {
            expected: version,
            found: v,
        }
        .into());
    }
    Ok(())
}

fn check_crc(bytes: &[u8]) -> Result<()> {
    let body = bytes.len() - CRC_LEN;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("four bytes"));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    Ok(())
}

fn to_u8(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::InvalidValue(format!("{what} {v} does not fit in a byte")))
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::InvalidValue(format!("{what} {v} does not fit in 16 bits")))
}

/// Network description shared by both formats (everything after the version byte).
fn encode_net(cfg: &NetConfig, out: &mut Vec<u8>) -> Result<()> {
    cfg.validate()?;
    out.push(cfg.mode.code());
    out.push(to_u8(cfg.blocks.len(), "block count")?);
    out.extend_from_slice(&to_u16(cfg.n_classes, "class count")?.to_le_bytes());
    let len = u32::try_from(cfg.input_length)
        .map_err(|_| Error::InvalidValue("input length exceeds 32 bits".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    for b in &cfg.blocks {
        out.extend_from_slice(&to_u16(b.in_channels, "input channels")?.to_le_bytes());
        out.extend_from_slice(&to_u16(b.out_channels, "output channels")?.to_le_bytes());
        out.push(to_u8(b.conv.taps, "kernel size")?);
        out.push(to_u8(b.conv.stride, "stride")?);
        out.push(to_u8(b.conv.padding, "padding")?);
        // validate() guarantees an integral pad in [-128, 127]
        out.push((b.conv.pad_value as i8) as u8);
        out.push(to_u8(b.pool_size, "pool size")?);
        out.push(to_u8(b.pool_stride, "pool stride")?);
    }
    Ok(())
}

fn decode_net(r: &mut Reader<'_>) -> Result<NetConfig> {
    let mode = r.u8()?;
    let mode = Mode::from_code(mode).ok_or_else(|| malformed(format!("unknown mode code {mode}")))?;
    let n_blocks = usize::from(r.u8()?);
    let n_classes = usize::from(r.u16()?);
    let input_length = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let in_channels = usize::from(r.u16()?);
        let out_channels = usize::from(r.u16()?);
        let taps = usize::from(r.u8()?);
        let stride = usize::from(r.u8()?);
        let padding = usize::from(r.u8()?);
        let pad = f32::from(r.u8()? as i8);
        let pool_size = usize::from(r.u8()?);
        let pool_stride = usize::from(r.u8()?);
        blocks.push(BlockConfig {
            in_channels,
            out_channels,
            conv: ConvSpec::new(taps, stride, padding, pad),
            pool_size,
            pool_stride,
        });
    }
    let bp_pad_value = match (mode, blocks.first()) {
        (Mode::Bp, Some(b)) => b.conv.pad_value,
        _ => 1.0,
    };
    let cfg = NetConfig {
        blocks,
        n_classes,
        mode,
        input_length,
        bp_pad_value,
    };
    cfg.validate().map_err(|e| malformed(format!("invalid network description: {e}")))?;
    Ok(cfg)
}

fn bits_for(values: usize) -> usize {
    (usize::BITS - (values.max(2) - 1).leading_zeros()) as usize
}

/// `(lo, count)` lattice indices of each half of an integer domain.
fn halves(d: &IntDomain) -> [(i64, usize); 2] {
    let (plo, phi) = d.pos_indices();
    let (nlo, nhi) = d.neg_indices();
    [(plo, (phi - plo + 1) as usize), (nlo, (nhi - nlo + 1).max(0) as usize)]
}

fn code_width(count: usize) -> usize {
    bits_for(2 * count + 2)
}

fn packed_weight_bytes(b: &BlockConfig) -> usize {
    b.weight_count().div_ceil(8)
}

/// Bytes of block `i`'s fused-parameter section.
pub fn params_section_len(cfg: &NetConfig, i: usize) -> usize {
    let b = &cfg.blocks[i];
    let c = b.out_channels;
    if i == cfg.last_block() {
        return 12 * c;
    }
    match cfg.fusion_domain(i) {
        Domain::Real => c.div_ceil(2) + 8 * c,
        Domain::Int(d) => {
            let [(_, mp), (_, mn)] = halves(&d);
            (c * (code_width(mp) + code_width(mn))).div_ceil(8)
        }
    }
}

/// Bytes of the packed-weight sections.
pub fn weight_section_len(cfg: &NetConfig) -> usize {
    cfg.blocks.iter().map(packed_weight_bytes).sum()
}

/// Bytes of all fused-parameter sections.
pub fn params_sections_len(cfg: &NetConfig) -> usize {
    (0..cfg.blocks.len()).map(|i| params_section_len(cfg, i)).sum()
}

pub fn header_len(cfg: &NetConfig) -> usize {
    HEADER_FIXED + HEADER_PER_BLOCK * cfg.blocks.len()
}

/// Exact size of the model file for `cfg`.
pub fn model_file_len(cfg: &NetConfig) -> usize {
    header_len(cfg) + weight_section_len(cfg) + params_sections_len(cfg) + CRC_LEN
}

fn encode_int_branch(br: &Branch<i32>, d: &IntDomain, lo: i64, count: usize) -> Result<u64> {
    let index = |t: i32| -> Result<u64> {
        let idx = i64::from(t + d.bound()) / i64::from(d.step()) - lo;
        if !d.contains(t) || idx < 0 || idx as usize >= count {
            return Err(Error::InvalidValue(format!("threshold {t} is not a point of this branch's domain")));
        }
        Ok(idx as u64)
    };
    Ok(match *br {
        Branch::AlwaysNeg => 0,
        Branch::AlwaysPos => 1,
        Branch::AtLeast(t) => 2 + index(t)?,
        Branch::AtMost(t) => 2 + count as u64 + index(t)?,
    })
}

fn decode_int_branch(code: u64, d: &IntDomain, lo: i64, count: usize) -> Result<Branch<i32>> {
    let m = count as u64;
    Ok(match code {
        0 => Branch::AlwaysNeg,
        1 => Branch::AlwaysPos,
        c if c < 2 + m => Branch::AtLeast(d.point(lo + (c - 2) as i64)),
        c if c < 2 + 2 * m => Branch::AtMost(d.point(lo + (c - 2 - m) as i64)),
        c => return Err(malformed(format!("branch code {c} out of range"))),
    })
}

fn real_dir(br: &Branch<f32>) -> (u8, f32) {
    match *br {
        Branch::AtLeast(t) => (0, t),
        Branch::AtMost(t) => (1, t),
        Branch::AlwaysPos => (2, 0.0),
        Branch::AlwaysNeg => (3, 0.0),
    }
}

fn real_branch(dir: u8, t: f32) -> Result<Branch<f32>> {
    if !t.is_finite() {
        return Err(malformed("non-finite real threshold"));
    }
    Ok(match dir {
        0 => Branch::AtLeast(t),
        1 => Branch::AtMost(t),
        2 => Branch::AlwaysPos,
        _ => Branch::AlwaysNeg,
    })
}

fn encode_params(cfg: &NetConfig, i: usize, params: &[FusedChannelParams]) -> Result<Vec<u8>> {
    let wrong = || Error::InvalidInput(format!("block {} holds parameters of the wrong kind", i + 1));
    let mut out = Vec::with_capacity(params_section_len(cfg, i));
    if i == cfg.last_block() {
        for p in params {
            let FusedChannelParams::Affine(a) = p else { return Err(wrong()) };
            for v in [a.k, a.b, a.a] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        return Ok(out);
    }
    match cfg.fusion_domain(i) {
        Domain::Real => {
            let ts = params
                .iter()
                .map(|p| match p {
                    FusedChannelParams::Real(t) => Ok(t),
                    _ => Err(wrong()),
                })
                .collect::<Result<Vec<_>>>()?;
            let mut nibbles = BitSink::new();
            let mut values = Vec::with_capacity(8 * ts.len());
            for t in &ts {
                let (dp, tp) = real_dir(&t.pos);
                let (dn, tn) = real_dir(&t.neg);
                nibbles.push(u64::from(dp | dn << 2), 4);
                values.extend_from_slice(&tp.to_le_bytes());
                values.extend_from_slice(&tn.to_le_bytes());
            }
            out.extend(nibbles.finish());
            out.extend(values);
        }
        Domain::Int(d) => {
            let [(plo, mp), (nlo, mn)] = halves(&d);
            let (wp, wn) = (code_width(mp), code_width(mn));
            let mut sink = BitSink::new();
            for p in params {
                let FusedChannelParams::Int(t) = p else { return Err(wrong()) };
                sink.push(encode_int_branch(&t.pos, &d, plo, mp)?, wp);
                sink.push(encode_int_branch(&t.neg, &d, nlo, mn)?, wn);
            }
            out.extend(sink.finish());
        }
    }
    Ok(out)
}

fn decode_params(cfg: &NetConfig, i: usize, bytes: &[u8]) -> Result<Vec<FusedChannelParams>> {
    let c = cfg.blocks[i].out_channels;
    if i == cfg.last_block() {
        let mut r = Reader::new(bytes);
        return (0..c)
            .map(|_| {
                let (k, b, a) = (r.f32()?, r.f32()?, r.f32()?);
                if !(k.is_finite() && b.is_finite() && a.is_finite()) {
                    return Err(malformed("non-finite affine parameters"));
                }
                Ok(FusedChannelParams::Affine(AffineParams { k, b, a }))
            })
            .collect();
    }
    match cfg.fusion_domain(i) {
        Domain::Real => {
            let nib_len = c.div_ceil(2);
            let mut nib = BitSource::new(&bytes[..nib_len]);
            let mut r = Reader::new(&bytes[nib_len..]);
            (0..c)
                .map(|_| {
                    let d = nib.pull(4) as u8;
                    let pos = real_branch(d & 3, r.f32()?)?;
                    let neg = real_branch(d >> 2 & 3, r.f32()?)?;
                    Ok(FusedChannelParams::Real(ThresholdParams { pos, neg }))
                })
                .collect()
        }
        Domain::Int(d) => {
            let [(plo, mp), (nlo, mn)] = halves(&d);
            let (wp, wn) = (code_width(mp), code_width(mn));
            let mut src = BitSource::new(bytes);
            (0..c)
                .map(|_| {
                    let pos = decode_int_branch(src.pull(wp), &d, plo, mp)?;
                    let neg = decode_int_branch(src.pull(wn), &d, nlo, mn)?;
                    Ok(FusedChannelParams::Int(ThresholdParams { pos, neg }))
                })
                .collect()
        }
    }
}

fn encode_weights(w: &BinaryWeights) -> Vec<u8> {
    let mut sink = BitSink::new();
    for row in w.rows() {
        let mut pos = 0;
        while pos < row.len() {
            let width = (row.len() - pos).min(64);
            sink.push(row.extract(pos, width), width);
            pos += width;
        }
    }
    sink.finish()
}

fn decode_weights(b: &BlockConfig, bytes: &[u8]) -> Result<BinaryWeights> {
    let mut src = BitSource::new(bytes);
    let width = b.fan_in();
    let rows = (0..b.out_channels)
        .map(|_| PackedBitVector::from_fn(width, |_| src.pull(1) == 1))
        .collect();
    BinaryWeights::from_rows(b.in_channels, b.conv.taps, rows)
}

/// Serializes a fused model.
pub fn encode_model(m: &FusedModel) -> Result<Vec<u8>> {
    m.check()?;
    let cfg = &m.config;
    let mut out = Vec::with_capacity(model_file_len(cfg));
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    encode_net(cfg, &mut out)?;
    for fb in &m.blocks {
        out.extend(encode_weights(&fb.weights));
    }
    for (i, fb) in m.blocks.iter().enumerate() {
        out.extend(encode_params(cfg, i, &fb.params)?);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len(), model_file_len(cfg));
    Ok(out)
}

/// Inverse of [`encode_model`].
pub fn decode_model(bytes: &[u8]) -> Result<FusedModel> {
    check_magic_version(bytes, MODEL_MAGIC, MODEL_VERSION)?;
    let mut r = Reader::new(bytes);
    r.take(5)?;
    let cfg = decode_net(&mut r)?;
    let total = model_file_len(&cfg);
    if bytes.len() < total {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: total - bytes.len(),
        }
        .into());
    }
    if bytes.len() > total {
        return Err(FormatError::TrailingBytes(bytes.len() - total).into());
    }
    check_crc(bytes)?;
    let weights = cfg
        .blocks
        .iter()
        .map(|b| decode_weights(b, r.take(packed_weight_bytes(b))?))
        .collect::<Result<Vec<_>>>()?;
    let blocks = weights
        .into_iter()
        .enumerate()
        .map(|(i, weights)| {
            let params = decode_params(&cfg, i, r.take(params_section_len(&cfg, i))?)?;
            Ok(FusedBlock { weights, params })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = FusedModel { config: cfg, blocks };
    m.check().map_err(|e| malformed(e.to_string()))?;
    Ok(m)
}

/// Writes `m` to `path` and returns the file size.
pub fn save_model(m: &FusedModel, path: &Path) -> Result<usize> {
    let bytes = encode_model(m)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_model(path: &Path) -> Result<FusedModel> {
    decode_model(&fs::read(path)?)
}

/// Everything needed to continue a training run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub params: TrainedParams,
    pub opt: OptimizerState,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            net: t.net.clone(),
            train: t.cfg.clone(),
            params: t.params.clone(),
            opt: t.opt.clone(),
            epoch: t.epoch,
            rng: t.rng.clone(),
            history: t.history.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer {
            net: self.net,
            cfg: self.train,
            params: self.params,
            opt: self.opt,
            rng: self.rng,
            epoch: self.epoch,
            history: self.history,
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidValue(format!("{what} {v} exceeds 32 bits")))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.params.check(&ck.net)?;
    let expected = OptimizerState::new(&ck.params);
    let same_shape = |a: &Vec<Vec<f32>>, b: &Vec<Vec<f32>>| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
    };
    if !same_shape(&ck.opt.first, &expected.first) || !same_shape(&ck.opt.second, &expected.second) {
        return Err(Error::Dimension("optimizer state does not match the parameters".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    encode_net(&ck.net, &mut out)?;

    let t = &ck.train;
    out.extend_from_slice(&to_u32(t.batch_size, "batch size")?.to_le_bytes());
    out.extend_from_slice(&t.learning_rate.to_le_bytes());
    out.extend_from_slice(&to_u32(t.epochs, "epochs")?.to_le_bytes());
    out.extend_from_slice(&t.seed.to_le_bytes());
    let (tag, o) = match t.optimizer {
        OptimizerKind::Adam { beta1, beta2, eps } => (0u8, [beta1, beta2, eps]),
        OptimizerKind::Sgd { momentum } => (1u8, [momentum, 0.0, 0.0]),
    };
    out.push(tag);
    for v in o {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(match t.surrogate.kind {
        SurrogateKind::ClippedSte => 0,
        SurrogateKind::Polynomial => 1,
    });
    out.extend_from_slice(&t.surrogate.clip.to_le_bytes());
    out.extend_from_slice(&t.bn_momentum.to_le_bytes());
    out.extend_from_slice(&t.weight_init_scale.to_le_bytes());
    out.push(u8::from(t.binarize));

    out.extend_from_slice(&to_u32(ck.epoch, "epoch")?.to_le_bytes());
    out.extend_from_slice(&ck.rng.get_seed());
    out.extend_from_slice(&ck.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&ck.rng.get_word_pos().to_le_bytes());

    out.extend_from_slice(&ck.params.eps.to_le_bytes());
    for b in &ck.params.blocks {
        for v in [&b.weights, &b.slope, &b.gamma, &b.beta, &b.running_mean, &b.running_var] {
            put_f32s(&mut out, v);
        }
    }
    out.extend_from_slice(&ck.opt.step.to_le_bytes());
    for v in ck.opt.first.iter().chain(&ck.opt.second) {
        put_f32s(&mut out, v);
    }

    out.extend_from_slice(&to_u32(ck.history.len(), "history length")?.to_le_bytes());
    for h in &ck.history {
        out.extend_from_slice(&to_u32(h.epoch, "epoch")?.to_le_bytes());
        out.extend_from_slice(&h.train_loss.to_le_bytes());
        out.extend_from_slice(&h.train_accuracy.to_le_bytes());
        out.push(u8::from(h.eval_accuracy.is_some()));
        out.extend_from_slice(&h.eval_accuracy.unwrap_or(0.0).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    check_magic_version(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    if bytes.len() < 5 + CRC_LEN {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: 5 + CRC_LEN - bytes.len(),
        }
        .into());
    }
    // the length is data-dependent (history), so the checksum comes first
    check_crc(bytes)?;
    let body = &bytes[..bytes.len() - CRC_LEN];
    let mut r = Reader::new(body);
    r.take(5)?;
    let net = decode_net(&mut r)?;

    let batch_size = r.u32()? as usize;
    let learning_rate = r.f64()?;
    let epochs = r.u32()? as usize;
    let seed = r.u64()?;
    let tag = r.u8()?;
    let o = [r.f64()?, r.f64()?, r.f64()?];
    let optimizer = match tag {
        0 => OptimizerKind::Adam {
            beta1: o[0],
            beta2: o[1],
            eps: o[2],
        },
        1 => OptimizerKind::Sgd { momentum: o[0] },
        t => return Err(malformed(format!("unknown optimizer tag {t}"))),
    };
    let kind = match r.u8()? {
        0 => SurrogateKind::ClippedSte,
        1 => SurrogateKind::Polynomial,
        k => return Err(malformed(format!("unknown surrogate tag {k}"))),
    };
    let clip = r.f64()?;
    let bn_momentum = r.f64()?;
    let weight_init_scale = r.f32()?;
    let binarize = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(malformed(format!("invalid flag byte {b}"))),
    };
    let train = TrainConfig {
        batch_size,
        learning_rate,
        epochs,
        seed,
        optimizer,
        surrogate: Surrogate { kind, clip },
        bn_momentum,
        weight_init_scale,
        binarize,
    };

    let epoch = r.u32()? as usize;
    let mut rng = ChaCha8Rng::from_seed(r.array::<32>()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);

    let eps = r.f32()?;
    let blocks = net
        .blocks
        .iter()
        .map(|b| {
            let c = b.out_channels;
            Ok(BlockParams {
                weights: r.f32s(b.weight_count())?,
                slope: r.f32s(c)?,
                gamma: r.f32s(c)?,
                beta: r.f32s(c)?,
                running_mean: r.f32s(c)?,
                running_var: r.f32s(c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = TrainedParams { blocks, eps };
    params.check(&net).map_err(|e| malformed(e.to_string()))?;

    let mut opt = OptimizerState::new(&params);
    opt.step = r.u64()?;
    for v in opt.first.iter_mut().chain(opt.second.iter_mut()) {
        *v = r.f32s(v.len())?;
    }

    let n_hist = r.u32()? as usize;
    let mut history = Vec::with_capacity(n_hist.min(1 << 20));
    for _ in 0..n_hist {
        let epoch = r.u32()? as usize;
        let train_loss = r.f64()?;
        let train_accuracy = r.f64()?;
        let has_eval = r.u8()? != 0;
        let ev = r.f64()?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            eval_accuracy: has_eval.then_some(ev),
        });
    }
    if r.pos != body.len() {
        return Err(FormatError::TrailingBytes(body.len() - r.pos).into());
    }
    Ok(Checkpoint {
        net,
        train,
        params,
        opt,
        epoch,
        rng,
        history,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<usize> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
