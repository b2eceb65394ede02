//! ECG segments, label schemes, loaders, standardization, splitting and a
//! synthetic generator.
//!
//! A segment is one single-lead record of fixed length (3600 samples for
//! 10 s at 360 Hz by default) with one class label.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, FormatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EcgSegment {
    pub samples: Vec<f32>,
    pub label: usize,
}

const AAMI5_NAMES: [&str; 5] = ["N", "S", "V", "F", "Q"];

const PLAWIAK17_NAMES: [&str; 17] = [
    "NSR", "APB", "AFL", "AFIB", "SVTA", "WPW", "PVC", "Bigeminy", "Trigeminy", "VT", "IVR", "VFL",
    "Fusion", "LBBBB", "RBBBB", "SDHB", "Pacemaker",
];

/// Class-id convention of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelScheme {
    /// N, S, V, F, Q heartbeat groups.
    Aami5,
    /// 17 rhythm classes.
    Plawiak17,
    Custom(usize),
}

impl LabelScheme {
    /// The named scheme for 5 or 17 classes, otherwise a custom one.
    pub fn for_classes(n: usize) -> Self {
        match n {
            5 => LabelScheme::Aami5,
            17 => LabelScheme::Plawiak17,
            n => LabelScheme::Custom(n),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            LabelScheme::Aami5 => 5,
            LabelScheme::Plawiak17 => 17,
            LabelScheme::Custom(n) => *n,
        }
    }

    pub fn name(&self, id: usize) -> Option<&'static str> {
        match self {
            LabelScheme::Aami5 => AAMI5_NAMES.get(id).copied(),
            LabelScheme::Plawiak17 => PLAWIAK17_NAMES.get(id).copied(),
            LabelScheme::Custom(_) => None,
        }
    }

    /// On-disk code: 0 and 1 for the named schemes, the class count otherwise.
    pub fn code(&self) -> u8 {
        match self {
            LabelScheme::Aami5 => 0,
            LabelScheme::Plawiak17 => 1,
            LabelScheme::Custom(n) => *n as u8,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LabelScheme::Aami5),
            1 => Ok(LabelScheme::Plawiak17),
            n => Ok(LabelScheme::Custom(usize::from(n))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub segments: Vec<EcgSegment>,
    pub scheme: LabelScheme,
    /// Samples per segment.
    pub length: usize,
    /// Free-form origin note; not serialized.
    pub provenance: String,
}

impl Dataset {
    pub fn new(segments: Vec<EcgSegment>, scheme: LabelScheme, length: usize) -> Result<Self> {
        if let LabelScheme::Custom(n) = scheme {
            if !(2..=255).contains(&n) {
                return Err(Error::InvalidValue(format!("custom schemes need 2..=255 classes, got {n}")));
            }
        }
        let n_classes = scheme.n_classes();
        for (i, s) in segments.iter().enumerate() {
            if s.samples.len() != length {
                return Err(Error::Dimension(format!(
                    "segment {i} has {} samples, the dataset declares {length}",
                    s.samples.len()
                )));
            }
            if s.label >= n_classes {
                return Err(Error::InvalidLabel {
                    label: s.label,
                    n_classes,
                });
            }
            if s.samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!("segment {i} has non-finite samples")));
            }
        }
        Ok(Self {
            segments,
            scheme,
            length,
            provenance: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.scheme.n_classes()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.segments {
            counts[s.label] += 1;
        }
        counts
    }

    /// Copy with every segment standardized.
    pub fn standardized(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.segments {
            s.samples = standardize(&s.samples);
        }
        out
    }
}

/// Reads one segment per row: `length` samples then an integer label.
///
/// A first row starting with `s0` is a header. When `length` is `None` the
/// first data row fixes it.
pub fn load_csv(path: &Path, scheme: LabelScheme, length: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let n_classes = scheme.n_classes();
    let mut expected = length;
    let mut segments = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_error(path, row, e))?;
        if i == 0 && rec.get(0).is_some_and(|f| f == "s0") {
            continue;
        }
        if rec.len() < 2 {
            return Err(parse_err(row, "need at least one sample and a label".into()));
        }
        let n = rec.len() - 1;
        let want = *expected.get_or_insert(n);
        if n != want {
            return Err(parse_err(row, format!("{n} samples, expected {want}")));
        }
        let samples = rec
            .iter()
            .take(n)
            .enumerate()
            .map(|(j, f)| match f.parse::<f32>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(row, format!("column {}: {f:?} is not a finite number", j + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = &rec[n];
        let label: usize = raw
            .parse()
            .map_err(|_| parse_err(row, format!("label {raw:?} is not a non-negative integer")))?;
        if label >= n_classes {
            return Err(parse_err(row, format!("label {label} out of range for {n_classes} classes")));
        }
        segments.push(EcgSegment { samples, label });
    }
    let length = expected.unwrap_or(0);
    let mut ds = Dataset::new(segments, scheme, length)?;
    ds.provenance = format!("csv:{}", path.display());
    Ok(ds)
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            path: path.to_path_buf(),
            row,
            message: format!("{other:?}"),
        },
    }
}

/// Writes `ds` in the layout read by [`load_csv`], with a header row.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, e))?;
    let mut header: Vec<String> = (0..ds.length).map(|i| format!("s{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(path, 0, e))?;
    for (i, s) in ds.segments.iter().enumerate() {
        // `{}` on f32 prints the shortest string that parses back to the same value
        let mut rec: Vec<String> = s.samples.iter().map(|v| v.to_string()).collect();
        rec.push(s.label.to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, i + 1, e))?;
    }
    w.flush()?;
    Ok(())
}

pub const PACKED_MAGIC: [u8; 4] = *b"ECGS";
pub const PACKED_VERSION: u8 = 1;

/// Serializes `ds` in the packed segment format.
pub fn encode_packed(ds: &Dataset) -> Result<Vec<u8>> {
    let count = u32::try_from(ds.len()).map_err(|_| Error::InvalidValue("too many segments".into()))?;
    let length = u32::try_from(ds.length).map_err(|_| Error::InvalidValue("segments too long".into()))?;
    let mut out = Vec::with_capacity(14 + ds.len() * (4 * ds.length + 2) + 4);
    out.extend_from_slice(&PACKED_MAGIC);
    out.push(PACKED_VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&length.to_le_bytes());
    out.push(ds.scheme.code());
    for s in &ds.segments {
        for v in &s.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let label = u16::try_from(s.label).map_err(|_| Error::InvalidValue("label exceeds u16".into()))?;
        out.extend_from_slice(&label.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Inverse of [`encode_packed`].
pub fn decode_packed(bytes: &[u8]) -> Result<Dataset> {
    let truncated = |offset: usize, needed: usize| FormatError::Truncated { offset, needed };
    if bytes.len() < 4 {
        return Err(truncated(0, 4 - bytes.len()).into());
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if found != PACKED_MAGIC {
        return Err(FormatError::BadMagic {
            expected: PACKED_MAGIC,
            found,
        }
        .into());
    }
    if bytes.len() < 18 {
        return Err(truncated(bytes.len(), 18 - bytes.len()).into());
    }
    if bytes[4] != PACKED_VERSION {
        return Err(FormatError::UnsupportedVersion {
            expected: PACKED_VERSION,
            found: bytes[4],
        }
        .into());
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().expect("four bytes")) as usize;
    let length = u32::from_le_bytes(bytes[9..13].try_into().expect("four bytes")) as usize;
    let scheme = LabelScheme::from_code(bytes[13])?;
    let body = count
        .checked_mul(4 * length + 2)
        .ok_or_else(|| FormatError::Malformed("segment table size overflows".into()))?;
    let total = 14 + body + 4;
    if bytes.len() < total {
        return Err(truncated(bytes.len(), total - bytes.len()).into());
    }
    if bytes.len() > total {
        return Err(FormatError::TrailingBytes(bytes.len() - total).into());
    }
    let stored = u32::from_le_bytes(bytes[total - 4..].try_into().expect("four bytes"));
    let computed = crc32fast::hash(&bytes[..total - 4]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    let mut pos = 14;
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let samples = bytes[pos..pos + 4 * length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        pos += 4 * length;
        let label = usize::from(u16::from_le_bytes([bytes[pos], bytes[pos + 1]]));
        pos += 2;
        segments.push(EcgSegment { samples, label });
    }
    Dataset::new(segments, scheme, length)
        .map_err(|e| FormatError::Malformed(e.to_string()).into())
}

pub fn save_packed(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_packed(ds)?)?;
    w.flush()?;
    Ok(())
}

pub fn load_packed(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut ds = decode_packed(&bytes)?;
    ds.provenance = format!("packed:{}", path.display());
    Ok(ds)
}

/// Loads a packed file when it starts with the packed magic, CSV otherwise.
pub fn load_any(path: &Path, scheme: LabelScheme, length: Option<usize>) -> Result<Dataset> {
    let mut head = [0u8; 4];
    let n = File::open(path)?.read(&mut head)?;
    if n == 4 && head == PACKED_MAGIC {
        let ds = load_packed(path)?;
        if ds.scheme.n_classes() != scheme.n_classes() {
            return Err(Error::InvalidInput(format!(
                "{} holds {} classes, expected {}",
                path.display(),
                ds.n_classes(),
                scheme.n_classes()
            )));
        }
        if let Some(l) = length {
            if l != ds.length {
                return Err(Error::Dimension(format!(
                    "{} holds segments of length {}, expected {l}",
                    path.display(),
                    ds.length
                )));
            }
        }
        Ok(ds)
    } else {
        load_csv(path, scheme, length)
    }
}

/// Per-segment z-score with the population standard deviation, in `f64`.
///
/// Constant segments map to all zeros.
pub fn standardize_f64(segment: &[f32]) -> Vec<f64> {
    if segment.is_empty() {
        return Vec::new();
    }
    let n = segment.len() as f64;
    let mean = segment.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = segment.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return vec![0.0; segment.len()];
    }
    segment.iter().map(|&v| (f64::from(v) - mean) / sd).collect()
}

/// [`standardize_f64`] rounded to the `f32` sample type.
pub fn standardize(segment: &[f32]) -> Vec<f32> {
    standardize_f64(segment).into_iter().map(|v| v as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Classes too small to split, kept whole in `train`.
    pub warnings: Vec<String>,
}

/// Seeded stratified split; each class contributes `round(fraction * count)` segments to train.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidValue(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
    for (i, s) in ds.segments.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut warnings = Vec::new();
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            let msg = format!("class {c} has {} segment(s); kept whole in the training set", idx.len());
            log::warn!("{msg}");
            warnings.push(msg);
            train_idx.extend_from_slice(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        train_idx.extend_from_slice(&idx[..n_train]);
        test_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| {
        let mut out = Dataset::new(
            idx.iter().map(|&i| ds.segments[i].clone()).collect(),
            ds.scheme,
            ds.length,
        )
        .expect("subset of a valid dataset");
        out.provenance = ds.provenance.clone();
        out
    };
    Ok(Split {
        train: pick(&train_idx),
        test: pick(&test_idx),
        warnings,
    })
}

/// Clean waveform of class `c`: a spike train whose period, width, polarity
/// pattern and amplitude alternation all depend on the class.
fn synth_template(c: usize, length: usize) -> Vec<f32> {
    let period = 24.0 + 9.0 * (c % 6) as f64;
    let width = 1.5 + 1.5 * ((c / 6) % 3) as f64;
    let alternate = if c % 2 == 1 { 0.45 } else { 1.0 };
    let dip = if (c / 2) % 2 == 1 { -0.6 } else { 0.0 };
    let phase = 5.0 + 3.0 * c as f64;
    let mut x = vec![0.0f64; length];
    let mut centre = phase;
    let mut beat = 0usize;
    while centre < length as f64 + 4.0 * width {
        let amp = if beat % 2 == 1 { alternate } else { 1.0 };
        for (t, v) in x.iter_mut().enumerate() {
            let d = (t as f64 - centre) / width;
            if d.abs() < 6.0 {
                *v += amp * (-d * d).exp();
                let e = (t as f64 - centre - 2.5 * width) / width;
                *v += dip * amp * (-e * e).exp();
            }
        }
        centre += period;
        beat += 1;
    }
    x.into_iter().map(|v| v as f32).collect()
}

/// `n_per_class` noisy copies of each class template.
pub fn synth_dataset(
    scheme: LabelScheme,
    n_per_class: usize,
    length: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidValue(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidValue(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segments = Vec::with_capacity(scheme.n_classes() * n_per_class);
    for c in 0..scheme.n_classes() {
        let template = synth_template(c, length);
        for _ in 0..n_per_class {
            let samples = template
                .iter()
                .map(|&v| v + noise.sample(&mut rng) as f32)
                .collect();
            segments.push(EcgSegment { samples, label: c });
        }
    }
    let mut ds = Dataset::new(segments, scheme, length)?;
    ds.provenance = format!("synthetic(seed={seed}, noise={noise_sigma})");
    Ok(ds)
}
