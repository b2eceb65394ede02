//! Confusion matrices, one-vs-rest classification metrics and the storage report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FusedModel;
use crate::modelfile::{params_sections_len, weight_section_len};

/// Counts with rows = true class and columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.n_classes();
        for label in [truth, predicted] {
            if label >= n {
                return Err(Error::InvalidLabel { label, n_classes: n });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::Dimension("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(n_classes);
    for (&p, &t) in predictions.iter().zip(labels) {
        m.add(t, p)?;
    }
    Ok(m)
}

/// One-vs-rest metrics of one class; `None` where a denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub pre: Option<f64>,
    pub f1: Option<f64>,
}

/// Accuracy plus macro averages over the classes where each metric is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub pre: Option<f64>,
    pub f1: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// `"<metric>[<class>]"` for every excluded per-class value.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn metric_report(m: &ConfusionMatrix) -> Result<MetricReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::InvalidInput("no scored examples".into()));
    }
    let n = m.n_classes();
    let mut per_class = Vec::with_capacity(n);
    let mut undefined = Vec::new();
    for c in 0..n {
        let tp = m.counts[c][c];
        let fn_ = m.counts[c].iter().sum::<u64>() - tp;
        let fp = (0..n).map(|r| m.counts[r][c]).sum::<u64>() - tp;
        let tn = total - tp - fn_ - fp;
        let sen = ratio(tp, tp + fn_);
        let spe = ratio(tn, tn + fp);
        let pre = ratio(tp, tp + fp);
        let f1 = match (pre, sen) {
            (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
            _ => None,
        };
        for (name, v) in [("sen", sen), ("spe", spe), ("pre", pre), ("f1", f1)] {
            if v.is_none() {
                undefined.push(format!("{name}[{c}]"));
            }
        }
        per_class.push(ClassMetrics { sen, spe, pre, f1 });
    }
    Ok(MetricReport {
        acc: m.trace() as f64 / total as f64,
        sen: macro_mean(per_class.iter().map(|c| c.sen)),
        spe: macro_mean(per_class.iter().map(|c| c.spe)),
        pre: macro_mean(per_class.iter().map(|c| c.pre)),
        f1: macro_mean(per_class.iter().map(|c| c.f1)),
        per_class,
        undefined,
    })
}

/// Deployment footprint against a 32-bit float encoding of the trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub packed_weight_bits: u64,
    /// Fused per-channel parameter sections.
    pub threshold_bytes: u64,
    /// Packed weights plus fused parameters (the model file without header and CRC).
    pub total_bytes: u64,
    /// Four bytes per latent weight and per channel for gamma, beta, mean, variance and slope.
    pub fp32_baseline_bytes: u64,
    pub compression_ratio: f64,
}

pub fn storage_report(m: &FusedModel) -> StorageReport {
    let cfg = &m.config;
    let packed_weight_bits = cfg.weight_bits() as u64;
    let threshold_bytes = params_sections_len(cfg) as u64;
    let total_bytes = weight_section_len(cfg) as u64 + threshold_bytes;
    let fp32_baseline_bytes = 4 * (packed_weight_bits + 5 * cfg.total_channels() as u64);
    StorageReport {
        packed_weight_bits,
        threshold_bytes,
        total_bytes,
        fp32_baseline_bytes,
        compression_ratio: fp32_baseline_bytes as f64 / total_bytes as f64,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |x| format!("{x:.4}"))
}

/// Confusion matrix as a text table, rows = true class, columns = predicted.
pub fn render_confusion(m: &ConfusionMatrix, names: &dyn Fn(usize) -> String) -> String {
    let n = m.n_classes();
    let labels: Vec<String> = (0..n).map(names).collect();
    let w = labels
        .iter()
        .map(String::len)
        .chain(m.counts.iter().flatten().map(|c| c.to_string().len()))
        .max()
        .unwrap_or(1)
        .max(4);
    let mut s = String::from("confusion matrix (rows = true class, columns = predicted class)\n");
    let _ = write!(s, "{:>w$}", "");
    for l in &labels {
        let _ = write!(s, " {l:>w$}");
    }
    s.push('\n');
    for (r, row) in m.counts.iter().enumerate() {
        let _ = write!(s, "{:>w$}", labels[r]);
        for c in row {
            let _ = write!(s, " {c:>w$}");
        }
        s.push('\n');
    }
    s
}

pub fn render_metrics(r: &MetricReport, names: &dyn Fn(usize) -> String) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ACC {:.4}", r.acc);
    let _ = writeln!(
        s,
        "macro SEN {}  SPE {}  PRE {}  F1 {}",
        cell(r.sen),
        cell(r.spe),
        cell(r.pre),
        cell(r.f1)
    );
    let _ = writeln!(s, "{:>10} {:>7} {:>7} {:>7} {:>7}", "class", "SEN", "SPE", "PRE", "F1");
    for (c, m) in r.per_class.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:>10} {:>7} {:>7} {:>7} {:>7}",
            names(c),
            cell(m.sen),
            cell(m.spe),
            cell(m.pre),
            cell(m.f1)
        );
    }
    if !r.undefined.is_empty() {
        let _ = writeln!(s, "undefined (excluded from macro averages): {}", r.undefined.join(", "));
    }
    s
}

pub fn render_storage(r: &StorageReport) -> String {
    format!(
        "packed weights    {} bits ({} bytes)\nfused parameters  {} bytes\ntotal             {} bytes ({:.2} KiB)\nfp32 baseline     {} bytes\ncompression       {:.2}x\n",
        r.packed_weight_bits,
        r.packed_weight_bits.div_ceil(8),
        r.threshold_bytes,
        r.total_bytes,
        r.total_bytes as f64 / 1024.0,
        r.fp32_baseline_bytes,
        r.compression_ratio
    )
}
