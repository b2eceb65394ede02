//! Folding PReLU → BatchNorm (→ Sign) into per-channel decision parameters.
//!
//! PReLU followed by inference batch norm is the piecewise-affine map
//! `k·x + b` for `x ≥ 0` and `a·k·x + b` otherwise, with
//! `k = γ / sqrt(σ² + ε)` and `b = β − μ·k`. When a `sign` follows, each
//! branch reduces to one comparison against a threshold near `−b / slope`.
//! The direction of that comparison flips when the slope is negative (γ < 0
//! or a < 0), so every branch stores it explicitly.
//!
//! The analytic threshold is only a starting point. Floating-point rounding
//! in the unfused composition can move the flip point by one domain step (or
//! a few ulps on the real domain), so the threshold is snapped against the
//! very function it replaces. Each branch of that function is monotone in
//! `x`, so a bracketed search over the ordered domain always lands on the
//! exact boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{batchnorm_infer, fused_affine, prelu, sign};

/// Scalar types a threshold can compare against.
pub trait Threshold: Copy + PartialOrd + Default + std::fmt::Debug {}

impl Threshold for i32 {}
impl Threshold for f32 {}

/// Decision rule for one half of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Branch<T> {
    /// `+1` iff `x >= t`.
    AtLeast(T),
    /// `+1` iff `x <= t`.
    AtMost(T),
    AlwaysPos,
    AlwaysNeg,
}

impl<T: Threshold> Branch<T> {
    #[inline]
    pub fn fires(&self, x: T) -> bool {
        match *self {
            Branch::AtLeast(t) => x >= t,
            Branch::AtMost(t) => x <= t,
            Branch::AlwaysPos => true,
            Branch::AlwaysNeg => false,
        }
    }

    pub fn threshold(&self) -> Option<T> {
        match *self {
            Branch::AtLeast(t) | Branch::AtMost(t) => Some(t),
            _ => None,
        }
    }
}

/// Thresholded replacement for `sign(BN(PReLU(x)))`.
///
/// `pos` decides inputs `x >= 0`, `neg` decides `x < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams<T> {
    pub pos: Branch<T>,
    pub neg: Branch<T>,
}

impl<T: Threshold> ThresholdParams<T> {
    #[inline]
    pub fn fires(&self, x: T) -> bool {
        if x >= T::default() {
            self.pos.fires(x)
        } else {
            self.neg.fires(x)
        }
    }
}

/// Folded PReLU + batch norm for a block with no following `sign`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub k: f32,
    pub b: f32,
    pub a: f32,
}

impl AffineParams {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        fused_affine(x, f64::from(self.k), f64::from(self.b), f64::from(self.a))
    }
}

/// Per-channel parameters of a fused model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FusedChannelParams {
    /// Thresholds over popcount-domain integers.
    Int(ThresholdParams<i32>),
    /// Thresholds over real activations (real-input first block).
    Real(ThresholdParams<f32>),
    /// Affine output for the last block.
    Affine(AffineParams),
}

/// Trained PReLU slope and batch-norm state of one channel, widened to `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnPrelu {
    pub gamma: f64,
    pub beta: f64,
    pub mean: f64,
    pub var: f64,
    pub eps: f64,
    /// PReLU negative slope `a`.
    pub slope: f64,
}

impl BnPrelu {
    /// `BN(PReLU(x))`, the unfused channel function.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        batchnorm_infer(
            prelu(x, self.slope),
            self.mean,
            self.var,
            self.gamma,
            self.beta,
            self.eps,
        )
    }

    /// `(k, b)` of the folded affine map.
    pub fn fold(&self) -> (f64, f64) {
        fold_affine(self.gamma, self.beta, self.mean, self.var, self.eps)
    }

    fn check(&self) -> Result<()> {
        let all = [self.gamma, self.beta, self.mean, self.var, self.eps, self.slope];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite channel parameters {self:?}")));
        }
        if self.var < 0.0 || self.eps <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "batch norm needs var >= 0 and eps > 0, got var {} eps {}",
                self.var, self.eps
            )));
        }
        Ok(())
    }
}

/// `k = γ / sqrt(var + ε)`, `b = β − μ·k`.
pub fn fold_affine(gamma: f64, beta: f64, mu: f64, var: f64, eps: f64) -> (f64, f64) {
    let k = gamma / (var + eps).sqrt();
    (k, beta - mu * gamma / (var + eps).sqrt())
}

/// The values a fused channel can see at its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Int(IntDomain),
    /// Every finite `f32`.
    Real,
}

/// The integers `-bound, -bound + step, ..., bound`.
///
/// A binary convolution over `n` bits produces values of the parity of `n`,
/// which is [`IntDomain::lattice`]; [`IntDomain::full`] covers every integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntDomain {
    bound: i32,
    step: i32,
}

impl IntDomain {
    pub fn full(bound: i32) -> Self {
        assert!(bound >= 0);
        Self { bound, step: 1 }
    }

    /// Values reachable by a ±1 dot product of `n` terms.
    pub fn lattice(n: i32) -> Self {
        assert!(n >= 0);
        Self {
            bound: n,
            step: if n == 0 { 1 } else { 2 },
        }
    }

    pub fn bound(&self) -> i32 {
        self.bound
    }

    pub fn step(&self) -> i32 {
        self.step
    }

    pub fn count(&self) -> i64 {
        i64::from(2 * self.bound / self.step) + 1
    }

    #[inline]
    pub fn point(&self, index: i64) -> i32 {
        (-i64::from(self.bound) + i64::from(self.step) * index) as i32
    }

    pub fn points(&self) -> impl Iterator<Item = i32> + '_ {
        (0..self.count()).map(|i| self.point(i))
    }

    pub fn contains(&self, x: i32) -> bool {
        x.abs() <= self.bound && (x + self.bound) % self.step == 0
    }

    /// Index range of the non-negative points.
    pub fn pos_indices(&self) -> (i64, i64) {
        (self.first_nonneg(), self.count() - 1)
    }

    /// Index range of the negative points (empty when `lo > hi`).
    pub fn neg_indices(&self) -> (i64, i64) {
        (0, self.first_nonneg() - 1)
    }

    fn first_nonneg(&self) -> i64 {
        i64::from((self.bound + self.step - 1) / self.step)
    }

    /// Index of the smallest point `>= x` (may be one past the end).
    fn ceil_index(&self, x: f64) -> i64 {
        ((x + f64::from(self.bound)) / f64::from(self.step)).ceil() as i64
    }

    fn floor_index(&self, x: f64) -> i64 {
        ((x + f64::from(self.bound)) / f64::from(self.step)).floor() as i64
    }
}

/// Order-preserving integer key for finite `f32`s, with `-0.0` and `+0.0` sharing key 0.
#[inline]
fn f32_key(x: f32) -> i64 {
    let mag = i64::from(x.abs().to_bits());
    if x >= 0.0 {
        mag
    } else {
        -mag
    }
}

#[inline]
fn f32_from_key(key: i64) -> f32 {
    if key >= 0 {
        f32::from_bits(key as u32)
    } else {
        -f32::from_bits((-key) as u32)
    }
}

/// Finds the branch rule over keys `lo..=hi`, given that `fires` is monotone
/// over `lo - 1..=hi + 1` in the direction of `slope` (the two extra keys are
/// the branch formula extrapolated one step past each end).
fn solve_branch(
    lo: i64,
    hi: i64,
    slope: f64,
    seed: Option<i64>,
    fires: impl Fn(i64) -> bool,
) -> Branch<i64> {
    if lo > hi {
        return Branch::AlwaysNeg;
    }
    if slope == 0.0 {
        return if fires(lo) { Branch::AlwaysPos } else { Branch::AlwaysNeg };
    }
    let (lo_ext, hi_ext) = (lo - 1, hi + 1);
    if slope > 0.0 {
        // smallest key that fires
        let found = match seed.map(|s| s.clamp(lo_ext, hi_ext)) {
            Some(t) if fires(t) && (t == lo_ext || !fires(t - 1)) => Some(t),
            _ => first_true(lo_ext, hi_ext, &fires),
        };
        match found {
            Some(t) if t == lo_ext => Branch::AlwaysPos,
            Some(t) if t <= hi => Branch::AtLeast(t),
            _ => Branch::AlwaysNeg,
        }
    } else {
        // largest key that fires
        let found = match seed.map(|s| s.clamp(lo_ext, hi_ext)) {
            Some(t) if fires(t) && (t == hi_ext || !fires(t + 1)) => Some(t),
            _ => last_true(lo_ext, hi_ext, &fires),
        };
        match found {
            Some(t) if t == hi_ext => Branch::AlwaysPos,
            Some(t) if t >= lo => Branch::AtMost(t),
            _ => Branch::AlwaysNeg,
        }
    }
}

fn first_true(mut lo: i64, mut hi: i64, f: &impl Fn(i64) -> bool) -> Option<i64> {
    if !f(hi) {
        return None;
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if f(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

fn last_true(mut lo: i64, mut hi: i64, f: &impl Fn(i64) -> bool) -> Option<i64> {
    if !f(lo) {
        return None;
    }
    while lo < hi {
        let mid = hi - (hi - lo) / 2;
        if f(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Some(lo)
}

fn int_seed(domain: &IntDomain, slope: f64, b: f64) -> Option<i64> {
    let delta = -b / slope;
    if !delta.is_finite() || delta.abs() > 1e12 {
        return None;
    }
    Some(if slope > 0.0 {
        domain.ceil_index(delta)
    } else {
        domain.floor_index(delta)
    })
}

fn real_seed(slope: f64, b: f64) -> Option<i64> {
    let delta = (-b / slope) as f32;
    delta.is_finite().then(|| f32_key(delta))
}

/// Threshold rules for a channel whose branch functions are `pos_fn` on
/// `x >= 0` and `neg_fn` on `x < 0`, with slopes `pos_slope`/`neg_slope`
/// and folded offset `b` (used only to seed the search).
fn derive_with(
    domain: Domain,
    pos_slope: f64,
    neg_slope: f64,
    b: f64,
    pos_fn: impl Fn(f64) -> bool,
    neg_fn: impl Fn(f64) -> bool,
) -> FusedChannelParams {
    match domain {
        Domain::Int(d) => {
            let to_branch = |br: Branch<i64>| match br {
                Branch::AtLeast(i) => Branch::AtLeast(d.point(i)),
                Branch::AtMost(i) => Branch::AtMost(d.point(i)),
                Branch::AlwaysPos => Branch::AlwaysPos,
                Branch::AlwaysNeg => Branch::AlwaysNeg,
            };
            let at = |i: i64| f64::from(d.point(i));
            let (plo, phi) = d.pos_indices();
            let (nlo, nhi) = d.neg_indices();
            let pos = solve_branch(plo, phi, pos_slope, int_seed(&d, pos_slope, b), |i| {
                pos_fn(at(i))
            });
            let neg = solve_branch(nlo, nhi, neg_slope, int_seed(&d, neg_slope, b), |i| {
                neg_fn(at(i))
            });
            FusedChannelParams::Int(ThresholdParams {
                pos: to_branch(pos),
                neg: to_branch(neg),
            })
        }
        Domain::Real => {
            let to_branch = |br: Branch<i64>| match br {
                Branch::AtLeast(k) => Branch::AtLeast(f32_from_key(k)),
                Branch::AtMost(k) => Branch::AtMost(f32_from_key(k)),
                Branch::AlwaysPos => Branch::AlwaysPos,
                Branch::AlwaysNeg => Branch::AlwaysNeg,
            };
            let top = f32_key(f32::MAX);
            // keys ±(top + 1) are ±infinity, only reached as extrapolation points
            let at = |k: i64| f64::from(f32_from_key(k));
            let pos = solve_branch(0, top, pos_slope, real_seed(pos_slope, b), |k| pos_fn(at(k)));
            let neg = solve_branch(-top, -1, neg_slope, real_seed(neg_slope, b), |k| {
                neg_fn(at(k))
            });
            FusedChannelParams::Real(ThresholdParams {
                pos: to_branch(pos),
                neg: to_branch(neg),
            })
        }
    }
}

/// Threshold rules for `sign(k·x + b)` on `x >= 0` and `sign(a·k·x + b)` on `x < 0`.
///
/// The decision matches [`fused_affine`] followed by [`sign`] at every point
/// of `domain`. Thresholds that fall outside a branch's half of the domain
/// collapse to `AlwaysPos`/`AlwaysNeg`.
pub fn derive_thresholds(k: f64, b: f64, a: f64, domain: Domain) -> Result<FusedChannelParams> {
    if !(k.is_finite() && b.is_finite() && a.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "non-finite fold parameters k={k} b={b} a={a}"
        )));
    }
    let neg_slope = a * k;
    Ok(derive_with(
        domain,
        k,
        neg_slope,
        b,
        |x| sign(fused_affine(x, k, b, a)) > 0,
        |x| sign(fused_affine(x, k, b, a)) > 0,
    ))
}

/// Fuses one channel so that its decision equals `sign(BN(PReLU(x)))`
/// evaluated exactly as [`BnPrelu::eval`] does, at every point of `domain`.
pub fn fuse_channel(unfused: &BnPrelu, domain: Domain) -> Result<FusedChannelParams> {
    unfused.check()?;
    let (k, b) = unfused.fold();
    let s = unfused.slope;
    // Branch formulas extended past zero so the search can bracket the boundary.
    let pos_fn = |x: f64| {
        sign(batchnorm_infer(x, unfused.mean, unfused.var, unfused.gamma, unfused.beta, unfused.eps)) > 0
    };
    let neg_fn = |x: f64| {
        sign(batchnorm_infer(s * x, unfused.mean, unfused.var, unfused.gamma, unfused.beta, unfused.eps))
            > 0
    };
    // Monotone direction of each branch follows the sign of its slope.
    let pos_slope = k.signum() * f64::from(u8::from(unfused.gamma != 0.0));
    let neg_slope = pos_slope * s.signum() * f64::from(u8::from(s != 0.0));
    Ok(derive_with(domain, pos_slope * k.abs(), neg_slope * (s * k).abs(), b, pos_fn, neg_fn))
}

/// Affine parameters for a channel whose output is not followed by `sign`.
pub fn fuse_affine_channel(unfused: &BnPrelu) -> Result<FusedChannelParams> {
    unfused.check()?;
    let (k, b) = unfused.fold();
    Ok(FusedChannelParams::Affine(AffineParams {
        k: k as f32,
        b: b as f32,
        a: unfused.slope as f32,
    }))
}

/// Fuses every channel of a block.
///
/// Blocks followed by `sign` become thresholds over `domain`; the last block
/// (no following `sign`) keeps an affine map.
pub fn fuse_block(
    channels: &[BnPrelu],
    out_channels: usize,
    has_following_sign: bool,
    domain: Domain,
) -> Result<Vec<FusedChannelParams>> {
    if channels.len() != out_channels {
        return Err(Error::Dimension(format!(
            "{} channel parameter sets for a block with {out_channels} output channels",
            channels.len()
        )));
    }
    channels
        .iter()
        .map(|c| {
            if has_following_sign {
                fuse_channel(c, domain)
            } else {
                fuse_affine_channel(c)
            }
        })
        .collect()
}

/// Outcome of [`verify_fusion`].
#[derive(Debug, Clone, PartialEq)]
pub enum FusionReport {
    Sound { points_checked: usize },
    Mismatch { x: f64, expected: f64, got: f64 },
    /// Parameter kind does not fit the domain (e.g. integer thresholds on a real domain).
    Incompatible(String),
}

impl FusionReport {
    pub fn is_sound(&self) -> bool {
        matches!(self, FusionReport::Sound { .. })
    }
}

/// Relative slack for comparing the affine fold with the unfused composition.
const AFFINE_ULPS: f64 = 4.0;

/// Checks fused parameters against the unfused channel function.
///
/// Integer domains are checked exhaustively. The real domain is checked on a
/// dense grid plus a neighbourhood of ulps around zero, every stored
/// threshold and every analytic boundary.
pub fn verify_fusion(params: &FusedChannelParams, unfused: &BnPrelu, domain: Domain) -> FusionReport {
    let mut checked = 0usize;
    match (params, domain) {
        (FusedChannelParams::Int(p), Domain::Int(d)) => {
            for x in d.points() {
                checked += 1;
                let expected = sign(unfused.eval(f64::from(x)));
                let got = crate::ops::fused_activation(x, p);
                if expected != got {
                    return FusionReport::Mismatch {
                        x: f64::from(x),
                        expected: f64::from(expected),
                        got: f64::from(got),
                    };
                }
            }
        }
        (FusedChannelParams::Real(p), Domain::Real) => {
            for x in real_probe_points(p, unfused) {
                checked += 1;
                let expected = sign(unfused.eval(f64::from(x)));
                let got = crate::ops::fused_activation(x, p);
                if expected != got {
                    return FusionReport::Mismatch {
                        x: f64::from(x),
                        expected: f64::from(expected),
                        got: f64::from(got),
                    };
                }
            }
        }
        (FusedChannelParams::Affine(p), _) => {
            let (k, b) = unfused.fold();
            if p.k != k as f32 || p.b != b as f32 || p.a != unfused.slope as f32 {
                return FusionReport::Incompatible(format!(
                    "affine parameters {p:?} do not match the fold (k={k}, b={b}, a={})",
                    unfused.slope
                ));
            }
            let xs: Vec<f64> = match domain {
                Domain::Int(d) => d.points().map(f64::from).collect(),
                Domain::Real => (-2000..=2000).map(|i| f64::from(i) * 0.25).collect(),
            };
            for x in xs {
                checked += 1;
                let expected = unfused.eval(x);
                let got = p.apply(x);
                let scale = (k * x).abs().max(b.abs()).max(expected.abs()).max(f64::MIN_POSITIVE);
                // f32 storage of k and b dominates the error budget
                let tol = AFFINE_ULPS * f64::from(f32::EPSILON) * scale * (1.0 + unfused.slope.abs());
                if (expected - got).abs() > tol {
                    return FusionReport::Mismatch { x, expected, got };
                }
            }
        }
        (p, d) => {
            return FusionReport::Incompatible(format!("parameters {p:?} cannot run on domain {d:?}"));
        }
    }
    FusionReport::Sound {
        points_checked: checked,
    }
}

fn real_probe_points(p: &ThresholdParams<f32>, unfused: &BnPrelu) -> Vec<f32> {
    let mut centers = vec![0.0f32, f32::MAX, -f32::MAX, 1.0, -1.0];
    centers.extend(p.pos.threshold());
    centers.extend(p.neg.threshold());
    let (k, b) = unfused.fold();
    for slope in [k, unfused.slope * k] {
        let d = -b / slope;
        if d.is_finite() && d.abs() < f64::from(f32::MAX) {
            centers.push(d as f32);
        }
    }
    let mut xs = Vec::new();
    for c in centers {
        let key = f32_key(c);
        for off in -64..=64 {
            let k = key + off;
            if k.abs() <= f32_key(f32::MAX) {
                xs.push(f32_from_key(k));
            }
        }
    }
    xs.extend((-4000..=4000).map(|i| i as f32 * 0.25));
    for e in -30..=30 {
        let m = 10f32.powi(e);
        xs.extend([m, -m, 3.7 * m, -3.7 * m]);
    }
    xs
}
