//! Batched training-mode forward and backward passes.
//!
//! Activations are `[batch, channels, length]` in `f64`. Batch norm uses
//! batch statistics over `(batch, time)`; `sign` is differentiated through a
//! [`Surrogate`].

use crate::bintensor::{BinaryTensor, BinaryWeights};
use crate::data::EcgSegment;
use crate::error::{Error, Result};
use crate::model::{BlockConfig, NetConfig, TrainedParams};
use crate::ops::{self, conv_output_length, pool_output_length};

use super::{Surrogate, TrainConfig};

/// Gradient of `sign` at `x` for upstream gradient `g`.
///
/// Clipped STE passes `g` where `|x| <= c`. The polynomial surrogate is the
/// derivative of the piecewise quadratic that meets `±1` at `±c`:
/// `(2/c)(1 - |x|/c)` inside, which is `2 - 2|x|` for `c = 1`.
#[inline]
pub fn surrogate_backward(g: f64, x: f64, s: &Surrogate) -> f64 {
    let a = x.abs();
    if a > s.clip {
        return 0.0;
    }
    match s.kind {
        super::SurrogateKind::ClippedSte => g,
        super::SurrogateKind::Polynomial => g * (2.0 / s.clip) * (1.0 - a / s.clip),
    }
}

/// Batch statistics and normalized values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    /// Per-channel batch mean.
    pub mean: Vec<f64>,
    /// Per-channel biased batch variance.
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    xhat: Vec<f64>,
}

/// Training-mode batch norm of `x: [batch, channels, len]`.
pub fn batchnorm_train_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    len: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, BnCache) {
    let n = (batch * len) as f64;
    let at = |b: usize, c: usize| (b * channels + c) * len;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[at(b, c)..at(b, c) + len].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for b in 0..batch {
            v += x[at(b, c)..at(b, c) + len].iter().map(|u| (u - m) * (u - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / n;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            for j in at(b, c)..at(b, c) + len {
                xhat[j] = (x[j] - mean[c]) * inv_std[c];
                y[j] = gamma[c] * xhat[j] + beta[c];
            }
        }
    }
    (
        y,
        BnCache {
            mean,
            var,
            inv_std,
            xhat,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward(
    dy: &[f64],
    cache: &BnCache,
    gamma: &[f64],
    batch: usize,
    channels: usize,
    len: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (batch * len) as f64;
    let at = |b: usize, c: usize| (b * channels + c) * len;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..batch {
            for j in at(b, c)..at(b, c) + len {
                sum_dy += dy[j];
                sum_dy_xhat += dy[j] * cache.xhat[j];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = gamma[c] * cache.inv_std[c] / n;
        for b in 0..batch {
            for j in at(b, c)..at(b, c) + len {
                dx[j] = k * (n * dy[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `running ← (1 − m)·running + m·batch`.
pub fn update_running_stats(mean: &mut [f32], var: &mut [f32], cache: &BnCache, momentum: f64) {
    for c in 0..mean.len() {
        mean[c] = ((1.0 - momentum) * f64::from(mean[c]) + momentum * cache.mean[c]) as f32;
        var[c] = ((1.0 - momentum) * f64::from(var[c]) + momentum * cache.var[c]) as f32;
    }
}

/// Mean-free loss of one example: `(loss, softmax − one_hot)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Gradients for one block's trainable values.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    /// With respect to the latent weights.
    pub weights: Vec<f64>,
    pub slope: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    /// Per-block batch-norm statistics of this batch, for the running averages.
    pub batch_stats: Vec<BnCache>,
    /// Batch-mean loss.
    pub loss: f64,
    /// Examples whose training-mode logits pick the true label.
    pub correct: usize,
}

struct BlockCache {
    /// Padded conv input `[batch, cin, in_len + 2·padding]`.
    xpad: Vec<f64>,
    in_len: usize,
    /// Values the conv multiplied with (`sign(latent)` or latent).
    w_eff: Vec<f64>,
    conv_len: usize,
    pool_len: usize,
    /// Conv position selected by each pool window.
    argmax: Vec<u32>,
    pooled: Vec<f64>,
    bn: BnCache,
    /// Block output `BN(PReLU(pooled))`.
    y: Vec<f64>,
}

fn block_forward(
    input: &[f64],
    in_len: usize,
    batch: usize,
    cfg: &BlockConfig,
    latent: &[f32],
    w_eff: Vec<f64>,
    binary: bool,
    p: &crate::model::BlockParams,
    eps: f64,
) -> Result<BlockCache> {
    let (cin, cout, k) = (cfg.in_channels, cfg.out_channels, cfg.conv.taps);
    let (s, pad) = (cfg.conv.stride, cfg.conv.padding);
    let conv_len = conv_output_length(in_len, k, s, pad)?;
    let pool_len = pool_output_length(conv_len, cfg.pool_size, cfg.pool_stride)?;
    let plen = in_len + 2 * pad;
    let pv = f64::from(cfg.conv.pad_value);
    let mut xpad = vec![pv; batch * cin * plen];
    for bi in 0..batch * cin {
        xpad[bi * plen + pad..bi * plen + pad + in_len].copy_from_slice(&input[bi * in_len..(bi + 1) * in_len]);
    }

    let mut z = vec![0.0f64; batch * cout * conv_len];
    if binary {
        // ±1 inputs and weights: the packed kernel gives the exact same integers.
        let bw = BinaryWeights::from_latent(cout, cin, k, latent)?;
        for b in 0..batch {
            let x = BinaryTensor::from_fn(cin, in_len, |c, t| input[(b * cin + c) * in_len + t] >= 0.0);
            let out = ops::binary_conv1d(&x, &bw, &cfg.conv)?;
            for (dst, &v) in z[b * cout * conv_len..(b + 1) * cout * conv_len].iter_mut().zip(out.data()) {
                *dst = f64::from(v);
            }
        }
    } else {
        for b in 0..batch {
            for o in 0..cout {
                let zrow = &mut z[(b * cout + o) * conv_len..(b * cout + o + 1) * conv_len];
                for i in 0..cin {
                    let xrow = &xpad[(b * cin + i) * plen..(b * cin + i + 1) * plen];
                    for kk in 0..k {
                        let w = w_eff[(o * cin + i) * k + kk];
                        for (t, zt) in zrow.iter_mut().enumerate() {
                            *zt += w * xrow[t * s + kk];
                        }
                    }
                }
            }
        }
    }

    let (ps, pst) = (cfg.pool_size, cfg.pool_stride);
    let mut argmax = vec![0u32; batch * cout * pool_len];
    let mut pooled = vec![0.0; batch * cout * pool_len];
    for row in 0..batch * cout {
        let zr = &z[row * conv_len..(row + 1) * conv_len];
        for t in 0..pool_len {
            let mut best = t * pst;
            for j in t * pst + 1..t * pst + ps {
                if zr[j] > zr[best] {
                    best = j;
                }
            }
            argmax[row * pool_len + t] = best as u32;
            pooled[row * pool_len + t] = zr[best];
        }
    }

    let mut u = pooled.clone();
    for b in 0..batch {
        for c in 0..cout {
            let a = f64::from(p.slope[c]);
            for v in &mut u[(b * cout + c) * pool_len..(b * cout + c + 1) * pool_len] {
                *v = ops::prelu(*v, a);
            }
        }
    }
    let gamma: Vec<f64> = p.gamma.iter().map(|&v| f64::from(v)).collect();
    let beta: Vec<f64> = p.beta.iter().map(|&v| f64::from(v)).collect();
    let (y, bn) = batchnorm_train_forward(&u, batch, cout, pool_len, &gamma, &beta, eps);
    Ok(BlockCache {
        xpad,
        in_len,
        w_eff,
        conv_len,
        pool_len,
        argmax,
        pooled,
        bn,
        y,
    })
}

/// Conv input of block 0: the segment itself, or its sign in LP mode.
fn first_input(batch: &[&EcgSegment], net: &NetConfig) -> Vec<f64> {
    let lp = !net.real_input_block(0);
    batch
        .iter()
        .flat_map(|s| s.samples.iter())
        .map(|&v| {
            if lp {
                f64::from(ops::sign(v))
            } else {
                f64::from(v)
            }
        })
        .collect()
}

/// Loss and gradients of one mini-batch.
///
/// The forward pass mirrors the reference path with batch statistics in
/// place of running ones. Every `sign` (activations and weights) is
/// differentiated through `train_cfg.surrogate`; with `binarize` off, both
/// are replaced by the identity.
pub fn forward_backward(
    p: &TrainedParams,
    net: &NetConfig,
    batch: &[&EcgSegment],
    train_cfg: &TrainConfig,
) -> Result<Gradients> {
    p.check(net)?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for s in batch {
        if s.samples.len() != net.input_length {
            return Err(Error::Dimension(format!(
                "segment of {} samples for input length {}",
                s.samples.len(),
                net.input_length
            )));
        }
        if s.label >= net.n_classes {
            return Err(Error::InvalidLabel {
                label: s.label,
                n_classes: net.n_classes,
            });
        }
    }
    let bsz = batch.len();
    let eps = f64::from(p.eps);
    let binarize = train_cfg.binarize;
    let last = net.last_block();

    let mut caches: Vec<BlockCache> = Vec::with_capacity(net.blocks.len());
    let mut act = first_input(batch, net);
    let mut len = net.input_length;
    for (i, (b, bp)) in net.blocks.iter().zip(&p.blocks).enumerate() {
        if i > 0 && binarize {
            act = act.iter().map(|&v| f64::from(ops::sign(v))).collect();
        }
        let w_eff: Vec<f64> = bp
            .weights
            .iter()
            .map(|&w| if binarize { f64::from(ops::sign(w)) } else { f64::from(w) })
            .collect();
        let binary_input = binarize && !net.real_input_block(i);
        let cache = block_forward(&act, len, bsz, b, &bp.weights, w_eff, binary_input, bp, eps)?;
        len = cache.pool_len;
        act = cache.y.clone();
        caches.push(cache);
    }

    // GSP logits, softmax cross-entropy averaged over the batch.
    let nc = net.n_classes;
    let out = &caches[last];
    let mut dy_last = vec![0.0; out.y.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (bi, s) in batch.iter().enumerate() {
        let logits: Vec<f64> = (0..nc)
            .map(|c| out.y[(bi * nc + c) * len..(bi * nc + c + 1) * len].iter().sum())
            .collect();
        if ops::argmax_head(&logits)? == s.label {
            correct += 1;
        }
        let (l, g) = softmax_cross_entropy(&logits, s.label)?;
        loss += l;
        for c in 0..nc {
            let gc = g[c] / bsz as f64;
            dy_last[(bi * nc + c) * len..(bi * nc + c + 1) * len].fill(gc);
        }
    }
    loss /= bsz as f64;

    let mut grads: Vec<BlockGrads> = Vec::with_capacity(caches.len());
    let mut dy = dy_last;
    for i in (0..caches.len()).rev() {
        let (b, bp, c) = (&net.blocks[i], &p.blocks[i], &caches[i]);
        let (cin, cout, k) = (b.in_channels, b.out_channels, b.conv.taps);
        let (s, pad) = (b.conv.stride, b.conv.padding);
        let gamma: Vec<f64> = bp.gamma.iter().map(|&v| f64::from(v)).collect();
        let (du, dgamma, dbeta) = batchnorm_train_backward(&dy, &c.bn, &gamma, bsz, cout, c.pool_len);

        let mut dslope = vec![0.0; cout];
        let mut dz = vec![0.0; bsz * cout * c.conv_len];
        for bi in 0..bsz {
            for o in 0..cout {
                let a = f64::from(bp.slope[o]);
                let row = bi * cout + o;
                for t in 0..c.pool_len {
                    let j = row * c.pool_len + t;
                    let v = c.pooled[j];
                    let dv = if v >= 0.0 {
                        du[j]
                    } else {
                        dslope[o] += du[j] * v;
                        du[j] * a
                    };
                    dz[row * c.conv_len + c.argmax[j] as usize] += dv;
                }
            }
        }

        let plen = c.in_len + 2 * pad;
        let mut dw = vec![0.0; cout * cin * k];
        let need_dx = i > 0;
        let mut dxpad = if need_dx { vec![0.0; bsz * cin * plen] } else { Vec::new() };
        for bi in 0..bsz {
            for o in 0..cout {
                let row = bi * cout + o;
                for t in 0..c.conv_len {
                    let g = dz[row * c.conv_len + t];
                    if g == 0.0 {
                        continue;
                    }
                    for ii in 0..cin {
                        let base = (bi * cin + ii) * plen + t * s;
                        let wbase = (o * cin + ii) * k;
                        for kk in 0..k {
                            dw[wbase + kk] += g * c.xpad[base + kk];
                            if need_dx {
                                dxpad[base + kk] += g * c.w_eff[wbase + kk];
                            }
                        }
                    }
                }
            }
        }
        let dw_latent: Vec<f64> = if binarize {
            dw.iter()
                .zip(&bp.weights)
                .map(|(&g, &w)| surrogate_backward(g, f64::from(w), &train_cfg.surrogate))
                .collect()
        } else {
            dw
        };
        grads.push(BlockGrads {
            weights: dw_latent,
            slope: dslope,
            gamma: dgamma,
            beta: dbeta,
        });

        if need_dx {
            // strip the padding, then through the sign at this conv's input
            let pre = &caches[i - 1].y;
            let mut dprev = vec![0.0; bsz * cin * c.in_len];
            for r in 0..bsz * cin {
                for t in 0..c.in_len {
                    let g = dxpad[r * plen + pad + t];
                    let j = r * c.in_len + t;
                    dprev[j] = if binarize {
                        surrogate_backward(g, pre[j], &train_cfg.surrogate)
                    } else {
                        g
                    };
                }
            }
            dy = dprev;
        }
    }
    grads.reverse();
    Ok(Gradients {
        blocks: grads,
        batch_stats: caches.into_iter().map(|c| c.bn).collect(),
        loss,
        correct,
    })
}
