//! Adam and SGD-with-momentum updates on the trainable values.

use crate::error::{Error, Result};
use crate::model::TrainedParams;

use super::layers::Gradients;
use super::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators, one tensor per trainable tensor in [`trainable_mut`] order.
///
/// SGD keeps its velocity in `first`; `second` is then unused.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(p: &TrainedParams) -> Self {
        let shapes: Vec<usize> = p
            .blocks
            .iter()
            .flat_map(|b| [b.weights.len(), b.slope.len(), b.gamma.len(), b.beta.len()])
            .collect();
        Self {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// Per block: latent weights, PReLU slopes, gamma, beta. Running statistics are not trained.
pub fn trainable_mut(p: &mut TrainedParams) -> Vec<&mut Vec<f32>> {
    p.blocks
        .iter_mut()
        .flat_map(|b| [&mut b.weights, &mut b.slope, &mut b.gamma, &mut b.beta])
        .collect()
}

fn grad_tensors(g: &Gradients) -> Vec<&Vec<f64>> {
    g.blocks
        .iter()
        .flat_map(|b| [&b.weights, &b.slope, &b.gamma, &b.beta])
        .collect()
}

/// Applies one update; latent weights are clamped to `[-1, 1]` afterwards.
pub fn optimizer_step(
    p: &mut TrainedParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    let lr = cfg.learning_rate;
    let gs = grad_tensors(grads);
    let mut ps = trainable_mut(p);
    if gs.len() != ps.len() || state.first.len() != ps.len() || state.second.len() != ps.len() {
        return Err(Error::Dimension("gradient or optimizer state does not match the parameters".into()));
    }
    if ps.iter().zip(&gs).any(|(p, g)| p.len() != g.len())
        || ps.iter().zip(&state.first).any(|(p, m)| p.len() != m.len())
    {
        return Err(Error::Dimension("gradient tensor shape mismatch".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    for (idx, (param, g)) in ps.iter_mut().zip(&gs).enumerate() {
        let is_weight = idx % 4 == 0;
        let m = &mut state.first[idx];
        match cfg.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let v = &mut state.second[idx];
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for j in 0..param.len() {
                    m[j] = (beta1 * f64::from(m[j]) + (1.0 - beta1) * g[j]) as f32;
                    v[j] = (beta2 * f64::from(v[j]) + (1.0 - beta2) * g[j] * g[j]) as f32;
                    let mhat = f64::from(m[j]) / c1;
                    let vhat = f64::from(v[j]) / c2;
                    param[j] = (f64::from(param[j]) - lr * mhat / (vhat.sqrt() + eps)) as f32;
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for j in 0..param.len() {
                    m[j] = (momentum * f64::from(m[j]) + g[j]) as f32;
                    param[j] = (f64::from(param[j]) - lr * f64::from(m[j])) as f32;
                }
            }
        }
        if is_weight {
            for w in param.iter_mut() {
                *w = w.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(())
}
