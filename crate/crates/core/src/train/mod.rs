//! Quantization-aware training of the fixed architecture.
//!
//! Latent real weights are binarized with `sign` in the forward pass and
//! updated through a surrogate gradient. Batch norm trains on batch
//! statistics and tracks running averages for inference. Training is
//! single-threaded, and for a fixed seed every run follows the same
//! trajectory bit for bit, including runs resumed from a checkpoint.

mod layers;
mod optim;

pub use layers::{
    batchnorm_train_backward, batchnorm_train_forward, forward_backward, softmax_cross_entropy,
    surrogate_backward, update_running_stats, BlockGrads, BnCache, Gradients,
};
pub use optim::{optimizer_step, trainable_mut, OptimizerKind, OptimizerState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bintensor::BinaryTensor;
use crate::data::EcgSegment;
use crate::error::{Error, Result};
use crate::model::{fuse, NetConfig, TrainedParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    ClippedSte,
    Polynomial,
}

impl std::str::FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clipped_ste" | "ste" => Ok(SurrogateKind::ClippedSte),
            "polynomial" | "poly" => Ok(SurrogateKind::Polynomial),
            other => Err(Error::InvalidValue(format!(
                "unknown surrogate {other:?} (expected clipped_ste or polynomial)"
            ))),
        }
    }
}

impl std::fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SurrogateKind::ClippedSte => "clipped_ste",
            SurrogateKind::Polynomial => "polynomial",
        })
    }
}

/// Stand-in derivative for `sign`; zero outside `[-clip, clip]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub kind: SurrogateKind,
    pub clip: f64,
}

impl Default for Surrogate {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::ClippedSte,
            clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub surrogate: Surrogate,
    pub bn_momentum: f64,
    pub weight_init_scale: f32,
    /// `false` replaces every `sign` by the identity (gradient checks only).
    pub binarize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_classes(5)
    }
}

impl TrainConfig {
    /// Batch 512 / lr 0.02 for 5 classes, batch 64 / lr 0.002 otherwise; 1000 epochs.
    pub fn for_classes(n_classes: usize) -> Self {
        let (batch_size, learning_rate) = if n_classes == 5 { (512, 0.02) } else { (64, 0.002) };
        Self {
            batch_size,
            learning_rate,
            epochs: 1000,
            seed: 0,
            optimizer: OptimizerKind::default(),
            surrogate: Surrogate::default(),
            bn_momentum: 0.1,
            weight_init_scale: 0.1,
            binarize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn momentum {} outside [0, 1]", self.bn_momentum));
        }
        if !(self.surrogate.clip > 0.0 && self.surrogate.clip.is_finite()) {
            return bad(format!("surrogate clip {} must be positive", self.surrogate.clip));
        }
        if !(self.weight_init_scale >= 0.0 && self.weight_init_scale <= 1.0) {
            return bad(format!("weight init scale {} outside [0, 1]", self.weight_init_scale));
        }
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return bad(format!("invalid adam settings {:?}", self.optimizer));
                }
            }
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("sgd momentum {momentum} outside [0, 1)"));
                }
            }
        }
        Ok(())
    }
}

/// `sign` of every sample as a one-channel binary map.
pub fn lp_quantize_input(segment: &[f32]) -> BinaryTensor {
    BinaryTensor::from_fn(1, segment.len(), |_, t| segment[t] >= 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Training-mode accuracy accumulated over the epoch's batches.
    pub train_accuracy: f64,
    /// Accuracy of the fused model on the evaluation set.
    pub eval_accuracy: Option<f64>,
}

/// Fused-model accuracy on standardized segments, with the predictions.
pub fn evaluate(p: &TrainedParams, net: &NetConfig, segments: &[EcgSegment]) -> Result<(f64, Vec<usize>)> {
    if segments.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let m = fuse(p, net)?;
    let preds = segments
        .iter()
        .map(|s| m.classify(&s.samples).map(|r| r.class))
        .collect::<Result<Vec<_>>>()?;
    let correct = preds.iter().zip(segments).filter(|(p, s)| **p == s.label).count();
    Ok((correct as f64 / segments.len() as f64, preds))
}

/// Resumable training loop state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: NetConfig,
    pub cfg: TrainConfig,
    pub params: TrainedParams,
    pub opt: OptimizerState,
    /// Drives initialization and the per-epoch shuffles.
    pub rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(net: NetConfig, cfg: TrainConfig) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = TrainedParams::init(&net, cfg.weight_init_scale, &mut rng);
        Ok(Self {
            opt: OptimizerState::new(&params),
            net,
            cfg,
            params,
            rng,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Starts from given parameters; the shuffle stream still comes from `cfg.seed`.
    pub fn with_params(net: NetConfig, cfg: TrainConfig, params: TrainedParams) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        params.check(&net)?;
        Ok(Self {
            opt: OptimizerState::new(&params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            net,
            cfg,
            params,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// One shuffled pass over `train`.
    pub fn run_epoch(&mut self, train: &[EcgSegment], eval: Option<&[EcgSegment]>) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&EcgSegment> = chunk.iter().map(|&i| &train[i]).collect();
            let g = forward_backward(&self.params, &self.net, &batch, &self.cfg)?;
            loss_sum += g.loss * batch.len() as f64;
            correct += g.correct;
            optimizer_step(&mut self.params, &g, &mut self.opt, &self.cfg)?;
            for (bp, stats) in self.params.blocks.iter_mut().zip(&g.batch_stats) {
                update_running_stats(&mut bp.running_mean, &mut bp.running_var, stats, self.cfg.bn_momentum);
            }
        }
        self.epoch += 1;
        let eval_accuracy = match eval {
            Some(e) if !e.is_empty() => Some(evaluate(&self.params, &self.net, e)?.0),
            _ => None,
        };
        let rec = EpochRecord {
            epoch: self.epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_accuracy,
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Runs the remaining epochs, reporting each one to `on_epoch`.
    ///
    /// `on_epoch` may stop training early by returning `false`.
    pub fn run(
        &mut self,
        train: &[EcgSegment],
        eval: Option<&[EcgSegment]>,
        on_epoch: &mut dyn FnMut(&Trainer, &EpochRecord) -> bool,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        while !self.finished() {
            let rec = self.run_epoch(train, eval)?;
            if !on_epoch(self, &rec) {
                break;
            }
        }
        Ok(())
    }
}

/// Trains `p` for `train_cfg.epochs` epochs.
pub fn fit(
    p: TrainedParams,
    net: &NetConfig,
    train: &[EcgSegment],
    eval: Option<&[EcgSegment]>,
    train_cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainedParams, Vec<EpochRecord>)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut t = Trainer::with_params(net.clone(), train_cfg.clone(), p)?;
    t.run(train, eval, &mut |_, r| {
        on_epoch(r);
        true
    })?;
    Ok((t.params, t.history))
}
