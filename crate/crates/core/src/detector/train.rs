//! Mini-batch SGD with momentum and weight decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bbox::BBox;
use super::model::DetectorModel;
use super::objective::{total_loss_and_grads, LossBreakdown, LossConfig};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// One training or evaluation image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: FeatureMap,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps trained with `β = 0` before the frequency term switches on.
    pub freq_warmup_steps: usize,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            freq_warmup_steps: 0,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean losses over one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub det: f64,
    pub freq: f64,
    pub beta: f64,
    pub total: f64,
    pub matched: usize,
}

/// Heavy-ball SGD. Per group: `v ← μv + g`, `p ← p − lr·v − lr·wd·p`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<FeatureMap>,
}

impl Sgd {
    pub fn new(model: &DetectorModel, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: model.params().iter().map(|(_, p)| FeatureMap::zeros(p.channels(), p.height(), p.width())).collect(),
        }
    }

    /// Applies one update. Frozen groups are left untouched.
    pub fn step(&mut self, model: &mut DetectorModel, grads: &[FeatureMap]) -> Result<()> {
        let trainable: Vec<bool> = model.param_names().iter().map(|n| model.is_trainable(n)).collect();
        let params = model.params_mut();
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::shape("Sgd::step", "gradient groups do not match parameters"));
        }
        for (((_, p), g), (v, train)) in params.into_iter().zip(grads).zip(self.velocity.iter_mut().zip(trainable)) {
            if !train {
                continue;
            }
            if p.dims() != g.dims() {
                return Err(Error::shape("Sgd::step", "gradient dims"));
            }
            for ((pi, &gi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi + self.lr * self.weight_decay * *pi;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [FeatureMap], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Mean loss and gradients over a batch, accumulated in batch order.
pub fn batch_loss_and_grads(model: &DetectorModel, batch: &[&Sample], loss: &LossConfig) -> Result<(LossBreakdown, Vec<FeatureMap>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<(LossBreakdown, Vec<FeatureMap>)> = batch
        .iter()
        .map(|s| total_loss_and_grads(model, &s.image, &s.boxes, loss))
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut acc, mut grads) = iter.next().expect("non-empty batch");
    for (b, g) in iter {
        acc.det.objectness += b.det.objectness;
        acc.det.class += b.det.class;
        acc.det.boxes += b.det.boxes;
        acc.det.total += b.det.total;
        acc.det.positives += b.det.positives;
        acc.freq += b.freq;
        acc.total += b.total;
        acc.matched += b.matched;
        for (a, x) in grads.iter_mut().zip(&g) {
            a.add_assign(x);
        }
    }
    if n > 1.0 {
        acc.det.objectness /= n;
        acc.det.class /= n;
        acc.det.boxes /= n;
        acc.det.total /= n;
        acc.freq /= n;
        acc.total /= n;
        for g in &mut grads {
            *g = g.scale(1.0 / n);
        }
    }
    Ok((acc, grads))
}

/// Trains in place and returns the per-step loss trace.
pub fn train(model: &mut DetectorModel, data: &[Sample], cfg: &TrainConfig, loss: &LossConfig) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(model, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut step_loss = *loss;
            if step < cfg.freq_warmup_steps {
                step_loss.beta = 0.0;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (b, mut grads) = batch_loss_and_grads(model, &batch, &step_loss)?;
            if !b.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    det: b.det.total,
                    freq: b.freq,
                    total: b.total,
                });
            }
            for (g, name) in grads.iter_mut().zip(model.param_names()) {
                if !model.is_trainable(name) {
                    g.as_mut_slice().fill(0.0);
                }
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(model, &grads)?;
            trace.push(StepRecord {
                step,
                epoch,
                det: b.det.total,
                freq: b.freq,
                beta: b.beta,
                total: b.total,
                matched: b.matched,
            });
            log::debug!("step {step} epoch {epoch} det {:.6} freq {:.6} total {:.6}", b.det.total, b.freq, b.total);
            step += 1;
        }
    }
    Ok(trace)
}
