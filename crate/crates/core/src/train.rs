//! Adam with global-norm clipping and the length-bucketed training loop.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::ParamSet;
use crate::flow::{FlowConfig, PathDraw};
use crate::icl::sample_training_mask;
use crate::model::{TrainItem, VcModel};
use crate::{derive_seed, seeded_rng, Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Adam moments for an ordered parameter set.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new<P: ParamSet<F>>(params: &P, lr: f64) -> Self {
        let zeros: Vec<ArrayD<F>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<P: ParamSet<F>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step = F::of(self.lr / bc1);
        let (b1f, b2f, eps) = (F::of(b1), F::of(b2), F::of(self.eps));
        let inv_bc2 = F::of(1.0 / bc2);
        let g = grads.tensors();
        for (((mut p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&g)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1f * *m + (F::one() - b1f) * g;
                    *v = b2f * *v + (F::one() - b2f) * g * g;
                    *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Real, P: ParamSet<F>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(F::of(max_norm / norm));
    }
    norm
}

/// Batches of indices with similar lengths, in a seeded random order.
pub fn length_buckets(
    lengths: &[usize],
    batch_size: usize,
    rng: &mut crate::Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.shuffle(rng);
    // Sort within pools of several batches so composition still varies.
    let pool = batch_size * 8;
    let mut batches = Vec::new();
    for chunk in idx.chunks(pool) {
        let mut c = chunk.to_vec();
        c.sort_by_key(|&i| lengths[i]);
        batches.extend(c.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub max_grad_norm: f64,
}

/// Trains in place. `on_epoch` runs after every epoch (checkpointing, logs);
/// an error from it stops training.
pub fn train<F: Real>(
    model: &mut VcModel<F>,
    data: &[TrainItem<F>],
    cfg: &TrainConfig,
    flow: &FlowConfig,
    mut on_epoch: impl FnMut(&VcModel<F>, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if cfg.epochs > 0 && data.is_empty() {
        return Err(Error::invalid("training needs a non-empty corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let lengths: Vec<usize> = data.iter().map(|d| d.mel.nrows()).collect();
    let mut opt = Adam::new(model, cfg.learning_rate);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seeded_rng(derive_seed(cfg.seed, epoch as u64));
        let batches = length_buckets(&lengths, cfg.batch_size, &mut rng);
        let (mut total, mut max_norm) = (0.0, 0.0f64);
        for batch in &batches {
            let items: Vec<&TrainItem<F>> = batch.iter().map(|&i| &data[i]).collect();
            let masks = items
                .iter()
                .map(|it| sample_training_mask(it.mel.nrows(), model.config.frame_rate, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let draws: Vec<PathDraw<F>> = items
                .iter()
                .map(|it| PathDraw::sample(it.mel.nrows(), it.mel.ncols(), &mut rng))
                .collect();
            let mut out = model.loss_and_grads(&items, &masks, &draws, flow)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    step: opt.steps() as usize + 1,
                });
            }
            max_norm = max_norm.max(clip_grad_norm(&mut out.grads, cfg.clip_norm));
            opt.update(model, &out.grads);
            if let Some(name) = model.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter {name} after step {}",
                    opt.steps()
                )));
            }
            total += out.loss;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: total / batches.len() as f64,
            steps: batches.len(),
            max_grad_norm: max_norm,
        };
        on_epoch(model, &log)?;
        logs.push(log);
    }
    Ok(logs)
}
