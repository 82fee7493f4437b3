//! Client-side operations: local SGD, clipping, and Gaussian perturbation.

use rand::Rng;
use rand_distr::StandardNormal;

use super::data::DatasetShard;
use super::model::{ModelVector, Objective};
use crate::error::{domain, Error, Result};

/// How far an update has progressed through the privacy pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum UpdateStage {
    Raw,
    Clipped,
    Noised,
}

/// A client's model delta together with its pipeline history. Stages only
/// advance through [`clip_update`] and [`perturb`], so a noised update has
/// necessarily been clipped first.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    group_id: usize,
    delta: ModelVector,
    clipped: bool,
    stage: UpdateStage,
}

impl ClientUpdate {
    /// An update that skips the privacy pipeline.
    pub fn raw(group_id: usize, delta: ModelVector) -> Self {
        Self { group_id, delta, clipped: false, stage: UpdateStage::Raw }
    }

    pub fn group_id(&self) -> usize {
        self.group_id
    }

    pub fn delta(&self) -> &ModelVector {
        &self.delta
    }

    pub(crate) fn into_delta(self) -> ModelVector {
        self.delta
    }

    /// Whether clipping actually rescaled the delta.
    pub fn clipped(&self) -> bool {
        self.clipped
    }

    pub fn noised(&self) -> bool {
        self.stage == UpdateStage::Noised
    }

    pub fn stage(&self) -> UpdateStage {
        self.stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    /// Number of SGD steps.
    pub tau: u32,
    pub lr: f64,
    /// Examples drawn with replacement per step; a value of at least the
    /// shard size uses the whole shard instead.
    pub batch_size: usize,
    /// Heavy-ball coefficient; the buffer starts at zero every call.
    pub momentum: f64,
}

/// Runs `tau` mini-batch SGD steps from `model` and returns the
/// difference between the final and the initial parameters.
pub fn local_train<O: Objective + ?Sized>(
    objective: &O,
    model: &ModelVector,
    shard: &DatasetShard,
    cfg: &LocalTrainConfig,
    rng: &mut impl Rng,
) -> Result<ModelVector> {
    if shard.is_empty() {
        return domain("local training on an empty shard");
    }
    if model.dim() != objective.dim() {
        return Err(Error::Dimension { expected: objective.dim(), got: model.dim() });
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) || cfg.batch_size == 0 {
        return domain("invalid local training hyperparameters");
    }
    let d = model.dim();
    let mut theta = model.as_slice().to_vec();
    let mut velocity = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let full: Vec<usize> = (0..shard.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size.min(shard.len()));
    for step in 0..cfg.tau {
        let idx = if cfg.batch_size >= shard.len() {
            &full
        } else {
            batch.clear();
            batch.extend((0..cfg.batch_size).map(|_| rng.gen_range(0..shard.len())));
            &batch
        };
        objective
            .loss_grad(&theta, shard, idx, &mut grad)
            .map_err(|e| Error::NonFinite(format!("local step {step}: {e}")))?;
        for ((t, v), g) in theta.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *t -= cfg.lr * *v;
        }
    }
    let delta: Vec<f64> = theta.iter().zip(model.as_slice()).map(|(a, b)| a - b).collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("local update diverged".into()));
    }
    ModelVector::from_vec(delta)
}

/// Scales `delta` by `min(1, C/‖delta‖₂)`.
pub fn clip_update(group_id: usize, delta: ModelVector, clip: f64) -> Result<ClientUpdate> {
    if !(clip.is_finite() && clip > 0.0) {
        return domain(format!("clipping threshold must be positive, got {clip}"));
    }
    let mut delta = delta;
    let norm = delta.norm();
    let clipped = norm > clip;
    if clipped {
        delta.scale(clip / norm);
    }
    Ok(ClientUpdate { group_id, delta, clipped, stage: UpdateStage::Clipped })
}

/// Adds `N(0, C²σ²/r)` noise to every coordinate of a clipped update.
pub fn perturb(update: ClientUpdate, clip: f64, sigma_sq: f64, r: usize, rng: &mut impl Rng) -> Result<ClientUpdate> {
    match update.stage {
        UpdateStage::Raw => return Err(Error::Plumbing("perturbing an unclipped update".into())),
        UpdateStage::Noised => return Err(Error::Plumbing("update perturbed twice".into())),
        UpdateStage::Clipped => {}
    }
    if !(sigma_sq.is_finite() && sigma_sq >= 0.0) || r == 0 || !(clip.is_finite() && clip > 0.0) {
        return domain("perturbation needs C > 0, sigma^2 >= 0 and r >= 1");
    }
    let std = clip * (sigma_sq / r as f64).sqrt();
    let mut delta = update.delta;
    for v in delta.as_mut_slice() {
        *v += std * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(ClientUpdate { stage: UpdateStage::Noised, delta, ..update })
}
