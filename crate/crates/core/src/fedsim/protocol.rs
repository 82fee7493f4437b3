//! Server-side round logic for all five training algorithms.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{clip_update, local_train, perturb, ClientUpdate, LocalTrainConfig};
use super::data::DatasetShard;
use super::groups::{sample_clients, GroupSpec};
use super::model::{ModelVector, Objective};
use super::rng::{stream, Purpose};
use super::secagg::{aggregate, direct_sum, seal, SealPolicy};
use crate::error::{domain, Error, Result};
use crate::sparsifier::top_k_in_place;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Federated averaging without privacy.
    PFedavg,
    /// One group at the strictest budget, plain averaging.
    DpFedavg,
    /// Per-group noise, uniform sampling, no sparsification.
    Gdpfed,
    /// Per-group noise with optimized sampling ratios.
    GdpfedOp,
    /// Optimized sampling ratios plus per-group top-k.
    GdpfedPlus,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Self::PFedavg, Self::DpFedavg, Self::Gdpfed, Self::GdpfedOp, Self::GdpfedPlus];

    pub fn name(self) -> &'static str {
        match self {
            Self::PFedavg => "p_fedavg",
            Self::DpFedavg => "dp_fedavg",
            Self::Gdpfed => "gdpfed",
            Self::GdpfedOp => "gdpfed_op",
            Self::GdpfedPlus => "gdpfed_plus",
        }
    }

    pub fn is_private(self) -> bool {
        self != Self::PFedavg
    }

    /// Whether clients are split into privacy groups.
    pub fn is_grouped(self) -> bool {
        matches!(self, Self::Gdpfed | Self::GdpfedOp | Self::GdpfedPlus)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

/// How group sums are combined into the global update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `ω_m = (1/qn)·r_m²/Σ r_j²` with `qn = Σ r_j`.
    #[default]
    Reweighted,
    /// The same weights rescaled so that `Σ ω_m r_m = 1`.
    Normalized,
}

/// Whether client updates pass through [`seal`]/[`aggregate`] or are summed
/// directly. Both give bitwise identical sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SumPath {
    #[default]
    Sealed,
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub algorithm: Algorithm,
    pub rounds: u32,
    pub tau: u32,
    pub eta: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub groups: Vec<GroupSpec>,
    /// Per-group top-k level applied to the group sum; `None` keeps all.
    pub top_k: Vec<Option<usize>>,
    pub seed: u64,
    pub weighting: Weighting,
    pub sum_path: SumPath,
}

impl TrainPlan {
    pub fn validate(&self, dim: usize, n_clients: usize, sigma_sq: &[f64]) -> Result<()> {
        let m = self.groups.len();
        if m == 0 {
            return domain("a plan needs at least one group");
        }
        if !self.algorithm.is_grouped() && m != 1 {
            return domain(format!("{} runs over a single group, got {m}", self.algorithm));
        }
        if self.tau == 0 || self.batch_size == 0 {
            return domain("tau and batch size must be positive");
        }
        if !(self.eta.is_finite() && self.eta > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return domain("learning rate must be positive and decay in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return domain("momentum must lie in [0, 1)");
        }
        if self.algorithm.is_private() {
            if !(self.clip.is_finite() && self.clip > 0.0) {
                return domain("clipping threshold must be positive");
            }
            if sigma_sq.len() != m {
                return Err(Error::Dimension { expected: m, got: sigma_sq.len() });
            }
            if sigma_sq.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return domain("noise multipliers must be finite and nonnegative");
            }
        }
        if self.top_k.len() != m {
            return Err(Error::Dimension { expected: m, got: self.top_k.len() });
        }
        if let Some(k) = self.top_k.iter().flatten().find(|&&k| k > dim) {
            return domain(format!("top-k level {k} exceeds model dimension {dim}"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.id != i {
                return domain("group ids must be 0..M in order");
            }
            if g.participants == 0 || g.participants > g.size() {
                return domain(format!("group {i} samples {} of {} clients", g.participants, g.size()));
            }
            if let Some(&c) = g.members.iter().find(|&&c| c >= n_clients) {
                return domain(format!("group {i} references client {c} but only {n_clients} shards exist"));
            }
        }
        Ok(())
    }

    /// Aggregation weights for the planned participant counts.
    pub fn weights(&self) -> Vec<f64> {
        let r: Vec<f64> = self.groups.iter().map(|g| g.participants as f64).collect();
        let qn: f64 = r.iter().sum();
        let sum_sq: f64 = r.iter().map(|v| v * v).sum();
        let mut w: Vec<f64> = if self.algorithm.is_grouped() {
            r.iter().map(|v| (1.0 / qn) * (v * v / sum_sq)).collect()
        } else {
            vec![1.0 / qn]
        };
        if self.weighting == Weighting::Normalized {
            let mass: f64 = w.iter().zip(&r).map(|(a, b)| a * b).sum();
            w.iter_mut().for_each(|v| *v /= mass);
        }
        w
    }
}

/// Client shards, the model, and the held-out evaluation set.
#[derive(Debug, Clone)]
pub struct Federation<O> {
    pub objective: O,
    pub clients: Vec<DatasetShard>,
    pub test: DatasetShard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub t: u32,
    pub group_sum_norms: Vec<f64>,
    pub global_update_norm: f64,
    /// Mean loss of the sampled clients on their shards at the broadcast model.
    pub train_loss: f64,
    /// Held-out accuracy after the update.
    pub eval_accuracy: f64,
    pub clip_fraction: Vec<f64>,
    /// Per-coordinate noise variance of each group sum, `C²σ²_m`.
    pub noise_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: ModelVector,
    pub round: u32,
}

struct ClientResult {
    update: ClientUpdate,
    loss: f64,
}

fn client_step<O: Objective>(
    fed: &Federation<O>,
    plan: &TrainPlan,
    params: &ModelVector,
    group: &GroupSpec,
    sigma_sq: f64,
    client: usize,
    t: u32,
) -> Result<ClientResult> {
    let shard = &fed.clients[client];
    let all: Vec<usize> = (0..shard.len()).collect();
    let loss = fed.objective.loss(params.as_slice(), shard, &all)?;
    let cfg = LocalTrainConfig {
        tau: plan.tau,
        lr: plan.eta * plan.lr_decay.powi(t as i32),
        batch_size: plan.batch_size,
        momentum: plan.momentum,
    };
    let key = |purpose| stream(plan.seed, purpose, u64::from(t), group.id as u64, client as u64);
    let delta = local_train(&fed.objective, params, shard, &cfg, &mut key(Purpose::Batching))?;
    let update = if plan.algorithm.is_private() {
        let clipped = clip_update(group.id, delta, plan.clip)?;
        perturb(clipped, plan.clip, sigma_sq, group.participants, &mut key(Purpose::Noise))?
    } else {
        ClientUpdate::raw(group.id, delta)
    };
    Ok(ClientResult { update, loss })
}

/// One communication round: sample, train, clip, perturb, aggregate per
/// group, sparsify each group sum, then apply the weighted global update.
pub fn server_round<O: Objective>(
    state: &mut ServerState,
    plan: &TrainPlan,
    fed: &Federation<O>,
    sigma_sq: &[f64],
) -> Result<RoundRecord> {
    let t = state.round;
    let policy = if plan.algorithm.is_private() { SealPolicy::Private } else { SealPolicy::NonPrivate };
    let weights = plan.weights();
    let mut global = ModelVector::zeros(state.params.dim());
    let mut group_sum_norms = Vec::with_capacity(plan.groups.len());
    let mut clip_fraction = Vec::with_capacity(plan.groups.len());
    let mut noise_var = Vec::with_capacity(plan.groups.len());
    let (mut loss_sum, mut participants) = (0.0, 0usize);
    for (m, group) in plan.groups.iter().enumerate() {
        let s = if plan.algorithm.is_private() { sigma_sq[m] } else { 0.0 };
        let sampled = sample_clients(group, t, plan.seed)?;
        let params = &state.params;
        let results: Vec<ClientResult> = sampled
            .par_iter()
            .map(|&c| client_step(fed, plan, params, group, s, c, t))
            .collect::<Result<_>>()?;
        loss_sum += results.iter().map(|r| r.loss).sum::<f64>();
        participants += results.len();
        let clipped = results.iter().filter(|r| r.update.clipped()).count();
        clip_fraction.push(clipped as f64 / results.len() as f64);
        noise_var.push(if plan.algorithm.is_private() { plan.clip * plan.clip * s } else { 0.0 });
        let mut sum = match plan.sum_path {
            SumPath::Sealed => {
                let sealed: Vec<_> = results.into_iter().map(|r| seal(r.update, policy)).collect::<Result<_>>()?;
                aggregate(&sealed)?
            }
            SumPath::Direct => {
                let raw: Vec<_> = results.into_iter().map(|r| r.update.into_delta()).collect();
                direct_sum(&raw)?
            }
        };
        group_sum_norms.push(sum.norm());
        if let Some(k) = plan.top_k[m] {
            top_k_in_place(sum.as_mut_slice(), k)?;
        }
        global.add_scaled(weights[m], &sum)?;
    }
    state.params.add_scaled(1.0, &global)?;
    if !state.params.is_finite() {
        return Err(Error::NonFinite(format!("global model after round {t}")));
    }
    state.round += 1;
    let record = RoundRecord {
        t,
        group_sum_norms,
        global_update_norm: global.norm(),
        train_loss: loss_sum / participants as f64,
        eval_accuracy: fed.objective.accuracy(state.params.as_slice(), &fed.test),
        clip_fraction,
        noise_var,
    };
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub records: Vec<RoundRecord>,
    pub model: ModelVector,
}

/// Runs `plan.rounds` rounds from the objective's initial point.
pub fn run_training<O: Objective>(plan: &TrainPlan, fed: &Federation<O>, sigma_sq: &[f64]) -> Result<TrainingRun> {
    let dim = fed.objective.dim();
    plan.validate(dim, fed.clients.len(), sigma_sq)?;
    let mut state = ServerState { params: fed.objective.init(plan.seed), round: 0 };
    let records = (0..plan.rounds)
        .map(|_| server_round(&mut state, plan, fed, sigma_sq))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingRun { records, model: state.params })
}
