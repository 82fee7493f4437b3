//! Noise-magnitude reporting, convergence-bound evaluation, and run summaries.

use std::io::Write;

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::fedsim::{Algorithm, RoundRecord};
use crate::sampling::mu_constants;

/// One group's contribution to the global update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNoiseInput {
    pub sigma_sq: f64,
    /// Participants per round, `r_m`.
    pub participants: f64,
    /// Aggregation weight `ω_m`.
    pub omega: f64,
    /// Coordinates kept by top-k, `k_m`.
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupNoise {
    /// Per-coordinate variance of the group sum, `C²σ²_m`.
    pub sum_var: f64,
    /// Expected squared norm of the group-sum noise, `d·C²σ²_m`.
    pub lambda: f64,
    pub omega: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReport {
    pub groups: Vec<GroupNoise>,
    /// Per-coordinate noise variance of the global update, averaged over
    /// coordinates: `Σ_m ω_m²C²σ²_m·k_m/d`.
    pub coord_var: f64,
    /// Expected squared noise norm of the global update,
    /// `Σ_m k_m ω_m² C² σ²_m`.
    pub lambda_total: f64,
    /// `Σ_m ω̃_m C²σ²_m` with `ω̃_m = r_m²/Σ r_j²`.
    pub paper_comparable: f64,
}

pub fn noise_magnitude(groups: &[GroupNoiseInput], d: usize, clip: f64) -> Result<NoiseReport> {
    if groups.is_empty() {
        return domain("noise report needs at least one group");
    }
    if d == 0 || !(clip.is_finite() && clip > 0.0) {
        return domain("dimension and clipping threshold must be positive");
    }
    for g in groups {
        if g.k > d {
            return Err(Error::Dimension { expected: d, got: g.k });
        }
        if !(g.sigma_sq >= 0.0 && g.participants > 0.0 && g.omega >= 0.0) || !g.sigma_sq.is_finite() {
            return domain("group noise inputs must be finite and nonnegative, with r_m > 0");
        }
    }
    let c2 = clip * clip;
    let sum_r2: f64 = groups.iter().map(|g| g.participants * g.participants).sum();
    let rows: Vec<GroupNoise> = groups
        .iter()
        .map(|g| GroupNoise { sum_var: c2 * g.sigma_sq, lambda: d as f64 * c2 * g.sigma_sq, omega: g.omega, k: g.k })
        .collect();
    let lambda_total: f64 = groups.iter().map(|g| g.k as f64 * g.omega * g.omega * c2 * g.sigma_sq).sum();
    let paper_comparable =
        groups.iter().map(|g| g.participants * g.participants / sum_r2 * c2 * g.sigma_sq).sum();
    Ok(NoiseReport { groups: rows, coord_var: lambda_total / d as f64, lambda_total, paper_comparable })
}

/// Algorithms ordered by decreasing `Λ_total`.
pub fn noise_ordering(reports: &[(Algorithm, NoiseReport)]) -> Vec<Algorithm> {
    let mut order: Vec<_> = reports.iter().map(|(a, r)| (*a, r.lambda_total)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(a, _)| a).collect()
}

/// Per-group terms of the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundGroup {
    pub omega: f64,
    pub sigma_sq: f64,
    pub r: f64,
    pub k: usize,
    pub q: f64,
    /// Gradient dissimilarity of the group, `ζ²_m`.
    pub zeta_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub l: f64,
    pub kappa_sq: f64,
    pub beta_sq: f64,
    pub f0_minus_fstar: f64,
    pub eta: f64,
    pub tau: u32,
    pub rounds: u32,
    pub d: usize,
    pub clip: f64,
    pub groups: Vec<BoundGroup>,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = [("L", self.l), ("eta", self.eta), ("C", self.clip)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return domain(format!("{name} must be positive, got {v}"));
        }
        if !(self.beta_sq >= 1.0) || !(self.kappa_sq >= 0.0) || !(self.f0_minus_fstar >= 0.0) {
            return domain("need beta^2 >= 1, kappa^2 >= 0 and f0 - f* >= 0");
        }
        if self.tau == 0 || self.rounds == 0 || self.d == 0 || self.groups.is_empty() {
            return domain("tau, T, d and the group list must be nonzero");
        }
        for g in &self.groups {
            if g.k > self.d {
                return Err(Error::Dimension { expected: self.d, got: g.k });
            }
            if !(g.r > 0.0 && g.q > 0.0 && g.q <= 1.0 && g.omega >= 0.0 && g.sigma_sq >= 0.0 && g.zeta_sq >= 0.0) {
                return domain("group bound inputs out of range");
            }
        }
        Ok(())
    }
}

/// `8(f⁰−f*)/(ηTτ) + μ₁κ² + μ₂Σ ω_m(φ_m+1)dζ²_m + μ₃Σ k_m ω_m²C²σ²_m/(r_m q_m)`
/// with `φ_m = (1 − k_m/d)²`.
pub fn convergence_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let mu = mu_constants(inputs.eta, inputs.tau, inputs.l)?;
    let d = inputs.d as f64;
    let c2 = inputs.clip * inputs.clip;
    let start = 8.0 * inputs.f0_minus_fstar / (inputs.eta * f64::from(inputs.rounds) * f64::from(inputs.tau));
    let (mut drift, mut noise) = (0.0, 0.0);
    for g in &inputs.groups {
        let phi = (1.0 - g.k as f64 / d).powi(2);
        drift += g.omega * (phi + 1.0) * d * g.zeta_sq;
        noise += g.k as f64 * g.omega * g.omega * c2 * g.sigma_sq / (g.r * g.q);
    }
    Ok(start + mu.mu1 * inputs.kappa_sq + mu.mu2 * drift + mu.mu3 * noise)
}

/// One training run's records.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecords {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub runs: usize,
    /// Mean over runs of the final-round accuracy.
    pub mean_acc: f64,
    /// Population standard deviation of the final-round accuracy.
    pub std_acc: f64,
    /// Mean over runs of the best accuracy reached in any round.
    pub best_acc: f64,
    /// Mean over runs of the first round count whose accuracy reaches the
    /// threshold; runs that never reach it count as `T`.
    pub rounds_to_threshold: f64,
    pub threshold_reached: bool,
}

/// Aggregates runs per algorithm, in order of first appearance.
pub fn summarize(runs: &[RunRecords], threshold: f64) -> Result<Vec<SummaryRow>> {
    if runs.is_empty() {
        return domain("nothing to summarize");
    }
    let mut algorithms: Vec<Algorithm> = Vec::new();
    for r in runs {
        if r.records.is_empty() {
            return domain(format!("{} seed {} has no rounds", r.algorithm, r.seed));
        }
        if !algorithms.contains(&r.algorithm) {
            algorithms.push(r.algorithm);
        }
    }
    Ok(algorithms
        .into_iter()
        .map(|algorithm| {
            let group: Vec<&RunRecords> = runs.iter().filter(|r| r.algorithm == algorithm).collect();
            let n = group.len() as f64;
            let finals: Vec<f64> = group.iter().map(|r| r.records.last().expect("nonempty").eval_accuracy).collect();
            let mean_acc = finals.iter().sum::<f64>() / n;
            let std_acc = (finals.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / n).sqrt();
            let best_acc = group
                .iter()
                .map(|r| r.records.iter().map(|x| x.eval_accuracy).fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                / n;
            let mut reached = true;
            let rounds: f64 = group
                .iter()
                .map(|r| match r.records.iter().position(|x| x.eval_accuracy >= threshold) {
                    Some(i) => (i + 1) as f64,
                    None => {
                        reached = false;
                        r.records.len() as f64
                    }
                })
                .sum::<f64>()
                / n;
            SummaryRow {
                algorithm,
                runs: group.len(),
                mean_acc,
                std_acc,
                best_acc,
                rounds_to_threshold: rounds,
                threshold_reached: reached,
            }
        })
        .collect())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["algorithm", "mean_acc", "std_acc", "best_acc"])?;
    for r in rows {
        w.write_record([r.algorithm.name().to_string(), r.mean_acc.to_string(), r.std_acc.to_string(), r.best_acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned plain-text table.
pub fn format_summary(rows: &[SummaryRow], threshold: f64) -> String {
    let mut s = format!(
        "{:<12} {:>4} {:>9} {:>9} {:>9} {:>10}\n",
        "algorithm", "runs", "mean_acc", "std_acc", "best_acc", format!("t@{threshold}")
    );
    for r in rows {
        let rounds = if r.threshold_reached {
            format!("{:.1}", r.rounds_to_threshold)
        } else {
            format!("{:.1}*", r.rounds_to_threshold)
        };
        s.push_str(&format!(
            "{:<12} {:>4} {:>9.4} {:>9.4} {:>9.4} {:>10}\n",
            r.algorithm.name(),
            r.runs,
            r.mean_acc,
            r.std_acc,
            r.best_acc,
            rounds
        ));
    }
    if rows.iter().any(|r| !r.threshold_reached) {
        s.push_str("* threshold not reached in every run; those runs count as T\n");
    }
    s
}
