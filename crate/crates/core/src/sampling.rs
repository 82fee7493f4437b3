//! Per-group client sampling ratios.
//!
//! The ratios minimize the sampling- and noise-dependent part of the
//! convergence bound,
//!
//! `Σ_m ω_m (μ₄(1 + φ_m) + μ₅ (1 − √φ_m) ω_m σ²_m / r_m²)`,
//!
//! subject to `r_m = q_m |G_m|` and `Σ_m r_m = q n`. Inside the objective the
//! noise multiplier follows the closed-form bound, so `σ²_m / r_m²` does not
//! depend on `q_m`; the ratios act through the reweighting `ω_m` and, in the
//! optimal-sparsity mode, through `φ*_m`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::accountant::{self, PrivacyBudget};
use crate::error::{domain, Error, Result};
use crate::sparsifier;

/// Tolerance on `Σ r_m = qn` relative to `qn`.
pub const CONSTRAINT_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 10_000;
const REL_OBJECTIVE_TOL: f64 = 1e-10;
const MIN_REL_STEP: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsificationMode {
    /// `φ*_m` from the coarse optimal sparsification level at the current iterate.
    OptimalPhi,
    /// Hand-set retained fractions `k_m/d`, `φ_m = (1 − k_m/d)²`.
    FixedFractions(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    pub group_sizes: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub q_global: f64,
    pub rounds: u32,
    pub eta: f64,
    pub tau: u32,
    pub delta: f64,
    pub sparsification: SparsificationMode,
    /// Per-group `(min, max)` sampling ratios; defaults to `(1/|G_m|, 1)`.
    pub q_bounds: Option<Vec<(f64, f64)>>,
    pub restarts: usize,
    pub seed: u64,
}

impl OptimizationConfig {
    pub fn num_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn population(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    /// Expected number of participants per round, `q n`.
    pub fn expected_participants(&self) -> f64 {
        self.q_global * self.population() as f64
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match &self.q_bounds {
            Some(b) => b.clone(),
            None => self.group_sizes.iter().map(|&g| (1.0 / g as f64, 1.0)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_groups();
        if m == 0 {
            return domain("at least one group is required");
        }
        if self.epsilons.len() != m {
            return domain(format!("{} epsilons for {m} groups", self.epsilons.len()));
        }
        if self.group_sizes.contains(&0) {
            return domain("every group needs at least one client");
        }
        if self.epsilons.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
            return domain("group epsilons must be positive");
        }
        if !(self.q_global > 0.0 && self.q_global <= 1.0) {
            return domain(format!("global sampling ratio must lie in (0, 1], got {}", self.q_global));
        }
        if self.rounds == 0 || self.tau == 0 || !(self.eta > 0.0) {
            return domain("rounds, local steps and learning rate must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return domain(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if let SparsificationMode::FixedFractions(f) = &self.sparsification {
            if f.len() != m || f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return domain("fixed sparsification fractions must be M values in [0, 1]");
            }
        }
        let bounds = self.bounds();
        if bounds.len() != m {
            return domain(format!("{} sampling bounds for {m} groups", bounds.len()));
        }
        for &(lo, hi) in &bounds {
            if !(lo >= 0.0 && lo <= hi && hi <= 1.0) {
                return domain(format!("invalid sampling bounds ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSolution {
    pub q_m: Vec<f64>,
    pub r_m: Vec<f64>,
    pub r_m_integer: Vec<usize>,
    pub objective: f64,
    pub omega_m: Vec<f64>,
    /// Closed-form noise multipliers used inside the objective.
    pub sigma_sq_m: Vec<f64>,
    /// Retained fractions `k_m/d` implied by the sparsification mode.
    pub k_fraction_m: Vec<f64>,
    pub converged: bool,
}

/// `ω_m = (1/qn) · r_m² / Σ_j r_j²`.
pub fn reweight(r: &[f64], qn: f64) -> Result<Vec<f64>> {
    if r.is_empty() {
        return domain("no groups to reweight");
    }
    if let Some(bad) = r.iter().find(|&&v| !(v.is_finite() && v > 0.0)) {
        return domain(format!("participant counts must be positive, got {bad}"));
    }
    if !(qn > 0.0) {
        return domain(format!("qn must be positive, got {qn}"));
    }
    let sum_sq: f64 = r.iter().map(|v| v * v).sum();
    Ok(r.iter().map(|v| (1.0 / qn) * (v * v / sum_sq)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuConstants {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
    pub mu5: f64,
}

/// Constants of the convergence bound. `μ₄` and `μ₅` do not involve `L`.
pub fn mu_constants(eta: f64, tau: u32, l: f64) -> Result<MuConstants> {
    if !(eta > 0.0 && l > 0.0) || tau == 0 {
        return domain("eta, tau and L must be positive");
    }
    let t = f64::from(tau);
    Ok(MuConstants {
        mu1: 4.0 * l * eta * t + 4.0 * l * eta + 64.0 * l,
        mu2: 32.0 * l * eta * t + l * eta + l * eta / t,
        mu3: 4.0 * l / (eta * t),
        mu4: 32.0 * eta * t + eta + eta / t,
        mu5: 4.0 / (eta * t),
    })
}

struct Evaluation {
    objective: f64,
    omega: Vec<f64>,
    sigma_sq: Vec<f64>,
    k_fraction: Vec<f64>,
}

/// Closed-form σ² without the out-of-range warning; callers warn once.
fn closed_form_quiet(q: f64, rounds: u32, eps: f64, delta: f64) -> f64 {
    7.0 * q * q * f64::from(rounds) * (eps - 2.0 * delta.ln()) / (eps * eps)
}

fn evaluate(r: &[f64], cfg: &OptimizationConfig, mu: &MuConstants) -> Result<Evaluation> {
    let qn = cfg.expected_participants();
    let omega = reweight(r, qn)?;
    let mut objective = 0.0;
    let mut sigma_sq = Vec::with_capacity(r.len());
    let mut k_fraction = Vec::with_capacity(r.len());
    for m in 0..r.len() {
        let q_m = r[m] / cfg.group_sizes[m] as f64;
        let s = closed_form_quiet(q_m, cfg.rounds, cfg.epsilons[m], cfg.delta);
        let frac = match &cfg.sparsification {
            SparsificationMode::OptimalPhi => {
                sparsifier::optimal_k_fraction(omega[m], s, cfg.eta, cfg.tau, r[m])?.fraction
            }
            SparsificationMode::FixedFractions(f) => f[m],
        };
        let sqrt_phi = 1.0 - frac;
        let phi = sqrt_phi * sqrt_phi;
        objective += omega[m] * (mu.mu4 * (1.0 + phi) + mu.mu5 * (1.0 - sqrt_phi) * omega[m] * s / (r[m] * r[m]));
        sigma_sq.push(s);
        k_fraction.push(frac);
    }
    Ok(Evaluation { objective, omega, sigma_sq, k_fraction })
}

/// Objective value at sampling ratios `q_m`.
pub fn problem1_objective(q: &[f64], cfg: &OptimizationConfig) -> Result<f64> {
    cfg.validate()?;
    if q.len() != cfg.num_groups() {
        return domain(format!("{} ratios for {} groups", q.len(), cfg.num_groups()));
    }
    let qn = cfg.expected_participants();
    let r: Vec<f64> = q.iter().zip(&cfg.group_sizes).map(|(q, &g)| q * g as f64).collect();
    let total: f64 = r.iter().sum();
    if (total - qn).abs() > 1e-6 * qn.max(1.0) {
        return Err(Error::Constraint(format!("sum of expected participants {total} differs from qn = {qn}")));
    }
    for (m, (&qm, &(lo, hi))) in q.iter().zip(&cfg.bounds()).enumerate() {
        if qm < lo - 1e-12 || qm > hi + 1e-12 {
            return Err(Error::Constraint(format!("q_{m} = {qm} outside [{lo}, {hi}]")));
        }
    }
    let mu = mu_constants(cfg.eta, cfg.tau, 1.0)?;
    Ok(evaluate(&r, cfg, &mu)?.objective)
}

/// Euclidean projection onto `{Σ r = total, lo ≤ r ≤ hi}` by bisection on a
/// uniform shift.
fn project(x: &[f64], lo: &[f64], hi: &[f64], total: f64) -> Vec<f64> {
    let shifted = |lambda: f64| -> Vec<f64> {
        x.iter().zip(lo.iter().zip(hi)).map(|(&v, (&l, &h))| (v + lambda).clamp(l, h)).collect()
    };
    let span = x.iter().chain(lo).chain(hi).fold(0.0f64, |a, v| a.max(v.abs())) + total.abs() + 1.0;
    let (mut a, mut b) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let s: f64 = shifted(mid).iter().sum();
        if s < total {
            a = mid;
        } else {
            b = mid;
        }
    }
    let mut r = shifted(0.5 * (a + b));
    fix_sum(&mut r, lo, hi, total);
    r
}

/// Absorbs rounding drift so that `Σ r` hits `total` as closely as floating
/// point allows.
fn fix_sum(r: &mut [f64], lo: &[f64], hi: &[f64], total: f64) {
    for _ in 0..4 {
        let drift = total - r.iter().sum::<f64>();
        if drift == 0.0 {
            return;
        }
        for i in 0..r.len() {
            let moved = (r[i] + drift).clamp(lo[i], hi[i]);
            if moved != r[i] {
                r[i] = moved;
                break;
            }
        }
    }
}

struct LocalResult {
    r: Vec<f64>,
    objective: f64,
    converged: bool,
}

/// Compass search over pairwise transfers `r_i += s, r_j −= s`, which keep
/// the participation constraint; the step halves after an unsuccessful sweep.
fn local_search(
    start: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    total: f64,
    cfg: &OptimizationConfig,
    mu: &MuConstants,
) -> Result<LocalResult> {
    let m = start.len();
    let mut r = start;
    let mut f = evaluate(&r, cfg, mu)?.objective;
    if m == 1 {
        return Ok(LocalResult { r, objective: f, converged: true });
    }
    let mut step = 0.1 * total;
    let mut last_sweep_f = f;
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let mv = step.min(hi[i] - r[i]).min(r[j] - lo[j]);
                if mv <= 0.0 {
                    continue;
                }
                let mut cand = r.clone();
                cand[i] += mv;
                cand[j] -= mv;
                let fc = evaluate(&cand, cfg, mu)?.objective;
                if fc < f {
                    r = cand;
                    f = fc;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < MIN_REL_STEP * total {
                fix_sum(&mut r, lo, hi, total);
                let objective = evaluate(&r, cfg, mu)?.objective;
                return Ok(LocalResult { r, objective, converged: true });
            }
        } else if ((last_sweep_f - f) / f.abs().max(f64::MIN_POSITIVE)).abs() < REL_OBJECTIVE_TOL
            && step < 1e-9 * total
        {
            break;
        }
        last_sweep_f = f;
    }
    fix_sum(&mut r, lo, hi, total);
    let objective = evaluate(&r, cfg, mu)?.objective;
    Ok(LocalResult { r, objective, converged: false })
}

/// Integer participant counts by largest-remainder rounding; the counts sum
/// to `round(qn)` and never exceed the group sizes.
pub fn largest_remainder(r: &[f64], sizes: &[usize], target: usize) -> Result<Vec<usize>> {
    if target > sizes.iter().sum::<usize>() {
        return Err(Error::Infeasible(format!("cannot place {target} participants in the groups")));
    }
    let mut counts: Vec<usize> = r
        .iter()
        .zip(sizes)
        .map(|(&v, &g)| (v.max(0.0).floor() as usize).min(g))
        .collect();
    let mut assigned: usize = counts.iter().sum();
    // Ties go to the lower index.
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = r[a] - r[a].floor();
        let fb = r[b] - r[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    while assigned < target {
        let before = assigned;
        for &i in &order {
            if assigned == target {
                break;
            }
            if counts[i] < sizes[i] {
                counts[i] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            return Err(Error::Infeasible("no room left for remaining participants".into()));
        }
    }
    while assigned > target {
        // Only reachable when floors already overshoot; trim the smallest remainders.
        let i = *order.iter().rev().find(|&&i| counts[i] > 0).expect("positive count");
        counts[i] -= 1;
        assigned -= 1;
    }
    Ok(counts)
}

/// Multi-start local search on the constraint surface.
pub fn solve(cfg: &OptimizationConfig) -> Result<SamplingSolution> {
    cfg.validate()?;
    for (mm, &eps) in cfg.epsilons.iter().enumerate() {
        let budget = PrivacyBudget::new(eps, cfg.delta)?;
        if !accountant::closed_form_in_range(&budget) {
            log::warn!("group {mm}: epsilon {eps} is outside the closed-form noise bound's range");
        }
    }
    // Solve in a canonical group order so that relabelling groups relabels the answer.
    let bounds = cfg.bounds();
    let mut order: Vec<usize> = (0..cfg.num_groups()).collect();
    order.sort_by(|&a, &b| {
        cfg.epsilons[a]
            .total_cmp(&cfg.epsilons[b])
            .then(cfg.group_sizes[a].cmp(&cfg.group_sizes[b]))
            .then(bounds[a].0.total_cmp(&bounds[b].0))
            .then(bounds[a].1.total_cmp(&bounds[b].1))
    });
    let canonical = OptimizationConfig {
        group_sizes: order.iter().map(|&i| cfg.group_sizes[i]).collect(),
        epsilons: order.iter().map(|&i| cfg.epsilons[i]).collect(),
        q_bounds: cfg.q_bounds.as_ref().map(|_| order.iter().map(|&i| bounds[i]).collect()),
        ..cfg.clone()
    };
    let sol = solve_ordered(&canonical)?;
    fn unpermute<T: Copy + Default>(v: &[T], order: &[usize]) -> Vec<T> {
        let mut out = vec![T::default(); v.len()];
        for (&x, &i) in v.iter().zip(order) {
            out[i] = x;
        }
        out
    }
    Ok(SamplingSolution {
        q_m: unpermute(&sol.q_m, &order),
        r_m: unpermute(&sol.r_m, &order),
        r_m_integer: unpermute(&sol.r_m_integer, &order),
        omega_m: unpermute(&sol.omega_m, &order),
        sigma_sq_m: unpermute(&sol.sigma_sq_m, &order),
        k_fraction_m: unpermute(&sol.k_fraction_m, &order),
        ..sol
    })
}

fn solve_ordered(cfg: &OptimizationConfig) -> Result<SamplingSolution> {
    let m = cfg.num_groups();
    let total = cfg.expected_participants();
    let sizes: Vec<f64> = cfg.group_sizes.iter().map(|&g| g as f64).collect();
    let bounds = cfg.bounds();
    let lo: Vec<f64> = bounds.iter().zip(&sizes).map(|(b, g)| b.0 * g).collect();
    let hi: Vec<f64> = bounds.iter().zip(&sizes).map(|(b, g)| b.1 * g).collect();
    let (sum_lo, sum_hi): (f64, f64) = (lo.iter().sum(), hi.iter().sum());
    let slack = 1e-12 * total.max(1.0);
    if total < sum_lo - slack || total > sum_hi + slack {
        return Err(Error::Infeasible(format!(
            "qn = {total} outside the range [{sum_lo}, {sum_hi}] allowed by the sampling bounds"
        )));
    }
    let mu = mu_constants(cfg.eta, cfg.tau, 1.0)?;

    let mut starts = vec![project(&sizes.iter().map(|g| cfg.q_global * g).collect::<Vec<_>>(), &lo, &hi, total)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = Gamma::new(1.0, 1.0).expect("unit gamma");
    for _ in 0..cfg.restarts {
        let w: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
        let s: f64 = w.iter().sum();
        let x: Vec<f64> = w.iter().map(|v| total * v / s).collect();
        starts.push(project(&x, &lo, &hi, total));
    }

    let mut best: Option<LocalResult> = None;
    for start in starts {
        let res = local_search(start, &lo, &hi, total, cfg, &mu)?;
        if best.as_ref().is_none_or(|b| res.objective < b.objective) {
            best = Some(res);
        }
    }
    let best = best.expect("at least one start");
    let eval = evaluate(&best.r, cfg, &mu)?;
    let r_int = largest_remainder(&best.r, &cfg.group_sizes, total.round() as usize)?;
    Ok(SamplingSolution {
        q_m: best.r.iter().zip(&sizes).map(|(r, g)| r / g).collect(),
        r_m: best.r,
        r_m_integer: r_int,
        objective: eval.objective,
        omega_m: eval.omega,
        sigma_sq_m: eval.sigma_sq,
        k_fraction_m: eval.k_fraction,
        converged: best.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fmnist() -> OptimizationConfig {
        OptimizationConfig {
            group_sizes: vec![2000, 2000, 2000],
            epsilons: vec![0.5, 1.5, 3.0],
            q_global: 0.02,
            rounds: 50,
            eta: 0.1,
            tau: 5,
            delta: 6000f64.powf(-1.1),
            sparsification: SparsificationMode::OptimalPhi,
            q_bounds: None,
            restarts: 16,
            seed: 7,
        }
    }

    #[test]
    fn reweight_examples() {
        let w = reweight(&[40.0, 40.0, 40.0], 120.0).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 360.0).abs() < 1e-15));
        assert_eq!(reweight(&[120.0], 120.0).unwrap(), vec![1.0 / 120.0]);
        let w = reweight(&[13.8, 37.8, 68.4], 120.0).unwrap();
        for (got, want) in w.iter().zip([2.52e-4, 1.891e-3, 6.191e-3]) {
            assert!((got / want - 1.0).abs() < 2e-3, "{got} vs {want}");
        }
        assert!(reweight(&[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn mu_examples() {
        let mu = mu_constants(0.1, 5, 1.0).unwrap();
        assert!((mu.mu1 - 66.4).abs() < 1e-12);
        assert!((mu.mu2 - 16.12).abs() < 1e-12);
        assert!((mu.mu3 - 8.0).abs() < 1e-12);
        assert!((mu.mu4 - 16.12).abs() < 1e-12);
        assert!((mu.mu5 - 8.0).abs() < 1e-12);
        let one = mu_constants(0.3, 1, 2.5).unwrap();
        assert!((one.mu4 - 34.0 * 0.3).abs() < 1e-12);
        assert!((one.mu2 - 2.5 * one.mu4).abs() < 1e-12);
        assert!(mu_constants(0.0, 1, 1.0).is_err());
    }

    #[test]
    fn objective_collapses_for_single_group_without_sparsity() {
        let mut cfg = fmnist();
        cfg.group_sizes = vec![6000];
        cfg.epsilons = vec![1.0];
        cfg.sparsification = SparsificationMode::FixedFractions(vec![1.0]);
        let mu = mu_constants(0.1, 5, 1.0).unwrap();
        let r = 120.0;
        let omega = 1.0 / r;
        let sigma = 7.0 * 0.02f64.powi(2) * 50.0 * (1.0 - 2.0 * cfg.delta.ln());
        let want = omega * (mu.mu4 + mu.mu5 * omega * sigma / (r * r));
        let got = problem1_objective(&[0.02], &cfg).unwrap();
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn objective_symmetric_under_permutation() {
        let mut cfg = fmnist();
        cfg.epsilons = vec![1.0, 1.0, 1.0];
        let a = problem1_objective(&[0.01, 0.02, 0.03], &cfg).unwrap();
        let b = problem1_objective(&[0.03, 0.01, 0.02], &cfg).unwrap();
        assert!((a - b).abs() < 1e-15 * a);
    }

    #[test]
    fn reported_ratios_beat_uniform() {
        let cfg = fmnist();
        let reported = problem1_objective(&[0.0069, 0.0189, 0.0342], &cfg).unwrap();
        let uniform = problem1_objective(&[0.02, 0.02, 0.02], &cfg).unwrap();
        assert!(reported <= uniform);
    }

    #[test]
    fn objective_rejects_constraint_violation() {
        let cfg = fmnist();
        assert!(matches!(problem1_objective(&[0.02, 0.02, 0.03], &cfg), Err(Error::Constraint(_))));
    }

    #[test]
    fn solve_symmetric_gives_uniform() {
        let mut cfg = fmnist();
        cfg.epsilons = vec![2.0, 2.0, 2.0];
        let sol = solve(&cfg).unwrap();
        for q in &sol.q_m {
            assert!((q - 0.02).abs() < 1e-4, "{:?}", sol.q_m);
        }
        assert_eq!(sol.r_m_integer, vec![40, 40, 40]);
    }

    #[test]
    fn solve_orders_ratios_by_budget() {
        let sol = solve(&fmnist()).unwrap();
        assert!(sol.q_m[0] < sol.q_m[1] && sol.q_m[1] < sol.q_m[2], "{:?}", sol.q_m);
        let total: f64 = sol.r_m.iter().sum();
        assert!((total - 120.0).abs() < 1e-6);
        assert_eq!(sol.r_m_integer.iter().sum::<usize>(), 120);
        assert!(sol.converged);
    }

    #[test]
    fn infeasible_bounds_rejected() {
        let mut cfg = fmnist();
        cfg.q_bounds = Some(vec![(0.0, 0.01); 3]);
        assert!(matches!(solve(&cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn largest_remainder_preserves_total() {
        assert_eq!(largest_remainder(&[1.5, 1.5, 1.0], &[10, 10, 10], 4).unwrap(), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.7, 3.1], &[5, 5, 5], 4).unwrap(), vec![0, 1, 3]);
        assert_eq!(largest_remainder(&[2.6, 0.4], &[2, 5], 3).unwrap(), vec![2, 1]);
        assert!(largest_remainder(&[1.0], &[1], 2).is_err());
    }

    #[test]
    fn projection_lands_on_surface() {
        let lo = [1.0, 1.0, 1.0];
        let hi = [10.0, 10.0, 10.0];
        let r = project(&[0.0, 50.0, 3.0], &lo, &hi, 12.0);
        assert!((r.iter().sum::<f64>() - 12.0).abs() < 1e-12);
        assert!(r.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| v >= l && v <= h));
    }
}
