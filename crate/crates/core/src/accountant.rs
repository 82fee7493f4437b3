//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! Noise multipliers are expressed as variances relative to unit
//! ℓ2-sensitivity: a group sum perturbed with `N(0, C²σ² I)` against
//! sensitivity `C` has noise multiplier `σ²`. The clipping threshold never
//! enters the accounting.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Largest integer order on the default grid.
pub const MAX_INTEGER_ORDER: u32 = 256;

/// Fractional orders below 2. The subsampled bound only exists for integer
/// orders, so these points carry the plain Gaussian curve.
pub const FRACTIONAL_ORDERS: [f64; 3] = [1.25, 1.5, 1.75];

/// Default relative bracket width for [`calibrate_sigma`].
pub const DEFAULT_REL_TOL: f64 = 1e-4;

const MAX_BISECTION_ITERS: usize = 200;
const BRACKET_LO: f64 = 1e-3;
const BRACKET_HI: f64 = 1e3;
const SIGMA_SQ_CEILING: f64 = 1e12;

/// A Rényi order `α > 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RdpOrder(f64);

impl RdpOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 1.0) {
            return domain(format!("Rényi order must be finite and > 1, got {alpha}"));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `Some(α)` when the order is an integer (≥ 2 by construction).
    pub fn as_integer(self) -> Option<u32> {
        (self.0.fract() == 0.0 && self.0 <= u32::MAX as f64).then_some(self.0 as u32)
    }
}

/// Rényi divergence bound `ρ(α)` tabulated over strictly increasing orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    points: Vec<(RdpOrder, f64)>,
}

impl RdpCurve {
    pub fn new(points: Vec<(RdpOrder, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return domain(format!("an RDP curve needs at least 2 points, got {}", points.len()));
        }
        for &(alpha, rho) in &points {
            if !(rho >= 0.0) {
                return domain(format!("rho({}) = {rho} is not a nonnegative number", alpha.0));
            }
        }
        if points.windows(2).any(|w| w[0].0 .0 >= w[1].0 .0) {
            return domain("RDP orders must be strictly increasing");
        }
        Ok(Self { points })
    }

    /// Evaluates `f` at every order.
    pub fn tabulate(orders: &[RdpOrder], mut f: impl FnMut(RdpOrder) -> Result<f64>) -> Result<Self> {
        let points = orders
            .iter()
            .map(|&a| f(a).map(|rho| (a, rho)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(points)
    }

    pub fn points(&self) -> &[(RdpOrder, f64)] {
        &self.points
    }

    pub fn orders(&self) -> impl Iterator<Item = RdpOrder> + '_ {
        self.points.iter().map(|p| p.0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An `(ε, δ)` differential-privacy budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return domain(format!("epsilon must be positive, got {epsilon}"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return domain(format!("delta must lie in (0, 1), got {delta}"));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn log_inv_delta(&self) -> f64 {
        -self.delta.ln()
    }
}

/// Uniform failure probability `δ = n^{-exponent}` (exponent 1.1 by default).
pub fn delta_for_population(n: usize, exponent: f64) -> Result<f64> {
    if n < 2 || !(exponent > 0.0) {
        return domain(format!("delta policy needs n ≥ 2 and a positive exponent (n={n}, exponent={exponent})"));
    }
    Ok((n as f64).powf(-exponent))
}

/// Per-round client sampling probability, round count and noise multiplier
/// of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsamplingParams {
    pub q: f64,
    pub rounds: u32,
    pub sigma_sq: f64,
}

impl SubsamplingParams {
    pub fn new(q: f64, rounds: u32, sigma_sq: f64) -> Result<Self> {
        check_q(q)?;
        if rounds == 0 {
            return domain("number of rounds must be at least 1");
        }
        check_sigma_sq(sigma_sq)?;
        Ok(Self { q, rounds, sigma_sq })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    ClosedForm,
    Numeric,
}

/// A per-group noise multiplier together with the budget it was sized for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub sigma_sq: f64,
    pub achieved_epsilon: f64,
    pub method: CalibrationMethod,
    pub target: PrivacyBudget,
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return domain(format!("sampling probability must lie in [0, 1], got {q}"));
    }
    Ok(())
}

fn check_sigma_sq(sigma_sq: f64) -> Result<()> {
    if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
        return domain(format!("noise multiplier sigma^2 must be positive, got {sigma_sq}"));
    }
    Ok(())
}

/// The default order grid: 1.25, 1.5, 1.75 and the integers 2..=256.
pub fn default_orders() -> Vec<RdpOrder> {
    FRACTIONAL_ORDERS
        .iter()
        .copied()
        .chain((2..=MAX_INTEGER_ORDER).map(f64::from))
        .map(RdpOrder)
        .collect()
}

/// RDP of the Gaussian mechanism with unit sensitivity: `α / (2σ²)`.
pub fn gaussian_rdp(sigma_sq: f64, alpha: RdpOrder) -> Result<f64> {
    check_sigma_sq(sigma_sq)?;
    Ok(alpha.0 / (2.0 * sigma_sq))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP of the Gaussian mechanism applied to a without-replacement subsample
/// with ratio `q`, at integer order `alpha ≥ 2`:
///
/// `(1/(α−1)) log(1 + q²·C(α,2)·min{4(e^{ρ(2)}−1), 2e^{ρ(2)}} + Σ_{j=3..α} q^j·C(α,j)·2e^{(j−1)ρ(j)})`
///
/// with `ρ(j) = j/(2σ²)`, capped at the unsubsampled `α/(2σ²)` which the
/// sum exceeds for large `q` and `α`. The sum is accumulated in the log domain.
pub fn subsampled_rdp(q: f64, sigma_sq: f64, alpha: u32) -> Result<f64> {
    check_q(q)?;
    check_sigma_sq(sigma_sq)?;
    if alpha < 2 {
        return domain(format!("subsampled bound needs an integer order ≥ 2, got {alpha}"));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let rho = |j: f64| j / (2.0 * sigma_sq);
    let log_q = q.ln();
    let a = f64::from(alpha);

    // log C(α, 2)
    let mut log_binom = (a * (a - 1.0) / 2.0).ln();
    let rho2 = rho(2.0);
    // log min{4(e^ρ − 1), 2e^ρ}
    let log_second = (4f64.ln() + rho2 + (-(-rho2).exp_m1()).ln()).min(std::f64::consts::LN_2 + rho2);
    let mut acc = log_add_exp(0.0, 2.0 * log_q + log_binom + log_second);

    for j in 3..=alpha {
        let jf = f64::from(j);
        log_binom += (a - jf + 1.0).ln() - jf.ln();
        let term = jf * log_q + log_binom + std::f64::consts::LN_2 + (jf - 1.0) * rho(jf);
        acc = log_add_exp(acc, term);
    }
    let value = acc / (a - 1.0);
    if !value.is_finite() {
        return Err(Error::Overflow(format!(
            "subsampled RDP overflowed at q={q}, sigma^2={sigma_sq}, alpha={alpha}"
        )));
    }
    Ok(value.min(a / (2.0 * sigma_sq)))
}

/// Result of the simplified subsampled bound together with its validity flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplifiedRdp {
    pub rho: f64,
    /// `false` when `σ² < 0.7` or `α` exceeds
    /// `(2/3)·σ²·log(1/(qα(1+σ²))) + 1`; `rho` is still reported.
    pub valid: bool,
}

/// The closed-form approximation `3.5·q²·α/σ²` of [`subsampled_rdp`].
///
/// Outside its validity window the value is returned with `valid = false`
/// so parameter sweeps can keep going.
pub fn simplified_subsampled_rdp(q: f64, sigma_sq: f64, alpha: f64) -> Result<SimplifiedRdp> {
    check_q(q)?;
    check_sigma_sq(sigma_sq)?;
    let alpha = RdpOrder::new(alpha)?.0;
    let rho = 3.5 * q * q * alpha / sigma_sq;
    if q == 0.0 {
        return Ok(SimplifiedRdp { rho, valid: true });
    }
    let alpha_max = (2.0 / 3.0) * sigma_sq * (1.0 / (q * alpha * (1.0 + sigma_sq))).ln() + 1.0;
    let valid = sigma_sq >= 0.7 && alpha <= alpha_max;
    Ok(SimplifiedRdp { rho, valid })
}

/// `T`-fold adaptive composition: pointwise `T·ρ(α)`.
pub fn compose(curve: &RdpCurve, rounds: u32) -> Result<RdpCurve> {
    if rounds == 0 {
        return domain("composition needs at least one round");
    }
    let t = f64::from(rounds);
    Ok(RdpCurve {
        points: curve.points.iter().map(|&(a, rho)| (a, t * rho)).collect(),
    })
}

/// Converts an RDP curve to `(ε, δ)`-DP: the minimum over the curve's orders
/// of `ρ(α) + log(1/δ)/(α−1)`, together with the minimizing order.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, RdpOrder)> {
    if !(delta > 0.0 && delta < 1.0) {
        return domain(format!("delta must lie in (0, 1), got {delta}"));
    }
    let log_inv_delta = -delta.ln();
    curve
        .points
        .iter()
        .filter(|(a, _)| a.0 > 1.0)
        .map(|&(a, rho)| (rho + log_inv_delta / (a.0 - 1.0), a))
        .fold(None, |best: Option<(f64, RdpOrder)>, cand| match best {
            Some(b) if b.0 <= cand.0 => Some(b),
            _ => Some(cand),
        })
        .ok_or_else(|| Error::Domain("RDP curve has no order above 1".into()))
}

/// RDP of the Poisson-sampled Gaussian mechanism at integer order `alpha ≥ 2`:
///
/// `(1/(α−1)) log Σ_{k=0..α} C(α,k)·(1−q)^{α−k}·q^k·exp((k²−k)/(2σ²))`
///
/// This is the exact Rényi divergence of the mixture, hence much tighter than
/// [`subsampled_rdp`] and vanishing as `σ² → ∞`.
pub fn sampled_gaussian_rdp(q: f64, sigma_sq: f64, alpha: u32) -> Result<f64> {
    check_q(q)?;
    check_sigma_sq(sigma_sq)?;
    if alpha < 2 {
        return domain(format!("sampled Gaussian formula needs an integer order ≥ 2, got {alpha}"));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let a = f64::from(alpha);
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = f64::from(k);
        if k > 0 {
            log_binom += (a - kf + 1.0).ln() - kf.ln();
        }
        let tail = if k == alpha { 0.0 } else { (a - kf) * log_1mq };
        let term = log_binom + kf * log_q + tail + (kf * kf - kf) / (2.0 * sigma_sq);
        acc = log_add_exp(acc, term);
    }
    let value = (acc / (a - 1.0)).max(0.0);
    if !value.is_finite() {
        return Err(Error::Overflow(format!(
            "sampled Gaussian RDP overflowed at q={q}, sigma^2={sigma_sq}, alpha={alpha}"
        )));
    }
    Ok(value)
}

/// RDP → DP conversion `ε = ρ(α) + log((α−1)/α) − (log δ + log α)/(α−1)`
/// (Balle et al., 2020), minimized over the curve's orders. Never larger than
/// [`rdp_to_dp`] at the same order for `α ≥ 1.25`.
pub fn rdp_to_dp_tight(curve: &RdpCurve, delta: f64) -> Result<(f64, RdpOrder)> {
    if !(delta > 0.0 && delta < 1.0) {
        return domain(format!("delta must lie in (0, 1), got {delta}"));
    }
    let log_delta = delta.ln();
    curve
        .points
        .iter()
        .map(|&(a, rho)| {
            let alpha = a.0;
            let eps = rho + ((alpha - 1.0) / alpha).ln() - (log_delta + alpha.ln()) / (alpha - 1.0);
            (eps.max(0.0), a)
        })
        .fold(None, |best: Option<(f64, RdpOrder)>, cand| match best {
            Some(b) if b.0 <= cand.0 => Some(b),
            _ => Some(cand),
        })
        .ok_or_else(|| Error::Domain("RDP curve has no order above 1".into()))
}

/// Which per-round curve and conversion the numeric calibration uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accountant {
    /// Tight sampled-Gaussian RDP with the tight conversion.
    #[default]
    SampledGaussian,
    /// Binomial-sum bound for without-replacement subsampling
    /// ([`subsampled_rdp`]) with the classical conversion ([`rdp_to_dp`]).
    SubsampledBound,
}

impl Accountant {
    /// Per-round curve over `orders`; fractional orders carry the plain
    /// Gaussian curve.
    pub fn per_round_curve(self, q: f64, sigma_sq: f64, orders: &[RdpOrder]) -> Result<RdpCurve> {
        RdpCurve::tabulate(orders, |a| match a.as_integer() {
            Some(alpha) => match self {
                Accountant::SampledGaussian => sampled_gaussian_rdp(q, sigma_sq, alpha),
                Accountant::SubsampledBound => subsampled_rdp(q, sigma_sq, alpha),
            },
            None if q == 0.0 => Ok(0.0),
            None => gaussian_rdp(sigma_sq, a),
        })
    }

    pub fn to_dp(self, curve: &RdpCurve, delta: f64) -> Result<(f64, RdpOrder)> {
        match self {
            Accountant::SampledGaussian => rdp_to_dp_tight(curve, delta),
            Accountant::SubsampledBound => rdp_to_dp(curve, delta),
        }
    }

    pub fn epsilon(self, params: SubsamplingParams, delta: f64, orders: &[RdpOrder]) -> Result<f64> {
        let per_round = self.per_round_curve(params.q, params.sigma_sq, orders)?;
        let total = compose(&per_round, params.rounds)?;
        self.to_dp(&total, delta).map(|(eps, _)| eps)
    }
}

/// Per-round curve of the without-replacement subsampled Gaussian
/// ([`subsampled_rdp`] at integer orders).
pub fn subsampled_curve(q: f64, sigma_sq: f64, orders: &[RdpOrder]) -> Result<RdpCurve> {
    Accountant::SubsampledBound.per_round_curve(q, sigma_sq, orders)
}

/// ε spent after `T` rounds, default accountant and order grid.
pub fn epsilon_of_sigma(params: SubsamplingParams, delta: f64) -> Result<f64> {
    Accountant::default().epsilon(params, delta, &default_orders())
}

pub fn epsilon_of_sigma_with(accountant: Accountant, params: SubsamplingParams, delta: f64) -> Result<f64> {
    accountant.epsilon(params, delta, &default_orders())
}

/// Smallest σ² (to within `rel_tol` relative bracket width) whose
/// `T`-round ε does not exceed `budget.epsilon`, default accountant.
pub fn calibrate_sigma(q: f64, rounds: u32, budget: PrivacyBudget, rel_tol: f64) -> Result<NoiseCalibration> {
    calibrate_sigma_with(Accountant::default(), q, rounds, budget, rel_tol)
}

pub fn calibrate_sigma_with(
    accountant: Accountant,
    q: f64,
    rounds: u32,
    budget: PrivacyBudget,
    rel_tol: f64,
) -> Result<NoiseCalibration> {
    if !(q > 0.0 && q <= 1.0) {
        return domain(format!("calibration needs q in (0, 1], got {q}"));
    }
    if !(rel_tol > 0.0 && rel_tol <= 0.1) {
        return domain(format!("rel_tol must lie in (0, 0.1], got {rel_tol}"));
    }
    let budget = PrivacyBudget::new(budget.epsilon, budget.delta)?;
    let orders = default_orders();
    let eps_at = |sigma_sq: f64| -> Result<f64> {
        match accountant.epsilon(SubsamplingParams::new(q, rounds, sigma_sq)?, budget.delta, &orders) {
            Err(Error::Overflow(_)) => Ok(f64::INFINITY),
            other => other,
        }
    };

    let mut hi = BRACKET_HI;
    let mut eps_hi = eps_at(hi)?;
    while eps_hi > budget.epsilon {
        hi *= 2.0;
        if hi > SIGMA_SQ_CEILING {
            return Err(Error::UnreachableBudget { epsilon: budget.epsilon, sigma_sq: hi });
        }
        eps_hi = eps_at(hi)?;
    }
    let mut lo = BRACKET_LO.min(hi / 2.0);
    while eps_at(lo)? <= budget.epsilon {
        // Tiny q: even very little noise suffices.
        hi = lo;
        lo /= 2.0;
        if lo < f64::MIN_POSITIVE.sqrt() {
            return domain("calibration bracket collapsed towards zero");
        }
    }
    eps_hi = eps_at(hi)?;

    for _ in 0..MAX_BISECTION_ITERS {
        if (hi - lo) / hi <= rel_tol {
            return Ok(NoiseCalibration {
                sigma_sq: hi,
                achieved_epsilon: eps_hi,
                method: CalibrationMethod::Numeric,
                target: budget,
            });
        }
        let mid = 0.5 * (lo + hi);
        let eps_mid = eps_at(mid)?;
        if eps_mid <= budget.epsilon {
            hi = mid;
            eps_hi = eps_mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::NonConvergence { iterations: MAX_BISECTION_ITERS, lo, hi })
}

/// `true` when `ε < 2·log(1/δ)`, the range the closed form is stated for.
pub fn closed_form_in_range(budget: &PrivacyBudget) -> bool {
    budget.epsilon < 2.0 * budget.log_inv_delta()
}

/// Sufficient noise multiplier `7·q²·T·(ε + 2·log(1/δ))/ε²`.
///
/// Logs a warning (and still computes) when `ε ≥ 2·log(1/δ)`.
pub fn closed_form_sigma(q: f64, rounds: u32, budget: PrivacyBudget) -> Result<f64> {
    check_q(q)?;
    let budget = PrivacyBudget::new(budget.epsilon, budget.delta)?;
    if !closed_form_in_range(&budget) {
        log::warn!(
            "closed-form noise bound used outside its range: epsilon {} ≥ 2 log(1/delta) = {}",
            budget.epsilon,
            2.0 * budget.log_inv_delta()
        );
    }
    let eps = budget.epsilon;
    Ok(7.0 * q * q * f64::from(rounds) * (eps + 2.0 * budget.log_inv_delta()) / (eps * eps))
}

/// Closed-form calibration tagged with the ε it was sized for.
pub fn closed_form_calibration(q: f64, rounds: u32, budget: PrivacyBudget) -> Result<NoiseCalibration> {
    Ok(NoiseCalibration {
        sigma_sq: closed_form_sigma(q, rounds, budget)?,
        achieved_epsilon: budget.epsilon,
        method: CalibrationMethod::ClosedForm,
        target: budget,
    })
}

/// System-wide guarantee of disjoint groups: `(max_m ε_m, δ)`.
pub fn per_group_guarantee(calibrations: &[NoiseCalibration]) -> Result<PrivacyBudget> {
    let first = calibrations
        .first()
        .ok_or_else(|| Error::Domain("no group calibrations supplied".into()))?;
    let delta = first.target.delta;
    let mut eps = first.achieved_epsilon;
    for c in &calibrations[1..] {
        if c.target.delta != delta {
            return Err(Error::MismatchedDelta(delta, c.target.delta));
        }
        eps = eps.max(c.achieved_epsilon);
    }
    PrivacyBudget::new(eps, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn order(a: f64) -> RdpOrder {
        RdpOrder::new(a).unwrap()
    }

    fn fmnist_delta() -> f64 {
        6000f64.powf(-1.1)
    }

    fn flat_curve(rho: impl Fn(f64) -> f64) -> RdpCurve {
        RdpCurve::tabulate(&default_orders(), |a| Ok(rho(a.value()))).unwrap()
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_rdp(1.0, order(2.0)).unwrap(), 1.0);
        assert!((gaussian_rdp(2.26, order(21.73)).unwrap() - 4.8075).abs() < 1e-4);
        assert_eq!(gaussian_rdp(0.5, order(3.0)).unwrap(), 3.0);
        assert!(gaussian_rdp(0.0, order(2.0)).is_err());
        assert!(RdpOrder::new(1.0).is_err());
        assert!(RdpOrder::new(f64::NAN).is_err());
    }

    #[test]
    fn subsampled_examples() {
        assert_eq!(subsampled_rdp(0.0, 1.0, 5).unwrap(), 0.0);
        // α = 2 keeps only the second-order term: log(1 + 0.01·min{4(e−1), 2e}).
        let v = subsampled_rdp(0.1, 1.0, 2).unwrap();
        assert!((v - 0.052_94).abs() < 1e-5, "{v}");
        let amplified = subsampled_rdp(0.02, 2.26, 32).unwrap();
        assert!(amplified <= gaussian_rdp(2.26, order(32.0)).unwrap());
    }

    #[test]
    fn subsampled_matches_linear_domain_sum() {
        // Small orders do not overflow, so the plain sum is a usable oracle.
        for &(q, s, a) in &[(0.05, 1.3, 7u32), (0.3, 4.0, 12), (1.0, 10.0, 5), (0.01, 0.8, 20)] {
            let rho = |j: f64| j / (2.0 * s);
            let binom = |n: u32, k: u32| (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1));
            let mut sum = 1.0
                + q * q * binom(a, 2) * (4.0 * (rho(2.0).exp() - 1.0)).min(2.0 * rho(2.0).exp());
            for j in 3..=a {
                sum += q.powi(j as i32) * binom(a, j) * 2.0 * ((f64::from(j) - 1.0) * rho(f64::from(j))).exp();
            }
            let oracle = (sum.ln() / (f64::from(a) - 1.0)).min(f64::from(a) / (2.0 * s));
            let got = subsampled_rdp(q, s, a).unwrap();
            assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0), "{q} {s} {a}: {got} vs {oracle}");
        }
    }

    #[test]
    fn subsampled_domain_errors() {
        assert!(subsampled_rdp(1.5, 1.0, 2).is_err());
        assert!(subsampled_rdp(-0.1, 1.0, 2).is_err());
        assert!(subsampled_rdp(0.1, 1.0, 1).is_err());
        assert!(subsampled_rdp(0.1, -1.0, 4).is_err());
        assert!(matches!(subsampled_rdp(0.5, 1e-308, 200), Err(Error::Overflow(_))));
    }

    #[test]
    fn sampled_gaussian_matches_linear_domain_sum() {
        for &(q, s, a) in &[(0.05f64, 1.3f64, 7u32), (0.3, 4.0, 12), (0.01, 0.8, 20), (0.5, 2.0, 3)] {
            let binom = |n: u32, k: u32| (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1));
            let sum: f64 = (0..=a)
                .map(|k| {
                    let kf = f64::from(k);
                    binom(a, k) * (1.0 - q).powi((a - k) as i32) * q.powi(k as i32) * ((kf * kf - kf) / (2.0 * s)).exp()
                })
                .sum();
            let oracle = sum.ln() / (f64::from(a) - 1.0);
            let got = sampled_gaussian_rdp(q, s, a).unwrap();
            assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0), "{q} {s} {a}: {got} vs {oracle}");
        }
        // Full participation is the plain Gaussian mechanism.
        let full = sampled_gaussian_rdp(1.0, 2.0, 9).unwrap();
        assert!((full - gaussian_rdp(2.0, order(9.0)).unwrap()).abs() < 1e-12);
        assert_eq!(sampled_gaussian_rdp(0.0, 2.0, 9).unwrap(), 0.0);
    }

    #[test]
    fn tight_conversion_never_worse() {
        let curve = compose(&Accountant::SampledGaussian.per_round_curve(0.03, 1.1, &default_orders()).unwrap(), 80).unwrap();
        let (classic, _) = rdp_to_dp(&curve, 1e-5).unwrap();
        let (tight, _) = rdp_to_dp_tight(&curve, 1e-5).unwrap();
        assert!(tight <= classic);
    }

    #[test]
    fn default_accountant_reproduces_reported_multipliers() {
        let delta = fmnist_delta();
        let eps = epsilon_of_sigma(SubsamplingParams::new(0.02, 50, 2.26).unwrap(), delta).unwrap();
        assert!((eps - 0.5).abs() < 0.05, "{eps}");
        for &(e, reported) in &[(0.5, 2.26), (1.5, 0.90), (3.0, 0.53)] {
            let cal = calibrate_sigma(0.02, 50, PrivacyBudget::new(e, delta).unwrap(), DEFAULT_REL_TOL).unwrap();
            assert!((cal.sigma_sq / reported - 1.0).abs() < 0.15, "eps {e}: {}", cal.sigma_sq);
        }
    }

    #[test]
    fn subsampled_bound_is_far_looser_at_high_q() {
        let delta = 300f64.powf(-1.1);
        let budget = PrivacyBudget::new(0.5, delta).unwrap();
        let loose = calibrate_sigma_with(Accountant::SubsampledBound, 0.1, 50, budget, 1e-3).unwrap();
        let tight = calibrate_sigma(0.1, 50, budget, 1e-3).unwrap();
        assert!(loose.sigma_sq > 100.0 * tight.sigma_sq, "{} vs {}", loose.sigma_sq, tight.sigma_sq);
    }

    #[test]
    fn simplified_examples() {
        let s = simplified_subsampled_rdp(0.02, 2.26, 10.0).unwrap();
        assert!((s.rho - 0.006_195).abs() < 1e-6);
        // Outside the validity window here (α_max ≈ 1.64); the value is still reported.
        assert!(!s.valid);
        let z = simplified_subsampled_rdp(0.0, 1.0, 2.0).unwrap();
        assert_eq!(z.rho, 0.0);
        let out = simplified_subsampled_rdp(0.5, 0.7, 50.0).unwrap();
        assert!(!out.valid);
    }

    #[test]
    fn compose_examples() {
        let c = flat_curve(|_| 0.01);
        let c50 = compose(&c, 50).unwrap();
        assert!(c50.points().iter().all(|&(_, r)| (r - 0.5).abs() < 1e-15));
        assert_eq!(compose(&c, 1).unwrap(), c);
        let g = flat_curve(|a| a / 7.0);
        let two_step = compose(&compose(&g, 3).unwrap(), 4).unwrap();
        let one_step = compose(&g, 12).unwrap();
        for (a, b) in two_step.points().iter().zip(one_step.points()) {
            assert!((a.1 - b.1).abs() <= 1e-12 * b.1);
        }
        assert!(compose(&c, 0).is_err());
    }

    #[test]
    fn rdp_to_dp_matches_dense_oracle() {
        // ρ(α) = α/4 with log(1/δ) = 10; dense-grid oracle over (1, 512].
        let delta = (-10f64).exp();
        let dense: Vec<RdpOrder> = (1..=51_100).map(|i| order(1.0 + f64::from(i) * 0.01)).collect();
        let dense_curve = RdpCurve::tabulate(&dense, |a| Ok(a.value() / 4.0)).unwrap();
        let (eps, alpha) = rdp_to_dp(&dense_curve, delta).unwrap();
        assert!((eps - 3.412).abs() < 1e-3, "{eps}");
        assert!((alpha.value() - 7.32).abs() < 0.01);

        // On the default grid (integer orders) the minimum is at α = 7 or 8.
        let grid = flat_curve(|a| a / 4.0);
        let (eps_grid, _) = rdp_to_dp(&grid, delta).unwrap();
        assert!(eps_grid >= eps - 1e-12 && eps_grid < eps + 0.01);

        // A single Gaussian with σ² = 2 has exactly this curve.
        let gauss = RdpCurve::tabulate(&default_orders(), |a| gaussian_rdp(2.0, a)).unwrap();
        assert_eq!(rdp_to_dp(&gauss, delta).unwrap().0, eps_grid);
    }

    #[test]
    fn rdp_to_dp_zero_curve_hits_grid_edge() {
        let (eps, alpha) = rdp_to_dp(&flat_curve(|_| 0.0), 0.1).unwrap();
        assert_eq!(alpha.value(), 256.0);
        assert!((eps - 10f64.ln() / 255.0).abs() < 1e-15);
    }

    #[test]
    fn rdp_to_dp_is_grid_minimum() {
        let curve = subsampled_curve(0.05, 1.7, &default_orders()).unwrap();
        let curve = compose(&curve, 30).unwrap();
        let delta: f64 = 1e-5;
        let brute = curve
            .points()
            .iter()
            .map(|&(a, r)| r + (1.0f64 / delta).ln() / (a.value() - 1.0))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(rdp_to_dp(&curve, delta).unwrap().0, brute);
        assert!(rdp_to_dp(&curve, 0.0).is_err());
        assert!(rdp_to_dp(&curve, 1.0).is_err());
    }

    #[test]
    fn curve_invariants_enforced() {
        assert!(RdpCurve::new(vec![(order(2.0), 0.1)]).is_err());
        assert!(RdpCurve::new(vec![(order(3.0), 0.1), (order(2.0), 0.2)]).is_err());
        assert!(RdpCurve::new(vec![(order(2.0), -0.1), (order(3.0), 0.2)]).is_err());
    }

    #[test]
    fn epsilon_of_sigma_limits_and_monotonicity() {
        let delta = fmnist_delta();
        let idle = SubsamplingParams::new(0.0, 40, 1.0).unwrap();
        let zero = epsilon_of_sigma_with(Accountant::SubsampledBound, idle, delta).unwrap();
        assert!((zero - delta.recip().ln() / 255.0).abs() < 1e-12);
        let zero_tight = epsilon_of_sigma(idle, delta).unwrap();
        assert!(zero_tight <= zero);

        for &s in &[0.8, 2.0, 5.0] {
            let e50 = epsilon_of_sigma(SubsamplingParams::new(0.02, 50, s).unwrap(), delta).unwrap();
            let e100 = epsilon_of_sigma(SubsamplingParams::new(0.02, 100, s).unwrap(), delta).unwrap();
            assert!(e100 > e50);
        }
    }

    #[test]
    fn calibration_is_sound_and_minimal() {
        let delta = fmnist_delta();
        for &eps in &[0.5, 1.5, 3.0] {
            let budget = PrivacyBudget::new(eps, delta).unwrap();
            let cal = calibrate_sigma(0.02, 50, budget, DEFAULT_REL_TOL).unwrap();
            assert_eq!(cal.method, CalibrationMethod::Numeric);
            let at = |s| epsilon_of_sigma(SubsamplingParams::new(0.02, 50, s).unwrap(), delta).unwrap();
            assert!(at(cal.sigma_sq) <= eps);
            assert!(at(0.9 * cal.sigma_sq) > eps);
            assert!(cal.achieved_epsilon <= eps);
        }
    }

    #[test]
    fn calibration_ordering() {
        let delta = fmnist_delta();
        let cal = |e| calibrate_sigma(0.02, 50, PrivacyBudget::new(e, delta).unwrap(), 1e-4).unwrap().sigma_sq;
        let (a, b, c) = (cal(0.5), cal(1.5), cal(3.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn calibration_domain_errors() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        assert!(calibrate_sigma(0.0, 10, b, 1e-4).is_err());
        assert!(calibrate_sigma(0.1, 10, b, 0.5).is_err());
        assert!(PrivacyBudget::new(0.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let delta = fmnist_delta();
        let b = |e| PrivacyBudget::new(e, delta).unwrap();
        assert!((closed_form_sigma(0.02, 50, b(0.5)).unwrap() - 10.998).abs() < 1e-3);
        assert_eq!(closed_form_sigma(0.0, 50, b(0.5)).unwrap(), 0.0);
        assert!((closed_form_sigma(0.02, 50, b(3.0)).unwrap() - 0.3444).abs() < 1e-4);
        // Outside the stated range it still computes.
        let loose = PrivacyBudget::new(30.0, delta).unwrap();
        assert!(!closed_form_in_range(&loose));
        assert!(closed_form_sigma(0.02, 50, loose).unwrap() > 0.0);
    }

    #[test]
    fn parallel_composition_takes_weakest_group() {
        let delta: f64 = 1e-5;
        let cal = |e: f64| NoiseCalibration {
            sigma_sq: 1.0,
            achieved_epsilon: e,
            method: CalibrationMethod::Numeric,
            target: PrivacyBudget::new(e, delta).unwrap(),
        };
        let sys = per_group_guarantee(&[cal(0.5), cal(1.5), cal(3.0)]).unwrap();
        assert_eq!(sys.epsilon, 3.0);
        assert_eq!(sys.delta, delta);
        assert_eq!(per_group_guarantee(&[cal(0.7)]).unwrap().epsilon, 0.7);
        assert_eq!(per_group_guarantee(&[cal(2.0), cal(2.0)]).unwrap().epsilon, 2.0);
        assert!(per_group_guarantee(&[]).is_err());
        let mut odd = cal(1.0);
        odd.target.delta = 1e-6;
        assert!(matches!(per_group_guarantee(&[cal(1.0), odd]), Err(Error::MismatchedDelta(..))));
    }
}
