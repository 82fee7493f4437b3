//! Top-k magnitude sparsification and the sparsification-error model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// A sparsification level `k` of `d` coordinates and its error coefficient
/// `φ = (1 − k/d)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsePlan {
    k: usize,
    d: usize,
    phi: f64,
}

impl SparsePlan {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        let phi = sparsification_coefficient(k, d)?;
        Ok(Self { k, d, phi })
    }

    /// Rounds `fraction · d` to the nearest integer level.
    pub fn from_fraction(fraction: f64, d: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return domain(format!("sparsification fraction must lie in [0, 1], got {fraction}"));
        }
        Self::new((fraction * d as f64).round() as usize, d)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn is_identity(&self) -> bool {
        self.k == self.d
    }
}

/// Orders coordinates by descending magnitude, lower index first on ties.
fn by_magnitude(x: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b))
}

/// Indices of the `k` largest-magnitude entries, in ascending index order.
pub fn top_k_indices(x: &[f64], k: usize) -> Result<Vec<usize>> {
    let d = x.len();
    if k > d {
        return domain(format!("top-k level {k} exceeds dimension {d}"));
    }
    let mut idx: Vec<usize> = (0..d).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < d {
        // Expected linear time; the comparator is a strict total order so the
        // selected set equals the first k of a full sort.
        idx.select_nth_unstable_by(k - 1, by_magnitude(x));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Keeps the `k` entries of largest absolute value and zeroes the rest.
pub fn top_k(x: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    if k == x.len() {
        out.copy_from_slice(x);
        return Ok(out);
    }
    for i in top_k_indices(x, k)? {
        out[i] = x[i];
    }
    Ok(out)
}

/// In-place variant of [`top_k`].
pub fn top_k_in_place(x: &mut [f64], k: usize) -> Result<()> {
    if k == x.len() {
        return Ok(());
    }
    let keep = top_k_indices(x, k)?;
    let mut next = keep.into_iter().peekable();
    for (i, v) in x.iter_mut().enumerate() {
        if next.peek() == Some(&i) {
            next.next();
        } else {
            *v = 0.0;
        }
    }
    Ok(())
}

/// `(1 − k/d)²`.
pub fn sparsification_coefficient(k: usize, d: usize) -> Result<f64> {
    if d == 0 {
        return domain("dimension must be at least 1");
    }
    if k > d {
        return domain(format!("top-k level {k} exceeds dimension {d}"));
    }
    let drop = 1.0 - k as f64 / d as f64;
    Ok(drop * drop)
}

/// Coarse optimal retained fraction and the matching error coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalSparsity {
    /// `k*/d`, clamped to `[0, 1]`.
    pub fraction: f64,
    /// `φ*`, clamped to `[0, 1]`.
    pub phi: f64,
    /// `k*/d` before clamping.
    pub raw_fraction: f64,
    /// `φ*` before clamping; equals `(1 − raw_fraction)²`.
    pub raw_phi: f64,
}

/// Optimal sparsification level of one group:
/// `k*/d = 1 − 2ω σ² / (η τ μ₄ r²)` with `μ₄ = 32ητ + η + η/τ`, and
/// `φ* = 4ω²σ⁴ / (η τ μ₄ r²)²`.
pub fn optimal_k_fraction(omega: f64, sigma_sq: f64, eta: f64, tau: u32, r: f64) -> Result<OptimalSparsity> {
    for (name, v) in [("omega", omega), ("sigma_sq", sigma_sq), ("eta", eta), ("r", r)] {
        if !(v.is_finite() && v > 0.0) {
            return domain(format!("{name} must be positive, got {v}"));
        }
    }
    if tau == 0 {
        return domain("tau must be at least 1");
    }
    let tau = f64::from(tau);
    let mu4 = 32.0 * eta * tau + eta + eta / tau;
    let denom = eta * tau * mu4 * r * r;
    let raw_fraction = 1.0 - 2.0 * omega * sigma_sq / denom;
    let raw_phi = 4.0 * omega * omega * sigma_sq * sigma_sq / (denom * denom);
    Ok(OptimalSparsity {
        fraction: raw_fraction.clamp(0.0, 1.0),
        phi: raw_phi.clamp(0.0, 1.0),
        raw_fraction,
        raw_phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sort_oracle(x: &[f64], k: usize) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| x[b].abs().partial_cmp(&x[a].abs()).unwrap().then(a.cmp(&b)));
        let mut out = vec![0.0; x.len()];
        for &i in &idx[..k] {
            out[i] = x[i];
        }
        out
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[3.0, -1.0, 2.0], 2).unwrap(), vec![3.0, 0.0, 2.0]);
        assert_eq!(top_k(&[1.0, -1.0, 2.0], 2).unwrap(), vec![1.0, 0.0, 2.0]);
        let x = [0.3, -7.0, 1e-9, 4.0];
        assert_eq!(top_k(&x, 4).unwrap(), x.to_vec());
        assert_eq!(top_k(&x, 0).unwrap(), vec![0.0; 4]);
        assert!(top_k(&x, 5).is_err());
    }

    #[test]
    fn in_place_matches_copying() {
        let x = [0.5, -0.5, 0.25, 2.0, -2.0, 0.0];
        for k in 0..=x.len() {
            let mut y = x;
            top_k_in_place(&mut y, k).unwrap();
            assert_eq!(y.to_vec(), top_k(&x, k).unwrap());
        }
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(sparsification_coefficient(10, 10).unwrap(), 0.0);
        assert_eq!(sparsification_coefficient(0, 10).unwrap(), 1.0);
        assert!((sparsification_coefficient(7, 10).unwrap() - 0.09).abs() < 1e-15);
        assert!(sparsification_coefficient(11, 10).is_err());
        assert!(sparsification_coefficient(0, 0).is_err());
        let plan = SparsePlan::from_fraction(0.7, 330).unwrap();
        assert_eq!(plan.k(), 231);
        assert!(!plan.is_identity());
    }

    #[test]
    fn optimal_fraction_examples() {
        let opt = optimal_k_fraction(1.0 / 360.0, 0.9, 0.1, 5, 40.0).unwrap();
        // μ4 = 16.12; 2ωσ²/(ητμ4r²) = 0.005/12896
        assert!((1.0 - opt.fraction - 3.877e-7).abs() < 1e-9, "{}", opt.fraction);
        assert!((opt.raw_phi - (1.0 - opt.raw_fraction).powi(2)).abs() < 1e-18);

        // ω·σ² = ητμ4r²/2 puts the level exactly at zero.
        let (eta, tau, r) = (0.1, 5u32, 2.0);
        let mu4 = 32.0 * eta * 5.0 + eta + eta / 5.0;
        let omega = 0.25;
        let sigma_sq = eta * 5.0 * mu4 * r * r / (2.0 * omega);
        let edge = optimal_k_fraction(omega, sigma_sq, eta, tau, r).unwrap();
        assert!(edge.fraction.abs() < 1e-12);
        assert!((edge.phi - 1.0).abs() < 1e-12);

        let clamped = optimal_k_fraction(omega, 10.0 * sigma_sq, eta, tau, r).unwrap();
        assert_eq!(clamped.fraction, 0.0);
        assert_eq!(clamped.phi, 1.0);
        assert!(optimal_k_fraction(0.0, 1.0, 0.1, 5, 1.0).is_err());
        assert!(optimal_k_fraction(1.0, 1.0, 0.1, 0, 1.0).is_err());
    }

    fn vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![-1e3..1e3f64, (-4i32..4).prop_map(|v| v as f64), Just(0.0)],
            1..200,
        )
    }

    proptest! {
        #[test]
        fn residual_bound_and_oracle(x in vector(), frac in 0.0..=1.0f64) {
            let k = ((x.len() as f64) * frac).floor() as usize;
            let y = top_k(&x, k).unwrap();
            prop_assert_eq!(&y, &sort_oracle(&x, k));
            let resid: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            let norm: f64 = x.iter().map(|a| a * a).sum();
            let d = x.len() as f64;
            prop_assert!(resid <= (1.0 - k as f64 / d) * norm * (1.0 + 1e-12) + 1e-300);
            prop_assert_eq!(top_k(&y, k).unwrap(), y.clone());
        }

        #[test]
        fn support_and_norm_monotone(x in vector(), a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let d = x.len();
            let (k1, k2) = {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                (((d as f64) * lo) as usize, ((d as f64) * hi) as usize)
            };
            let keep = top_k_indices(&x, k1).unwrap();
            prop_assert_eq!(keep.len(), k1);
            let kept_min = keep.iter().map(|&i| x[i].abs()).fold(f64::INFINITY, f64::min);
            for i in (0..d).filter(|i| !keep.contains(i)) {
                prop_assert!(x[i].abs() <= kept_min);
            }
            let n1: f64 = top_k(&x, k1).unwrap().iter().map(|v| v * v).sum();
            let n2: f64 = top_k(&x, k2).unwrap().iter().map(|v| v * v).sum();
            prop_assert!(n1 <= n2);
        }
    }
}
