//! Privacy groups and per-round client sampling.

use rand::seq::index;

use super::rng::{stream, Purpose};
use crate::error::{domain, Error, Result};
use crate::sampling::largest_remainder;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub id: usize,
    /// Client ids in ascending order.
    pub members: Vec<usize>,
    /// The strictest budget among the members.
    pub epsilon: f64,
    /// Clients sampled per round.
    pub participants: usize,
}

impl GroupSpec {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn sample_ratio(&self) -> f64 {
        self.participants as f64 / self.members.len() as f64
    }

    pub fn with_participants(mut self, r: usize) -> Result<Self> {
        if r == 0 || r > self.members.len() {
            return domain(format!("group {} cannot sample {r} of {} clients", self.id, self.members.len()));
        }
        self.participants = r;
        Ok(self)
    }
}

/// Client-to-group map and the resulting groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub assignment: Vec<usize>,
    pub groups: Vec<GroupSpec>,
}

/// Sorts clients by budget (ties by id) and cuts the order into
/// `ratios.len()` contiguous groups with sizes proportional to `ratios`.
/// Every group initially samples all of its members.
pub fn assign_groups(epsilons: &[f64], ratios: &[f64]) -> Result<Grouping> {
    let n = epsilons.len();
    let m = ratios.len();
    if m == 0 {
        return domain("need at least one group");
    }
    if n < m {
        return Err(Error::Infeasible(format!("{n} clients cannot fill {m} groups")));
    }
    if let Some(e) = epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return domain(format!("client budgets must be positive, got {e}"));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return domain("group ratios must be positive");
    }
    let total: f64 = ratios.iter().sum();
    let shares: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let sizes = largest_remainder(&shares, &vec![n; m], n)?;
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Infeasible(format!("group {empty} would be empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| epsilons[a].total_cmp(&epsilons[b]).then(a.cmp(&b)));
    let mut assignment = vec![0; n];
    let mut groups = Vec::with_capacity(m);
    let mut start = 0;
    for (id, size) in sizes.into_iter().enumerate() {
        let mut members = order[start..start + size].to_vec();
        start += size;
        members.sort_unstable();
        let epsilon = members.iter().map(|&c| epsilons[c]).fold(f64::INFINITY, f64::min);
        for &c in &members {
            assignment[c] = id;
        }
        groups.push(GroupSpec { id, participants: members.len(), members, epsilon });
    }
    Ok(Grouping { assignment, groups })
}

/// Uniform sample of `participants` members without replacement, keyed by
/// `(seed, round, group)`; returned in ascending id order.
pub fn sample_clients(group: &GroupSpec, round: u32, seed: u64) -> Result<Vec<usize>> {
    let r = group.participants;
    if r == 0 || r > group.members.len() {
        return domain(format!("group {} cannot sample {r} of {} clients", group.id, group.members.len()));
    }
    let mut rng = stream(seed, Purpose::Sampling, u64::from(round), group.id as u64, 0);
    let mut picked: Vec<usize> = index::sample(&mut rng, group.members.len(), r)
        .into_iter()
        .map(|i| group.members[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}
