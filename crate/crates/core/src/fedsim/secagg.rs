//! Secure-aggregation abstraction: the server sees only per-group sums.

use super::client::{ClientUpdate, UpdateStage};
use super::model::ModelVector;
use crate::error::{Error, Result};

/// Whether sealed updates must have gone through clipping and noising.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SealPolicy {
    Private,
    NonPrivate,
}

/// An update whose coordinates can only be consumed by [`aggregate`].
#[derive(Debug)]
pub struct SealedUpdate {
    group_id: usize,
    payload: ModelVector,
}

impl SealedUpdate {
    pub fn group_id(&self) -> usize {
        self.group_id
    }

    pub fn dim(&self) -> usize {
        self.payload.dim()
    }
}

pub fn seal(update: ClientUpdate, policy: SealPolicy) -> Result<SealedUpdate> {
    if policy == SealPolicy::Private && update.stage() != UpdateStage::Noised {
        return Err(Error::Plumbing(format!(
            "update of group {} reached aggregation at stage {:?}",
            update.group_id(),
            update.stage()
        )));
    }
    Ok(SealedUpdate { group_id: update.group_id(), payload: update.into_delta() })
}

fn ordered_sum<'a>(mut vectors: impl Iterator<Item = &'a ModelVector>) -> Result<ModelVector> {
    let first = vectors.next().ok_or_else(|| Error::Domain("aggregating an empty list".into()))?;
    let mut sum = ModelVector::zeros(first.dim());
    sum.add_scaled(1.0, first)?;
    for v in vectors {
        sum.add_scaled(1.0, v)?;
    }
    Ok(sum)
}

/// Exact coordinate-wise sum of one group's sealed updates, in list order.
pub fn aggregate(sealed: &[SealedUpdate]) -> Result<ModelVector> {
    if let Some(first) = sealed.first() {
        if let Some(other) = sealed.iter().find(|s| s.group_id != first.group_id) {
            return Err(Error::Domain(format!(
                "aggregating updates of groups {} and {}",
                first.group_id, other.group_id
            )));
        }
    }
    ordered_sum(sealed.iter().map(|s| &s.payload))
}

/// The same summation without sealing, for equivalence checks.
pub fn direct_sum(updates: &[ModelVector]) -> Result<ModelVector> {
    ordered_sum(updates.iter())
}
