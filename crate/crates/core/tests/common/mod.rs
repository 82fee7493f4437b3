#![allow(dead_code)]

use hetdp_core::fedsim::*;
use hetdp_core::Result;

/// `½‖θ − c‖²`, independent of the data.
pub struct Quadratic {
    pub center: Vec<f64>,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss_grad(&self, params: &[f64], _data: &DatasetShard, _batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        let mut loss = 0.0;
        for ((g, p), c) in grad.iter_mut().zip(params).zip(&self.center) {
            *g = p - c;
            loss += 0.5 * (p - c) * (p - c);
        }
        Ok(loss)
    }

    fn accuracy(&self, _params: &[f64], _data: &DatasetShard) -> f64 {
        0.0
    }
}

pub fn tiny_shard() -> DatasetShard {
    DatasetShard::new(vec![0.0], 1, vec![0], 1).unwrap()
}

/// Contiguous equal groups over `n` clients, each sampling `r` members.
pub fn equal_groups(n: usize, m: usize, r: usize) -> Vec<GroupSpec> {
    let size = n / m;
    (0..m)
        .map(|g| GroupSpec {
            id: g,
            members: (g * size..(g + 1) * size).collect(),
            epsilon: 1.0 + g as f64,
            participants: r,
        })
        .collect()
}

pub fn plan(algorithm: Algorithm, groups: Vec<GroupSpec>) -> TrainPlan {
    TrainPlan {
        algorithm,
        rounds: 5,
        tau: 3,
        eta: 0.1,
        lr_decay: 0.99,
        momentum: 0.0,
        batch_size: 8,
        clip: 1.0,
        top_k: vec![None; groups.len()],
        groups,
        seed: 11,
        weighting: Weighting::Reweighted,
        sum_path: SumPath::Sealed,
    }
}

/// Logistic regression over `n` blob clients with a held-out set.
pub fn blob_federation(n: usize, per_client: usize, seed: u64) -> Federation<Model> {
    let spec = BlobSpec { n_examples: n * per_client + 400, n_features: 6, num_classes: 3, center_scale: 1.0, noise_scale: 1.0 };
    let all = gaussian_blobs(&spec, seed).unwrap();
    let train = all.subset(&(0..n * per_client).collect::<Vec<_>>());
    let test = all.subset(&(n * per_client..all.len()).collect::<Vec<_>>());
    let clients = iid_partition(&train, n, seed).unwrap();
    Federation { objective: Model::logistic(6, 3).unwrap(), clients, test }
}
