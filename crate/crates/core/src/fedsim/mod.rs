//! Deterministic federated training under group-level differential privacy.

pub mod client;
pub mod data;
pub mod groups;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod secagg;

pub use client::{clip_update, local_train, perturb, ClientUpdate, LocalTrainConfig, UpdateStage};
pub use data::{dirichlet_partition, gaussian_blobs, iid_partition, BlobSpec, DatasetShard};
pub use groups::{assign_groups, sample_clients, GroupSpec, Grouping};
pub use model::{Activation, Model, ModelVector, Objective};
pub use protocol::{
    run_training, server_round, Algorithm, Federation, RoundRecord, ServerState, SumPath, TrainPlan, TrainingRun,
    Weighting,
};
pub use secagg::{aggregate, seal, SealPolicy, SealedUpdate};
