//! Config-driven pipelines: calibration, sampling optimization, noise
//! reports, and simulation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::accountant::{
    calibrate_sigma_with, closed_form_in_range, closed_form_sigma, per_group_guarantee, NoiseCalibration,
    PrivacyBudget, DEFAULT_REL_TOL,
};
use crate::config::{DataSource, ExperimentConfig, ModelKind, SolverObjective, SparsityMode};
use crate::error::{Error, Result};
use crate::fedsim::data::{
    dirichlet_partition, gaussian_blobs, iid_partition, load_csv, load_idx, train_test_split, BlobSpec,
};
use crate::fedsim::{
    assign_groups, run_training, Algorithm, DatasetShard, Federation, GroupSpec, Grouping, Model, Objective,
    SumPath, TrainPlan, TrainingRun,
};
use crate::metrics::{noise_magnitude, summarize, GroupNoiseInput, NoiseReport, RunRecords, SummaryRow};
use crate::sampling::{self, largest_remainder, OptimizationConfig, SamplingSolution, SparsificationMode};
use crate::sparsifier::optimal_k_fraction;

/// Per-client budgets and the resulting privacy groups.
pub fn population(cfg: &ExperimentConfig) -> Result<Grouping> {
    let f = &cfg.federation;
    let ratios = cfg.group_ratios();
    let budgets = match (&f.epsilons, &f.client_epsilons) {
        (_, Some(c)) => c.clone(),
        (Some(eps), None) => {
            let total: f64 = ratios.iter().sum();
            let shares: Vec<f64> = ratios.iter().map(|r| r / total * f.n_clients as f64).collect();
            let sizes = largest_remainder(&shares, &vec![f.n_clients; eps.len()], f.n_clients)?;
            sizes.iter().zip(eps).flat_map(|(&s, &e)| std::iter::repeat_n(e, s)).collect()
        }
        (None, None) => return Err(Error::Config("no budgets configured".into())),
    };
    assign_groups(&budgets, &ratios)
}

fn budget(epsilon: f64, delta: f64) -> Result<PrivacyBudget> {
    PrivacyBudget::new(epsilon, delta)
}

fn calibrate(cfg: &ExperimentConfig, q: f64, epsilon: f64) -> Result<NoiseCalibration> {
    calibrate_sigma_with(
        cfg.federation.accountant,
        q,
        cfg.training.rounds,
        budget(epsilon, cfg.delta())?,
        DEFAULT_REL_TOL,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub group: usize,
    pub size: usize,
    pub epsilon: f64,
    pub q: f64,
    pub sigma_sq: f64,
    pub achieved_epsilon: f64,
    pub closed_form_sigma_sq: f64,
    /// Whether the budget lies where the closed form is derived.
    pub closed_form_in_range: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub delta: f64,
    pub rows: Vec<CalibrationRow>,
    /// Largest achieved ε over the disjoint groups.
    pub system_epsilon: f64,
}

/// Calibrates every group at the global sampling ratio.
pub fn calibration_report(cfg: &ExperimentConfig) -> Result<CalibrationReport> {
    let grouping = population(cfg)?;
    let q = cfg.federation.q;
    let delta = cfg.delta();
    let mut rows = Vec::new();
    let mut cals = Vec::new();
    for g in &grouping.groups {
        let cal = calibrate(cfg, q, g.epsilon)?;
        let target = budget(g.epsilon, delta)?;
        rows.push(CalibrationRow {
            group: g.id,
            size: g.size(),
            epsilon: g.epsilon,
            q,
            sigma_sq: cal.sigma_sq,
            achieved_epsilon: cal.achieved_epsilon,
            closed_form_sigma_sq: closed_form_sigma(q, cfg.training.rounds, target)?,
            closed_form_in_range: closed_form_in_range(&target),
        });
        cals.push(cal);
    }
    let system = per_group_guarantee(&cals)?;
    Ok(CalibrationReport { delta, rows, system_epsilon: system.epsilon })
}

pub fn optimization_config(cfg: &ExperimentConfig, grouping: &Grouping) -> OptimizationConfig {
    let sparsification = match cfg.solver.objective {
        SolverObjective::OptimalPhi => SparsificationMode::OptimalPhi,
        SolverObjective::FixedFractions => {
            SparsificationMode::FixedFractions(cfg.sparsification.fractions.clone().unwrap_or_default())
        }
    };
    OptimizationConfig {
        group_sizes: grouping.groups.iter().map(GroupSpec::size).collect(),
        epsilons: grouping.groups.iter().map(|g| g.epsilon).collect(),
        q_global: cfg.federation.q,
        rounds: cfg.training.rounds,
        eta: cfg.training.eta,
        tau: cfg.training.tau,
        delta: cfg.delta(),
        sparsification,
        q_bounds: cfg.solver.q_bounds.as_ref().map(|b| b.iter().map(|&[lo, hi]| (lo, hi)).collect()),
        restarts: cfg.solver.restarts,
        seed: cfg.solver.seed,
    }
}

pub fn optimize(cfg: &ExperimentConfig) -> Result<SamplingSolution> {
    let grouping = population(cfg)?;
    sampling::solve(&optimization_config(cfg, &grouping))
}

/// Everything an algorithm needs besides data: groups with participant
/// counts, calibrated noise, top-k levels and aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmPlan {
    pub algorithm: Algorithm,
    pub groups: Vec<GroupSpec>,
    pub sigma_sq: Vec<f64>,
    pub achieved_epsilon: Vec<f64>,
    pub top_k: Vec<Option<usize>>,
    pub omega: Vec<f64>,
}

impl AlgorithmPlan {
    pub fn train_plan(&self, cfg: &ExperimentConfig, seed: u64) -> TrainPlan {
        let t = &cfg.training;
        TrainPlan {
            algorithm: self.algorithm,
            rounds: t.rounds,
            tau: t.tau,
            eta: t.eta,
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            batch_size: t.batch_size,
            clip: t.clip,
            groups: self.groups.clone(),
            top_k: self.top_k.clone(),
            seed,
            weighting: t.weighting,
            sum_path: SumPath::Sealed,
        }
    }
}

/// Participant counts of the grouped algorithms: uniform `q` for GDPFed,
/// the optimized ratios otherwise.
fn grouped_participants(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    groups: &[GroupSpec],
    solution: Option<&SamplingSolution>,
) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = groups.iter().map(GroupSpec::size).collect();
    let target = (cfg.federation.q * sizes.iter().sum::<usize>() as f64).round() as usize;
    match (algorithm, solution) {
        (Algorithm::Gdpfed, _) => {
            let r: Vec<f64> = sizes.iter().map(|&s| cfg.federation.q * s as f64).collect();
            largest_remainder(&r, &sizes, target)
        }
        (_, Some(sol)) => Ok(sol.r_m_integer.clone()),
        (_, None) => Err(Error::Domain(format!("{algorithm} needs a sampling solution"))),
    }
}

pub fn plan_algorithm(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    grouping: &Grouping,
    solution: Option<&SamplingSolution>,
    dim: usize,
) -> Result<AlgorithmPlan> {
    let n = cfg.federation.n_clients;
    let groups: Vec<GroupSpec> = if algorithm.is_grouped() {
        let r = grouped_participants(cfg, algorithm, &grouping.groups, solution)?;
        if let Some(m) = r.iter().position(|&v| v == 0) {
            return Err(Error::Infeasible(format!("{algorithm}: group {m} would sample no clients")));
        }
        grouping.groups.iter().zip(r).map(|(g, r)| g.clone().with_participants(r)).collect::<Result<_>>()?
    } else {
        let epsilon = grouping.groups.iter().map(|g| g.epsilon).fold(f64::INFINITY, f64::min);
        let r = (cfg.federation.q * n as f64).round() as usize;
        vec![GroupSpec { id: 0, members: (0..n).collect(), epsilon, participants: n }.with_participants(r)?]
    };
    let (sigma_sq, achieved_epsilon) = if algorithm.is_private() {
        let cals = groups.iter().map(|g| calibrate(cfg, g.sample_ratio(), g.epsilon)).collect::<Result<Vec<_>>>()?;
        (cals.iter().map(|c| c.sigma_sq).collect(), cals.iter().map(|c| c.achieved_epsilon).collect())
    } else {
        (vec![0.0; groups.len()], vec![f64::INFINITY; groups.len()])
    };
    let mut plan = AlgorithmPlan { algorithm, groups, sigma_sq, achieved_epsilon, top_k: Vec::new(), omega: Vec::new() };
    plan.omega = plan.train_plan(cfg, 0).weights();
    plan.top_k = if algorithm == Algorithm::GdpfedPlus {
        let fractions: Vec<f64> = match cfg.sparsification.mode {
            SparsityMode::Fixed => cfg.sparsification.fractions.clone().unwrap_or_default(),
            SparsityMode::Optimal => plan
                .groups
                .iter()
                .zip(&plan.sigma_sq)
                .zip(&plan.omega)
                .map(|((g, &s), &w)| {
                    optimal_k_fraction(w, s.max(f64::MIN_POSITIVE), cfg.training.eta, cfg.training.tau, g.participants as f64)
                        .map(|o| o.fraction)
                })
                .collect::<Result<_>>()?,
        };
        fractions
            .iter()
            .map(|&f| {
                let k = (f * dim as f64).round() as usize;
                (k < dim).then_some(k)
            })
            .collect()
    } else {
        vec![None; plan.groups.len()]
    };
    Ok(plan)
}

/// Plans for every configured algorithm; the sampling problem is solved
/// once when an optimized variant is requested.
pub fn plan_all(cfg: &ExperimentConfig, dim: usize) -> Result<Vec<AlgorithmPlan>> {
    let grouping = population(cfg)?;
    let needs_solution =
        cfg.training.algorithms.iter().any(|a| matches!(a, Algorithm::GdpfedOp | Algorithm::GdpfedPlus));
    let solution = if needs_solution {
        Some(sampling::solve(&optimization_config(cfg, &grouping))?)
    } else {
        None
    };
    cfg.training.algorithms.iter().map(|&a| plan_algorithm(cfg, a, &grouping, solution.as_ref(), dim)).collect()
}

pub fn model(cfg: &ExperimentConfig, n_features: usize, num_classes: usize) -> Result<Model> {
    match cfg.training.model {
        ModelKind::Logistic => Model::logistic(n_features, num_classes),
        ModelKind::Mlp => Model::mlp(n_features, cfg.training.hidden, num_classes, cfg.training.activation),
    }
}

/// Model dimension implied by the data section, without loading files
/// when the data are synthetic.
pub fn model_dimension(cfg: &ExperimentConfig) -> Result<usize> {
    if let Some(d) = cfg.analysis.dimension {
        return Ok(d);
    }
    let (f, k) = match cfg.data.source {
        DataSource::Synthetic => (cfg.data.n_features, cfg.data.num_classes),
        _ => {
            let fed = federation(cfg)?;
            (fed.objective.n_features(), fed.objective.num_classes())
        }
    };
    Ok(model(cfg, f, k)?.dim())
}

/// Builds the client shards, the test set and the model.
pub fn federation(cfg: &ExperimentConfig) -> Result<Federation<Model>> {
    let d = &cfg.data;
    let n = cfg.federation.n_clients;
    let (train, test) = match d.source {
        DataSource::Synthetic => {
            let spec = BlobSpec {
                n_examples: n * d.examples_per_client + d.test_examples,
                n_features: d.n_features,
                num_classes: d.num_classes,
                center_scale: d.center_scale,
                noise_scale: d.noise_scale,
            };
            let all = gaussian_blobs(&spec, d.seed)?;
            let train: Vec<usize> = (0..n * d.examples_per_client).collect();
            let test: Vec<usize> = (n * d.examples_per_client..all.len()).collect();
            (all.subset(&train), all.subset(&test))
        }
        DataSource::Csv => {
            let path = d.path.as_ref().ok_or_else(|| Error::Config("data.path missing".into()))?;
            train_test_split(&load_csv(path)?, d.test_fraction, d.seed)?
        }
        DataSource::Idx => {
            let (images, labels) = match (&d.images, &d.labels) {
                (Some(i), Some(l)) => (i, l),
                _ => return Err(Error::Config("data.images/data.labels missing".into())),
            };
            train_test_split(&load_idx(images, labels, d.max_examples)?, d.test_fraction, d.seed)?
        }
    };
    let num_classes = train.num_classes().max(test.num_classes());
    let train = train.with_num_classes(num_classes)?;
    let test = test.with_num_classes(num_classes)?;
    let clients: Vec<DatasetShard> = match d.dirichlet_alpha {
        Some(alpha) => dirichlet_partition(&train, n, alpha, d.seed)?.shards,
        None => iid_partition(&train, n, d.seed)?,
    };
    let objective = model(cfg, train.n_features(), num_classes)?;
    Ok(Federation { objective, clients, test })
}

/// Noise report of every configured algorithm.
pub fn noise_reports(cfg: &ExperimentConfig) -> Result<Vec<(AlgorithmPlan, NoiseReport)>> {
    let dim = model_dimension(cfg)?;
    plan_all(cfg, dim)?
        .into_iter()
        .map(|plan| {
            let inputs: Vec<GroupNoiseInput> = plan
                .groups
                .iter()
                .enumerate()
                .map(|(m, g)| GroupNoiseInput {
                    sigma_sq: plan.sigma_sq[m],
                    participants: g.participants as f64,
                    omega: plan.omega[m],
                    k: plan.top_k[m].unwrap_or(dim),
                })
                .collect();
            let report = noise_magnitude(&inputs, dim, cfg.training.clip)?;
            Ok((plan, report))
        })
        .collect()
}

/// One cell of the (algorithm × seed) grid.
#[derive(Debug, Clone)]
pub struct Cell {
    pub plan: AlgorithmPlan,
    pub seed: u64,
    pub run: TrainingRun,
}

pub const TELEMETRY_HEADER: [&str; 9] =
    ["t", "algorithm", "seed", "group", "sum_norm", "loss", "acc", "clip_frac", "sigma_sq"];

/// Telemetry of one cell: a row per round and group.
pub fn write_telemetry<W: Write>(cell: &Cell, out: W, header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if header {
        w.write_record(TELEMETRY_HEADER)?;
    }
    for rec in &cell.run.records {
        for (m, norm) in rec.group_sum_norms.iter().enumerate() {
            w.write_record([
                rec.t.to_string(),
                cell.plan.algorithm.name().to_string(),
                cell.seed.to_string(),
                m.to_string(),
                norm.to_string(),
                rec.train_loss.to_string(),
                rec.eval_accuracy.to_string(),
                rec.clip_fraction[m].to_string(),
                cell.plan.sigma_sq[m].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every (algorithm × seed) cell on the current rayon pool. Results do
/// not depend on the pool size.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let fed = federation(cfg)?;
    let plans = plan_all(cfg, fed.objective.dim())?;
    let jobs: Vec<(&AlgorithmPlan, u64)> =
        plans.iter().flat_map(|p| cfg.training.seeds.iter().map(move |&s| (p, s))).collect();
    let cells = jobs
        .into_par_iter()
        .map(|(plan, seed)| {
            let run = run_training(&plan.train_plan(cfg, seed), &fed, &plan.sigma_sq)?;
            Ok(Cell { plan: plan.clone(), seed, run })
        })
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<RunRecords> = cells
        .iter()
        .filter(|c| !c.run.records.is_empty())
        .map(|c| RunRecords { algorithm: c.plan.algorithm, seed: c.seed, records: c.run.records.clone() })
        .collect();
    let summary = if runs.is_empty() { Vec::new() } else { summarize(&runs, cfg.training.accuracy_threshold)? };
    Ok(Simulation { cells, summary })
}

/// Writes per-cell telemetry, the merged telemetry, and the summaries.
/// Returns the merged telemetry path.
pub fn write_simulation(sim: &Simulation, dir: &Path, threshold: f64) -> Result<PathBuf> {
    let cells_dir = dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    for cell in &sim.cells {
        let path = cells_dir.join(format!("{}_seed{}.csv", cell.plan.algorithm, cell.seed));
        write_telemetry(cell, fs::File::create(path)?, true)?;
    }
    let merged = dir.join("telemetry.csv");
    let mut out = std::io::BufWriter::new(fs::File::create(&merged)?);
    for (i, cell) in sim.cells.iter().enumerate() {
        write_telemetry(cell, &mut out, i == 0)?;
    }
    if sim.cells.is_empty() {
        writeln!(out, "{}", TELEMETRY_HEADER.join(","))?;
    }
    out.flush()?;
    crate::metrics::write_summary_csv(&sim.summary, fs::File::create(dir.join("summary.csv"))?)?;
    fs::write(dir.join("summary.txt"), crate::metrics::format_summary(&sim.summary, threshold))?;
    Ok(merged)
}
