use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetdp_core::config::ExperimentConfig;
use hetdp_core::experiment;
use hetdp_core::metrics::noise_ordering;
use hetdp_core::Error;

/// Federated learning experiments under heterogeneous group-level
/// differential privacy.
#[derive(Debug, Parser)]
#[command(name = "hetdp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate per-group noise multipliers at the global sampling ratio.
    Calibrate(Common),
    /// Solve for per-group sampling ratios.
    Optimize(Common),
    /// Run every (algorithm, seed) training cell.
    Simulate(Common),
    /// Report the expected noise of each algorithm's global update.
    NoiseReport(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of `training.seeds`.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    threads: Option<usize>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 3 };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult = Result<(), Failure>;

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed_override {
        cfg.training.seeds = vec![seed];
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    Ok((cfg, out))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure { code: 3, message: format!("cannot create {}: {e}", dir.display()) })
}

fn calibrate(common: &Common) -> CliResult {
    let (cfg, out) = load(common)?;
    let report = experiment::calibration_report(&cfg)?;
    create_dir(&out)?;
    let mut w = csv::Writer::from_path(out.join("calibration.csv"))?;
    w.write_record(["group", "size", "epsilon", "q", "sigma_sq", "achieved_epsilon", "closed_form_sigma_sq", "closed_form_in_range"])?;
    println!("delta = {:e}", report.delta);
    println!("{:>5} {:>6} {:>8} {:>8} {:>10} {:>10} {:>12}", "group", "size", "epsilon", "q", "sigma_sq", "achieved", "closed_form");
    for r in &report.rows {
        w.serialize((r.group, r.size, r.epsilon, r.q, r.sigma_sq, r.achieved_epsilon, r.closed_form_sigma_sq, r.closed_form_in_range))?;
        let flag = if r.closed_form_in_range { "" } else { " (out of range)" };
        println!(
            "{:>5} {:>6} {:>8} {:>8} {:>10.4} {:>10.4} {:>12.4}{flag}",
            r.group, r.size, r.epsilon, r.q, r.sigma_sq, r.achieved_epsilon, r.closed_form_sigma_sq
        );
    }
    w.flush()?;
    println!("system guarantee: ({:.4}, {:e})-DP", report.system_epsilon, report.delta);
    Ok(())
}

fn optimize(common: &Common) -> CliResult {
    let (cfg, out) = load(common)?;
    let sol = experiment::optimize(&cfg)?;
    create_dir(&out)?;
    let mut w = csv::Writer::from_path(out.join("optimization.csv"))?;
    w.write_record(["group", "q", "r", "r_integer", "omega", "closed_form_sigma_sq", "k_fraction"])?;
    println!("{:>5} {:>9} {:>9} {:>5} {:>11} {:>11} {:>10}", "group", "q", "r", "r_int", "omega", "cf_sigma_sq", "k/d");
    for m in 0..sol.q_m.len() {
        let row = (m, sol.q_m[m], sol.r_m[m], sol.r_m_integer[m], sol.omega_m[m], sol.sigma_sq_m[m], sol.k_fraction_m[m]);
        w.serialize(row)?;
        println!(
            "{:>5} {:>8.4}% {:>9.3} {:>5} {:>11.4e} {:>11.4} {:>10.6}",
            m,
            100.0 * row.1,
            row.2,
            row.3,
            row.4,
            row.5,
            row.6
        );
    }
    w.flush()?;
    println!("objective = {:.6}{}", sol.objective, if sol.converged { "" } else { " (not converged)" });
    Ok(())
}

fn simulate(common: &Common) -> CliResult {
    let (cfg, out) = load(common)?;
    let sim = experiment::simulate(&cfg)?;
    create_dir(&out)?;
    let telemetry = experiment::write_simulation(&sim, &out, cfg.training.accuracy_threshold)?;
    print!("{}", hetdp_core::metrics::format_summary(&sim.summary, cfg.training.accuracy_threshold));
    println!("telemetry: {}", telemetry.display());
    Ok(())
}

fn noise_report(common: &Common) -> CliResult {
    let (cfg, out) = load(common)?;
    let reports = experiment::noise_reports(&cfg)?;
    create_dir(&out)?;
    let mut totals = csv::Writer::from_path(out.join("noise_report.csv"))?;
    totals.write_record(["algorithm", "lambda_total", "coord_var", "paper_comparable"])?;
    let mut groups = csv::Writer::from_path(out.join("noise_groups.csv"))?;
    groups.write_record(["algorithm", "group", "sigma_sq", "participants", "omega", "k", "sum_var", "lambda"])?;
    println!("{:<12} {:>14} {:>14} {:>16}", "algorithm", "lambda_total", "coord_var", "paper_comparable");
    for (plan, rep) in &reports {
        let name = plan.algorithm.name();
        totals.serialize((name, rep.lambda_total, rep.coord_var, rep.paper_comparable))?;
        for (m, g) in rep.groups.iter().enumerate() {
            groups.serialize((name, m, plan.sigma_sq[m], plan.groups[m].participants, g.omega, g.k, g.sum_var, g.lambda))?;
        }
        println!("{:<12} {:>14.6e} {:>14.6e} {:>16.6}", name, rep.lambda_total, rep.coord_var, rep.paper_comparable);
    }
    totals.flush()?;
    groups.flush()?;
    let pairs: Vec<_> = reports.iter().map(|(p, r)| (p.algorithm, r.clone())).collect();
    let order: Vec<&str> = noise_ordering(&pairs).iter().map(|a| a.name()).collect();
    println!("ordering by lambda_total: {}", order.join(" > "));
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    let common = match &cli.command {
        Command::Calibrate(c) | Command::Optimize(c) | Command::Simulate(c) | Command::NoiseReport(c) => c,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure { code: 2, message: "--threads must be positive".into() });
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Failure { code: 3, message: format!("thread pool: {e}") })?;
    pool.install(|| match &cli.command {
        Command::Calibrate(c) => calibrate(c),
        Command::Optimize(c) => optimize(c),
        Command::Simulate(c) => simulate(c),
        Command::NoiseReport(c) => noise_report(c),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
