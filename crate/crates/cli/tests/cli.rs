use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn hetdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetdp")).args(args).output().expect("binary runs")
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    hetdp(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The desk config with `replace` substitutions applied, written to `dir`.
fn desk_variant(dir: &Path, name: &str, replace: &[(&str, &str)]) -> PathBuf {
    let mut text = fs::read_to_string(configs().join("desk.toml")).unwrap();
    for (from, to) in replace {
        assert!(text.contains(from), "{from}");
        text = text.replace(from, to);
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn column(csv: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(csv).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

fn floats(csv: &Path, name: &str) -> Vec<f64> {
    column(csv, name).iter().map(|v| v.parse().unwrap()).collect()
}

#[test]
fn malformed_config_exits_2_with_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[federation]\nn_clients = 10\nepsilons = [1.0\n").unwrap();
    let o = run("calibrate", &path, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let o = run("calibrate", &dir.path().join("absent.toml"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));

    let unknown = desk_variant(dir.path(), "unknown.toml", &[("q = 0.1", "q = 0.1\nqq = 3")]);
    let o = run("optimize", &unknown, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("qq"), "{}", stderr(&o));
}

#[test]
fn empty_group_list_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_variant(dir.path(), "empty.toml", &[("epsilons = [0.5, 1.5, 3.0]", "epsilons = []")]);
    let o = run("noise-report", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hetdp(&["calibrate"]).status.code(), Some(2));
    assert_eq!(hetdp(&["frobnicate"]).status.code(), Some(2));
    let o = run("calibrate", &configs().join("desk.toml"), dir.path(), &["--threads", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_bounds_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_variant(
        dir.path(),
        "bounds.toml",
        &[("[output]", "[solver]\nq_bounds = [[0.001, 0.01], [0.001, 0.01], [0.001, 0.01]]\n\n[output]")],
    );
    let o = run("optimize", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn fmnist_calibration_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("calibrate", &configs().join("fmnist.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("system guarantee"));
    let sigma = floats(&dir.path().join("calibration.csv"), "sigma_sq");
    for (s, target) in sigma.iter().zip([2.26, 0.90, 0.53]) {
        assert!((s / target - 1.0).abs() < 0.15, "{s} vs {target}");
    }
    let achieved = floats(&dir.path().join("calibration.csv"), "achieved_epsilon");
    for (a, e) in achieved.iter().zip([0.5, 1.5, 3.0]) {
        assert!(*a <= e);
    }
}

#[test]
fn single_group_calibration_matches_dp_fedavg() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_variant(
        dir.path(),
        "single.toml",
        &[("epsilons = [0.5, 1.5, 3.0]", "epsilons = [1.5]"), ("fractions = [0.7, 0.8, 0.9]", "fractions = [0.8]")],
    );
    let o = run("calibrate", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let calibrated = floats(&dir.path().join("calibration.csv"), "sigma_sq");
    assert_eq!(calibrated.len(), 1);

    let o = run("noise-report", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let groups = dir.path().join("noise_groups.csv");
    let algorithms = column(&groups, "algorithm");
    let sigma = floats(&groups, "sigma_sq");
    let dp = algorithms.iter().position(|a| a == "dp_fedavg").unwrap();
    let gdp = algorithms.iter().position(|a| a == "gdpfed").unwrap();
    assert_eq!(sigma[dp], calibrated[0]);
    assert_eq!(sigma[gdp], calibrated[0]);
}

#[test]
fn equal_budgets_optimize_to_uniform_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_variant(dir.path(), "equal.toml", &[("epsilons = [0.5, 1.5, 3.0]", "epsilons = [1.5, 1.5, 1.5]")]);
    let o = run("optimize", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for q in floats(&dir.path().join("optimization.csv"), "q") {
        assert!((q - 0.1).abs() < 1e-4, "{q}");
    }
}

#[test]
fn short_simulation_writes_one_row_per_round_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_variant(
        dir.path(),
        "short.toml",
        &[
            ("rounds = 50", "rounds = 2"),
            ("seeds = [1, 2, 3]", "seeds = [1]"),
            (r#"algorithms = ["p_fedavg", "dp_fedavg", "gdpfed", "gdpfed_op", "gdpfed_plus"]"#, r#"algorithms = ["dp_fedavg"]"#),
        ],
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run("simulate", &cfg, &a, &["--threads", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run("simulate", &cfg, &b, &["--threads", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let telemetry = a.join("telemetry.csv");
    assert_eq!(column(&telemetry, "t"), vec!["0", "1"]);
    let text = fs::read_to_string(&telemetry).unwrap();
    assert!(text.starts_with("t,algorithm,seed,group,sum_norm,loss,acc,clip_frac,sigma_sq\n"));
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("algorithm,mean_acc,std_acc,best_acc\ndp_fedavg,"));

    for file in ["telemetry.csv", "summary.csv", "summary.txt", "cells/dp_fedavg_seed1.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn seed_override_replaces_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_variant(
        dir.path(),
        "override.toml",
        &[
            ("rounds = 50", "rounds = 1"),
            (r#"algorithms = ["p_fedavg", "dp_fedavg", "gdpfed", "gdpfed_op", "gdpfed_plus"]"#, r#"algorithms = ["gdpfed"]"#),
        ],
    );
    let o = run("simulate", &cfg, dir.path(), &["--seed-override", "42"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seeds = column(&dir.path().join("telemetry.csv"), "seed");
    assert_eq!(seeds, vec!["42"; 3]);
}

#[test]
fn noise_report_prints_the_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("noise-report", &configs().join("fmnist.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("ordering by lambda_total: dp_fedavg > "), "{stdout}");
    let comparable = floats(&dir.path().join("noise_report.csv"), "paper_comparable");
    assert!((comparable[0] / 5.09 - 1.0).abs() < 0.05);
}
