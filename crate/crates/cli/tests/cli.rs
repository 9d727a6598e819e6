use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lstdq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lstdq")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(
        &path,
        format!(
            r#"{{
  "schema_version": 1,
  "seed": 5,
  "problem": {{
    "mdp": {{"kind": "random", "num_states": 3, "num_actions": 2, "gamma": 0.8, "reward_noise": 0.1}},
    "policy": {{"kind": "random"}},
    "features": {{"kind": "realizable_random", "dim": 4}},
    "mu_d": {{"kind": "random"}}
  }},
  "dataset": {{"size": 400}}{extra}
}}"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn counterexample_prints_both_sides() {
    let o = lstdq(&["counterexample", "--epsilon", "0.01", "--gamma", "0.9"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("lhs 1.0\n") && s.contains("rhs 100.0\n"), "{s}");
}

#[test]
fn counterexample_rejects_bad_epsilon() {
    assert_eq!(lstdq(&["counterexample", "--epsilon", "1.5", "--gamma", "0.9"]).status.code(), Some(2));
}

#[test]
fn verify_tabular_chi2_fifty_rows() {
    let o = lstdq(&["verify", "--suite", "tabular-chi2", "--seeds", "50"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    let rows: Vec<&str> = s.lines().skip(1).collect();
    assert_eq!(s.lines().next(), Some("instance_id,property_id,residual,pass"));
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
}

#[test]
fn missing_config_exits_2() {
    let o = lstdq(&["coverage", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not/here.json"));
}

#[test]
fn malformed_config_names_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), ",\n  \"colour\": 1");
    let o = lstdq(&["estimate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("colour") && err.contains(":11:"), "{err}");
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(lstdq(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn generate_then_estimate_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = dir.path().join("gen");
    let o = lstdq(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["mdp.json", "policy.json", "features.json", "mu_d.json", "dataset.csv", "dataset.csv.meta.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    // the same problem read back from files must give the same estimate
    let from_files = dir.path().join("files.json");
    fs::write(
        &from_files,
        r#"{
  "schema_version": 1,
  "seed": 5,
  "problem": {
    "mdp": {"kind": "file", "path": "gen/mdp.json"},
    "policy": {"kind": "file", "path": "gen/policy.json"},
    "features": {"kind": "file", "path": "gen/features.json"},
    "mu_d": {"kind": "file", "path": "gen/mu_d.json"}
  }
}"#,
    )
    .unwrap();
    let data = out.join("dataset.csv");
    let sol = dir.path().join("solution.json");
    let a = lstdq(&["estimate", "--config", cfg.to_str().unwrap()]);
    let b = lstdq(&[
        "estimate",
        "--config",
        from_files.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        sol.to_str().unwrap(),
    ]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("j_hat ") && stdout(&a).contains("c_hat "));
    assert!(fs::read_to_string(sol).unwrap().contains("\"theta\""));
}

#[test]
fn estimate_without_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nodata.json");
    fs::write(
        &path,
        r#"{"schema_version": 1, "seed": 1, "problem": {"mdp": {"kind": "alternating_chain", "gamma": 0.5},
            "policy": {"kind": "uniform"}, "features": {"kind": "tabular"}, "mu_d": {"kind": "uniform"}}}"#,
    )
    .unwrap();
    assert_eq!(lstdq(&["estimate", "--config", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn coverage_csv_has_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cov.csv");
    let cfg = configs().join("abstraction.json");
    let o = lstdq(&["coverage", "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "instance_id,c_phi,c_phi_emp,c_lin,chi2_tabular,agg_concentrability_chi2,perdomo_lhs,perdomo_rhs,\
         sigma_min_a,lambda_min_sigma,kappa_sigma,rho_bpi,burn_in_n0,onpolicy_certified"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "abstraction");
    assert!(row[4].is_empty(), "abstraction features are not tabular");
    let c: f64 = row[1].parse().unwrap();
    let agg: f64 = row[5].parse().unwrap();
    assert!((c - agg).abs() < 1e-8);
}

#[test]
fn sweep_writes_both_tables_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), ",\n  \"sweep\": {\"n_grid\": [100, 200, 400], \"num_seeds\": 4}");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = lstdq(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (
            fs::read(out.join("sweep_cells.csv")).unwrap(),
            fs::read(out.join("sweep_aggregates.csv")).unwrap(),
        )
    };
    let (c1, a1) = run("one");
    let (c2, a2) = run("two");
    assert_eq!(c1, c2);
    assert_eq!(a1, a2);
    assert_eq!(String::from_utf8(c1).unwrap().lines().count(), 1 + 12);
}

#[test]
fn sweep_on_non_realizable_problem_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bias.json");
    fs::write(
        &path,
        r#"{"schema_version": 1, "seed": 1,
            "problem": {"mdp": {"kind": "random", "num_states": 3, "num_actions": 2, "gamma": 0.5},
                        "policy": {"kind": "uniform"}, "features": {"kind": "bias"}, "mu_d": {"kind": "uniform"}},
            "sweep": {"n_grid": [10, 20, 40], "num_seeds": 2}}"#,
    )
    .unwrap();
    let o = lstdq(&["sweep", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not realizable"));
}

#[test]
fn shipped_configs_parse() {
    for name in ["bandit_sweep.json", "onpolicy_tabular.json", "abstraction.json"] {
        let o = lstdq(&["estimate", "--config", configs().join(name).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
