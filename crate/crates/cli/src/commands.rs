use std::fs;
use std::io::Write;
use std::path::Path;

use lstdq_core::coverage::{self, ReportInputs};
use lstdq_core::estimators::{self, LossMinConfig};
use lstdq_core::experiments::{self, AuditSuite, EstimatorSpec, Problem, SweepConfig};
use lstdq_core::io;
use lstdq_core::rng::derive_seed;
use lstdq_core::sampling::{self, Dataset};
use lstdq_core::{mdp, NextFeatureMode};

use crate::config::{self, LoadedConfig};
use crate::{CliError, EXIT_OK, EXIT_VERIFY_FAILED};

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out<'_>, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    out.write_all(text.as_ref()).map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

fn build(cfg: &LoadedConfig) -> Result<Problem, CliError> {
    Ok(cfg.config.problem.build(cfg.config.seed, &cfg.base_dir)?)
}

/// The dataset from `--dataset`, or one sampled from the config's `dataset` section.
fn obtain_dataset(cfg: &LoadedConfig, p: &Problem, path: Option<&Path>) -> Result<Option<(Dataset, NextFeatureMode)>, CliError> {
    let mode = cfg.config.dataset.as_ref().map(|d| d.next_feature_mode).unwrap_or_default();
    if let Some(path) = path {
        return Ok(Some((io::load_dataset(path, &p.mdp)?, mode)));
    }
    match &cfg.config.dataset {
        None => Ok(None),
        Some(d) => {
            let seed = derive_seed(cfg.config.seed, "dataset");
            Ok(Some((sampling::sample_dataset(&p.mdp, &p.pi, &p.mu_d, d.size, seed)?, mode)))
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

pub fn generate(config_path: &Path, out_dir: &Path, out: Out<'_>) -> Result<i32, CliError> {
    let cfg = config::load(config_path)?;
    let p = build(&cfg)?;
    create_dir(out_dir)?;
    io::save_mdp(&out_dir.join("mdp.json"), &p.mdp)?;
    io::save_policy(&out_dir.join("policy.json"), &p.pi)?;
    io::save_features(&out_dir.join("features.json"), &p.fmap)?;
    io::save_distribution(&out_dir.join("mu_d.json"), &p.mu_d)?;
    let mut written = vec!["mdp.json", "policy.json", "features.json", "mu_d.json"];
    if let Some(spec) = &p.abstraction {
        io::save_abstraction(&out_dir.join("abstraction.json"), spec)?;
        written.push("abstraction.json");
    }
    if let Some((data, _)) = obtain_dataset(&cfg, &p, None)? {
        io::save_dataset(&out_dir.join("dataset.csv"), &data)?;
        written.push("dataset.csv");
    }
    emit(out, format!("wrote {} to {}\n", written.join(", "), out_dir.display()))?;
    Ok(EXIT_OK)
}

pub fn coverage(config_path: &Path, dataset: Option<&Path>, csv_out: Option<&Path>, out: Out<'_>) -> Result<i32, CliError> {
    let cfg = config::load(config_path)?;
    let p = build(&cfg)?;
    let empirical = match obtain_dataset(&cfg, &p, dataset)? {
        Some((data, mode)) => Some(estimators::empirical_moments(&data, &p.fmap, &p.mdp, &p.pi, mode)?),
        None => None,
    };
    let report = coverage::coverage_report(&ReportInputs {
        mdp: &p.mdp,
        pi: &p.pi,
        mu_d: &p.mu_d,
        fmap: &p.fmap,
        empirical: empirical.as_ref(),
        abstraction: p.abstraction.as_ref(),
        delta: cfg.config.coverage.delta,
    })?;
    let rows = [(cfg.name.clone(), report)];
    match csv_out {
        Some(path) => {
            io::write_coverage_csv(path, &rows)?;
            emit(out, format!("wrote {}\n", path.display()))?;
        }
        None => emit(out, io::coverage_csv_bytes(&rows)?)?,
    }
    Ok(EXIT_OK)
}

pub fn estimate(config_path: &Path, dataset: Option<&Path>, sol_out: Option<&Path>, out: Out<'_>) -> Result<i32, CliError> {
    let cfg = config::load(config_path)?;
    let p = build(&cfg)?;
    let (data, mode) = obtain_dataset(&cfg, &p, dataset)?
        .ok_or_else(|| CliError::Config("estimate needs --dataset or a `dataset` section in the config".into()))?;
    let m = estimators::empirical_moments(&data, &p.fmap, &p.mdp, &p.pi, mode)?;
    let sol = match cfg.config.estimator {
        EstimatorSpec::Inverse => estimators::lstdq_solve(&m),
        EstimatorSpec::LossMin { b_theta } => estimators::lossmin_solve(&m, &LossMinConfig::new(b_theta)?)?,
    };
    let j_hat = sol.theta.as_ref().map(|t| estimators::estimate_return(&p.fmap, &p.mdp, &p.pi, t));
    let c_hat = coverage::cvrg_empirical(&m)?;
    let j_true = mdp::exact_return(&p.mdp, &p.pi);
    let fmt = |x: Option<f64>| x.map_or_else(|| "none".to_string(), io::format_float);
    emit(
        out,
        format!(
            "n {}\nj_hat {}\nc_hat {}\nj_true {}\nabs_error {}\ninvertible {}\n",
            data.len(),
            fmt(j_hat),
            io::format_float(c_hat),
            io::format_float(j_true),
            fmt(j_hat.map(|j| (j - j_true).abs())),
            sol.invertible
        ),
    )?;
    if let Some(path) = sol_out {
        io::write_json(path, &io::SolutionDoc::new(&sol, j_hat))?;
    }
    Ok(EXIT_OK)
}

pub fn sweep(config_path: &Path, out_dir: &Path, out: Out<'_>) -> Result<i32, CliError> {
    let cfg = config::load(config_path)?;
    let settings = cfg
        .config
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config(format!("{}: missing `sweep` section", config_path.display())))?;
    let sweep_cfg = SweepConfig {
        seed: cfg.config.seed,
        problem: cfg.config.problem.clone(),
        settings,
    };
    let result = experiments::run_sweep(&sweep_cfg, &cfg.base_dir)?;
    create_dir(out_dir)?;
    io::write_sweep_cells_csv(&out_dir.join("sweep_cells.csv"), &result.cells)?;
    io::write_sweep_aggregates_csv(&out_dir.join("sweep_aggregates.csv"), &result.aggregates)?;
    let mut text = format!("true return {}\n", io::format_float(result.true_return));
    for a in &result.aggregates {
        text.push_str(&format!(
            "n {:>7}  rmse {:.4e}  q(1-delta) {:.4e}  invertible {:.2}  c_hat_med {:.4}  bound_ratio {:.3}{}\n",
            a.n,
            a.rmse,
            a.error_quantile,
            a.invertibility_rate,
            a.c_hat_median,
            a.bound_ratio,
            if a.bound_checked { "  (audited)" } else { "" }
        ));
    }
    match result.slope {
        Some(s) => text.push_str(&format!("rmse slope {s:.4}\n")),
        None => text.push_str("rmse slope not fitted\n"),
    }
    emit(out, text)?;
    Ok(EXIT_OK)
}

pub fn verify(suite: AuditSuite, seeds: usize, seed: u64, csv_out: Option<&Path>, out: Out<'_>) -> Result<i32, CliError> {
    let table = experiments::verify_propositions(suite, seeds, seed)?;
    match csv_out {
        Some(path) => {
            io::write_audit_csv(path, &table.rows)?;
            emit(out, format!("wrote {}\n", path.display()))?;
        }
        None => emit(out, io::audit_csv_bytes(&table.rows)?)?,
    }
    let failed = table.num_failed();
    eprintln!("{suite}: {} rows, {} passed, {failed} failed", table.rows.len(), table.rows.len() - failed);
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

/// Rounds to twelve significant digits for display.
fn tidy(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.11e}").parse().unwrap_or(x)
    } else {
        x
    }
}

pub fn counterexample(epsilon: f64, gamma: f64, out: Out<'_>) -> Result<i32, CliError> {
    let m = experiments::counterexample_instance(epsilon, gamma)?;
    let p = coverage::perdomo_comparison(&m)?;
    let c = coverage::cvrg_population(&m);
    emit(
        out,
        format!(
            "epsilon {epsilon}\ngamma {gamma}\nlhs {:?}\nrhs {:?}\nratio {:?}\nc_phi {:?}\n",
            tidy(p.lhs),
            tidy(p.rhs),
            tidy(p.rhs / p.lhs),
            tidy(c)
        ),
    )?;
    Ok(EXIT_OK)
}
