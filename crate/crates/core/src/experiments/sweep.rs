use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Problem, ProblemSpec};
use crate::coverage;
use crate::error::{Error, Result};
use crate::estimators::{self, LossMinConfig, NextFeatureMode};
use crate::features;
use crate::mdp;
use crate::rng::derive_seed;
use crate::sampling;

/// Audit slack applied to the high-probability error bound.
pub const BOUND_SLACK: f64 = 8.0;

/// Fewest seeds per grid point for which a rate fit is reported.
pub const MIN_SEEDS_FOR_FIT: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    #[default]
    Inverse,
    LossMin { b_theta: f64 },
}

fn default_delta() -> f64 {
    0.05
}

fn default_realizability_tol() -> f64 {
    features::DEFAULT_SPAN_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub n_grid: Vec<usize>,
    pub num_seeds: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub next_feature_mode: NextFeatureMode,
    /// Relative residual below which the features count as realizing `Q^pi`.
    #[serde(default = "default_realizability_tol")]
    pub realizability_tol: f64,
}

impl SweepSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return Err(Error::Config("n_grid must be nonempty with positive sizes".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_grid must be strictly increasing".into()));
        }
        if self.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        if !(self.realizability_tol >= 0.0 && self.realizability_tol.is_finite()) {
            return Err(Error::Config(format!(
                "realizability_tol = {} must be finite and nonnegative",
                self.realizability_tol
            )));
        }
        if let EstimatorSpec::LossMin { b_theta } = self.estimator {
            LossMinConfig::new(b_theta)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub seed: u64,
    pub problem: ProblemSpec,
    pub settings: SweepSettings,
}

/// One `(n, seed)` replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub n: usize,
    pub seed_index: usize,
    pub dataset_seed: u64,
    pub j_hat: Option<f64>,
    /// `|J-hat - J|`; `+inf` when no estimate exists.
    pub abs_error: f64,
    pub c_hat: f64,
    pub invertible: bool,
}

/// Summary over the seeds at one sample size. Error statistics use the
/// cells with invertible `A-hat` only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepAggregate {
    pub n: usize,
    pub num_cells: usize,
    pub invertibility_rate: f64,
    pub rmse: f64,
    pub error_quantile: f64,
    pub c_hat_median: f64,
    pub burn_in_n0: f64,
    /// `V_max / (1 - gamma) * sqrt(C-hat_med (d + ln(1/delta)) / n)`.
    pub bound_rhs: f64,
    pub bound_ratio: f64,
    /// `n >= 10 n0`, so the bound is audited at this size.
    pub bound_checked: bool,
}

impl SweepAggregate {
    pub fn bound_holds(&self) -> bool {
        !self.bound_checked || self.bound_ratio <= BOUND_SLACK
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub true_return: f64,
    pub gamma: f64,
    pub v_max: f64,
    pub dim: usize,
    pub delta: f64,
    pub num_seeds: usize,
    pub cells: Vec<SweepCell>,
    pub aggregates: Vec<SweepAggregate>,
    /// Log-log slope of RMSE against `n`, when it can be fitted.
    pub slope: Option<f64>,
}

/// Builds the problem from `cfg` and runs the sweep.
pub fn run_sweep(cfg: &SweepConfig, base_dir: &Path) -> Result<SweepResult> {
    let problem = cfg.problem.build(cfg.seed, base_dir)?;
    run_sweep_on(&problem, &cfg.settings, cfg.seed)
}

/// Runs every `(n, seed)` cell. Cell `(n, i)` draws its dataset from
/// `derive_seed(seed, "sweep:n:i")`, so results do not depend on scheduling.
pub fn run_sweep_on(problem: &Problem, settings: &SweepSettings, seed: u64) -> Result<SweepResult> {
    settings.validate()?;
    let Problem { mdp, pi, fmap, mu_d, .. } = problem;
    let real = features::check_realizability(mdp, pi, fmap, settings.realizability_tol)?;
    if !real.realizable {
        return Err(Error::NotRealizable { residual: real.residual });
    }
    let j_true = mdp::exact_return(mdp, pi);
    let population = estimators::population_moments(mdp, pi, mu_d, fmap)?;
    let n0 = if crate::linalg::is_invertible(&population.a_mat()) {
        coverage::burn_in_estimate(&population, fmap, settings.delta)?
    } else {
        f64::INFINITY
    };
    let lossmin = match settings.estimator {
        EstimatorSpec::Inverse => None,
        EstimatorSpec::LossMin { b_theta } => Some(LossMinConfig::new(b_theta)?),
    };

    let jobs: Vec<(usize, usize)> = settings
        .n_grid
        .iter()
        .flat_map(|&n| (0..settings.num_seeds).map(move |i| (n, i)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(n, i)| {
            let dataset_seed = derive_seed(seed, &format!("sweep:{n}:{i}"));
            let data = sampling::sample_dataset(mdp, pi, mu_d, n, dataset_seed)?;
            let m = estimators::empirical_moments(&data, fmap, mdp, pi, settings.next_feature_mode)?;
            let sol = match &lossmin {
                None => estimators::lstdq_solve(&m),
                Some(c) => estimators::lossmin_solve(&m, c)?,
            };
            let j_hat = sol.theta.as_ref().map(|t| estimators::estimate_return(fmap, mdp, pi, t));
            Ok(SweepCell {
                n,
                seed_index: i,
                dataset_seed,
                j_hat,
                abs_error: j_hat.map_or(f64::INFINITY, |j| (j - j_true).abs()),
                c_hat: coverage::cvrg_empirical(&m)?,
                invertible: sol.invertible,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let aggregates = aggregate_cells(&cells, &settings.n_grid, settings.delta, n0, mdp.v_max(), mdp.gamma(), fmap.dim());
    let slope = if settings.num_seeds >= MIN_SEEDS_FOR_FIT {
        fit_points(&aggregates).ok()
    } else {
        None
    };
    Ok(SweepResult {
        true_return: j_true,
        gamma: mdp.gamma(),
        v_max: mdp.v_max(),
        dim: fmap.dim(),
        delta: settings.delta,
        num_seeds: settings.num_seeds,
        cells,
        aggregates,
        slope,
    })
}

/// The `q`-quantile as the smallest sample `x` with empirical CDF `>= q`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m == 0 {
        return f64::NAN;
    }
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Recomputes the per-`n` summaries from stored cells.
pub(crate) fn aggregate_cells(
    cells: &[SweepCell],
    n_grid: &[usize],
    delta: f64,
    n0: f64,
    v_max: f64,
    gamma: f64,
    dim: usize,
) -> Vec<SweepAggregate> {
    n_grid
        .iter()
        .map(|&n| {
            let here: Vec<&SweepCell> = cells.iter().filter(|c| c.n == n).collect();
            let mut errors: Vec<f64> = here.iter().filter(|c| c.invertible).map(|c| c.abs_error).collect();
            errors.sort_by(f64::total_cmp);
            let mut c_hats: Vec<f64> = here.iter().map(|c| c.c_hat).collect();
            c_hats.sort_by(f64::total_cmp);
            let rmse = if errors.is_empty() {
                f64::NAN
            } else {
                (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
            };
            let error_quantile = quantile(&errors, 1.0 - delta);
            let c_hat_median = median(&c_hats);
            let bound_rhs = v_max / (1.0 - gamma) * (c_hat_median * (dim as f64 + (1.0 / delta).ln()) / n as f64).sqrt();
            SweepAggregate {
                n,
                num_cells: here.len(),
                invertibility_rate: if here.is_empty() {
                    f64::NAN
                } else {
                    errors.len() as f64 / here.len() as f64
                },
                rmse,
                error_quantile,
                c_hat_median,
                burn_in_n0: n0,
                bound_rhs,
                bound_ratio: error_quantile / bound_rhs,
                bound_checked: n as f64 >= 10.0 * n0,
            }
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x` over points with finite
/// positive coordinates; needs at least three.
pub fn fit_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite() && *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs at least 3 finite points, got {}",
            pts.len()
        )));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("rate fit needs distinct sample sizes".into()));
    }
    Ok(sxy / sxx)
}

fn fit_points(aggs: &[SweepAggregate]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = aggs.iter().map(|a| (a.n as f64, a.rmse)).collect();
    fit_log_slope(&pts)
}

/// Slope of log RMSE against log `n` for a finished sweep.
pub fn fit_rate_slope(result: &SweepResult) -> Result<f64> {
    if result.num_seeds < MIN_SEEDS_FOR_FIT {
        return Err(Error::InsufficientData(format!(
            "rate fits need at least {MIN_SEEDS_FOR_FIT} seeds per size, got {}",
            result.num_seeds
        )));
    }
    fit_points(&result.aggregates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{FeatureSpec, MdpSpec, MuDSpec, PolicySpec};

    fn bandit_config(num_seeds: usize) -> SweepConfig {
        SweepConfig {
            seed: 11,
            problem: ProblemSpec {
                mdp: MdpSpec::Random {
                    num_states: 4,
                    num_actions: 2,
                    gamma: 0.0,
                    reward_noise: 0.25,
                },
                policy: PolicySpec::Random,
                features: FeatureSpec::Tabular,
                mu_d: MuDSpec::Random,
                abstraction: None,
            },
            settings: SweepSettings {
                n_grid: vec![100, 400, 1600],
                num_seeds,
                delta: 0.05,
                estimator: EstimatorSpec::Inverse,
                next_feature_mode: NextFeatureMode::Sampled,
                realizability_tol: features::DEFAULT_SPAN_TOL,
            },
        }
    }

    #[test]
    fn synthetic_power_law_slope() {
        let pts: Vec<(f64, f64)> = [100.0, 400.0, 1600.0, 6400.0].iter().map(|&n: &f64| (n, 3.0 / n.sqrt())).collect();
        assert!((fit_log_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = [10.0, 20.0, 40.0].iter().map(|&n| (n, 2.0)).collect();
        assert!(fit_log_slope(&flat).unwrap().abs() < 1e-12);
        assert!(matches!(fit_log_slope(&pts[..2]), Err(Error::InsufficientData(_))));
        let with_gap = [(100.0, 1.0), (200.0, f64::NAN), (400.0, 0.5)];
        assert!(fit_log_slope(&with_gap).is_err());
    }

    #[test]
    fn quantile_and_median() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.95), 95.0);
        assert_eq!(quantile(&v, 1.0), 100.0);
        assert_eq!(median(&v), 50.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
    }

    #[test]
    fn sweep_is_deterministic_and_recomputable() {
        let cfg = bandit_config(5);
        let a = run_sweep(&cfg, Path::new(".")).unwrap();
        let b = run_sweep(&cfg, Path::new(".")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 15);
        assert!(a.slope.is_none());
        assert!(fit_rate_slope(&a).is_err());
        let n0 = a.aggregates[0].burn_in_n0;
        let again = aggregate_cells(&a.cells, &cfg.settings.n_grid, 0.05, n0, a.v_max, a.gamma, a.dim);
        assert_eq!(again, a.aggregates);
        // cells are ordered by (n, seed index)
        assert!(a.cells.windows(2).all(|w| (w[0].n, w[0].seed_index) < (w[1].n, w[1].seed_index)));
    }

    #[test]
    fn non_realizable_problem_is_rejected() {
        let mut cfg = bandit_config(2);
        cfg.problem.features = FeatureSpec::Bias;
        assert!(matches!(run_sweep(&cfg, Path::new(".")), Err(Error::NotRealizable { .. })));
    }

    #[test]
    fn singular_family_is_never_invertible() {
        let mut cfg = bandit_config(4);
        cfg.problem.mu_d = MuDSpec::UniformOnPairs { pairs: vec![0, 1, 2, 3, 4, 5, 6] };
        let r = run_sweep(&cfg, Path::new(".")).unwrap();
        assert!(r.cells.iter().all(|c| !c.invertible && c.c_hat == f64::INFINITY && c.j_hat.is_none()));
        assert!(r.aggregates.iter().all(|a| a.invertibility_rate == 0.0 && a.rmse.is_nan()));
    }

    #[test]
    fn loss_min_sweep_always_estimates() {
        let mut cfg = bandit_config(3);
        cfg.settings.estimator = EstimatorSpec::LossMin { b_theta: 10.0 };
        let r = run_sweep(&cfg, Path::new(".")).unwrap();
        assert!(r.cells.iter().all(|c| c.j_hat.is_some()));
    }

    #[test]
    fn settings_validation() {
        let mut s = bandit_config(3).settings;
        s.n_grid = vec![100, 100];
        assert!(s.validate().is_err());
        s.n_grid = vec![];
        assert!(s.validate().is_err());
        s.n_grid = vec![10];
        s.delta = 1.0;
        assert!(s.validate().is_err());
    }
}
