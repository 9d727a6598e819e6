//! LSTDQ: sufficient statistics, the inverse and ball-constrained solvers,
//! and the MWL / BRM views of the same linear system.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, FeatureMap};
use crate::linalg;
use crate::mdp::{self, Policy, StateActionDist, TabularMdp};
use crate::sampling::Dataset;

/// Transitions per accumulation chunk. Chunk partial sums are added in chunk
/// order, so moments do not depend on the number of worker threads.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Population,
    Empirical,
}

/// Second factor of the cross moment: the logged `phi(s', a')` or the
/// policy average `phi(s', pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextFeatureMode {
    #[default]
    Sampled,
    Expected,
}

/// LSTDQ moments `Sigma`, `Sigma_cr`, `b` and the initial feature `phi_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    sigma: DMatrix<f64>,
    sigma_cr: DMatrix<f64>,
    b_vec: DVector<f64>,
    phi0: DVector<f64>,
    gamma: f64,
    provenance: Provenance,
    n: Option<usize>,
    next_feature_mode: NextFeatureMode,
}

impl MomentSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sigma: DMatrix<f64>,
        sigma_cr: DMatrix<f64>,
        b_vec: DVector<f64>,
        phi0: DVector<f64>,
        gamma: f64,
        provenance: Provenance,
        n: Option<usize>,
        next_feature_mode: NextFeatureMode,
    ) -> Result<Self> {
        let d = sigma.nrows();
        if d == 0 || sigma.shape() != (d, d) || sigma_cr.shape() != (d, d) || b_vec.len() != d || phi0.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "moment shapes: Sigma {:?}, Sigma_cr {:?}, b {}, phi0 {}",
                sigma.shape(),
                sigma_cr.shape(),
                b_vec.len(),
                phi0.len()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma = {gamma} must lie in [0, 1)")));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Config("Sigma is not symmetric".into()));
        }
        let (lmin, _) = linalg::symmetric_eigen_range(&sigma);
        if lmin < -1e-10 * scale {
            return Err(Error::Config(format!("Sigma is not PSD (lambda_min = {lmin:e})")));
        }
        match (provenance, n) {
            (Provenance::Empirical, None) => return Err(Error::Config("empirical moments need a sample count".into())),
            (Provenance::Population, Some(_)) => return Err(Error::Config("population moments have no sample count".into())),
            _ => {}
        }
        Ok(Self {
            sigma,
            sigma_cr,
            b_vec,
            phi0,
            gamma,
            provenance,
            n,
            next_feature_mode,
        })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_cr(&self) -> &DMatrix<f64> {
        &self.sigma_cr
    }

    /// `A = Sigma - gamma Sigma_cr`.
    pub fn a_mat(&self) -> DMatrix<f64> {
        &self.sigma - &self.sigma_cr * self.gamma
    }

    pub fn b_vec(&self) -> &DVector<f64> {
        &self.b_vec
    }

    pub fn phi0(&self) -> &DVector<f64> {
        &self.phi0
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn n(&self) -> Option<usize> {
        self.n
    }

    pub fn next_feature_mode(&self) -> NextFeatureMode {
        self.next_feature_mode
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Same statistics with `phi_0` replaced.
    pub fn with_phi0(&self, phi0: DVector<f64>) -> Result<Self> {
        if phi0.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!("phi0 has {} entries, expected {}", phi0.len(), self.dim())));
        }
        Ok(Self { phi0, ..self.clone() })
    }

    pub(crate) fn sigma_is_invertible(&self) -> bool {
        let (lmin, lmax) = linalg::symmetric_eigen_range(&self.sigma);
        lmax > 0.0 && lmin > linalg::SINGULAR_RTOL * lmax
    }

    pub(crate) fn require_invertible_sigma(&self) -> Result<()> {
        if self.sigma_is_invertible() {
            Ok(())
        } else {
            Err(Error::Singular("Sigma"))
        }
    }
}

/// Exact moments under `mu^D`, with the expected next feature.
pub fn population_moments(mdp: &TabularMdp, pi: &Policy, mu_d: &StateActionDist, fmap: &FeatureMap) -> Result<MomentSet> {
    fmap.check_compatible(mdp)?;
    pi.check_compatible(mdp)?;
    mu_d.check_len(mdp.num_pairs())?;
    let phi = fmap.matrix();
    let weighted = DMatrix::from_diagonal(mu_d.probs()) * phi;
    let sigma = phi.tr_mul(&weighted);
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let next = fmap.expected_next_features(mdp, pi);
    let sigma_cr = weighted.tr_mul(&next);
    let b_vec = weighted.tr_mul(mdp.mean_reward());
    MomentSet::new(
        sigma,
        sigma_cr,
        b_vec,
        features::phi0(fmap, mdp, pi),
        mdp.gamma(),
        Provenance::Population,
        None,
        NextFeatureMode::Expected,
    )
}

/// Sample averages over `dataset`.
///
/// `phi_0` and `gamma` come from `mdp` (the initial distribution is known);
/// `mode` picks the logged next action or the policy average at `s'`.
pub fn empirical_moments(
    dataset: &Dataset,
    fmap: &FeatureMap,
    mdp: &TabularMdp,
    pi: &Policy,
    mode: NextFeatureMode,
) -> Result<MomentSet> {
    fmap.check_compatible(mdp)?;
    pi.check_compatible(mdp)?;
    let phi = fmap.matrix();
    let d = fmap.dim();
    let na = mdp.num_actions();
    let state_pi = fmap.state_features_pi(pi);
    let partials: Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> = dataset
        .transitions()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let c = chunk.len();
            let cur = DMatrix::from_fn(c, d, |i, j| phi[(chunk[i].s * na + chunk[i].a, j)]);
            let next = match mode {
                NextFeatureMode::Sampled => DMatrix::from_fn(c, d, |i, j| phi[(chunk[i].s_next * na + chunk[i].a_next, j)]),
                NextFeatureMode::Expected => DMatrix::from_fn(c, d, |i, j| state_pi[(chunk[i].s_next, j)]),
            };
            let r = DVector::from_fn(c, |i, _| chunk[i].r);
            (cur.tr_mul(&cur), cur.tr_mul(&next), cur.tr_mul(&r))
        })
        .collect();
    let mut sigma = DMatrix::zeros(d, d);
    let mut sigma_cr = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for (s, c, r) in partials {
        sigma += s;
        sigma_cr += c;
        b += r;
    }
    let n = dataset.len() as f64;
    sigma /= n;
    sigma_cr /= n;
    b /= n;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    MomentSet::new(
        sigma,
        sigma_cr,
        b,
        features::phi0(fmap, mdp, pi),
        mdp.gamma(),
        Provenance::Empirical,
        Some(dataset.len()),
        mode,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Inverse,
    LossMin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstdqSolution {
    /// Absent when the inverse solver meets a singular `A`.
    pub theta: Option<DVector<f64>>,
    pub solver: SolverKind,
    pub invertible: bool,
    pub min_singular_a: f64,
    /// Loss-min only: the minimizer is not unique and `theta` is the
    /// minimum-norm one.
    pub non_unique: bool,
}

/// `theta = A^{-1} b`, or a singular report.
pub fn lstdq_solve(m: &MomentSet) -> LstdqSolution {
    let a = m.a_mat();
    let (smin, smax) = linalg::singular_value_range(&a);
    let invertible = smax > 0.0 && smin > linalg::SINGULAR_RTOL * smax;
    let theta = if invertible { a.lu().solve(m.b_vec()) } else { None };
    LstdqSolution {
        invertible: theta.is_some(),
        theta,
        solver: SolverKind::Inverse,
        min_singular_a: smin,
        non_unique: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossMinConfig {
    /// Radius `B_Theta` of the parameter ball.
    pub b_theta: f64,
    /// Relative tolerance on `| ||theta|| - B_Theta |` for the boundary solve.
    #[serde(default = "LossMinConfig::default_tolerance")]
    pub tolerance: f64,
}

impl LossMinConfig {
    pub fn new(b_theta: f64) -> Result<Self> {
        let cfg = Self {
            b_theta,
            tolerance: Self::default_tolerance(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn default_tolerance() -> f64 {
        1e-12
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_theta > 0.0) || !self.b_theta.is_finite() {
            return Err(Error::Config(format!("b_theta = {} must be positive", self.b_theta)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance = {} must be positive", self.tolerance)));
        }
        Ok(())
    }
}

/// `argmin_{||theta|| <= B} || Sigma^{-1/2} (A theta - b) ||`.
///
/// With `M = Sigma^{-1/2} A` and `c = Sigma^{-1/2} b` this is a trust-region
/// subproblem. If the minimum-norm least-squares solution fits in the ball it
/// is returned; otherwise the ridge parameter `lambda > 0` of
/// `(M^T M + lambda I) theta = M^T c` is bisected until the solution sits on
/// the sphere. `||theta(lambda)||` decreases in `lambda`, and at
/// `lambda = ||M^T c|| / B` it is at most `B`, which brackets the root.
pub fn lossmin_solve(m: &MomentSet, cfg: &LossMinConfig) -> Result<LstdqSolution> {
    cfg.validate()?;
    m.require_invertible_sigma()?;
    let a = m.a_mat();
    let (smin_a, smax_a) = linalg::singular_value_range(&a);
    let whiten = linalg::psd_inv_sqrt(m.sigma());
    let mm = &whiten * &a;
    let c = &whiten * m.b_vec();
    let svd = mm.svd(true, true);
    let u = svd.u.expect("computed");
    let v_t = svd.v_t.expect("computed");
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let rank_floor = linalg::SINGULAR_RTOL * smax;
    // s_i * (u_i . c), zeroed on the numerical null space
    let proj: Vec<(f64, f64)> = (0..s.len())
        .map(|i| {
            let si = s[i];
            let beta = if si > rank_floor { u.column(i).dot(&c) } else { 0.0 };
            (si, si * beta)
        })
        .collect();
    let coeffs = |lambda: f64| -> Vec<f64> {
        proj.iter()
            .map(|&(si, sb)| if si > rank_floor || lambda > 0.0 { sb / (si * si + lambda) } else { 0.0 })
            .collect()
    };
    let norm = |k: &[f64]| k.iter().map(|x| x * x).sum::<f64>().sqrt();
    let assemble = |k: &[f64]| -> DVector<f64> { v_t.tr_mul(&DVector::from_column_slice(k)) };

    let rank_deficient = s.iter().any(|&si| si <= rank_floor);
    let k0 = coeffs(0.0);
    let b = cfg.b_theta;
    let (theta, non_unique) = if norm(&k0) <= b {
        (assemble(&k0), rank_deficient)
    } else {
        let mtc = proj.iter().map(|&(_, sb)| sb * sb).sum::<f64>().sqrt();
        let (mut lo, mut hi) = (0.0, mtc / b);
        let mut k_hi = coeffs(hi);
        for _ in 0..500 {
            if (norm(&k_hi) - b).abs() <= cfg.tolerance * b {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let k_mid = coeffs(mid);
            if norm(&k_mid) > b {
                lo = mid;
            } else {
                hi = mid;
                k_hi = k_mid;
            }
        }
        (assemble(&k_hi), false)
    };
    Ok(LstdqSolution {
        theta: Some(theta),
        solver: SolverKind::LossMin,
        invertible: smax_a > 0.0 && smin_a > linalg::SINGULAR_RTOL * smax_a,
        min_singular_a: smin_a,
        non_unique,
    })
}

/// `J_theta(pi) = phi_0^T theta`.
pub fn estimate_return(fmap: &FeatureMap, mdp: &TabularMdp, pi: &Policy, theta: &DVector<f64>) -> f64 {
    features::phi0(fmap, mdp, pi).dot(theta)
}

/// `sqrt(E_nu[(Q^pi - Phi theta)^2])`.
pub fn function_error(fmap: &FeatureMap, mdp: &TabularMdp, pi: &Policy, theta: &DVector<f64>, nu: &StateActionDist) -> f64 {
    let diff = mdp::exact_q(mdp, pi) - fmap.matrix() * theta;
    nu.probs().iter().zip(diff.iter()).map(|(w, e)| w * e * e).sum::<f64>().sqrt()
}

/// Linear MWL weight `w(s, a) = (1 - gamma) phi_0^T A^{-1} phi(s, a)` on every pair.
pub fn mwl_weight(m: &MomentSet, fmap: &FeatureMap) -> Result<DVector<f64>> {
    let y = linalg::solve(&m.a_mat().transpose(), m.phi0()).ok_or(Error::Singular("A"))?;
    Ok(fmap.matrix() * y * (1.0 - m.gamma()))
}

/// Projected Bellman residual `|| Sigma^{-1/2} (A theta - b) ||^2`, the value
/// of the linear BRM minimax problem.
pub fn brm_objective(m: &MomentSet, theta: &DVector<f64>) -> Result<f64> {
    m.require_invertible_sigma()?;
    let resid = m.a_mat() * theta - m.b_vec();
    Ok((linalg::psd_inv_sqrt(m.sigma()) * resid).norm_squared())
}
