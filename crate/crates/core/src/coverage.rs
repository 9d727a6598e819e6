//! Coverage parameters and the spectral diagnostics of the feature
//! dynamics `B^pi = (Sigma^{-1} Sigma_cr)^T`.
//!
//! Singular `A` is reported as `f64::INFINITY` coverage rather than an
//! error; a singular `Sigma` is an error wherever whitening or `B^pi` is
//! needed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{MomentSet, Provenance};
use crate::features::{self, AbstractionSpec, FeatureMap};
use crate::linalg;
use crate::mdp::{self, Policy, StateActionDist, TabularMdp};

/// The linear dynamical system `x_{t+1} = B^pi x_t`, `x_0 = phi_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDynamics {
    pub b_pi: DMatrix<f64>,
    pub spectral_radius: f64,
    /// `rho(B^pi) < 1 / gamma`.
    pub occupancy_defined: bool,
    /// `(1 - gamma)(I - gamma B^pi)^{-1} phi_0`, when defined.
    pub nu_phi: Option<DVector<f64>>,
}

pub fn feature_dynamics(m: &MomentSet) -> Result<FeatureDynamics> {
    m.require_invertible_sigma()?;
    let b_pi = linalg::solve_matrix(m.sigma(), m.sigma_cr())
        .ok_or(Error::Singular("Sigma"))?
        .transpose();
    let rho = linalg::spectral_radius(&b_pi);
    let g = m.gamma();
    let occupancy_defined = g * rho < 1.0;
    let nu_phi = if occupancy_defined {
        let d = m.dim();
        let sys = DMatrix::identity(d, d) - &b_pi * g;
        linalg::solve(&sys, m.phi0()).map(|x| x * (1.0 - g))
    } else {
        None
    };
    Ok(FeatureDynamics {
        b_pi,
        spectral_radius: rho,
        occupancy_defined,
        nu_phi,
    })
}

/// `(1 - gamma)^2 phi_0^T A^{-1} Sigma A^{-T} phi_0`, or `+inf` for singular `A`.
fn dynamics_coverage(m: &MomentSet, phi0: &DVector<f64>) -> f64 {
    match linalg::solve(&m.a_mat().transpose(), phi0) {
        Some(y) => {
            let g = 1.0 - m.gamma();
            g * g * y.dot(&(m.sigma() * &y))
        }
        None => f64::INFINITY,
    }
}

/// Feature-dynamics coverage `C^pi_phi` from any moment set.
pub fn cvrg_population(m: &MomentSet) -> f64 {
    dynamics_coverage(m, m.phi0())
}

/// Empirical coverage `C-hat^pi_phi`; `+inf` when `A-hat` is singular.
pub fn cvrg_empirical(m: &MomentSet) -> Result<f64> {
    if m.provenance() != Provenance::Empirical {
        return Err(Error::Config("empirical coverage needs empirical moments".into()));
    }
    Ok(dynamics_coverage(m, m.phi0()))
}

/// Linear coverage `(phi^pi)^T Sigma^{-1} phi^pi`.
pub fn cvrg_lin(m: &MomentSet, phi_pi: &DVector<f64>) -> Result<f64> {
    m.require_invertible_sigma()?;
    linalg::inverse_quadratic_form(m.sigma(), phi_pi).ok_or(Error::Singular("Sigma"))
}

/// Function-estimation coverage
/// `(1 - gamma)^2 E_nu || Sigma^{1/2} A^{-T} phi(s0, a0) ||^2`.
pub fn cvrg_fn(m: &MomentSet, fmap: &FeatureMap, nu: &StateActionDist) -> Result<f64> {
    nu.check_len(fmap.num_pairs())?;
    let Some(y) = linalg::solve_matrix(&m.a_mat().transpose(), &fmap.matrix().transpose()) else {
        return Ok(f64::INFINITY);
    };
    let sy = m.sigma() * &y;
    let g = 1.0 - m.gamma();
    let total: f64 = nu
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(p, &w)| w * y.column(p).dot(&sy.column(p)))
        .sum();
    Ok(g * g * total)
}

/// `sum_p target(p)^2 / data(p)`; `+inf` if `target` puts mass where `data` has none.
fn chi2(target: &DVector<f64>, data: &DVector<f64>) -> f64 {
    target
        .iter()
        .zip(data.iter())
        .map(|(&t, &d)| match (t > 0.0, d > 0.0) {
            (false, _) => 0.0,
            (true, false) => f64::INFINITY,
            (true, true) => t * t / d,
        })
        .sum()
}

/// `E_{mu^D}[(mu^pi / mu^D)^2]` from exact occupancies.
pub fn chi2_tabular(mdp: &TabularMdp, pi: &Policy, mu_d: &StateActionDist) -> Result<f64> {
    pi.check_compatible(mdp)?;
    mu_d.check_len(mdp.num_pairs())?;
    Ok(chi2(mdp::occupancy(mdp, pi).probs(), mu_d.probs()))
}

/// True when `pi(.|s)` depends on `s` only through `psi(s)`.
pub fn is_abstraction_consistent(pi: &Policy, spec: &AbstractionSpec) -> bool {
    let mut rep: Vec<Option<usize>> = vec![None; spec.num_blocks()];
    for s in 0..spec.num_states() {
        let k = spec.block(s);
        match rep[k] {
            None => rep[k] = Some(s),
            Some(r) => {
                let diff = (pi.action_probs().row(s) - pi.action_probs().row(r)).amax();
                if diff > mdp::SIMPLEX_TOL {
                    return false;
                }
            }
        }
    }
    true
}

/// The abstract MDP `M_psi` (zero rewards), its block policy, and `phi^D`.
pub fn abstract_model(
    mdp: &TabularMdp,
    pi: &Policy,
    mu_d: &StateActionDist,
    spec: &AbstractionSpec,
) -> Result<(TabularMdp, Policy, DVector<f64>)> {
    pi.check_compatible(mdp)?;
    mu_d.check_len(mdp.num_pairs())?;
    if spec.num_states() != mdp.num_states() {
        return Err(Error::DimensionMismatch("abstraction does not cover the MDP's states".into()));
    }
    if !is_abstraction_consistent(pi, spec) {
        return Err(Error::InvalidAbstraction("policy is not constant within abstract states".into()));
    }
    let (ns, na, nk) = (mdp.num_states(), mdp.num_actions(), spec.num_blocks());
    let mut phi_d = DVector::zeros(nk * na);
    let mut flow = DMatrix::zeros(nk * na, nk);
    for s in 0..ns {
        let k = spec.block(s);
        for a in 0..na {
            let w = mu_d.probs()[mdp.pair(s, a)];
            phi_d[k * na + a] += w;
            for s2 in 0..ns {
                flow[(k * na + a, spec.block(s2))] += w * mdp.transition_prob(s, a, s2);
            }
        }
    }
    for ka in 0..nk * na {
        if phi_d[ka] > 0.0 {
            let mut row = flow.row_mut(ka);
            row /= phi_d[ka];
            let sum = row.sum();
            row /= sum;
        } else {
            // Unreached by data; any row works because a visit is already +inf.
            flow.row_mut(ka).fill(0.0);
            flow[(ka, ka / na)] = 1.0;
        }
    }
    let mut psi0 = DVector::zeros(nk);
    for s in 0..ns {
        psi0[spec.block(s)] += mdp.initial_dist()[s];
    }
    psi0 /= psi0.sum();
    let mut block_pi = DMatrix::zeros(nk, na);
    for s in 0..ns {
        block_pi.row_mut(spec.block(s)).copy_from(&pi.action_probs().row(s));
    }
    let abs = TabularMdp::new(nk, na, flow, DVector::zeros(nk * na), psi0, mdp.gamma(), mdp.r_max(), 0.0)?;
    Ok((abs, Policy::new(block_pi)?, phi_d))
}

/// Chi-squared aggregated concentrability `E_{phi^D}[(mu^pi_{M_psi} / phi^D)^2]`.
pub fn aggregated_concentrability(
    mdp: &TabularMdp,
    pi: &Policy,
    mu_d: &StateActionDist,
    spec: &AbstractionSpec,
) -> Result<f64> {
    let (abs, block_pi, phi_d) = abstract_model(mdp, pi, mu_d, spec)?;
    Ok(chi2(mdp::occupancy(&abs, &block_pi).probs(), &phi_d))
}

/// Both sides of the comparison with the `sigma_min` bound, with the common
/// `(1 - gamma)` factor divided out:
/// `lhs = || W^{-T} Sigma^{-1/2} phi_0 ||` and
/// `rhs = || phi_0 ||_{Sigma^{-1}} / sigma_min(W)` where
/// `W = I - gamma Sigma^{-1/2} Sigma_cr Sigma^{-1/2}`.
/// `sqrt(C^pi_phi) = (1 - gamma) * lhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerdomoComparison {
    pub lhs: f64,
    pub rhs: f64,
}

pub fn perdomo_comparison(m: &MomentSet) -> Result<PerdomoComparison> {
    m.require_invertible_sigma()?;
    let d = m.dim();
    let half = linalg::psd_inv_sqrt(m.sigma());
    let w = DMatrix::identity(d, d) - &half * m.sigma_cr() * &half * m.gamma();
    let v = &half * m.phi0();
    let Some(x) = linalg::solve(&w.transpose(), &v) else {
        return Ok(PerdomoComparison {
            lhs: f64::INFINITY,
            rhs: f64::INFINITY,
        });
    };
    let (smin, _) = linalg::singular_value_range(&w);
    Ok(PerdomoComparison {
        lhs: x.norm(),
        rhs: v.norm() / smin,
    })
}

/// Outcome of the on-policy mean condition.
#[derive(Debug, Clone, PartialEq)]
pub struct OnpolicyCertificate {
    pub certified: bool,
    /// Max-norm residual of fitting the constant function.
    pub bias_residual: f64,
    pub spectral_radius: f64,
    /// `max(|E[phi] - phi_0|, |E[phi(s', pi)] - phi_0|)` in max norm.
    pub mean_gap: f64,
    pub coverage: f64,
}

/// Checks: a bias term is in the span of `Phi`; `rho(B^pi) < 1/gamma`;
/// `E_{mu^D}[phi] = E_{mu^D}[phi(s', pi)] = phi_0`.
///
/// With the bias `theta_0`, `E[phi] = Sigma theta_0` and
/// `E[phi(s', .)] = Sigma_cr^T theta_0`, so both means come from the moments.
pub fn onpolicy_check(m: &MomentSet, fmap: &FeatureMap, mu_d: &StateActionDist) -> Result<OnpolicyCertificate> {
    mu_d.check_len(fmap.num_pairs())?;
    let ones = DVector::from_element(fmap.num_pairs(), 1.0);
    let (bias_residual, theta0) = linalg::span_residual(fmap.matrix(), &ones);
    let dynamics = feature_dynamics(m)?;
    let data_mean = features::mean_feature(fmap, mu_d);
    let next_mean = m.sigma_cr().tr_mul(&theta0);
    let mean_gap = (&data_mean - m.phi0()).amax().max((&next_mean - m.phi0()).amax());
    let coverage = cvrg_population(m);
    let certified = bias_residual <= 1e-8 && dynamics.occupancy_defined && mean_gap <= 1e-8;
    Ok(OnpolicyCertificate {
        certified,
        bias_residual,
        spectral_radius: dynamics.spectral_radius,
        mean_gap,
        coverage,
    })
}

/// Burn-in `((B_phi^2 + sigma_max(A)) / sigma_min(A))^2 log(d / delta)`,
/// constant factor one; an order-of-magnitude figure only.
pub fn burn_in_estimate(m: &MomentSet, fmap: &FeatureMap, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta = {delta} must lie in (0, 1)")));
    }
    let (smin, smax) = linalg::singular_value_range(&m.a_mat());
    Ok(burn_in_formula(fmap.feature_bound(), smin, smax, m.dim(), delta))
}

pub(crate) fn burn_in_formula(b_phi: f64, smin: f64, smax: f64, d: usize, delta: f64) -> f64 {
    if !(smax > 0.0 && smin > linalg::SINGULAR_RTOL * smax) {
        return f64::INFINITY;
    }
    let ratio = (b_phi * b_phi + smax) / smin;
    ratio * ratio * (d as f64 / delta).ln()
}

/// Every coverage figure for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub c_phi: f64,
    pub c_phi_emp: Option<f64>,
    pub c_lin: f64,
    pub chi2_tabular: Option<f64>,
    pub agg_concentrability_chi2: Option<f64>,
    pub perdomo_lhs: f64,
    pub perdomo_rhs: f64,
    pub sigma_min_a: f64,
    pub lambda_min_sigma: f64,
    pub kappa_sigma: f64,
    pub rho_bpi: f64,
    pub burn_in_n0: f64,
    pub onpolicy_certified: bool,
}

/// Inputs for [`coverage_report`].
pub struct ReportInputs<'a> {
    pub mdp: &'a TabularMdp,
    pub pi: &'a Policy,
    pub mu_d: &'a StateActionDist,
    pub fmap: &'a FeatureMap,
    pub empirical: Option<&'a MomentSet>,
    pub abstraction: Option<&'a AbstractionSpec>,
    pub delta: f64,
}

/// Assembles a [`CoverageReport`] from exact population moments.
///
/// `chi2_tabular` is filled when the features are tabular and
/// `agg_concentrability_chi2` when an abstraction with a consistent policy
/// is supplied.
pub fn coverage_report(inp: &ReportInputs<'_>) -> Result<CoverageReport> {
    let m = crate::estimators::population_moments(inp.mdp, inp.pi, inp.mu_d, inp.fmap)?;
    let dynamics = feature_dynamics(&m)?;
    let (lmin, lmax) = linalg::symmetric_eigen_range(m.sigma());
    let (smin, _) = linalg::singular_value_range(&m.a_mat());
    let perdomo = perdomo_comparison(&m)?;
    let phi_pi = features::phi_pi(inp.fmap, inp.mdp, inp.pi);
    let chi2_tab = if inp.fmap.is_tabular() {
        Some(chi2_tabular(inp.mdp, inp.pi, inp.mu_d)?)
    } else {
        None
    };
    let agg = match inp.abstraction {
        Some(spec) if is_abstraction_consistent(inp.pi, spec) => {
            Some(aggregated_concentrability(inp.mdp, inp.pi, inp.mu_d, spec)?)
        }
        _ => None,
    };
    Ok(CoverageReport {
        c_phi: cvrg_population(&m),
        c_phi_emp: inp.empirical.map(cvrg_empirical).transpose()?,
        c_lin: cvrg_lin(&m, &phi_pi)?,
        chi2_tabular: chi2_tab,
        agg_concentrability_chi2: agg,
        perdomo_lhs: perdomo.lhs,
        perdomo_rhs: perdomo.rhs,
        sigma_min_a: smin,
        lambda_min_sigma: lmin,
        kappa_sigma: lmax / lmin,
        rho_bpi: dynamics.spectral_radius,
        burn_in_n0: burn_in_estimate(&m, inp.fmap, inp.delta)?,
        onpolicy_certified: onpolicy_check(&m, inp.fmap, inp.mu_d)?.certified,
    })
}
