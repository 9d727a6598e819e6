//! Linear feature maps over state-action pairs and the realizability and
//! Bellman-completeness verifiers.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{self, Policy, StateActionDist, TabularMdp};
use crate::rng;

/// Default relative tolerance for span-membership decisions.
pub const DEFAULT_SPAN_TOL: f64 = 1e-8;

/// A `(|S||A|) x d` feature matrix with a row-norm bound `B_phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    matrix: DMatrix<f64>,
    feature_bound: f64,
}

impl FeatureMap {
    pub fn new(matrix: DMatrix<f64>, feature_bound: f64) -> Result<Self> {
        if matrix.ncols() == 0 || matrix.nrows() == 0 {
            return Err(Error::InvalidFeatures("need d >= 1 and at least one pair".into()));
        }
        if !(feature_bound > 0.0) || !feature_bound.is_finite() {
            return Err(Error::InvalidFeatures(format!("feature bound {feature_bound} must be positive")));
        }
        for (i, row) in matrix.row_iter().enumerate() {
            let norm = row.norm();
            if !norm.is_finite() || norm > feature_bound + 1e-12 {
                return Err(Error::InvalidFeatures(format!(
                    "row {i} has norm {norm}, exceeding bound {feature_bound}"
                )));
            }
        }
        Ok(Self { matrix, feature_bound })
    }

    /// Uses the largest row norm as the bound.
    pub fn with_tight_bound(matrix: DMatrix<f64>) -> Result<Self> {
        let bound = matrix.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        Self::new(matrix, bound)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn feature_bound(&self) -> f64 {
        self.feature_bound
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn num_pairs(&self) -> usize {
        self.matrix.nrows()
    }

    /// `phi(pair)` as a column vector.
    pub fn feature(&self, pair: usize) -> DVector<f64> {
        self.matrix.row(pair).transpose()
    }

    /// Feature map scaled by `c > 0`; the bound scales with it.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.matrix * c, self.feature_bound * c)
    }

    /// Rows `phi(s, pi) = sum_a pi(a|s) phi(s, a)`, one per state.
    pub fn state_features_pi(&self, pi: &Policy) -> DMatrix<f64> {
        let (ns, na) = (pi.num_states(), pi.num_actions());
        let mut out = DMatrix::zeros(ns, self.dim());
        for s in 0..ns {
            for a in 0..na {
                let w = pi.prob(s, a);
                if w != 0.0 {
                    let row = self.matrix.row(s * na + a) * w;
                    let mut dst = out.row_mut(s);
                    dst += row;
                }
            }
        }
        out
    }

    /// Rows `E_{s' ~ P(.|s,a)}[phi(s', pi)]`, one per pair.
    pub fn expected_next_features(&self, mdp: &TabularMdp, pi: &Policy) -> DMatrix<f64> {
        mdp.transition() * self.state_features_pi(pi)
    }

    /// True when the map is exactly the identity (tabular features).
    pub fn is_tabular(&self) -> bool {
        self.matrix.is_square() && self.matrix == DMatrix::identity(self.num_pairs(), self.num_pairs())
    }

    pub(crate) fn check_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_pairs() != mdp.num_pairs() {
            return Err(Error::DimensionMismatch(format!(
                "feature map has {} rows, MDP has {} pairs",
                self.num_pairs(),
                mdp.num_pairs()
            )));
        }
        Ok(())
    }
}

/// A state abstraction `psi: S -> [K]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractionSpec {
    state_to_block: Vec<usize>,
    num_blocks: usize,
}

impl AbstractionSpec {
    pub fn new(state_to_block: Vec<usize>, num_blocks: usize) -> Result<Self> {
        let mut seen = vec![false; num_blocks];
        for (s, &k) in state_to_block.iter().enumerate() {
            if k >= num_blocks {
                return Err(Error::InvalidAbstraction(format!(
                    "state {s} maps to block {k}, but there are {num_blocks} blocks"
                )));
            }
            seen[k] = true;
        }
        if let Some(k) = seen.iter().position(|&x| !x) {
            return Err(Error::InvalidAbstraction(format!("block {k} is empty")));
        }
        Ok(Self { state_to_block, num_blocks })
    }

    pub fn identity(num_states: usize) -> Self {
        Self {
            state_to_block: (0..num_states).collect(),
            num_blocks: num_states,
        }
    }

    pub fn state_to_block(&self) -> &[usize] {
        &self.state_to_block
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block(&self, s: usize) -> usize {
        self.state_to_block[s]
    }

    pub fn num_states(&self) -> usize {
        self.state_to_block.len()
    }
}

/// `phi(s, a) = e_{(s, a)}`.
pub fn tabular_features(mdp: &TabularMdp) -> FeatureMap {
    let n = mdp.num_pairs();
    FeatureMap {
        matrix: DMatrix::identity(n, n),
        feature_bound: 1.0,
    }
}

/// `phi(s, a) = e_{(psi(s), a)}`, with `d = K |A|`.
pub fn abstraction_features(mdp: &TabularMdp, spec: &AbstractionSpec) -> Result<FeatureMap> {
    if spec.num_states() != mdp.num_states() {
        return Err(Error::DimensionMismatch(format!(
            "abstraction covers {} states, MDP has {}",
            spec.num_states(),
            mdp.num_states()
        )));
    }
    let na = mdp.num_actions();
    let mut m = DMatrix::zeros(mdp.num_pairs(), spec.num_blocks() * na);
    for s in 0..mdp.num_states() {
        for a in 0..na {
            m[(mdp.pair(s, a), spec.block(s) * na + a)] = 1.0;
        }
    }
    Ok(FeatureMap {
        matrix: m,
        feature_bound: 1.0,
    })
}

/// Random full-rank features whose span contains `Q^pi`.
///
/// The first column is `Q^pi` itself (skipped when `Q^pi = 0`), the rest are
/// Gaussian. All rows are then rescaled by one common factor so the largest
/// row norm equals `feature_bound`.
pub fn realizable_random_features(
    mdp: &TabularMdp,
    pi: &Policy,
    d: usize,
    seed: u64,
    feature_bound: f64,
) -> Result<FeatureMap> {
    pi.check_compatible(mdp)?;
    let n = mdp.num_pairs();
    if d == 0 || d > n {
        return Err(Error::InvalidFeatures(format!(
            "cannot build {d} full-rank features over {n} state-action pairs"
        )));
    }
    let q = mdp::exact_q(mdp, pi);
    let mut rng = rng::substream(seed, "features");
    // Scale the random columns to the size of Q so neither dominates.
    let scale = q.amax().max(1.0);
    let mut m = DMatrix::zeros(n, d);
    let first_random = if q.amax() > 0.0 {
        m.set_column(0, &q);
        1
    } else {
        0
    };
    for j in first_random..d {
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            m[(i, j)] = scale * z;
        }
    }
    let (smin, smax) = linalg::singular_value_range(&m);
    if !(smin > linalg::SINGULAR_RTOL * smax) {
        return Err(Error::InvalidFeatures("random features are rank deficient; try another seed".into()));
    }
    let max_row = m.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    m *= feature_bound / max_row;
    FeatureMap::new(m, feature_bound)
}

/// Result of [`check_realizability`].
#[derive(Debug, Clone, PartialEq)]
pub struct RealizabilityCheck {
    pub realizable: bool,
    /// `max |Q^pi - Phi theta_ls|` for the least-squares `theta_ls`.
    pub residual: f64,
    pub theta_star: Option<DVector<f64>>,
}

/// Tests whether `Q^pi` lies in the column span of `Phi`.
///
/// Realizable iff the max-norm least-squares residual is at most
/// `tol * max(1, V_max)`.
pub fn check_realizability(mdp: &TabularMdp, pi: &Policy, fmap: &FeatureMap, tol: f64) -> Result<RealizabilityCheck> {
    fmap.check_compatible(mdp)?;
    pi.check_compatible(mdp)?;
    let q = mdp::exact_q(mdp, pi);
    let (residual, theta) = linalg::span_residual(fmap.matrix(), &q);
    let realizable = residual <= tol * mdp.v_max().max(1.0);
    Ok(RealizabilityCheck {
        realizable,
        residual,
        theta_star: realizable.then_some(theta),
    })
}

/// Result of [`check_bellman_completeness`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompletenessCheck {
    pub complete: bool,
    pub reward_residual: f64,
    pub dynamics_residual: f64,
}

/// Linear Bellman completeness: `R` and every coordinate of
/// `E_{s'}[phi(s', pi)]` lie in the column span of `Phi`.
///
/// Evaluated on exact population quantities; tolerance is
/// `tol * max(1, B_phi, R_max)`.
pub fn check_bellman_completeness(
    mdp: &TabularMdp,
    pi: &Policy,
    fmap: &FeatureMap,
    tol: f64,
) -> Result<CompletenessCheck> {
    fmap.check_compatible(mdp)?;
    pi.check_compatible(mdp)?;
    let phi = fmap.matrix();
    let (reward_residual, _) = linalg::span_residual(phi, mdp.mean_reward());
    let next = fmap.expected_next_features(mdp, pi);
    let dynamics_residual = (0..next.ncols())
        .map(|j| linalg::span_residual(phi, &next.column(j).into_owned()).0)
        .fold(0.0, f64::max);
    let threshold = tol * 1f64.max(fmap.feature_bound()).max(mdp.r_max());
    Ok(CompletenessCheck {
        complete: reward_residual <= threshold && dynamics_residual <= threshold,
        reward_residual,
        dynamics_residual,
    })
}

/// `phi_0 = E_{s0 ~ rho_0, a0 ~ pi}[phi(s0, a0)]`.
pub fn phi0(fmap: &FeatureMap, mdp: &TabularMdp, pi: &Policy) -> DVector<f64> {
    fmap.matrix().tr_mul(mdp::initial_pair_dist(mdp, pi).probs())
}

/// `phi^pi = E_{mu^pi}[phi]`.
pub fn phi_pi(fmap: &FeatureMap, mdp: &TabularMdp, pi: &Policy) -> DVector<f64> {
    fmap.matrix().tr_mul(mdp::occupancy(mdp, pi).probs())
}

/// Mean feature under an arbitrary pair distribution.
pub fn mean_feature(fmap: &FeatureMap, dist: &StateActionDist) -> DVector<f64> {
    fmap.matrix().tr_mul(dist.probs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators;

    #[test]
    fn tabular_shapes() {
        let mdp = generators::random_mdp(3, 2, 0.9, 0);
        let f = tabular_features(&mdp);
        assert_eq!(f.dim(), 6);
        assert!(f.matrix().row_iter().all(|r| r.norm() == 1.0));
        assert!(f.is_tabular());
    }

    #[test]
    fn identity_abstraction_is_tabular() {
        let mdp = generators::random_mdp(3, 2, 0.9, 0);
        let f = abstraction_features(&mdp, &AbstractionSpec::identity(3)).unwrap();
        assert_eq!(f, tabular_features(&mdp));
    }

    #[test]
    fn full_aggregation_collapses_states() {
        let mdp = generators::random_mdp(3, 2, 0.9, 0);
        let f = abstraction_features(&mdp, &AbstractionSpec::new(vec![0, 0, 0], 1).unwrap()).unwrap();
        for s in 0..3 {
            assert_eq!(f.feature(mdp.pair(s, 1)), f.feature(mdp.pair(0, 1)));
        }
    }

    #[test]
    fn abstraction_column_sums_are_block_sizes() {
        let mdp = generators::random_mdp(4, 2, 0.9, 0);
        let spec = AbstractionSpec::new(vec![0, 0, 1, 1], 2).unwrap();
        let f = abstraction_features(&mdp, &spec).unwrap();
        let sums = f.matrix().row_sum();
        assert!(sums.iter().all(|&c| c == 2.0));
    }

    #[test]
    fn abstraction_rejects_empty_block() {
        assert!(AbstractionSpec::new(vec![0, 0, 2], 3).is_err());
        assert!(AbstractionSpec::new(vec![0, 3], 2).is_err());
    }

    #[test]
    fn random_features_are_realizable() {
        let mdp = generators::random_mdp(3, 2, 0.9, 4);
        let pi = generators::random_policy(3, 2, 4);
        let f = realizable_random_features(&mdp, &pi, 2, 7, 1.0).unwrap();
        let check = check_realizability(&mdp, &pi, &f, DEFAULT_SPAN_TOL).unwrap();
        assert!(check.realizable, "residual {}", check.residual);
        let max_row = f.matrix().row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        assert!((max_row - 1.0).abs() < 1e-12);
        // full span
        let f = realizable_random_features(&mdp, &pi, 6, 7, 1.0).unwrap();
        assert!(check_realizability(&mdp, &pi, &f, DEFAULT_SPAN_TOL).unwrap().realizable);
        assert!(realizable_random_features(&mdp, &pi, 7, 7, 1.0).is_err());
    }

    #[test]
    fn single_q_column_is_realizable() {
        let mdp = generators::random_mdp(3, 2, 0.5, 1);
        let pi = generators::random_policy(3, 2, 1);
        let q = mdp::exact_q(&mdp, &pi);
        let f = FeatureMap::with_tight_bound(DMatrix::from_column_slice(6, 1, q.as_slice())).unwrap();
        let check = check_realizability(&mdp, &pi, &f, DEFAULT_SPAN_TOL).unwrap();
        assert!(check.realizable);
        assert!((check.theta_star.unwrap()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn tabular_is_realizable_and_complete() {
        let mdp = generators::random_mdp(4, 2, 0.8, 3);
        let pi = generators::random_policy(4, 2, 3);
        let f = tabular_features(&mdp);
        let r = check_realizability(&mdp, &pi, &f, DEFAULT_SPAN_TOL).unwrap();
        assert!(r.realizable);
        assert!((r.theta_star.unwrap() - mdp::exact_q(&mdp, &pi)).amax() < 1e-10);
        let c = check_bellman_completeness(&mdp, &pi, &f, DEFAULT_SPAN_TOL).unwrap();
        assert!(c.complete && c.reward_residual < 1e-12 && c.dynamics_residual < 1e-12);
    }

    #[test]
    fn block_inhomogeneous_rewards_break_realizability() {
        // 2 states aggregated into one block with different rewards
        let mdp = TabularMdp::new(
            2,
            1,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.5, 0.5]),
            0.5,
            1.0,
            0.0,
        )
        .unwrap();
        let pi = Policy::uniform(2, 1);
        let f = abstraction_features(&mdp, &AbstractionSpec::new(vec![0, 0], 1).unwrap()).unwrap();
        let r = check_realizability(&mdp, &pi, &f, DEFAULT_SPAN_TOL).unwrap();
        assert!(!r.realizable && r.residual > 0.1);
        assert!(r.theta_star.is_none());
    }

    #[test]
    fn block_inhomogeneous_transitions_break_completeness() {
        // states 0 and 1 share a block but move to different blocks
        let t = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let mdp = TabularMdp::new(
            3,
            1,
            t,
            DVector::from_element(3, 0.5),
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            0.9,
            1.0,
            0.0,
        )
        .unwrap();
        let pi = Policy::uniform(3, 1);
        let f = abstraction_features(&mdp, &AbstractionSpec::new(vec![0, 0, 1], 2).unwrap()).unwrap();
        let c = check_bellman_completeness(&mdp, &pi, &f, DEFAULT_SPAN_TOL).unwrap();
        assert!(!c.complete);
        assert!(c.reward_residual < 1e-12 && c.dynamics_residual > 0.1);
    }

    #[test]
    fn q_span_only_features_are_incomplete() {
        let mdp = generators::random_mdp(4, 2, 0.9, 11);
        let pi = generators::random_policy(4, 2, 11);
        let f = realizable_random_features(&mdp, &pi, 2, 11, 1.0).unwrap();
        let c = check_bellman_completeness(&mdp, &pi, &f, DEFAULT_SPAN_TOL).unwrap();
        assert!(!c.complete);
        assert!(c.reward_residual.max(c.dynamics_residual) > 1e-4);
    }

    #[test]
    fn initial_and_occupancy_features() {
        let mdp = generators::random_mdp(3, 2, 0.7, 5);
        let pi = generators::random_policy(3, 2, 5);
        let f = tabular_features(&mdp);
        assert_eq!(phi0(&f, &mdp, &pi), *mdp::initial_pair_dist(&mdp, &pi).probs());
        assert!((phi_pi(&f, &mdp, &pi) - mdp::occupancy(&mdp, &pi).probs()).amax() < 1e-15);

        // point-mass rho_0 with a deterministic policy
        let mdp0 = mdp.with_initial_dist(DVector::from_vec(vec![0.0, 1.0, 0.0])).unwrap();
        let det = Policy::deterministic(&[0, 1, 0], 2).unwrap();
        let g = realizable_random_features(&mdp0, &det, 3, 1, 1.0).unwrap();
        assert_eq!(phi0(&g, &mdp0, &det), g.feature(mdp0.pair(1, 1)));

        // uniform everything
        let mdpu = mdp.with_initial_dist(DVector::from_element(3, 1.0 / 3.0)).unwrap();
        let p0 = phi0(&f, &mdpu, &Policy::uniform(3, 2));
        assert!(p0.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));

        // gamma = 0 collapses the occupancy
        let myopic = mdp.with_gamma(0.0).unwrap();
        let g = realizable_random_features(&myopic, &pi, 3, 2, 1.0).unwrap();
        assert!((phi_pi(&g, &myopic, &pi) - phi0(&g, &myopic, &pi)).amax() < 1e-15);
    }
}
