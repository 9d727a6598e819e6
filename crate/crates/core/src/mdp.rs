//! Tabular MDPs, policies, and exact dynamic-programming oracles.
//!
//! State-action pairs are flattened row-major with the state outer:
//! pair `(s, a)` lives at index `s * num_actions + a`. Every module in the
//! crate uses this order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance for probability vectors summing to one.
pub const SIMPLEX_TOL: f64 = 1e-12;

fn check_simplex(values: impl IntoIterator<Item = f64>, what: &str) -> Result<(), String> {
    let mut sum = 0.0;
    for (i, v) in values.into_iter().enumerate() {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(format!("{what}: entry {i} is {v}, expected a probability"));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("{what}: sums to {sum}, expected 1"));
    }
    Ok(())
}

/// A finite discounted MDP with bounded, optionally noisy rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Row `s * A + a` holds `P(. | s, a)`.
    transition: DMatrix<f64>,
    mean_reward: DVector<f64>,
    reward_noise_halfwidth: f64,
    r_max: f64,
    gamma: f64,
    initial_dist: DVector<f64>,
}

impl TabularMdp {
    /// Builds and validates an MDP.
    ///
    /// `transition` has one row per state-action pair (state outer) and one
    /// column per next state; `mean_reward` has one entry per pair.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: DMatrix<f64>,
        mean_reward: DVector<f64>,
        initial_dist: DVector<f64>,
        gamma: f64,
        r_max: f64,
        reward_noise_halfwidth: f64,
    ) -> Result<Self> {
        let bad = |m: String| Error::InvalidMdp(m);
        if num_states == 0 || num_actions == 0 {
            return Err(bad("need at least one state and one action".into()));
        }
        let pairs = num_states * num_actions;
        if transition.shape() != (pairs, num_states) {
            return Err(bad(format!(
                "transition has shape {:?}, expected ({pairs}, {num_states})",
                transition.shape()
            )));
        }
        if mean_reward.len() != pairs {
            return Err(bad(format!("mean_reward has {} entries, expected {pairs}", mean_reward.len())));
        }
        if initial_dist.len() != num_states {
            return Err(bad(format!("initial_dist has {} entries, expected {num_states}", initial_dist.len())));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(bad(format!("gamma = {gamma} must lie in [0, 1)")));
        }
        if !(r_max > 0.0) || !r_max.is_finite() {
            return Err(bad(format!("r_max = {r_max} must be positive")));
        }
        if !(reward_noise_halfwidth >= 0.0) {
            return Err(bad(format!("reward_noise_halfwidth = {reward_noise_halfwidth} must be nonnegative")));
        }
        for p in 0..pairs {
            check_simplex(transition.row(p).iter().copied(), &format!("P[{}][{}]", p / num_actions, p % num_actions))
                .map_err(bad)?;
            let r = mean_reward[p];
            if !(r - reward_noise_halfwidth >= 0.0 && r + reward_noise_halfwidth <= r_max) {
                return Err(bad(format!(
                    "reward {r} +/- {reward_noise_halfwidth} at pair {p} leaves [0, {r_max}]"
                )));
            }
        }
        check_simplex(initial_dist.iter().copied(), "initial_dist").map_err(bad)?;
        Ok(Self {
            num_states,
            num_actions,
            transition,
            mean_reward,
            reward_noise_halfwidth,
            r_max,
            gamma,
            initial_dist,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// Flattened index of `(s, a)`.
    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn transition_prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(self.pair(s, a), s_next)]
    }

    pub fn mean_reward(&self) -> &DVector<f64> {
        &self.mean_reward
    }

    pub fn reward_noise_halfwidth(&self) -> f64 {
        self.reward_noise_halfwidth
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    /// `V_max = R_max / (1 - gamma)`.
    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    /// Reward for `pair` given a uniform draw `u` in `[0, 1)`.
    pub fn reward_from_uniform(&self, pair: usize, u: f64) -> f64 {
        let h = self.reward_noise_halfwidth;
        if h == 0.0 {
            return self.mean_reward[pair];
        }
        (self.mean_reward[pair] + h * (2.0 * u - 1.0)).clamp(0.0, self.r_max)
    }

    /// Same MDP with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            self.mean_reward.clone(),
            self.initial_dist.clone(),
            gamma,
            self.r_max,
            self.reward_noise_halfwidth,
        )
    }

    /// Same MDP with a different initial distribution.
    pub fn with_initial_dist(&self, initial_dist: DVector<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            self.mean_reward.clone(),
            initial_dist,
            self.gamma,
            self.r_max,
            self.reward_noise_halfwidth,
        )
    }
}

/// A stationary stochastic policy `pi(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    action_probs: DMatrix<f64>,
}

impl Policy {
    /// `action_probs` is `num_states x num_actions`, rows on the simplex.
    pub fn new(action_probs: DMatrix<f64>) -> Result<Self> {
        if action_probs.nrows() == 0 || action_probs.ncols() == 0 {
            return Err(Error::InvalidPolicy("empty action table".into()));
        }
        for s in 0..action_probs.nrows() {
            check_simplex(action_probs.row(s).iter().copied(), &format!("pi[{s}]"))
                .map_err(Error::InvalidPolicy)?;
        }
        Ok(Self { action_probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            action_probs: DMatrix::from_element(num_states, num_actions, 1.0 / num_actions as f64),
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        let mut m = DMatrix::zeros(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range at state {s}")));
            }
            m[(s, a)] = 1.0;
        }
        Self::new(m)
    }

    pub fn action_probs(&self) -> &DMatrix<f64> {
        &self.action_probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.action_probs[(s, a)]
    }

    pub fn num_states(&self) -> usize {
        self.action_probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.action_probs.ncols()
    }

    pub(crate) fn check_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        if self.action_probs.shape() != (mdp.num_states(), mdp.num_actions()) {
            return Err(Error::DimensionMismatch(format!(
                "policy is {:?}, MDP has {} states and {} actions",
                self.action_probs.shape(),
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        Ok(())
    }
}

/// A probability distribution over flattened state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionDist {
    probs: DVector<f64>,
}

impl StateActionDist {
    pub fn new(probs: DVector<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        check_simplex(probs.iter().copied(), "state-action distribution").map_err(Error::InvalidDistribution)?;
        Ok(Self { probs })
    }

    /// Wraps the output of an exact solve: roundoff negatives are zeroed.
    pub(crate) fn from_solution(mut probs: DVector<f64>) -> Self {
        probs.apply(|p| *p = p.max(0.0));
        Self { probs }
    }

    pub fn uniform(num_pairs: usize) -> Self {
        Self {
            probs: DVector::from_element(num_pairs, 1.0 / num_pairs as f64),
        }
    }

    pub fn point_mass(num_pairs: usize, pair: usize) -> Self {
        let mut probs = DVector::zeros(num_pairs);
        probs[pair] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &DVector<f64> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    pub(crate) fn check_len(&self, pairs: usize) -> Result<()> {
        if self.probs.len() != pairs {
            return Err(Error::DimensionMismatch(format!(
                "distribution has {} entries, expected {pairs}",
                self.probs.len()
            )));
        }
        Ok(())
    }
}

/// Markov kernel over state-action pairs induced by `pi`, in column
/// convention: entry `[(s', a'), (s, a)] = P(s' | s, a) pi(a' | s')`, so
/// every column sums to one.
pub fn transition_kernel_pi(mdp: &TabularMdp, pi: &Policy) -> DMatrix<f64> {
    forward_kernel_pi(mdp, pi).transpose()
}

/// Row-convention kernel: row `(s, a)` is the law of the next pair.
pub fn forward_kernel_pi(mdp: &TabularMdp, pi: &Policy) -> DMatrix<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let n = mdp.num_pairs();
    let mut k = DMatrix::zeros(n, n);
    for p in 0..n {
        for s2 in 0..ns {
            let t = mdp.transition[(p, s2)];
            if t == 0.0 {
                continue;
            }
            for a2 in 0..na {
                k[(p, s2 * na + a2)] = t * pi.prob(s2, a2);
            }
        }
    }
    k
}

/// `Q^pi`, the fixed point of `Q = R + gamma P^pi Q`.
pub fn exact_q(mdp: &TabularMdp, pi: &Policy) -> DVector<f64> {
    let n = mdp.num_pairs();
    let sys = DMatrix::identity(n, n) - forward_kernel_pi(mdp, pi) * mdp.gamma();
    crate::linalg::solve_nonsingular(sys, mdp.mean_reward())
}

/// Initial pair distribution `mu_0^pi(s, a) = rho_0(s) pi(a | s)`.
pub fn initial_pair_dist(mdp: &TabularMdp, pi: &Policy) -> StateActionDist {
    let na = mdp.num_actions();
    let probs = DVector::from_fn(mdp.num_pairs(), |p, _| mdp.initial_dist()[p / na] * pi.prob(p / na, p % na));
    StateActionDist { probs }
}

/// Normalized discounted occupancy `mu^pi`, from the flow equation
/// `(I - gamma K) mu = (1 - gamma) mu_0^pi`.
pub fn occupancy(mdp: &TabularMdp, pi: &Policy) -> StateActionDist {
    let n = mdp.num_pairs();
    let g = mdp.gamma();
    let sys = DMatrix::identity(n, n) - transition_kernel_pi(mdp, pi) * g;
    let rhs = initial_pair_dist(mdp, pi).probs * (1.0 - g);
    StateActionDist::from_solution(crate::linalg::solve_nonsingular(sys, &rhs))
}

/// Both routes to `J(pi)`: `<mu_0^pi, Q^pi>` and `<mu^pi, R> / (1 - gamma)`.
pub fn exact_return_routes(mdp: &TabularMdp, pi: &Policy) -> (f64, f64) {
    let via_q = initial_pair_dist(mdp, pi).probs.dot(&exact_q(mdp, pi));
    let via_occ = occupancy(mdp, pi).probs.dot(mdp.mean_reward()) / (1.0 - mdp.gamma());
    (via_q, via_occ)
}

/// Expected discounted return `J(pi)`.
pub fn exact_return(mdp: &TabularMdp, pi: &Policy) -> f64 {
    let (via_q, via_occ) = exact_return_routes(mdp, pi);
    debug_assert!(
        (via_q - via_occ).abs() <= 1e-9 * mdp.v_max().max(1.0),
        "return routes disagree: {via_q} vs {via_occ}"
    );
    via_q
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two states, one action, deterministic swap; rewards (1, 0).
    pub(crate) fn alternating_chain(gamma: f64) -> TabularMdp {
        TabularMdp::new(
            2,
            1,
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            gamma,
            1.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn swap_chain_kernel_is_permutation() {
        let mdp = alternating_chain(0.5);
        let k = transition_kernel_pi(&mdp, &Policy::uniform(2, 1));
        assert_eq!(k, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn alternating_chain_values() {
        let mdp = alternating_chain(0.5);
        let pi = Policy::uniform(2, 1);
        let q = exact_q(&mdp, &pi);
        assert!((q[0] - 4.0 / 3.0).abs() < 1e-14 && (q[1] - 2.0 / 3.0).abs() < 1e-14);
        let mu = occupancy(&mdp, &pi);
        assert!((mu.probs()[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((mu.probs()[1] - 1.0 / 3.0).abs() < 1e-14);
        assert!((exact_return(&mdp, &pi) - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn myopic_case() {
        let mdp = alternating_chain(0.0);
        let pi = Policy::uniform(2, 1);
        assert_eq!(exact_q(&mdp, &pi), *mdp.mean_reward());
        assert_eq!(occupancy(&mdp, &pi), initial_pair_dist(&mdp, &pi));
    }

    #[test]
    fn constant_kernel_is_rank_one() {
        let rho = [0.2, 0.5, 0.3];
        let mut t = DMatrix::zeros(6, 3);
        for p in 0..6 {
            for s in 0..3 {
                t[(p, s)] = rho[s];
            }
        }
        let mdp = TabularMdp::new(3, 2, t, DVector::from_element(6, 0.5), DVector::from_vec(rho.to_vec()), 0.9, 1.0, 0.0)
            .unwrap();
        let pi = Policy::new(DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 0.1, 0.9, 1.0, 0.0])).unwrap();
        let k = transition_kernel_pi(&mdp, &pi);
        for c in 0..6 {
            for s in 0..3 {
                for a in 0..2 {
                    assert!((k[(s * 2 + a, c)] - rho[s] * pi.prob(s, a)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn constant_reward_gives_v_max() {
        let mut mdp = alternating_chain(0.9);
        mdp.mean_reward = DVector::from_element(2, 1.0);
        let j = exact_return(&mdp, &Policy::uniform(2, 1));
        assert!((j - mdp.v_max()).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed() {
        let t = DMatrix::from_row_slice(2, 2, &[0.5, 0.4, 1.0, 0.0]);
        let r = DVector::from_vec(vec![0.0, 0.0]);
        let rho = DVector::from_vec(vec![1.0, 0.0]);
        assert!(TabularMdp::new(2, 1, t, r.clone(), rho.clone(), 0.5, 1.0, 0.0).is_err());
        let t = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0, 0.0]);
        assert!(TabularMdp::new(2, 1, t.clone(), r.clone(), rho.clone(), 1.0, 1.0, 0.0).is_err());
        // noise would push rewards below zero
        assert!(TabularMdp::new(2, 1, t.clone(), r.clone(), rho.clone(), 0.5, 1.0, 0.1).is_err());
        assert!(TabularMdp::new(2, 1, t, r, DVector::from_vec(vec![0.5, 0.6]), 0.5, 1.0, 0.0).is_err());
        assert!(Policy::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.6])).is_err());
        assert!(StateActionDist::new(DVector::from_vec(vec![-0.1, 1.1])).is_err());
    }
}
