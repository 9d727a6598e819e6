//! Seeded instance families used by tests, audits, and sweeps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::features::AbstractionSpec;
use crate::mdp::{self, Policy, StateActionDist, TabularMdp};
use crate::rng;

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// A flat-Dirichlet draw of length `n`.
fn dirichlet<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// A strictly positive, moderately spread distribution (weights in `[0.5, 1.5)`).
fn spread<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize(&mut v);
    v
}

/// Random MDP with Dirichlet transitions, rewards in `[0, 1]`, `R_max = 1`,
/// deterministic rewards, and a random initial distribution.
pub fn random_mdp(num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> TabularMdp {
    random_mdp_with_noise(num_states, num_actions, gamma, 0.0, seed)
}

/// As [`random_mdp`] but with uniform reward noise of the given half width;
/// mean rewards are drawn from `[h, 1 - h]`.
pub fn random_mdp_with_noise(num_states: usize, num_actions: usize, gamma: f64, halfwidth: f64, seed: u64) -> TabularMdp {
    assert!((0.0..0.5).contains(&halfwidth));
    let mut rng = rng::substream(seed, "mdp");
    let n = num_states * num_actions;
    let mut t = DMatrix::zeros(n, num_states);
    for p in 0..n {
        let row = dirichlet(&mut rng, num_states);
        t.row_mut(p).copy_from_slice(&row);
    }
    let r = DVector::from_fn(n, |_, _| halfwidth + (1.0 - 2.0 * halfwidth) * rng.random::<f64>());
    let rho = DVector::from_vec(spread(&mut rng, num_states));
    TabularMdp::new(num_states, num_actions, t, r, rho, gamma, 1.0, halfwidth).expect("generator output is valid")
}

pub fn random_policy(num_states: usize, num_actions: usize, seed: u64) -> Policy {
    let mut rng = rng::substream(seed, "policy");
    let mut m = DMatrix::zeros(num_states, num_actions);
    for s in 0..num_states {
        m.row_mut(s).copy_from_slice(&spread(&mut rng, num_actions));
    }
    Policy::new(m).expect("generator output is valid")
}

/// Strictly positive data distribution over `num_pairs` pairs.
pub fn random_dist(num_pairs: usize, seed: u64) -> StateActionDist {
    let mut rng = rng::substream(seed, "mu_d");
    StateActionDist::new(DVector::from_vec(spread(&mut rng, num_pairs))).expect("generator output is valid")
}

/// Two states, one action, deterministic swap, rewards `(1, 0)`, start in 0.
pub fn alternating_chain(gamma: f64) -> TabularMdp {
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
    .expect("valid chain")
}

/// Random abstraction with every block nonempty.
pub fn random_abstraction(num_states: usize, num_blocks: usize, seed: u64) -> AbstractionSpec {
    assert!(num_blocks >= 1 && num_blocks <= num_states);
    let mut rng = rng::substream(seed, "abstraction");
    let mut map: Vec<usize> = (0..num_states).map(|s| if s < num_blocks { s } else { rng.random_range(0..num_blocks) }).collect();
    // shuffle so the first K states are not always singleton representatives
    for i in (1..num_states).rev() {
        let j = rng.random_range(0..=i);
        map.swap(i, j);
    }
    AbstractionSpec::new(map, num_blocks).expect("every block is hit")
}

/// Random policy whose action law depends on `s` only through `psi(s)`.
pub fn block_consistent_policy(spec: &AbstractionSpec, num_actions: usize, seed: u64) -> Policy {
    let block_pi = random_policy(spec.num_blocks(), num_actions, seed);
    let m = DMatrix::from_fn(spec.num_states(), num_actions, |s, a| block_pi.prob(spec.block(s), a));
    Policy::new(m).expect("rows copied from a valid policy")
}

/// MDP whose transition rows and rewards are identical across the states of
/// each block, so abstraction features are Bellman complete for any policy.
pub fn block_homogeneous_mdp(spec: &AbstractionSpec, num_actions: usize, gamma: f64, seed: u64) -> TabularMdp {
    let ns = spec.num_states();
    let mut rng = rng::substream(seed, "block_mdp");
    let nk = spec.num_blocks();
    let block_rows: Vec<Vec<f64>> = (0..nk * num_actions).map(|_| dirichlet(&mut rng, ns)).collect();
    let block_r: Vec<f64> = (0..nk * num_actions).map(|_| rng.random::<f64>()).collect();
    let mut t = DMatrix::zeros(ns * num_actions, ns);
    let mut r = DVector::zeros(ns * num_actions);
    for s in 0..ns {
        for a in 0..num_actions {
            let kb = spec.block(s) * num_actions + a;
            t.row_mut(s * num_actions + a).copy_from_slice(&block_rows[kb]);
            r[s * num_actions + a] = block_r[kb];
        }
    }
    let rho = DVector::from_vec(spread(&mut rng, ns));
    TabularMdp::new(ns, num_actions, t, r, rho, gamma, 1.0, 0.0).expect("generator output is valid")
}

/// MDP with arbitrary dynamics but block-constant `Q^pi` for the returned
/// block-consistent policy (a `Q^pi`-irrelevant abstraction).
///
/// `Q` is drawn in `[c, c + 1]` with `c = gamma / (1 - gamma)` and rewards are
/// back-solved as `R = Q - gamma P^pi Q`, which keeps them in
/// `[0, 1 + gamma]`.
pub fn q_irrelevant_instance(spec: &AbstractionSpec, num_actions: usize, gamma: f64, seed: u64) -> (TabularMdp, Policy) {
    let ns = spec.num_states();
    let n = ns * num_actions;
    let base = random_mdp(ns, num_actions, gamma, seed);
    let pi = block_consistent_policy(spec, num_actions, seed);
    let mut rng = rng::substream(seed, "block_q");
    let c = gamma / (1.0 - gamma);
    let block_q: Vec<f64> = (0..spec.num_blocks() * num_actions).map(|_| c + rng.random::<f64>()).collect();
    let q = DVector::from_fn(n, |p, _| block_q[spec.block(p / num_actions) * num_actions + p % num_actions]);
    let r = &q - mdp::forward_kernel_pi(&base, &pi) * &q * gamma;
    let r = r.map(|x| x.clamp(0.0, 1.0 + gamma));
    let mdp = TabularMdp::new(
        ns,
        num_actions,
        base.transition().clone(),
        r,
        base.initial_dist().clone(),
        gamma,
        1.0 + gamma,
        0.0,
    )
    .expect("back-solved rewards lie in [0, 1 + gamma]");
    (mdp, pi)
}

/// Stationary distribution of the pair chain `K^pi` (assumed ergodic).
pub fn stationary_pair_dist(mdp: &TabularMdp, pi: &Policy) -> StateActionDist {
    let n = mdp.num_pairs();
    let k = mdp::transition_kernel_pi(mdp, pi);
    let mut sys = DMatrix::identity(n, n) - k;
    let mut rhs = DVector::zeros(n);
    sys.row_mut(n - 1).fill(1.0);
    rhs[n - 1] = 1.0;
    let d = sys.lu().solve(&rhs).expect("ergodic chain has a unique stationary law");
    let mut d = d.map(|x| x.max(0.0));
    d /= d.sum();
    StateActionDist::new(d).expect("normalized")
}

/// State marginal of a pair distribution.
pub fn state_marginal(dist: &StateActionDist, num_actions: usize) -> DVector<f64> {
    let ns = dist.len() / num_actions;
    let mut v = DVector::from_fn(ns, |s, _| (0..num_actions).map(|a| dist.probs()[s * num_actions + a]).sum::<f64>());
    v /= v.sum();
    v
}
