//! i.i.d. transition datasets `(s, a) ~ mu^D, r ~ R(s, a), s' ~ P(.|s, a), a' ~ pi(.|s')`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdp::{self, Policy, StateActionDist, TabularMdp};
use crate::rng;

/// Random words consumed per transition (four `f64` draws).
const WORDS_PER_TRANSITION: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub a_next: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    transitions: Vec<Transition>,
    seed: u64,
    mu_d: StateActionDist,
}

impl Dataset {
    /// Wraps transitions loaded from elsewhere, checking them against `mdp`.
    pub fn new(transitions: Vec<Transition>, seed: u64, mu_d: StateActionDist, mdp: &TabularMdp) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        mu_d.check_len(mdp.num_pairs())?;
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        for (i, t) in transitions.iter().enumerate() {
            if t.s >= ns || t.s_next >= ns || t.a >= na || t.a_next >= na {
                return Err(Error::Config(format!("transition {i} has an index out of range: {t:?}")));
            }
            if !(0.0..=mdp.r_max()).contains(&t.r) {
                return Err(Error::Config(format!("transition {i} has reward {} outside [0, R_max]", t.r)));
            }
        }
        Ok(Self { transitions, seed, mu_d })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mu_d(&self) -> &StateActionDist {
        &self.mu_d
    }
}

/// Cumulative sums of a row of probabilities.
fn cumulative(probs: impl Iterator<Item = f64>) -> Vec<f64> {
    probs
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

/// Inverse-CDF draw that never lands on a zero-probability entry.
fn draw(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().expect("nonempty cdf");
    let x = u * total;
    let idx = cdf.partition_point(|&c| c <= x);
    if idx < cdf.len() {
        return idx;
    }
    // u * total rounded up to total: fall back to the last entry with mass
    let mut i = cdf.len() - 1;
    while i > 0 && cdf[i] == cdf[i - 1] {
        i -= 1;
    }
    i
}

struct Samplers {
    pairs: Vec<f64>,
    next_state: Vec<Vec<f64>>,
    action: Vec<Vec<f64>>,
}

impl Samplers {
    fn new(mdp: &TabularMdp, pi: &Policy, mu_d: &StateActionDist) -> Self {
        Self {
            pairs: cumulative(mu_d.probs().iter().copied()),
            next_state: (0..mdp.num_pairs())
                .map(|p| cumulative(mdp.transition().row(p).iter().copied()))
                .collect(),
            action: (0..mdp.num_states())
                .map(|s| cumulative(pi.action_probs().row(s).iter().copied()))
                .collect(),
        }
    }
}

/// Draws `n` i.i.d. tuples. Item `i` uses its own counter-addressed slice
/// of the `"dataset"` substream, so the result is bit-identical for a given
/// seed regardless of how generation is split across threads.
pub fn sample_dataset(mdp: &TabularMdp, pi: &Policy, mu_d: &StateActionDist, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    pi.check_compatible(mdp)?;
    mu_d.check_len(mdp.num_pairs())?;
    let samplers = Samplers::new(mdp, pi, mu_d);
    let na = mdp.num_actions();
    let transitions: Vec<Transition> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::substream_at(seed, "dataset", i, WORDS_PER_TRANSITION);
            let (u_pair, u_r, u_next, u_act): (f64, f64, f64, f64) = (g.random(), g.random(), g.random(), g.random());
            let pair = draw(&samplers.pairs, u_pair);
            let s_next = draw(&samplers.next_state[pair], u_next);
            Transition {
                s: pair / na,
                a: pair % na,
                r: mdp.reward_from_uniform(pair, u_r),
                s_next,
                a_next: draw(&samplers.action[s_next], u_act),
            }
        })
        .collect();
    Ok(Dataset {
        transitions,
        seed,
        mu_d: mu_d.clone(),
    })
}

/// The on-policy data distribution `mu^pi`.
pub fn onpolicy_mu_d(mdp: &TabularMdp, pi: &Policy) -> StateActionDist {
    mdp::occupancy(mdp, pi)
}
