//! Seeded experiment drivers: problem construction from declarative specs,
//! Monte-Carlo sweeps, and the property audit.

mod audit;
mod sweep;

pub use audit::{counterexample_instance, verify_propositions, AuditRow, AuditSuite, AuditTable};
pub use sweep::{fit_log_slope, fit_rate_slope, run_sweep, run_sweep_on, EstimatorSpec, SweepAggregate, SweepCell, SweepConfig, SweepResult, SweepSettings};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, AbstractionSpec, FeatureMap};
use crate::generators;
use crate::io;
use crate::mdp::{Policy, StateActionDist, TabularMdp};
use crate::rng::derive_seed;
use crate::sampling;

fn default_feature_bound() -> f64 {
    1.0
}

/// Where the MDP comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSpec {
    Random {
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        #[serde(default)]
        reward_noise: f64,
    },
    /// Random dynamics, every mean reward equal to `reward`.
    ConstantReward {
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        reward: f64,
        #[serde(default)]
        reward_noise: f64,
    },
    AlternatingChain {
        gamma: f64,
    },
    /// Dynamics and rewards shared within blocks; needs `abstraction`.
    BlockHomogeneous {
        num_states: usize,
        num_actions: usize,
        gamma: f64,
    },
    /// Block-constant `Q^pi`; needs `abstraction` and `policy = from_instance`.
    QIrrelevant {
        num_states: usize,
        num_actions: usize,
        gamma: f64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Uniform,
    Random,
    /// Random, constant within abstraction blocks.
    BlockConsistent,
    Deterministic { actions: Vec<usize> },
    /// The policy produced together with a `q_irrelevant` MDP.
    FromInstance,
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    Tabular,
    Abstraction,
    /// A single constant feature.
    Bias,
    RealizableRandom {
        dim: usize,
        #[serde(default = "default_feature_bound")]
        feature_bound: f64,
    },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MuDSpec {
    Uniform,
    Random,
    /// The discounted occupancy of the target policy.
    OnPolicy,
    /// Stationary law of the state-action chain under the target policy.
    Stationary,
    /// Uniform over the listed pairs only.
    UniformOnPairs { pairs: Vec<usize> },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AbstractionSource {
    Random { num_blocks: usize },
    File { path: PathBuf },
}

/// Declarative description of one evaluation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub mdp: MdpSpec,
    pub policy: PolicySpec,
    pub features: FeatureSpec,
    pub mu_d: MuDSpec,
    #[serde(default)]
    pub abstraction: Option<AbstractionSource>,
}

/// A fully materialized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub mdp: TabularMdp,
    pub pi: Policy,
    pub fmap: FeatureMap,
    pub mu_d: StateActionDist,
    pub abstraction: Option<AbstractionSpec>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ProblemSpec {
    /// Builds the problem. Every generator draws from its own substream of
    /// `seed`; relative file paths are resolved against `base_dir`.
    pub fn build(&self, seed: u64, base_dir: &Path) -> Result<Problem> {
        let mdp_seed = derive_seed(seed, "instance");
        let need_abs = |what: &str| Error::Config(format!("{what} requires an `abstraction` entry"));

        let standalone = match &self.mdp {
            MdpSpec::Random {
                num_states,
                num_actions,
                gamma,
                reward_noise,
            } => {
                check_gamma(*gamma)?;
                if !(0.0..0.5).contains(reward_noise) {
                    return Err(Error::Config(format!("reward_noise = {reward_noise} must lie in [0, 0.5)")));
                }
                check_sizes(*num_states, *num_actions)?;
                Some(generators::random_mdp_with_noise(*num_states, *num_actions, *gamma, *reward_noise, mdp_seed))
            }
            MdpSpec::ConstantReward {
                num_states,
                num_actions,
                gamma,
                reward,
                reward_noise,
            } => {
                check_gamma(*gamma)?;
                check_sizes(*num_states, *num_actions)?;
                let base = generators::random_mdp(*num_states, *num_actions, *gamma, mdp_seed);
                Some(TabularMdp::new(
                    *num_states,
                    *num_actions,
                    base.transition().clone(),
                    nalgebra::DVector::from_element(num_states * num_actions, *reward),
                    base.initial_dist().clone(),
                    *gamma,
                    1.0,
                    *reward_noise,
                )?)
            }
            MdpSpec::AlternatingChain { gamma } => {
                check_gamma(*gamma)?;
                Some(generators::alternating_chain(*gamma))
            }
            MdpSpec::File { path } => Some(io::load_mdp(&resolve(base_dir, path))?),
            MdpSpec::BlockHomogeneous { .. } | MdpSpec::QIrrelevant { .. } => None,
        };
        let num_states = match (&standalone, &self.mdp) {
            (Some(m), _) => m.num_states(),
            (None, MdpSpec::BlockHomogeneous { num_states, .. } | MdpSpec::QIrrelevant { num_states, .. }) => *num_states,
            (None, _) => unreachable!("every other variant builds its MDP directly"),
        };

        let abstraction = match &self.abstraction {
            None => None,
            Some(AbstractionSource::Random { num_blocks }) => {
                if *num_blocks == 0 || *num_blocks > num_states {
                    return Err(Error::Config(format!(
                        "abstraction.num_blocks = {num_blocks} must lie in 1..={num_states}"
                    )));
                }
                Some(generators::random_abstraction(num_states, *num_blocks, derive_seed(seed, "abstraction")))
            }
            Some(AbstractionSource::File { path }) => Some(io::load_abstraction(&resolve(base_dir, path))?),
        };

        let (mdp, paired_pi) = match (&self.mdp, standalone) {
            (_, Some(m)) => (m, None),
            (MdpSpec::BlockHomogeneous { num_actions, gamma, .. }, None) => {
                check_gamma(*gamma)?;
                check_sizes(num_states, *num_actions)?;
                let spec = abstraction.as_ref().ok_or_else(|| need_abs("mdp kind block_homogeneous"))?;
                (generators::block_homogeneous_mdp(spec, *num_actions, *gamma, mdp_seed), None)
            }
            (MdpSpec::QIrrelevant { num_actions, gamma, .. }, None) => {
                check_gamma(*gamma)?;
                check_sizes(num_states, *num_actions)?;
                let spec = abstraction.as_ref().ok_or_else(|| need_abs("mdp kind q_irrelevant"))?;
                let (m, p) = generators::q_irrelevant_instance(spec, *num_actions, *gamma, mdp_seed);
                (m, Some(p))
            }
            (_, None) => unreachable!("standalone MDPs are handled above"),
        };
        if let Some(spec) = &abstraction {
            if spec.num_states() != mdp.num_states() {
                return Err(Error::Config(format!(
                    "abstraction covers {} states but the MDP has {}",
                    spec.num_states(),
                    mdp.num_states()
                )));
            }
        }
        let (ns, na) = (mdp.num_states(), mdp.num_actions());

        let pi = match (&self.policy, paired_pi) {
            (PolicySpec::FromInstance, Some(p)) => p,
            (PolicySpec::FromInstance, None) => {
                return Err(Error::Config("policy kind from_instance needs mdp kind q_irrelevant".into()))
            }
            (_, Some(_)) => return Err(Error::Config("mdp kind q_irrelevant needs policy kind from_instance".into())),
            (PolicySpec::Uniform, None) => Policy::uniform(ns, na),
            (PolicySpec::Random, None) => generators::random_policy(ns, na, derive_seed(seed, "policy")),
            (PolicySpec::BlockConsistent, None) => {
                let spec = abstraction.as_ref().ok_or_else(|| need_abs("policy kind block_consistent"))?;
                generators::block_consistent_policy(spec, na, derive_seed(seed, "policy"))
            }
            (PolicySpec::Deterministic { actions }, None) => Policy::deterministic(actions, na)?,
            (PolicySpec::File { path }, None) => io::load_policy(&resolve(base_dir, path))?,
        };

        let fmap = match &self.features {
            FeatureSpec::Tabular => features::tabular_features(&mdp),
            FeatureSpec::Abstraction => {
                let spec = abstraction.as_ref().ok_or_else(|| need_abs("feature kind abstraction"))?;
                features::abstraction_features(&mdp, spec)?
            }
            FeatureSpec::Bias => FeatureMap::new(nalgebra::DMatrix::from_element(mdp.num_pairs(), 1, 1.0), 1.0)?,
            FeatureSpec::RealizableRandom { dim, feature_bound } => {
                features::realizable_random_features(&mdp, &pi, *dim, derive_seed(seed, "features"), *feature_bound)?
            }
            FeatureSpec::File { path } => io::load_features(&resolve(base_dir, path))?,
        };

        let mu_d = match &self.mu_d {
            MuDSpec::Uniform => StateActionDist::uniform(mdp.num_pairs()),
            MuDSpec::Random => generators::random_dist(mdp.num_pairs(), derive_seed(seed, "mu_d")),
            MuDSpec::OnPolicy => sampling::onpolicy_mu_d(&mdp, &pi),
            MuDSpec::Stationary => generators::stationary_pair_dist(&mdp, &pi),
            MuDSpec::UniformOnPairs { pairs } => {
                let n = mdp.num_pairs();
                if pairs.is_empty() || pairs.iter().any(|&p| p >= n) {
                    return Err(Error::Config(format!("mu_d.pairs must be a nonempty subset of 0..{n}")));
                }
                let mut v = nalgebra::DVector::zeros(n);
                for &p in pairs {
                    v[p] = 1.0;
                }
                let total = v.sum();
                StateActionDist::new(v / total)?
            }
            MuDSpec::File { path } => io::load_distribution(&resolve(base_dir, path))?,
        };

        Ok(Problem {
            mdp,
            pi,
            fmap,
            mu_d,
            abstraction,
        })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Config(format!("gamma = {gamma} must lie in [0, 1)")))
    }
}

fn check_sizes(num_states: usize, num_actions: usize) -> Result<()> {
    if num_states == 0 || num_actions == 0 {
        return Err(Error::Config("num_states and num_actions must be positive".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(json: &str) -> ProblemSpec {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn random_problem_is_deterministic() {
        let s = spec(
            r#"{"mdp": {"kind": "random", "num_states": 4, "num_actions": 2, "gamma": 0.9},
                "policy": {"kind": "random"},
                "features": {"kind": "realizable_random", "dim": 3},
                "mu_d": {"kind": "random"}}"#,
        );
        let a = s.build(7, Path::new(".")).unwrap();
        let b = s.build(7, Path::new(".")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mdp, s.build(8, Path::new(".")).unwrap().mdp);
        assert!(features::check_realizability(&a.mdp, &a.pi, &a.fmap, 1e-8).unwrap().realizable);
    }

    #[test]
    fn q_irrelevant_needs_paired_policy() {
        let mut s = spec(
            r#"{"mdp": {"kind": "q_irrelevant", "num_states": 5, "num_actions": 2, "gamma": 0.8},
                "policy": {"kind": "from_instance"},
                "features": {"kind": "abstraction"},
                "mu_d": {"kind": "uniform"},
                "abstraction": {"kind": "random", "num_blocks": 2}}"#,
        );
        let p = s.build(1, Path::new(".")).unwrap();
        assert!(features::check_realizability(&p.mdp, &p.pi, &p.fmap, 1e-8).unwrap().realizable);
        s.policy = PolicySpec::Uniform;
        assert!(matches!(s.build(1, Path::new(".")), Err(Error::Config(_))));
        s.abstraction = None;
        s.policy = PolicySpec::FromInstance;
        assert!(matches!(s.build(1, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ProblemSpec, _> = serde_json::from_str(
            r#"{"mdp": {"kind": "alternating_chain", "gamma": 0.5, "extra": 1},
                "policy": {"kind": "uniform"}, "features": {"kind": "tabular"}, "mu_d": {"kind": "uniform"}}"#,
        );
        assert!(r.is_err());
    }

    #[test]
    fn uniform_on_pairs_leaves_gaps() {
        let s = spec(
            r#"{"mdp": {"kind": "random", "num_states": 2, "num_actions": 2, "gamma": 0.5},
                "policy": {"kind": "uniform"}, "features": {"kind": "tabular"},
                "mu_d": {"kind": "uniform_on_pairs", "pairs": [0, 1, 2]}}"#,
        );
        let p = s.build(0, Path::new(".")).unwrap();
        assert_eq!(p.mu_d.probs().as_slice(), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn file_sources_resolve_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mdp = generators::random_mdp(3, 2, 0.9, 3);
        io::save_mdp(&dir.path().join("m.json"), &mdp).unwrap();
        let s = spec(
            r#"{"mdp": {"kind": "file", "path": "m.json"},
                "policy": {"kind": "uniform"}, "features": {"kind": "tabular"}, "mu_d": {"kind": "uniform"}}"#,
        );
        assert_eq!(s.build(0, dir.path()).unwrap().mdp, mdp);
        assert!(matches!(s.build(0, Path::new("/nonexistent")), Err(Error::Io { .. })));
    }
}
