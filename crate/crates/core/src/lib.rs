//! Off-policy evaluation with linear features on tabular MDPs: exact
//! oracles, LSTDQ from population or sampled moments, and coverage
//! diagnostics that predict how well the estimator does.

pub mod coverage;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod features;
pub mod generators;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use estimators::{LossMinConfig, LstdqSolution, MomentSet, NextFeatureMode, Provenance, SolverKind};
pub use features::{AbstractionSpec, FeatureMap};
pub use mdp::{Policy, StateActionDist, TabularMdp};
pub use sampling::{Dataset, Transition};
