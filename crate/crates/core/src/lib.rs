//! Cooperative online learning in tabular episodic MDPs.
//!
//! A team of `m` agents plays the same finite-horizon MDP each episode and
//! shares all observations. The crate provides
//!
//! - [`mdp`]: exact MDP representation, policy evaluation, occupancy measures
//!   and best-in-hindsight comparators,
//! - [`env`]: team episode execution under fresh and non-fresh randomness plus
//!   hard-instance environment builders,
//! - [`estimators`]: visit counters, team reach probabilities and
//!   importance-weighted cost estimators,
//! - [`omd`]: relative-entropy projections onto occupancy polytopes,
//!   transition confidence sets and upper occupancy bounds,
//! - [`algorithms`]: the six cooperative learners behind one [`Learner`]
//!   contract,
//! - [`harness`]: configuration, seeded replications and exact regret
//!   accounting.

pub mod algorithms;
pub mod env;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod mdp;
pub mod omd;
pub mod rng;

pub use algorithms::{Learner, LearnerConfig};
pub use env::{RandomnessMode, TeamTrajectory};
pub use error::{Error, Result};
pub use mdp::{CostFunction, CostProcess, Mdp, OccupancyMeasure, Policy};
