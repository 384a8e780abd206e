//! Named random streams derived from one master seed.
//!
//! Every consumer of randomness draws from its own stream so that changing
//! one part of an experiment (the learner, the number of agents, the
//! randomness mode) leaves the draws of the other parts untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream identifiers. The numeric layout is part of the reproducibility
/// contract; do not reorder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Instance construction (random MDPs, hidden good arms, cost sequences).
    Instance,
    /// Next-state draws, both fresh transitions and non-fresh realization tables.
    Environment,
    /// Stochastic cost noise.
    CostNoise,
    /// Learner-internal randomness (Monte-Carlo estimates).
    Learner,
    /// Action sampling of agent `v`.
    Agent(usize),
    /// Learner-side per-agent randomness (exploration coins of agent `v`).
    LearnerAgent(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Instance => 1,
            Stream::Environment => 2,
            Stream::CostNoise => 3,
            Stream::Learner => 4,
            Stream::Agent(v) => (1u64 << 32) | v as u64,
            Stream::LearnerAgent(v) => (2u64 << 32) | v as u64,
        }
    }
}

pub fn stream(master_seed: u64, which: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(which.id());
    rng
}

/// Per-agent action streams for agents `0..m`.
pub fn agent_streams(master_seed: u64, m: usize) -> Vec<SimRng> {
    (0..m).map(|v| stream(master_seed, Stream::Agent(v))).collect()
}
