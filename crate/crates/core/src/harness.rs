//! Experiment orchestration: JSON configuration, seeded replications, exact
//! regret accounting and CSV output.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::algorithms::{build_learner, Algorithm, Diagnostics, Learner, LearnerConfig};
use crate::env::{build_named_env, run_episode, EpisodeRngs, Environment, RandomnessMode, TeamTrajectory, ENVIRONMENTS};
use crate::error::{shape_err, Error, Result};
use crate::mdp::{best_in_hindsight, evaluate_policy, optimal_policy, CostProcess, Policy};
use crate::rng::{stream, Stream};

/// Exact results CSV header.
pub const CSV_HEADER: &str = "algo,env,mode,m,seed,episode,agent_max_regret,comparator_cum,wallclock_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSpec {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

/// One agent count or a list of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AgentCounts {
    One(usize),
    Many(Vec<usize>),
}

impl AgentCounts {
    pub fn values(&self) -> Vec<usize> {
        match self {
            AgentCounts::One(m) => vec![*m],
            AgentCounts::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub algo: AlgoSpec,
    pub mode: RandomnessMode,
    #[serde(rename = "K")]
    pub episodes: usize,
    pub m: AgentCounts,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Record elapsed milliseconds per episode. Off by default so that output
    /// files are reproducible byte for byte.
    #[serde(default)]
    pub wallclock: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        self.algo.name.parse()
    }

    /// Checks everything that can be checked without running: ranges, names,
    /// algorithm/mode compatibility and learner parameters.
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let ms = self.m.values();
        if ms.is_empty() {
            return Err(Error::Config("m list must not be empty".into()));
        }
        if ms.contains(&0) {
            return Err(Error::Config("m values must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !ENVIRONMENTS.iter().any(|(n, _)| *n == self.env.name) {
            return Err(Error::Config(format!("unknown environment '{}'", self.env.name)));
        }
        self.algorithm()?.check_mode(self.mode)?;
        let env = build_environment(self, self.seeds[0])?;
        for m in ms {
            let cfg = self.learner_config(&env, m)?;
            if cfg.algorithm == Algorithm::CoopNfUobReps {
                let (h, _, a) = cfg.shape.sah();
                let need = (h * a).max((self.episodes as f64).sqrt().ceil() as usize);
                if m < need {
                    return Err(Error::Config(format!(
                        "coop-nf-uob-reps needs m >= max(H*A, ceil(sqrt(K))) = {need}, got m = {m}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn learner_config(&self, env: &Environment, m: usize) -> Result<LearnerConfig> {
        let mut cfg = LearnerConfig::new(self.algorithm()?, self.mode, env.mdp.shape(), self.episodes, m);
        cfg.apply_params(&self.algo.params)?;
        Ok(cfg)
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }
}

/// Builds the environment of `seed`. It depends only on the seed, so every
/// agent count sees the same instance and cost sequence.
pub fn build_environment(config: &ExperimentConfig, seed: u64) -> Result<Environment> {
    let mut rng = stream(seed, Stream::Instance);
    let env = build_named_env(&config.env.name, &config.env.params, config.episodes, &mut rng)?;
    env.costs.validate(&env.mdp, config.episodes)?;
    Ok(env)
}

/// Exact per-episode, per-agent values and the regret series of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RegretRecord {
    pub algo: String,
    pub env: String,
    pub mode: RandomnessMode,
    pub m: usize,
    pub seed: u64,
    /// `values[[k, v]]`: expected cost of agent `v`'s episode-`k` policy.
    pub values: Array2<f64>,
    pub comparator: Vec<f64>,
    /// Running maximal individual pseudo-regret.
    pub regret: Vec<f64>,
    pub wallclock_ms: Vec<u64>,
}

impl RegretRecord {
    pub fn final_regret(&self) -> f64 {
        self.regret.last().copied().unwrap_or(0.0)
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let mut cum = 0.0;
        (0..self.regret.len())
            .map(|k| {
                cum += self.comparator[k];
                ResultRow {
                    algo: self.algo.clone(),
                    env: self.env.clone(),
                    mode: self.mode,
                    m: self.m,
                    seed: self.seed,
                    episode: k + 1,
                    agent_max_regret: self.regret[k],
                    comparator_cum: cum,
                    wallclock_ms: self.wallclock_ms[k],
                }
            })
            .collect()
    }
}

/// One results CSV line. `episode` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algo: String,
    pub env: String,
    pub mode: RandomnessMode,
    pub m: usize,
    pub seed: u64,
    pub episode: usize,
    pub agent_max_regret: f64,
    pub comparator_cum: f64,
    pub wallclock_ms: u64,
}

/// `R_k = max_v sum_{j <= k} (values[j, v] - comparator[j])`.
pub fn compute_regret(values: &Array2<f64>, comparator: &[f64]) -> Result<Vec<f64>> {
    let (kk, m) = values.dim();
    if kk != comparator.len() {
        return Err(shape_err!("{kk} episodes of values vs {} comparator values", comparator.len()));
    }
    if m == 0 {
        return Err(shape_err!("values have no agents"));
    }
    let mut cum = vec![0.0; m];
    Ok((0..kk)
        .map(|k| {
            for (v, c) in cum.iter_mut().enumerate() {
                *c += values[[k, v]] - comparator[k];
            }
            cum.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Per-episode comparator values: the optimal value under the mean cost in
/// stochastic mode, the best fixed policy in hindsight on the realized
/// sequence otherwise.
pub fn comparator_series(env: &Environment, episodes: usize) -> Result<Vec<f64>> {
    let s0 = env.mdp.initial_state();
    match &env.costs {
        CostProcess::Stochastic { mean } => {
            let (_, v) = optimal_policy(&env.mdp, mean)?;
            Ok(vec![v[[0, s0]]; episodes])
        }
        CostProcess::Adversarial { sequence } => {
            let (pi, _) = best_in_hindsight(&env.mdp, &sequence[..episodes])?;
            sequence[..episodes]
                .iter()
                .map(|c| Ok(evaluate_policy(&env.mdp, c, &pi)?.initial_value(s0)))
                .collect()
        }
    }
}

/// The comparator policy used by [`comparator_series`].
pub fn comparator_policy(env: &Environment, episodes: usize) -> Result<Policy> {
    Ok(match &env.costs {
        CostProcess::Stochastic { mean } => optimal_policy(&env.mdp, mean)?.0,
        CostProcess::Adversarial { sequence } => best_in_hindsight(&env.mdp, &sequence[..episodes])?.0,
    })
}

/// What an observer sees after episode `k` was played and before the learner
/// consumed it.
pub struct EpisodeEvent<'a> {
    pub k: usize,
    pub policies: &'a [Arc<Policy>],
    pub trajectory: &'a TeamTrajectory,
    pub diagnostics: Diagnostics<'a>,
}

/// Runs `learner` for `K` episodes on `env` with the streams of `seed`.
pub fn run_with_learner(
    config: &ExperimentConfig,
    env: &Environment,
    seed: u64,
    m: usize,
    learner: &mut dyn Learner,
    mut observer: Option<&mut dyn FnMut(&EpisodeEvent<'_>)>,
) -> Result<RegretRecord> {
    let kk = config.episodes;
    let s0 = env.mdp.initial_state();
    let mut rngs = EpisodeRngs::new(seed, m);
    let mut values = Array2::zeros((kk, m));
    let mut wallclock_ms = Vec::with_capacity(kk);
    let start = Instant::now();
    for k in 0..kk {
        let policies = learner.begin_episode(k)?;
        if policies.len() != m {
            return Err(shape_err!("learner returned {} policies for {m} agents", policies.len()));
        }
        let cost = env.costs.expected_cost(k);
        for v in 0..m {
            values[[k, v]] = match (0..v).find(|&u| Arc::ptr_eq(&policies[u], &policies[v])) {
                Some(u) => values[[k, u]],
                None => evaluate_policy(&env.mdp, cost, &policies[v])?.initial_value(s0),
            };
        }
        let traj = run_episode(config.mode, &env.mdp, &env.costs, k, &policies, &mut rngs)?;
        if let Some(obs) = observer.as_mut() {
            obs(&EpisodeEvent {
                k,
                policies: &policies,
                trajectory: &traj,
                diagnostics: learner.diagnostics(),
            });
        }
        learner.observe(k, &traj)?;
        wallclock_ms.push(if config.wallclock {
            start.elapsed().as_millis() as u64
        } else {
            0
        });
    }
    let comparator = comparator_series(env, kk)?;
    let regret = compute_regret(&values, &comparator)?;
    Ok(RegretRecord {
        algo: learner.algorithm_name().to_string(),
        env: env.name.clone(),
        mode: config.mode,
        m,
        seed,
        values,
        comparator,
        regret,
        wallclock_ms,
    })
}

/// Runs the configured learner for one `(seed, m)` cell.
pub fn run_cell(
    config: &ExperimentConfig,
    seed: u64,
    m: usize,
    observer: Option<&mut dyn FnMut(&EpisodeEvent<'_>)>,
) -> Result<RegretRecord> {
    let env = build_environment(config, seed)?;
    let cfg = config.learner_config(&env, m)?;
    let mut learner = build_learner(&cfg, &env.mdp, seed)?;
    run_with_learner(config, &env, seed, m, learner.as_mut(), observer)
}

/// Runs every `(m, seed)` cell in parallel. Records are ordered by the
/// position of `m` in the list, then by seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RegretRecord>> {
    config.validate()?;
    let cells: Vec<(usize, u64)> = config
        .m
        .values()
        .into_iter()
        .flat_map(|m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    cells
        .into_par_iter()
        .map(|(m, seed)| run_cell(config, seed, m, None))
        .collect()
}

/// [`run_experiment`] on a pool of `threads` workers (all cores if `None`).
pub fn sweep_agents(config: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<RegretRecord>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| run_experiment(config))
}

pub fn write_results(path: &Path, records: &[RegretRecord]) -> Result<()> {
    let rows: Vec<ResultRow> = records.iter().flat_map(RegretRecord::rows).collect();
    write_rows(path, &rows)
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected results header '{}'", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// infeasibility or numerical failure, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::Shape(_) => 2,
        Error::Infeasible(_) | Error::NumericDomain(_) => 3,
        Error::Usage(_) | Error::Io(_) | Error::Csv(_) => 1,
    }
}

/// Output file of a run: `<dir>/<file name of config.out>` when a directory
/// is given, otherwise `config.out`, defaulting to `results.csv`.
pub fn output_path(config: &ExperimentConfig, dir: Option<&Path>) -> PathBuf {
    let configured = config.out.clone().unwrap_or_else(|| PathBuf::from("results.csv"));
    match dir {
        Some(d) => d.join(configured.file_name().unwrap_or_else(|| "results.csv".as_ref())),
        None => configured,
    }
}
