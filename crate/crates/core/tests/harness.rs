use std::path::Path;
use std::process::Command;

use cooprl::algorithms::{Algorithm, FixedPolicy, ALGORITHMS};
use cooprl::env::RandomnessMode;
use cooprl::harness::*;
use cooprl::mdp::evaluate_policy;
use ndarray::Array2;
use serde_json::json;

fn config(value: serde_json::Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&value.to_string()).unwrap()
}

fn mode_for(alg: Algorithm) -> &'static str {
    match alg {
        Algorithm::CoopNfOReps | Algorithm::CoopNfUobReps | Algorithm::CoopUlcae => "nonfresh",
        _ => "fresh",
    }
}

#[test]
fn zero_cost_gives_zero_regret_for_every_algorithm() {
    for (alg, _) in ALGORITHMS {
        let cfg = config(json!({
            "env": {"name": "random", "params": {"S": 2, "A": 2, "H": 2, "costs": "zero"}},
            "algo": {"name": alg.name(), "params": {"n_mc": 200}},
            "mode": mode_for(*alg),
            "K": 16,
            "m": 4,
            "seeds": [1, 2]
        }));
        for r in run_experiment(&cfg).unwrap() {
            assert!(r.regret.iter().all(|&x| x == 0.0), "{alg}");
        }
    }
}

#[test]
fn playing_the_comparator_gives_zero_regret() {
    for costs in ["stochastic", "switching"] {
        let cfg = config(json!({
            "env": {"name": "random", "params": {"S": 3, "A": 2, "H": 3, "costs": costs}},
            "algo": {"name": "coop-ulcvi"},
            "mode": "fresh",
            "K": 30,
            "m": 2,
            "seeds": [5]
        }));
        let env = build_environment(&cfg, 5).unwrap();
        let mut fixed = FixedPolicy::new(comparator_policy(&env, 30).unwrap(), 2);
        let r = run_with_learner(&cfg, &env, 5, 2, &mut fixed, None).unwrap();
        assert!(r.regret.iter().all(|x| x.abs() < 1e-9), "{costs}");
    }
}

fn sweep_config() -> ExperimentConfig {
    config(json!({
        "env": {"name": "random", "params": {"S": 3, "A": 2, "H": 3, "costs": "switching", "period": 10}},
        "algo": {"name": "coop-o-reps"},
        "mode": "fresh",
        "K": 40,
        "m": [1, 3],
        "seeds": [7, 8]
    }))
}

#[test]
fn same_config_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_results(&a, &sweep_agents(&cfg, Some(1)).unwrap()).unwrap();
    write_results(&b, &sweep_agents(&cfg, Some(4)).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 40);
}

#[test]
fn results_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let rows: Vec<ResultRow> = run_experiment(&sweep_config()).unwrap().iter().flat_map(|r| r.rows()).collect();
    write_rows(&path, &rows).unwrap();
    assert_eq!(read_results(&path).unwrap(), rows);
}

#[test]
fn single_entry_sweep_equals_single_run() {
    let mut cfg = sweep_config();
    cfg.m = AgentCounts::Many(vec![1]);
    let swept = sweep_agents(&cfg, Some(2)).unwrap();
    cfg.m = AgentCounts::One(1);
    assert_eq!(swept, run_experiment(&cfg).unwrap());
    cfg.m = AgentCounts::Many(vec![1, 1]);
    let twice = sweep_agents(&cfg, None).unwrap();
    assert_eq!(twice.len(), 4);
    assert_eq!(twice[..2], twice[2..]);
}

#[test]
fn agent_counts_share_the_cost_sequence() {
    let cfg = sweep_config();
    let records = run_experiment(&cfg).unwrap();
    for seed in [7, 8] {
        let env = build_environment(&cfg, seed).unwrap();
        let again = build_environment(&cfg, seed).unwrap();
        assert_eq!(env.costs, again.costs);
        let series: Vec<&Vec<f64>> = records.iter().filter(|r| r.seed == seed).map(|r| &r.comparator).collect();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0], series[1]);
    }
}

#[test]
fn regret_is_recomputed_from_policy_trace() {
    let cfg = config(json!({
        "env": {"name": "random", "params": {"S": 3, "A": 2, "H": 3}},
        "algo": {"name": "coop-ulcae"},
        "mode": "nonfresh",
        "K": 50,
        "m": 3,
        "seeds": [9]
    }));
    let mut trace = Vec::new();
    let mut observer = |e: &EpisodeEvent<'_>| trace.push(e.policies.to_vec());
    let r = run_cell(&cfg, 9, 3, Some(&mut observer)).unwrap();
    let env = build_environment(&cfg, 9).unwrap();
    let values = Array2::from_shape_fn((50, 3), |(k, v)| {
        evaluate_policy(&env.mdp, env.costs.expected_cost(k), &trace[k][v]).unwrap().initial_value(0)
    });
    assert_eq!(values, r.values);
    let regret = compute_regret(&values, &comparator_series(&env, 50).unwrap()).unwrap();
    assert_eq!(regret, r.regret);
}

#[test]
fn regret_of_identical_agents_is_one_agents_gap() {
    let values = Array2::from_shape_fn((4, 3), |(k, _)| 0.5 + k as f64 * 0.1);
    let comp = [0.4; 4];
    let single = compute_regret(&values.slice(ndarray::s![.., 0..1]).to_owned(), &comp).unwrap();
    assert_eq!(compute_regret(&values, &comp).unwrap(), single);
    let mut cum = 0.0;
    for (k, r) in single.iter().enumerate() {
        cum += values[[k, 0]] - 0.4;
        assert!((r - cum).abs() < 1e-15);
    }
}

#[test]
fn incompatible_configs_are_rejected() {
    let base = json!({
        "env": {"name": "random", "params": {"S": 2, "A": 2, "H": 2}},
        "algo": {"name": "coop-o-reps"},
        "mode": "nonfresh",
        "K": 10,
        "m": 1,
        "seeds": [1]
    });
    let err = config(base.clone()).validate().unwrap_err();
    assert_eq!(exit_code(&err), 2);
    let mut v = base.clone();
    v["algo"] = json!({"name": "coop-nf-uob-reps"});
    v["m"] = json!(3);
    assert_eq!(exit_code(&config(v).validate().unwrap_err()), 2);
    let mut v = base;
    v["bogus"] = json!(1);
    assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cooprl")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, value.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn cli_exit_codes_and_listings() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(
        dir.path(),
        "good.json",
        json!({
            "env": {"name": "random", "params": {"S": 2, "A": 2, "H": 2}},
            "algo": {"name": "coop-ulcvi"},
            "mode": "fresh",
            "K": 5,
            "m": [1, 2],
            "seeds": [1],
            "out": "sweep.csv"
        }),
    );
    let out_dir = dir.path().join("out");
    let (code, _, _) = cli(&["run", "--config", &good, "--out", out_dir.to_str().unwrap(), "--seed-offset", "3"]);
    assert_eq!(code, 0);
    let rows = read_results(&out_dir.join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.seed == 4 && r.mode == RandomnessMode::Fresh));
    assert_eq!(cli(&["validate", "--config", &good]).0, 0);

    let bad = write_config(
        dir.path(),
        "bad.json",
        json!({
            "env": {"name": "random", "params": {"S": 2, "A": 2, "H": 2}},
            "algo": {"name": "coop-uob-reps"},
            "mode": "nonfresh",
            "K": 5,
            "m": 1,
            "seeds": [1]
        }),
    );
    let (code, _, err) = cli(&["run", "--config", &bad]);
    assert_eq!(code, 2);
    assert!(err.contains("coop-uob-reps"));
    assert_eq!(cli(&["validate", "--config", &bad]).0, 2);

    let diverging = write_config(
        dir.path(),
        "diverging.json",
        json!({
            "env": {"name": "random", "params": {"S": 3, "A": 2, "H": 3, "costs": "per_episode"}},
            "algo": {"name": "coop-o-reps", "params": {"eta": 1e300, "gamma": 1e-300}},
            "mode": "fresh",
            "K": 20,
            "m": 1,
            "seeds": [1]
        }),
    );
    assert_eq!(cli(&["run", "--config", &diverging, "--out", out_dir.to_str().unwrap()]).0, 3);

    let (code, envs, _) = cli(&["list-envs"]);
    assert_eq!(code, 0);
    for name in ["mab_embed", "wait_state", "random"] {
        assert!(envs.contains(name));
    }
    let (code, algos, _) = cli(&["list-algos"]);
    assert_eq!(code, 0);
    for (alg, _) in ALGORITHMS {
        assert!(algos.contains(alg.name()));
    }
}
