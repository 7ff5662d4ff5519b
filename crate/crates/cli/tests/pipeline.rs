use std::collections::BTreeMap;

use rfalcf_cli::config::{ExperimentConfig, GridPreset, Protocol};
use rfalcf_cli::experiment::{grid_search, run_experiment, RunOptions, RunRecord};

fn config(protocol: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
protocol = "{protocol}"
algorithms = ["rfa_lcf", "cf", "lccf", "lcf"]
k_values = [2, 3]
n_category_draws = 3
seeds = [4, 9]
kmeans_restarts = 4
knn = 3

[dataset]
kind = "blobs"
n_per_class = 10
classes = 3
dim = 8
separation = 3.0

[rfa]
max_iter = 8

[baseline]
max_iter = 8

[noise]
variances = [0.0, 10.0]
"#
    ))
    .unwrap()
}

fn opts(dir: &std::path::Path, jobs: usize) -> RunOptions {
    RunOptions { jobs, base_dir: dir.to_path_buf(), write_files: true }
}

fn in_dir(mut cfg: ExperimentConfig, dir: &std::path::Path) -> ExperimentConfig {
    cfg.output_dir = dir.to_path_buf();
    cfg
}

/// Everything but wall-clock fields.
fn strip_times(record: &RunRecord) -> serde_json::Value {
    let mut v = serde_json::to_value(record).unwrap();
    v["wall_secs"] = serde_json::Value::Null;
    for d in v["draws"].as_array_mut().unwrap() {
        d["wall_secs"] = serde_json::Value::Null;
    }
    v
}

#[test]
fn reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = in_dir(config("category_sweep"), dir.path());
    let a = run_experiment(&cfg, &opts(dir.path(), 1)).unwrap();
    let b = run_experiment(&cfg, &opts(dir.path(), 1)).unwrap();
    assert_eq!(strip_times(&a), strip_times(&b));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = in_dir(config("noise_sweep"), dir.path());
    let a = run_experiment(&cfg, &opts(dir.path(), 1)).unwrap();
    let b = run_experiment(&cfg, &opts(dir.path(), 3)).unwrap();
    assert_eq!(strip_times(&a), strip_times(&b));
}

#[test]
fn csv_rows_reproduce_json_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = in_dir(config("category_sweep"), dir.path());
    run_experiment(&cfg, &opts(dir.path(), 1)).unwrap();

    let mut reader = csv::Reader::from_path(dir.path().join("results.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ia, ik, iac, ifm) = (col("algorithm"), col("k"), col("ac"), col("f_measure"));
    let mut groups: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.unwrap();
        groups
            .entry((row[ia].to_string(), row[ik].parse().unwrap()))
            .or_default()
            .push((row[iac].parse().unwrap(), row[ifm].parse().unwrap()));
    }

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    let aggs = json["aggregates"].as_array().unwrap();
    assert_eq!(aggs.len(), groups.len());
    for a in aggs {
        let key = (a["algorithm"].as_str().unwrap().to_string(), a["k"].as_u64().unwrap() as usize);
        let vals = &groups[&key];
        let n = vals.len() as f64;
        let ac = vals.iter().map(|v| v.0).sum::<f64>() / n;
        let f = vals.iter().map(|v| v.1).sum::<f64>() / n;
        let ac_std = (vals.iter().map(|v| (v.0 - ac).powi(2)).sum::<f64>() / n).sqrt();
        assert!((a["ac_mean"].as_f64().unwrap() - ac).abs() < 1e-12, "{key:?}");
        assert!((a["f_mean"].as_f64().unwrap() - f).abs() < 1e-12, "{key:?}");
        assert!((a["ac_std"].as_f64().unwrap() - ac_std).abs() < 1e-12, "{key:?}");
        assert_eq!(a["n_ok"].as_u64().unwrap() as usize, vals.len());
    }
}

#[test]
fn single_cell_grid_matches_category_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("category_sweep");
    cfg.algorithms = vec![rfalcf_cli::config::Algorithm::RfaLcf];
    cfg.write_traces = false;
    let sweep = run_experiment(&cfg, &RunOptions { write_files: false, ..Default::default() }).unwrap();

    cfg.protocol = Protocol::GridSearch;
    cfg.grid.preset = GridPreset::Custom;
    cfg.grid.alpha = vec![cfg.rfa.alpha];
    cfg.grid.beta = vec![cfg.rfa.beta];
    cfg.grid.gamma = vec![cfg.rfa.gamma];
    let grid = grid_search(&cfg, &opts(dir.path(), 1)).unwrap();
    assert_eq!(grid.draws.len(), sweep.draws.len());
    for (g, s) in grid.draws.iter().zip(&sweep.draws) {
        assert_eq!((g.ac, g.f_measure, g.iterations), (s.ac, s.f_measure, s.iterations));
        assert_eq!(g.fit_seed, s.fit_seed);
    }
}

#[test]
fn ablation_preset_gives_four_cells() {
    let mut cfg = config("grid_search");
    cfg.algorithms = vec![rfalcf_cli::config::Algorithm::RfaLcf];
    cfg.k_values = vec![3];
    cfg.n_category_draws = Some(1);
    cfg.seeds = vec![0];
    cfg.grid.preset = GridPreset::Ablation;
    let rec = grid_search(&cfg, &RunOptions { write_files: false, ..Default::default() }).unwrap();
    assert_eq!(rec.aggregates.len(), 4);
    let zero_alpha = rec.draws.iter().filter(|d| d.alpha == Some(0.0)).count();
    assert_eq!(zero_alpha, 1);
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = in_dir(config("single_fit"), dir.path());
    cfg.algorithms = vec![rfalcf_cli::config::Algorithm::RfaLcf];
    cfg.seeds = vec![2];
    cfg.rfa.eps_conv = 1e-300;
    cfg.rfa.max_iter = 6;
    let full = run_experiment(&cfg, &opts(dir.path(), 1)).unwrap();

    let ckpt_dir = tempfile::tempdir().unwrap();
    cfg.output_dir = ckpt_dir.path().to_path_buf();
    cfg.rfa.max_iter = 3;
    cfg.checkpoint_every = 3;
    let first = run_experiment(&cfg, &opts(ckpt_dir.path(), 1)).unwrap();
    assert_eq!(first.draws[0].iterations, 3);
    let ckpts: Vec<_> = std::fs::read_dir(ckpt_dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("checkpoint-"))
        .collect();
    assert_eq!(ckpts.len(), 1);

    cfg.resume = true;
    cfg.checkpoint_every = 0;
    let resumed = run_experiment(&cfg, &opts(ckpt_dir.path(), 1)).unwrap();
    assert_eq!(resumed.draws[0].iterations, 3);
    assert_eq!(resumed.draws[0].ac, full.draws[0].ac);
    assert_eq!(resumed.draws[0].f_measure, full.draws[0].f_measure);

    let last = |dir: &std::path::Path, rec: &RunRecord| -> serde_json::Value {
        let name = rec.draws[0].trace_file.clone().unwrap();
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        let line = text.lines().filter(|l| l.contains("\"objective\"")).last().unwrap().to_string();
        let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
        v["wall_secs"] = serde_json::Value::Null;
        v
    };
    assert_eq!(last(ckpt_dir.path(), &resumed), last(dir.path(), &full));
}
