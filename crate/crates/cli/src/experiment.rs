//! Job expansion, execution on a bounded worker pool, and aggregation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use rfalcf_core::data::{self, CorruptionSpec, DataMatrix};
use rfalcf_core::{baselines, eval, rfa, seed, Error, FactorState, FitTrace, Hyperparams};
use serde::Serialize;

use crate::config::{Algorithm, ExperimentConfig, GridCell, Protocol};
use crate::{output, CliError, CliResult};

/// Execution settings that are not part of the experiment itself.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Directory relative dataset paths are resolved against.
    pub base_dir: PathBuf,
    /// Write CSV, JSON, traces and plots under `cfg.output_dir`.
    pub write_files: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            base_dir: PathBuf::from("."),
            write_files: true,
        }
    }
}

/// One fitted and scored draw. Failed draws keep their seeds and carry the
/// error in `status`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrawRecord {
    pub protocol: Protocol,
    pub algorithm: Algorithm,
    pub k: usize,
    pub draw: usize,
    pub base_seed: u64,
    pub draw_seed: u64,
    pub category_seed: u64,
    pub fit_seed: u64,
    pub kmeans_seed: u64,
    pub noise_seed: u64,
    pub variance: Option<f64>,
    pub cell: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub rank: usize,
    pub n_samples: usize,
    pub ac: Option<f64>,
    pub f_measure: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
    pub wall_secs: f64,
    pub trace_file: Option<String>,
}

impl DrawRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Mean, population standard deviation and range of successful draws that
/// share algorithm, `K`, noise level and grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub algorithm: Algorithm,
    pub k: usize,
    pub variance: Option<f64>,
    pub cell: Option<String>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub ac_mean: Option<f64>,
    pub ac_std: Option<f64>,
    pub ac_min: Option<f64>,
    pub ac_max: Option<f64>,
    pub f_mean: Option<f64>,
    pub f_std: Option<f64>,
    pub f_min: Option<f64>,
    pub f_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightRow {
    pub base_seed: u64,
    /// `clean` or `corrupted`.
    pub copy: String,
    /// `cosine_knn`, `binary_knn` or `learned_q`.
    pub method: String,
    pub error: f64,
    pub heat_map: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub total: usize,
    pub failed: usize,
    pub numerical: usize,
}

impl Outcome {
    fn from_records(records: &[DrawRecord]) -> Self {
        Self {
            total: records.len(),
            failed: records.iter().filter(|r| !r.ok()).count(),
            numerical: records.iter().filter(|r| r.status.starts_with("numerical")).count(),
        }
    }

    /// Failures below half the runs are tolerated; otherwise the run is a
    /// numerical failure when every run diverged, else a partial failure.
    pub fn check(&self) -> CliResult<()> {
        if self.failed == 0 || 2 * self.failed < self.total {
            return Ok(());
        }
        if self.numerical == self.total {
            return Err(CliError::Numerical { total: self.total });
        }
        Err(CliError::Partial {
            failed: self.failed,
            total: self.total,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub protocol: Protocol,
    pub draws: Vec<DrawRecord>,
    pub aggregates: Vec<Aggregate>,
    pub weights: Vec<WeightRow>,
    pub wall_secs: f64,
    pub trace_files: Vec<String>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
struct Job {
    algorithm: Algorithm,
    k: usize,
    draw: usize,
    base_seed: u64,
    variance: Option<f64>,
    cell: Option<(usize, GridCell)>,
}

struct Seeds {
    draw: u64,
    category: u64,
    fit: u64,
    kmeans: u64,
    noise: u64,
}

/// Seeds depend only on the base seed, `K` and the draw index, so adding
/// draws, algorithms, noise levels or grid cells never perturbs existing ones.
fn seeds_for(base: u64, k: usize, draw: usize) -> Seeds {
    let d = seed::derive(base, &[k as u64, draw as u64]);
    Seeds {
        draw: d,
        category: seed::derive(d, &[0]),
        fit: seed::derive(d, &[1]),
        kmeans: seed::derive(d, &[2]),
        noise: seed::derive(d, &[3]),
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a DataMatrix,
    protocol: Protocol,
    out_dir: Option<&'a Path>,
}

fn n_classes(data: &DataMatrix) -> CliResult<usize> {
    data.n_classes()
        .ok_or_else(|| CliError::Usage("clustering protocols need a labelled dataset".into()))
}

fn k_values(cfg: &ExperimentConfig, data: &DataMatrix) -> CliResult<Vec<usize>> {
    let total = n_classes(data)?;
    let ks = if cfg.k_values.is_empty() { vec![total] } else { cfg.k_values.clone() };
    if let Some(&bad) = ks.iter().find(|&&k| k > total) {
        return Err(CliError::Usage(format!("K = {bad} exceeds the {total} classes of the dataset")));
    }
    Ok(ks)
}

fn hyperparams_for(cfg: &ExperimentConfig, rank: usize, cell: Option<&GridCell>) -> Hyperparams {
    let mut hp = cfg.rfa;
    hp.rank = rank;
    if let Some(c) = cell {
        hp.alpha = c.alpha;
        hp.beta = c.beta;
        hp.gamma = c.gamma;
    }
    hp
}

fn job_tag(job: &Job) -> String {
    let mut tag = format!("{}-k{}-d{}-s{}", job.algorithm.name(), job.k, job.draw, job.base_seed);
    if let Some(v) = job.variance {
        tag.push_str(&format!("-v{v}"));
    }
    if let Some((i, _)) = &job.cell {
        tag.push_str(&format!("-c{i}"));
    }
    tag
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Fits one algorithm and returns its representation matrix and trace.
fn fit_algorithm(
    ctx: &Context<'_>,
    job: &Job,
    x: &Array2<f64>,
    rank: usize,
    fit_seed: u64,
    tag: &str,
) -> CliResult<(Array2<f64>, FitTrace)> {
    let cfg = ctx.cfg;
    let mut bp = cfg.baseline;
    bp.rank = rank;
    match job.algorithm {
        Algorithm::RfaLcf => {
            let hp = hyperparams_for(cfg, rank, job.cell.as_ref().map(|c| &c.1));
            let ckpt = ctx.out_dir.map(|d| d.join(format!("checkpoint-{tag}.cfm")));
            let every = cfg.checkpoint_every;
            let mut observer = |st: &FactorState, rec: &rfalcf_core::IterRecord| -> rfalcf_core::Result<()> {
                if let Some(path) = &ckpt {
                    if every > 0 && rec.iter % every == 0 {
                        st.save_checkpoint(path)?;
                    }
                }
                Ok(())
            };
            let resumed = match &ckpt {
                Some(path) if cfg.resume && path.exists() => {
                    let st = FactorState::load_checkpoint(path)?;
                    st.check_shapes(x.nrows(), x.ncols())?;
                    Some(st)
                }
                _ => None,
            };
            let (st, trace) = match resumed {
                Some(st) => rfa::fit_from_state(x, &hp, st, FitTrace::new("rfa_lcf"), &mut observer)?,
                None => rfa::fit_observed(x, &hp, fit_seed, &mut observer)?,
            };
            Ok((st.v, trace))
        }
        Algorithm::Cf => {
            let fit = baselines::cf_fit(x, &bp, fit_seed)?;
            Ok((fit.v, fit.trace))
        }
        Algorithm::Lccf => {
            let graph = baselines::knn_cosine_graph(x, cfg.knn.min(x.ncols() - 1))?;
            let fit = baselines::lccf_fit(x, &bp, &graph, fit_seed)?;
            Ok((fit.v, fit.trace))
        }
        Algorithm::Lcf => {
            let fit = baselines::lcf_fit(x, &bp, fit_seed)?;
            Ok((fit.v, fit.trace))
        }
    }
}

fn write_trace(dir: &Path, tag: &str, trace: &FitTrace) -> CliResult<String> {
    let name = format!("trace-{tag}.jsonl");
    let path = dir.join(&name);
    let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    trace
        .write_jsonl(std::io::BufWriter::new(file))
        .map_err(|e| io_err(&path, e))?;
    Ok(name)
}

fn run_job(ctx: &Context<'_>, job: &Job) -> DrawRecord {
    let cfg = ctx.cfg;
    let s = seeds_for(job.base_seed, job.k, job.draw);
    let rank = cfg.rank.unwrap_or(job.k + 1);
    let tag = job_tag(job);
    let started = Instant::now();
    let (alpha, beta, gamma, lambda) = match job.algorithm {
        Algorithm::RfaLcf => {
            let hp = hyperparams_for(cfg, rank, job.cell.as_ref().map(|c| &c.1));
            (Some(hp.alpha), Some(hp.beta), Some(hp.gamma), None)
        }
        Algorithm::Cf => (None, None, None, None),
        Algorithm::Lccf | Algorithm::Lcf => (None, None, None, Some(cfg.baseline.lambda)),
    };
    let mut record = DrawRecord {
        protocol: ctx.protocol,
        algorithm: job.algorithm,
        k: job.k,
        draw: job.draw,
        base_seed: job.base_seed,
        draw_seed: s.draw,
        category_seed: s.category,
        fit_seed: s.fit,
        kmeans_seed: s.kmeans,
        noise_seed: s.noise,
        variance: job.variance,
        cell: job.cell.as_ref().map(|c| c.1.label.clone()),
        alpha,
        beta,
        gamma,
        lambda,
        rank,
        n_samples: 0,
        ac: None,
        f_measure: None,
        iterations: 0,
        converged: false,
        status: "ok".into(),
        wall_secs: 0.0,
        trace_file: None,
    };

    let mut trace_out: Option<FitTrace> = None;
    let result = (|| -> CliResult<eval::EvalScores> {
        let mut sub = data::select_categories(ctx.data, job.k, s.category)?;
        if let Some(v) = job.variance {
            sub = data::gaussian_corrupt(&sub, &CorruptionSpec::new(v, cfg.noise.fraction, s.noise)?)?;
        }
        sub.preprocess(cfg.dataset.preprocess);
        record.n_samples = sub.n_samples();
        let labels = sub.labels.clone().expect("selected categories are labelled");
        let (v, trace) = fit_algorithm(ctx, job, &sub.x, rank, s.fit, &tag).map_err(|e| {
            if let CliError::Core(Error::Numerical { trace: Some(t), .. }) = &e {
                trace_out = Some((**t).clone());
            }
            e
        })?;
        record.iterations = trace.iterations_run;
        record.converged = trace.converged;
        trace_out = Some(trace);
        let clusters = eval::kmeans_cosine(&v.view(), job.k, cfg.kmeans_restarts, s.kmeans)?;
        Ok(eval::evaluate(&clusters.assignment, &labels)?)
    })();

    match result {
        Ok(scores) => {
            record.ac = Some(scores.ac);
            record.f_measure = Some(scores.f_measure);
        }
        Err(e) => {
            let kind = match e.exit_code() {
                3 => "numerical",
                1 => "usage",
                _ => "error",
            };
            log::warn!("{tag}: {e}");
            record.status = format!("{kind}: {e}");
        }
    }
    if let (Some(dir), Some(trace)) = (ctx.out_dir, &trace_out) {
        if cfg.write_traces {
            match write_trace(dir, &tag, trace) {
                Ok(name) => record.trace_file = Some(name),
                Err(e) => log::warn!("{tag}: could not write trace: {e}"),
            }
        }
    }
    record.wall_secs = started.elapsed().as_secs_f64();
    record
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))
}

/// Runs every job on the pool; results come back in job order regardless of
/// scheduling.
fn run_jobs(ctx: &Context<'_>, jobs: &[Job], workers: usize) -> CliResult<Vec<DrawRecord>> {
    let pool = pool(workers)?;
    Ok(pool.install(|| jobs.par_iter().map(|j| run_job(ctx, j)).collect()))
}

fn stats(values: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None, None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (Some(mean), Some(var.sqrt()), Some(min), Some(max))
}

/// Groups draws by (algorithm, K, variance, cell) in order of first
/// appearance.
pub fn aggregate(records: &[DrawRecord]) -> Vec<Aggregate> {
    type Key = (Algorithm, usize, Option<u64>, Option<String>);
    let key = |r: &DrawRecord| -> Key { (r.algorithm, r.k, r.variance.map(f64::to_bits), r.cell.clone()) };
    let mut order: Vec<Key> = Vec::new();
    for r in records {
        let k = key(r);
        if !order.contains(&k) {
            order.push(k);
        }
    }
    order
        .into_iter()
        .map(|k| {
            let group: Vec<&DrawRecord> = records.iter().filter(|r| key(r) == k).collect();
            let ok: Vec<&&DrawRecord> = group.iter().filter(|r| r.ok()).collect();
            let ac: Vec<f64> = ok.iter().filter_map(|r| r.ac).collect();
            let f: Vec<f64> = ok.iter().filter_map(|r| r.f_measure).collect();
            let (ac_mean, ac_std, ac_min, ac_max) = stats(&ac);
            let (f_mean, f_std, f_min, f_max) = stats(&f);
            Aggregate {
                algorithm: k.0,
                k: k.1,
                variance: k.2.map(f64::from_bits),
                cell: k.3,
                n_ok: ok.len(),
                n_failed: group.len() - ok.len(),
                ac_mean,
                ac_std,
                ac_min,
                ac_max,
                f_mean,
                f_std,
                f_min,
                f_max,
            }
        })
        .collect()
}

fn prepare_out_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<Option<PathBuf>> {
    if !opts.write_files {
        return Ok(None);
    }
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(Some(dir))
}

fn finish(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    draws: Vec<DrawRecord>,
    weights: Vec<WeightRow>,
    started: Instant,
    out_dir: Option<&Path>,
) -> CliResult<RunRecord> {
    let aggregates = aggregate(&draws);
    let trace_files = draws.iter().filter_map(|d| d.trace_file.clone()).collect();
    let outcome = Outcome::from_records(&draws);
    let record = RunRecord {
        config: cfg.clone(),
        protocol,
        draws,
        aggregates,
        weights,
        wall_secs: started.elapsed().as_secs_f64(),
        trace_files,
        outcome,
    };
    if let Some(dir) = out_dir {
        output::write_all(dir, &record)?;
    }
    Ok(record)
}

fn expand(
    cfg: &ExperimentConfig,
    algorithms: &[Algorithm],
    ks: &[usize],
    draws: usize,
    variances: &[Option<f64>],
    cells: &[Option<(usize, GridCell)>],
) -> Vec<Job> {
    let mut jobs = Vec::new();
    for cell in cells {
        for &variance in variances {
            for &k in ks {
                for &algorithm in algorithms {
                    for &base_seed in &cfg.seeds {
                        for draw in 0..draws {
                            jobs.push(Job {
                                algorithm,
                                k,
                                draw,
                                base_seed,
                                variance,
                                cell: cell.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    jobs
}

/// Single fits, category sweeps and noise sweeps: for every `K`, draw and
/// base seed, subsample `K` classes, optionally corrupt, fit each algorithm
/// with rank `K + 1`, cluster the representations and score them.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let data = cfg.dataset.load(&opts.base_dir)?;
    let (protocol, ks, draws, variances) = match cfg.protocol {
        Protocol::SingleFit => (Protocol::SingleFit, vec![n_classes(&data)?], 1, vec![None]),
        Protocol::CategorySweep => (Protocol::CategorySweep, k_values(cfg, &data)?, cfg.draws(), vec![None]),
        Protocol::NoiseSweep => (
            Protocol::NoiseSweep,
            k_values(cfg, &data)?,
            cfg.draws(),
            cfg.noise.variances.iter().map(|&v| Some(v)).collect(),
        ),
        Protocol::GridSearch => return grid_search(cfg, opts),
        Protocol::WeightCompare => return weight_compare(cfg, opts),
    };
    let out_dir = prepare_out_dir(cfg, opts)?;
    let jobs = expand(cfg, &cfg.algorithms, &ks, draws, &variances, &[None]);
    let ctx = Context {
        cfg,
        data: &data,
        protocol,
        out_dir: out_dir.as_deref(),
    };
    let records = run_jobs(&ctx, &jobs, opts.jobs)?;
    finish(cfg, protocol, records, Vec::new(), started, out_dir.as_deref())
}

/// Category sweep of RFA-LCF over every cell of the configured grid preset.
/// Every cell sees the same subsets and initializations.
pub fn grid_search(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let data = cfg.dataset.load(&opts.base_dir)?;
    let ks = k_values(cfg, &data)?;
    let cells: Vec<Option<(usize, GridCell)>> =
        cfg.grid.cells(&cfg.rfa)?.into_iter().enumerate().map(Some).collect();
    if cfg.algorithms.iter().any(|&a| a != Algorithm::RfaLcf) {
        log::warn!("grid search tunes rfa_lcf only; other algorithms are ignored");
    }
    let out_dir = prepare_out_dir(cfg, opts)?;
    let jobs = expand(cfg, &[Algorithm::RfaLcf], &ks, cfg.draws(), &[None], &cells);
    let ctx = Context {
        cfg,
        data: &data,
        protocol: Protocol::GridSearch,
        out_dir: out_dir.as_deref(),
    };
    let records = run_jobs(&ctx, &jobs, opts.jobs)?;
    finish(cfg, Protocol::GridSearch, records, Vec::new(), started, out_dir.as_deref())
}

/// Samples ordered by class, so block structure shows in the heat maps.
fn sorted_by_class(d: &DataMatrix) -> DataMatrix {
    let labels = d.labels.as_ref().expect("labelled");
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by_key(|&j| labels[j]);
    d.select_columns(&idx)
}

/// Reconstruction error of cosine k-NN weights, binary k-NN weights and
/// RFA-LCF's learned graph, on clean and corrupted copies of the data.
pub fn weight_compare(cfg: &ExperimentConfig, opts: &RunOptions) -> CliResult<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let data = cfg.dataset.load(&opts.base_dir)?;
    let k = *k_values(cfg, &data)?.first().expect("nonempty");
    let out_dir = prepare_out_dir(cfg, opts)?;
    let pool = pool(opts.jobs)?;
    let per_seed: Vec<CliResult<Vec<(WeightRow, Array2<f64>)>>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&base| {
                let s = seeds_for(base, k, 0);
                let clean = sorted_by_class(&data::select_categories(&data, k, s.category)?);
                let spec = CorruptionSpec::new(cfg.noise.weight_variance, cfg.noise.fraction, s.noise)?;
                let corrupted = data::gaussian_corrupt(&clean, &spec)?;
                let mut rows = Vec::new();
                for (copy, mut dm) in [("clean", clean.clone()), ("corrupted", corrupted)] {
                    dm.preprocess(cfg.dataset.preprocess);
                    let knn = cfg.knn.min(dm.n_samples() - 1);
                    let hp = hyperparams_for(cfg, cfg.rank.unwrap_or(k + 1), None);
                    let (state, _) = rfa::fit(&dm.x, &hp, s.fit)?;
                    let graphs = [
                        ("cosine_knn", baselines::knn_cosine_graph(&dm.x, knn)?.s),
                        ("binary_knn", baselines::knn_binary_graph(&dm.x, knn)?.s),
                        ("learned_q", state.q),
                    ];
                    for (method, w) in graphs {
                        let error = eval::graph_reconstruction_error(&dm.x, &w)?;
                        let row = WeightRow {
                            base_seed: base,
                            copy: copy.into(),
                            method: method.into(),
                            error,
                            heat_map: None,
                        };
                        rows.push((row, w));
                    }
                }
                Ok(rows)
            })
            .collect()
    });
    let mut weights = Vec::new();
    for rows in per_seed {
        for (mut row, w) in rows? {
            if let Some(dir) = &out_dir {
                let name = format!("weights-{}-{}-s{}.svg", row.method, row.copy, row.base_seed);
                let title = format!("{} ({}), error {:.4}", row.method, row.copy, row.error);
                let path = dir.join(&name);
                std::fs::write(&path, crate::svg::heat_map(&title, &w)).map_err(|e| io_err(&path, e))?;
                row.heat_map = Some(name);
            }
            weights.push(row);
        }
    }
    finish(cfg, Protocol::WeightCompare, Vec::new(), weights, started, out_dir.as_deref())
}
