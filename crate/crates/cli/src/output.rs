//! Result tables and plots.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Protocol;
use crate::experiment::{Aggregate, RunRecord};
use crate::svg::{line_chart, Series};
use crate::{CliError, CliResult};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io(path)(source),
        other => CliError::Serialize(format!("{other:?}")),
    }
}

/// `results.csv` (one row per draw, or per weight matrix), `results.json`
/// (the whole record) and the protocol's plots.
pub fn write_all(dir: &Path, record: &RunRecord) -> CliResult<()> {
    let csv_path = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    if record.protocol == Protocol::WeightCompare {
        for row in &record.weights {
            w.serialize(row).map_err(|e| csv_err(&csv_path, e))?;
        }
    } else {
        for row in &record.draws {
            w.serialize(row).map_err(|e| csv_err(&csv_path, e))?;
        }
    }
    w.flush().map_err(io(&csv_path))?;

    let json_path = dir.join("results.json");
    let json = serde_json::to_string_pretty(record).map_err(|e| CliError::Serialize(e.to_string()))?;
    std::fs::write(&json_path, json).map_err(io(&json_path))?;

    for (name, svg) in plots(record) {
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(io(&path))?;
    }
    Ok(())
}

fn series_by<F>(aggs: &[Aggregate], label: impl Fn(&Aggregate) -> String, xy: F) -> Vec<Series>
where
    F: Fn(&Aggregate) -> Option<(f64, f64)>,
{
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for a in aggs {
        if let Some(p) = xy(a) {
            groups.entry(label(a)).or_default().push(p);
        }
    }
    groups
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect()
}

/// Plot files for a record, as `(file name, svg)`.
pub fn plots(record: &RunRecord) -> Vec<(String, String)> {
    let aggs = &record.aggregates;
    let algo = |a: &Aggregate| a.algorithm.name().to_string();
    let multi_k = aggs.first().is_some_and(|f| aggs.iter().any(|a| a.k != f.k));
    let mut out = Vec::new();
    match record.protocol {
        Protocol::SingleFit | Protocol::CategorySweep => {
            for (metric, file, pick) in [
                ("AC", "ac.svg", (|a: &Aggregate| a.ac_mean) as fn(&Aggregate) -> Option<f64>),
                ("F-measure", "f_measure.svg", |a: &Aggregate| a.f_mean),
            ] {
                let s = series_by(aggs, algo, |a| pick(a).map(|y| (a.k as f64, y)));
                out.push((file.to_string(), line_chart(&format!("Mean {metric} by K"), "K", metric, &s)));
            }
        }
        Protocol::NoiseSweep => {
            let label = |a: &Aggregate| {
                if multi_k {
                    format!("{} K={}", a.algorithm.name(), a.k)
                } else {
                    a.algorithm.name().to_string()
                }
            };
            for (metric, file, pick) in [
                ("F-measure", "noise_f_measure.svg", (|a: &Aggregate| a.f_mean) as fn(&Aggregate) -> Option<f64>),
                ("AC", "noise_ac.svg", |a: &Aggregate| a.ac_mean),
            ] {
                let s = series_by(aggs, label, |a| Some((a.variance?, pick(a)?)));
                out.push((file.to_string(), line_chart(&format!("Mean {metric} by noise variance"), "variance", metric, &s)));
            }
        }
        Protocol::GridSearch => {
            let cells: Vec<String> = {
                let mut seen = Vec::new();
                for a in aggs {
                    if let Some(c) = &a.cell {
                        if !seen.contains(c) {
                            seen.push(c.clone());
                        }
                    }
                }
                seen
            };
            let index = |a: &Aggregate| cells.iter().position(|c| Some(c) == a.cell.as_ref()).map(|i| i as f64);
            let s = series_by(aggs, |a| format!("K={}", a.k), |a| Some((index(a)?, a.ac_mean?)));
            out.push(("grid.svg".into(), line_chart("Mean AC per grid cell (see results.json for labels)", "cell", "AC", &s)));
        }
        Protocol::WeightCompare => {
            let mut by_method: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for w in &record.weights {
                let x = if w.copy == "clean" { 0.0 } else { 1.0 };
                by_method.entry(w.method.clone()).or_default().push((x, w.error));
            }
            let series: Vec<Series> = by_method.into_iter().map(|(label, points)| Series { label, points }).collect();
            out.push((
                "weights.svg".into(),
                line_chart("Graph reconstruction error (0 = clean, 1 = corrupted)", "copy", "error", &series),
            ));
        }
    }
    out
}
