//! Dataset ingestion, synthetic generators, corruption and subsampling.
//!
//! Samples are stored as the *columns* of a `d x N` matrix. On disk (CSV)
//! each row is one sample, optionally followed by a class label.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::seed;

/// Magic bytes of the binary matrix container.
pub const CFM_MAGIC: &[u8; 4] = b"CFM1";

#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    /// `d x N`, one sample per column.
    pub x: Array2<f64>,
    /// Contiguous class ids `0..K`.
    pub labels: Option<Vec<usize>>,
    pub names: Option<Vec<String>>,
}

impl DataMatrix {
    pub fn new(x: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        let dm = Self {
            x,
            labels,
            names: None,
        };
        dm.validate()?;
        Ok(dm)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((idx, _)) = self.x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(usage(format!(
                "non-finite entry at feature {}, sample {}",
                idx.0, idx.1
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.n_samples() {
                return Err(usage(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    self.n_samples()
                )));
            }
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut seen = vec![false; k];
            for &l in labels {
                seen[l] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(usage("class ids must be contiguous from 0"));
            }
        }
        if let Some(names) = &self.names {
            if names.len() != self.n_samples() {
                return Err(usage("one name per sample required"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn class_sizes(&self) -> Option<Vec<usize>> {
        let k = self.n_classes()?;
        let mut sizes = vec![0; k];
        for &l in self.labels.as_ref()? {
            sizes[l] += 1;
        }
        Some(sizes)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.x.iter().all(|&v| v >= 0.0)
    }

    /// Columns `idx` in the given order; labels are carried over unchanged.
    pub fn select_columns(&self, idx: &[usize]) -> DataMatrix {
        DataMatrix {
            x: self.x.select(Axis(1), idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            names: self
                .names
                .as_ref()
                .map(|n| idx.iter().map(|&i| n[i].clone()).collect()),
        }
    }

    /// Scales every nonzero column to unit Euclidean norm.
    pub fn normalize_columns(&mut self) {
        for mut col in self.x.axis_iter_mut(Axis(1)) {
            let n = col.dot(&col).sqrt();
            if n > 0.0 {
                col /= n;
            }
        }
    }

    /// Adds a constant so the smallest entry becomes 0 (no-op if already
    /// nonnegative).
    pub fn shift_nonnegative(&mut self) {
        let min = self.x.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            self.x.mapv_inplace(|v| v - min);
        }
    }

    /// Zero mean and unit (population) variance along every column, or every
    /// row when `per_feature`. Constant lines are only centered.
    pub fn standardize(&mut self, per_feature: bool) {
        let axis = if per_feature { Axis(0) } else { Axis(1) };
        for mut line in self.x.axis_iter_mut(axis) {
            let mean = line.mean().unwrap_or(0.0);
            let sd = line.std(0.0);
            let sd = if sd > 0.0 { sd } else { 1.0 };
            line.mapv_inplace(|v| (v - mean) / sd);
        }
    }

    pub fn preprocess(&mut self, how: Preprocess) {
        match how {
            Preprocess::None => {}
            Preprocess::UnitNorm => self.normalize_columns(),
            Preprocess::ZscoreSample => self.standardize(false),
            Preprocess::ZscoreFeature => self.standardize(true),
            Preprocess::ShiftNonnegative => self.shift_nonnegative(),
        }
    }
}

/// Per-dataset preprocessing applied after category selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    #[default]
    None,
    UnitNorm,
    ZscoreSample,
    ZscoreFeature,
    ShiftNonnegative,
}

/// Remaps arbitrary label tokens to `0..K`. Integer tokens sort numerically,
/// anything else lexicographically.
pub fn remap_labels(tokens: &[String]) -> Vec<usize> {
    let numeric: Option<Vec<i64>> = tokens.iter().map(|t| t.parse().ok()).collect();
    match numeric {
        Some(vals) => {
            let ids: BTreeMap<i64, usize> = vals
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i))
                .collect();
            vals.iter().map(|v| ids[v]).collect()
        }
        None => {
            let ids: BTreeMap<&str, usize> = tokens
                .iter()
                .map(String::as_str)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i))
                .collect();
            tokens.iter().map(|t| ids[t.as_str()]).collect()
        }
    }
}

fn split_records(text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    // Comma-separated when any comma is present, otherwise whitespace
    // (the layout UCI uses for several time-series sets).
    let mut rows = Vec::new();
    if text.contains(',') {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                row: e.position().map_or(0, |p| p.line() as usize),
                col: 0,
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(rows.len() + 1, |p| p.line() as usize);
            if rec.iter().all(|c| c.is_empty()) {
                continue;
            }
            rows.push((line, rec.iter().map(str::to_owned).collect()));
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            let cells: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
            if !cells.is_empty() {
                rows.push((i + 1, cells));
            }
        }
    }
    Ok(rows)
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::Parse {
            row,
            col,
            msg: format!("non-finite value {cell:?}"),
        }),
        Err(_) => Err(Error::Parse {
            row,
            col,
            msg: format!("not a number: {cell:?}"),
        }),
    }
}

/// Parses a sample-per-row table. Row and column numbers in errors are
/// 1-based and refer to the file as written.
pub fn parse_dense_table(text: &str, has_labels: bool) -> Result<DataMatrix> {
    let mut rows = split_records(text)?;
    if rows.is_empty() {
        return Err(usage("empty table"));
    }
    // A header is a first row whose feature cells are all non-numeric.
    let (_, first) = &rows[0];
    let n_feat_first = first.len().saturating_sub(has_labels as usize);
    if n_feat_first > 0 && first[..n_feat_first].iter().all(|c| c.parse::<f64>().is_err()) {
        rows.remove(0);
    }
    if rows.is_empty() {
        return Err(usage("table has a header but no data"));
    }
    let width = rows[0].1.len();
    let d = width.checked_sub(has_labels as usize).filter(|&d| d > 0).ok_or_else(|| {
        usage("table needs at least one feature column")
    })?;
    let n = rows.len();
    let mut x = Array2::<f64>::zeros((d, n));
    let mut tokens = Vec::with_capacity(if has_labels { n } else { 0 });
    for (j, (line, cells)) in rows.iter().enumerate() {
        if cells.len() != width {
            return Err(Error::Ragged {
                row: *line,
                expected: width,
                found: cells.len(),
            });
        }
        for i in 0..d {
            x[[i, j]] = parse_cell(&cells[i], *line, i + 1)?;
        }
        if has_labels {
            tokens.push(cells[d].clone());
        }
    }
    let labels = has_labels.then(|| remap_labels(&tokens));
    DataMatrix::new(x, labels)
}

pub fn load_dense_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<DataMatrix> {
    let text = std::fs::read_to_string(path)?;
    parse_dense_table(&text, has_labels)
}

/// Writes one sample per row at full round-trip precision, with a trailing
/// label column when labels are present.
pub fn write_dense_csv<W: Write>(data: &DataMatrix, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for j in 0..data.n_samples() {
        let mut line = data
            .x
            .column(j)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(l) = &data.labels {
            line.push(',');
            line.push_str(&l[j].to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_dense_csv(data: &DataMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_dense_csv(data, File::create(path)?)
}

/// Writes `m` as `CFM1`, u64 rows, u64 cols, then column-major f64, all
/// little-endian.
pub fn write_cfm<W: Write>(m: &Array2<f64>, out: &mut W) -> Result<()> {
    out.write_all(CFM_MAGIC)?;
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for col in m.axis_iter(Axis(1)) {
        for v in col {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_cfm<R: Read>(input: &mut R) -> Result<Array2<f64>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CFM_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l <= (1 << 34))
        .ok_or_else(|| Error::Format(format!("implausible shape {rows}x{cols}")))?;
    let mut data = vec![0.0; len];
    for v in data.iter_mut() {
        input.read_exact(&mut word)?;
        *v = f64::from_le_bytes(word);
    }
    // Column-major payload.
    Array2::from_shape_vec((cols, rows), data)
        .map(|a| a.reversed_axes().as_standard_layout().into_owned())
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_cfm(m: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_cfm(m, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_cfm(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_cfm(&mut BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Variance of the additive Gaussian noise.
    pub variance: f64,
    /// Share of each sample's entries that receive noise.
    pub fraction: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(variance: f64, fraction: f64, seed: u64) -> Result<Self> {
        let s = Self {
            variance,
            fraction,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(usage("noise variance must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(usage("corrupted fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Number of corrupted entries per sample of dimension `d`.
    pub fn entries_per_sample(&self, d: usize) -> usize {
        ((self.fraction * d as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Adds `N(0, variance)` noise to `ceil(fraction * d)` uniformly chosen
/// entries of every sample. Positions depend only on the seed, so sweeping
/// the variance with a fixed seed corrupts the same entries with the same
/// standardized noise. Results are clamped at 0 when the input is
/// nonnegative.
pub fn gaussian_corrupt(data: &DataMatrix, spec: &CorruptionSpec) -> Result<DataMatrix> {
    spec.validate()?;
    let d = data.dim();
    let count = spec.entries_per_sample(d).min(d);
    let clamp = data.is_nonnegative();
    let sd = spec.variance.sqrt();
    let mut pos_rng = seed::rng_stream(spec.seed, 0);
    let mut noise_rng = seed::rng_stream(spec.seed, 1);
    let mut out = data.clone();
    for mut col in out.x.axis_iter_mut(Axis(1)) {
        for i in sample(&mut pos_rng, d, count).into_iter() {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            let v = col[i] + sd * z;
            col[i] = if clamp { v.max(0.0) } else { v };
        }
    }
    Ok(out)
}

/// Isotropic unit-variance Gaussian blobs around centers drawn from
/// `N(0, separation^2 I)`, shifted so every entry is nonnegative. Samples
/// are grouped by class.
pub fn make_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<DataMatrix> {
    if n_per_class == 0 || n_classes == 0 || dim == 0 {
        return Err(usage("blob counts must be >= 1"));
    }
    if !(separation > 0.0) {
        return Err(usage("blob separation must be > 0"));
    }
    let mut rng = seed::rng(seed);
    let centers: Vec<Array1<f64>> = (0..n_classes)
        .map(|_| Array1::from_shape_fn(dim, |_| separation * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let n = n_per_class * n_classes;
    let mut x = Array2::zeros((dim, n));
    let mut labels = Vec::with_capacity(n);
    for (k, c) in centers.iter().enumerate() {
        for s in 0..n_per_class {
            let j = k * n_per_class + s;
            for i in 0..dim {
                x[[i, j]] = c[i] + rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(k);
        }
    }
    let mut dm = DataMatrix::new(x, Some(labels))?;
    dm.shift_nonnegative();
    Ok(dm)
}

/// The six control-chart pattern families of the UCI "synthetic control"
/// set, regenerated from their published generating equations: normal,
/// cyclic, increasing trend, decreasing trend, upward shift, downward shift
/// (classes 0..5 in that order). Each series is `m + r s + pattern(t)`,
/// `m = 30`, `s = 2`, `r ~ U(-3, 3)` per time step, `t = 1..=length`.
pub fn synthetic_control(n_per_class: usize, length: usize, seed: u64) -> Result<DataMatrix> {
    if n_per_class == 0 || length < 3 {
        return Err(usage("need at least one series per class and length >= 3"));
    }
    let mut rng = seed::rng(seed);
    let (m, s) = (30.0, 2.0);
    let unif = |rng: &mut seed::Rng, lo: f64, hi: f64| rng.sample(Uniform::new(lo, hi).unwrap());
    let n = 6 * n_per_class;
    let mut x = Array2::zeros((length, n));
    let mut labels = Vec::with_capacity(n);
    for class in 0..6 {
        for k in 0..n_per_class {
            let j = class * n_per_class + k;
            let amp = unif(&mut rng, 10.0, 15.0);
            let period = unif(&mut rng, 10.0, 15.0);
            let slope = unif(&mut rng, 0.2, 0.5);
            let jump = unif(&mut rng, 7.5, 20.0);
            let t3 = unif(&mut rng, length as f64 / 3.0, 2.0 * length as f64 / 3.0);
            for ti in 0..length {
                let t = (ti + 1) as f64;
                let base = m + unif(&mut rng, -3.0, 3.0) * s;
                let step = if t >= t3 { 1.0 } else { 0.0 };
                x[[ti, j]] = base
                    + match class {
                        0 => 0.0,
                        1 => amp * (2.0 * std::f64::consts::PI * t / period).sin(),
                        2 => slope * t,
                        3 => -slope * t,
                        4 => step * jump,
                        _ => -step * jump,
                    };
            }
            labels.push(class);
        }
    }
    DataMatrix::new(x, Some(labels))
}

/// `d_out x d_in` Gaussian matrix with unit-norm rows.
pub fn random_projection_matrix(d_out: usize, d_in: usize, seed: u64) -> Result<Array2<f64>> {
    if d_out == 0 || d_in == 0 {
        return Err(usage("projection dimensions must be >= 1"));
    }
    let mut rng = seed::rng(seed);
    let mut r = Array2::from_shape_simple_fn((d_out, d_in), || rng.sample::<f64, _>(StandardNormal));
    for mut row in r.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    Ok(r)
}

/// Random features: every sample multiplied by a row-normalized Gaussian
/// matrix. Labels and names are preserved.
pub fn random_projection_features(data: &DataMatrix, d_out: usize, seed: u64) -> Result<DataMatrix> {
    let r = random_projection_matrix(d_out, data.dim(), seed)?;
    Ok(DataMatrix {
        x: r.dot(&data.x),
        labels: data.labels.clone(),
        names: data.names.clone(),
    })
}

/// All samples of `k` randomly chosen classes, relabelled `0..k` in order of
/// their original class id. Sample order is preserved.
pub fn select_categories(data: &DataMatrix, k: usize, seed: u64) -> Result<DataMatrix> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| usage("category selection needs labelled data"))?;
    let total = data.n_classes().unwrap_or(0);
    if k == 0 || k > total {
        return Err(usage(format!("cannot choose {k} of {total} classes")));
    }
    let mut rng = seed::rng(seed);
    let mut chosen = sample(&mut rng, total, k).into_vec();
    chosen.sort_unstable();
    let mut remap = vec![usize::MAX; total];
    for (new, &old) in chosen.iter().enumerate() {
        remap[old] = new;
    }
    let idx: Vec<usize> = (0..labels.len()).filter(|&j| remap[labels[j]] != usize::MAX).collect();
    let mut sub = data.select_columns(&idx);
    sub.labels = Some(idx.iter().map(|&j| remap[labels[j]]).collect());
    Ok(sub)
}
