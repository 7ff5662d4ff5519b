//! Spherical k-means, Hungarian-matched accuracy, pairwise F-measure and
//! the graph reconstruction error.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::linalg;
use crate::seed;

/// Restarts used by the evaluation protocol.
pub const DEFAULT_RESTARTS: usize = 30;

const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub assignment: Vec<usize>,
    /// Sum of cosine distances to the assigned centroids.
    pub inertia: f64,
    pub restarts_used: usize,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub ac: f64,
    pub f_measure: f64,
    /// `mapping[c]` is the ground-truth class matched to predicted cluster `c`.
    pub mapping: Vec<usize>,
}

fn unit_rows(a: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Nearest centroid (lowest index on ties) and its cosine distance.
fn nearest(sims: ndarray::ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    for (c, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = c;
        }
    }
    (best, 1.0 - sims[best])
}

fn seed_centroids(unit: &Array2<f64>, k: usize, rng: &mut seed::Rng) -> Array2<f64> {
    let n = unit.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Array1<f64> = unit.dot(&unit.row(chosen[0])).mapv(|s| (1.0 - s).max(0.0));
    while chosen.len() < k {
        let weights: Vec<f64> = dist.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && t < *w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            while weights[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let d_new = unit.dot(&unit.row(next)).mapv(|s| (1.0 - s).max(0.0));
        dist.zip_mut_with(&d_new, |a, &b| *a = a.min(b));
    }
    unit.select(Axis(0), &chosen)
}

struct Run {
    assignment: Vec<usize>,
    inertia: f64,
    history: Vec<f64>,
}

fn lloyd(unit: &Array2<f64>, k: usize, rng: &mut seed::Rng) -> Run {
    let n = unit.nrows();
    let mut centroids = seed_centroids(unit, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let sims = unit.dot(&centroids.t());
        let mut changed = false;
        let mut dist = vec![0.0; n];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let (c, d) = nearest(sims.row(i));
            if assignment[i] != c {
                changed = true;
                assignment[i] = c;
            }
            dist[i] = d;
            counts[c] += 1;
        }
        // Empty clusters take the farthest point from a cluster that can
        // spare one.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| counts[assignment[i]] > 1 && dist[i] > 0.0)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = donor {
                counts[assignment[i]] -= 1;
                assignment[i] = c;
                counts[c] = 1;
                centroids.row_mut(c).assign(&unit.row(i));
                dist[i] = 0.0;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, unit.ncols()));
        for i in 0..n {
            let mut row = sums.row_mut(assignment[i]);
            row += &unit.row(i);
        }
        for c in 0..k {
            let row = sums.row(c);
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                let unit_c = &row / norm;
                centroids.row_mut(c).assign(&unit_c);
            }
        }
        let inertia: f64 = (0..n)
            .map(|i| 1.0 - unit.row(i).dot(&centroids.row(assignment[i])))
            .sum();
        history.push(inertia.max(0.0));
        if !changed {
            break;
        }
    }
    Run {
        assignment,
        inertia: *history.last().unwrap_or(&0.0),
        history,
    }
}

/// k-means on the rows of `reps` with distance `1 - cosine`, distance-weighted
/// seeding and `n_restarts` seeded restarts; the lowest-inertia run wins.
/// All-zero rows are equidistant from every centroid and join cluster 0.
pub fn kmeans_cosine(reps: &ArrayView2<f64>, k: usize, n_restarts: usize, seed: u64) -> Result<ClusteringResult> {
    let n = reps.nrows();
    if k == 0 || k > n {
        return Err(usage(format!("cannot form {k} clusters from {n} samples")));
    }
    if n_restarts == 0 {
        return Err(usage("need at least one restart"));
    }
    if !linalg::all_finite(reps) {
        return Err(usage("representations contain non-finite entries"));
    }
    let unit = unit_rows(reps);
    let mut best: Option<Run> = None;
    for r in 0..n_restarts {
        let mut rng = seed::rng(seed::derive(seed, &[r as u64]));
        let run = lloyd(&unit, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(ClusteringResult {
        assignment: best.assignment,
        inertia: best.inertia,
        restarts_used: n_restarts,
        inertia_history: best.history,
    })
}

/// Minimum-cost assignment on a square matrix; returns the row-to-column
/// assignment and the dual potentials `(u, v)` with `cost[i][j] >= u_i + v_j`.
fn hungarian_min(cost: &[Vec<i64>]) -> (Vec<usize>, Vec<i64>, Vec<i64>) {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Augmenting path for `row` in the tight-edge graph, avoiding frozen rows
/// and columns.
fn augment(
    row: usize,
    tight: &[Vec<bool>],
    col_owner: &mut [Option<usize>],
    row_col: &mut [usize],
    frozen_col: &[bool],
    seen: &mut [bool],
) -> bool {
    for c in 0..tight.len() {
        if !tight[row][c] || frozen_col[c] || seen[c] {
            continue;
        }
        seen[c] = true;
        let ok = match col_owner[c] {
            None => true,
            Some(r2) => augment(r2, tight, col_owner, row_col, frozen_col, seen),
        };
        if ok {
            col_owner[c] = Some(row);
            row_col[row] = c;
            return true;
        }
    }
    false
}

/// Permutation `perm` maximizing `sum_k conf[k][perm[k]]`; among optimal
/// permutations the lexicographically smallest is returned.
pub fn hungarian_max_match(conf: &Array2<u64>) -> Result<Vec<usize>> {
    let n = conf.nrows();
    if conf.ncols() != n {
        return Err(usage("confusion matrix must be square"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let max = *conf.iter().max().unwrap_or(&0) as i64;
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| (0..n).map(|j| max - conf[[i, j]] as i64).collect())
        .collect();
    let (mut row_col, u, v) = hungarian_min(&cost);
    // Every optimal assignment uses only edges that are tight for the
    // optimal duals, so the lexicographic refinement is a matching problem.
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| cost[i][j] == u[i] + v[j]).collect())
        .collect();
    let mut col_owner: Vec<Option<usize>> = vec![None; n];
    for (i, &c) in row_col.iter().enumerate() {
        col_owner[c] = Some(i);
    }
    let mut frozen_col = vec![false; n];
    for i in 0..n {
        for j in 0..row_col[i] {
            if !tight[i][j] || frozen_col[j] {
                continue;
            }
            let (saved_owner, saved_rc) = (col_owner.clone(), row_col.clone());
            let displaced = col_owner[j].expect("every column is matched");
            let freed = row_col[i];
            col_owner[freed] = None;
            col_owner[j] = Some(i);
            row_col[i] = j;
            frozen_col[j] = true;
            let mut seen = vec![false; n];
            if augment(displaced, &tight, &mut col_owner, &mut row_col, &frozen_col, &mut seen) {
                frozen_col[j] = false;
                break;
            }
            frozen_col[j] = false;
            col_owner = saved_owner;
            row_col = saved_rc;
        }
        frozen_col[row_col[i]] = true;
    }
    Ok(row_col)
}

/// Maps arbitrary labels to `0..K` in ascending order of first value.
fn contiguous(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut uniq: Vec<usize> = labels.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let ids = labels.iter().map(|l| uniq.binary_search(l).expect("present")).collect();
    (ids, uniq.len())
}

/// Counts of (predicted, true) pairs, padded to a square matrix.
pub fn confusion_matrix(pred: &[usize], truth: &[usize]) -> Result<Array2<u64>> {
    if pred.len() != truth.len() {
        return Err(usage(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let (p, kp) = contiguous(pred);
    let (t, kt) = contiguous(truth);
    let k = kp.max(kt);
    let mut conf = Array2::zeros((k, k));
    for (a, b) in p.iter().zip(t.iter()) {
        conf[[*a, *b]] += 1;
    }
    Ok(conf)
}

/// Accuracy under the best one-to-one cluster-to-class mapping, and that
/// mapping (indexed by contiguous predicted cluster id).
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<(f64, Vec<usize>)> {
    let conf = confusion_matrix(pred, truth)?;
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let perm = hungarian_max_match(&conf)?;
    let hits: u64 = perm.iter().enumerate().map(|(i, &j)| conf[[i, j]]).sum();
    Ok((hits as f64 / pred.len() as f64, perm))
}

fn pairs(c: u64) -> u64 {
    c * c.saturating_sub(1) / 2
}

/// Pair counts `(together in both, together in pred, together in truth)`.
pub fn pair_counts(pred: &[usize], truth: &[usize]) -> Result<(u64, u64, u64)> {
    let conf = confusion_matrix(pred, truth)?;
    let tp = conf.iter().map(|&c| pairs(c)).sum();
    let pp = conf.sum_axis(Axis(1)).iter().map(|&c| pairs(c)).sum();
    let tt = conf.sum_axis(Axis(0)).iter().map(|&c| pairs(c)).sum();
    Ok((tp, pp, tt))
}

/// Pairwise precision and recall; 0 where no pair exists.
pub fn pairwise_precision_recall(pred: &[usize], truth: &[usize]) -> Result<(f64, f64)> {
    let (tp, pp, tt) = pair_counts(pred, truth)?;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((ratio(tp, pp), ratio(tp, tt)))
}

/// F1 from pairwise precision and recall; degenerate cases give 0.
pub fn f_from_counts(tp: u64, pred_pairs: u64, true_pairs: u64) -> f64 {
    if tp == 0 || pred_pairs == 0 || true_pairs == 0 {
        return 0.0;
    }
    let p = tp as f64 / pred_pairs as f64;
    let r = tp as f64 / true_pairs as f64;
    2.0 * p * r / (p + r)
}

pub fn pairwise_f_measure(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let (tp, pp, tt) = pair_counts(pred, truth)?;
    Ok(f_from_counts(tp, pp, tt))
}

pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<EvalScores> {
    let (ac, mapping) = clustering_accuracy(pred, truth)?;
    let f_measure = pairwise_f_measure(pred, truth)?;
    Ok(EvalScores { ac, f_measure, mapping })
}

/// `|X - X Q|_F^2 / |X|_F^2`.
pub fn graph_reconstruction_error(x: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
    let n = x.ncols();
    if q.dim() != (n, n) {
        return Err(usage(format!("weights {:?} do not match {n} samples", q.dim())));
    }
    let denom = linalg::frobenius_sq(&x.view());
    if denom == 0.0 {
        return Err(usage("data matrix is zero"));
    }
    Ok(linalg::frobenius_sq(&(x - &x.dot(q)).view()) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_and_reversal() {
        let id = Array2::from_diag(&Array1::from_elem(4, 5u64));
        assert_eq!(hungarian_max_match(&id).unwrap(), vec![0, 1, 2, 3]);
        let mut anti = Array2::zeros((3, 3));
        for i in 0..3 {
            anti[[i, 2 - i]] = 4u64;
        }
        assert_eq!(hungarian_max_match(&anti).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn ties_prefer_smallest_permutation() {
        let flat = Array2::from_elem((3, 3), 1u64);
        assert_eq!(hungarian_max_match(&flat).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn accuracy_examples() {
        let truth = [0, 0, 0, 1, 1, 1];
        assert_eq!(clustering_accuracy(&truth, &truth).unwrap().0, 1.0);
        let renamed = [5, 5, 5, 2, 2, 2];
        assert_eq!(clustering_accuracy(&renamed, &truth).unwrap().0, 1.0);
        let (ac, _) = clustering_accuracy(&[1, 1, 0, 0, 0, 0], &truth).unwrap();
        assert!((ac - 5.0 / 6.0).abs() < 1e-15);
        assert!(clustering_accuracy(&[0], &truth).is_err());
    }

    #[test]
    fn f_measure_examples() {
        let truth = [0, 0, 1, 1, 2];
        assert_eq!(pairwise_f_measure(&truth, &truth).unwrap(), 1.0);
        let singletons: Vec<usize> = (0..5).collect();
        assert_eq!(pairwise_f_measure(&singletons, &[0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_error_limits() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(graph_reconstruction_error(&x, &Array2::eye(2)).unwrap(), 0.0);
        assert_eq!(graph_reconstruction_error(&x, &Array2::zeros((2, 2))).unwrap(), 1.0);
        assert!(graph_reconstruction_error(&Array2::zeros((2, 2)), &Array2::eye(2)).is_err());
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let reps = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let res = kmeans_cosine(&reps.view(), 3, 4, 0).unwrap();
        assert!(res.inertia.abs() < 1e-12);
        let mut a = res.assignment.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn kmeans_rejects_too_many_clusters() {
        let reps = Array2::<f64>::ones((2, 2));
        assert!(kmeans_cosine(&reps.view(), 3, 1, 0).is_err());
    }
}
