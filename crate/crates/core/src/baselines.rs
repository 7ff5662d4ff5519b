//! Concept factorization baselines (CF, LCCF, LCF) and the k-NN graphs they
//! use.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::factor::{gram, init_factors, locality_sum};
use crate::linalg::{self, multiplicative_update, split_signs};
use crate::trace::{FitTrace, IterRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub lambda: f64,
    /// Reserved; unused by the three baselines.
    pub mu: f64,
    pub rank: usize,
    pub eps_conv: f64,
    pub max_iter: usize,
    pub guard_delta: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 0.0,
            rank: 2,
            eps_conv: 1e-3,
            max_iter: 100,
            guard_delta: 1e-8,
        }
    }
}

impl BaselineParams {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(usage("lambda must be finite and >= 0"));
        }
        if self.rank == 0 {
            return Err(usage("rank must be >= 1"));
        }
        if !(self.eps_conv > 0.0) || !(self.guard_delta > 0.0) {
            return Err(usage("eps_conv and guard_delta must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphWeights {
    /// Symmetric affinity with zero diagonal.
    pub s: Array2<f64>,
    /// Degrees `D_ii = sum_j S_ij`.
    pub d: Array1<f64>,
    /// Laplacian `D - S`.
    pub l: Array2<f64>,
    pub k: usize,
    pub warnings: Vec<String>,
}

impl GraphWeights {
    pub fn from_affinity(s: Array2<f64>, k: usize, warnings: Vec<String>) -> Self {
        let d = s.sum_axis(Axis(1));
        let l = Array2::from_diag(&d) - &s;
        Self { s, d, l, k, warnings }
    }
}

/// Indices of the `k` most similar other samples of every sample, ties
/// broken by the lower index.
fn knn_sets(sim: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = sim.nrows();
    (0..n)
        .map(|i| {
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| sim[[i, b]].total_cmp(&sim[[i, a]]).then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect()
}

fn knn_graph(x: &Array2<f64>, k: usize, binary: bool) -> Result<GraphWeights> {
    let n = x.ncols();
    if k == 0 || k >= n {
        return Err(usage(format!("neighbourhood size {k} must lie in 1..{n}")));
    }
    let (mut sim, zero) = linalg::cosine_similarity(&x.view());
    sim.mapv_inplace(|v| v.max(0.0));
    let sets = knn_sets(&sim, k);
    let mut s = Array2::zeros((n, n));
    for (i, set) in sets.iter().enumerate() {
        for &j in set {
            let w = if binary { 1.0 } else { sim[[i, j]] };
            s[[i, j]] = w;
            s[[j, i]] = w;
        }
    }
    for &j in &zero {
        s.row_mut(j).fill(0.0);
        s.column_mut(j).fill(0.0);
    }
    let warnings = zero
        .iter()
        .map(|j| format!("sample {j} is all zeros; it has no graph edges"))
        .collect::<Vec<_>>();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(GraphWeights::from_affinity(s, k, warnings))
}

/// Symmetric k-NN graph weighted by (nonnegative) cosine similarity: an edge
/// exists when either sample is among the other's `k` nearest.
pub fn knn_cosine_graph(x: &Array2<f64>, k: usize) -> Result<GraphWeights> {
    knn_graph(x, k, false)
}

/// The same neighbourhoods with 0/1 weights.
pub fn knn_binary_graph(x: &Array2<f64>, k: usize) -> Result<GraphWeights> {
    knn_graph(x, k, true)
}

#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub w: Array2<f64>,
    pub v: Array2<f64>,
    pub trace: FitTrace,
}

/// `|X - X W V'|_F^2`.
pub fn cf_objective(x: &Array2<f64>, w: &Array2<f64>, v: &Array2<f64>) -> f64 {
    linalg::frobenius_sq(&(x - &x.dot(w).dot(&v.t())).view())
}

/// CF objective plus `lambda tr(V' L V)`.
pub fn lccf_objective(x: &Array2<f64>, w: &Array2<f64>, v: &Array2<f64>, lambda: f64, graph: &GraphWeights) -> f64 {
    let smooth = (v * &graph.l.dot(v)).sum();
    cf_objective(x, w, v) + lambda * smooth
}

/// CF objective plus `lambda sum_i sum_r |v_ir| |X w_r - x_i|^2`.
pub fn lcf_objective(x: &Array2<f64>, w: &Array2<f64>, v: &Array2<f64>, lambda: f64) -> f64 {
    cf_objective(x, w, v) + lambda * locality_sum(x, w, v)
}

struct Kernel {
    k: Array2<f64>,
    k_pos: Array2<f64>,
    k_neg: Option<Array2<f64>>,
}

impl Kernel {
    fn new(x: &Array2<f64>) -> Self {
        let k = gram(x);
        let (k_pos, k_neg) = split_signs(&k);
        Self { k, k_pos, k_neg }
    }
}

fn finish(z: Array2<f64>, what: &str, iter: usize) -> Result<Array2<f64>> {
    if linalg::all_finite(&z.view()) {
        Ok(z)
    } else {
        Err(Error::Numerical {
            iter,
            msg: format!("non-finite entries in {what}"),
            trace: None,
        })
    }
}

/// `W <- W * (1+lambda) K V / (K W V'V + lambda K W diag(V'1))`; with
/// `lambda = 0` this is the CF rule. Negative Gram entries (signed data) are
/// handled by the sign-split majorizer.
fn w_step(ker: &Kernel, w: &Array2<f64>, v: &Array2<f64>, local: f64, guard: f64, iter: usize) -> Result<Array2<f64>> {
    let vtv = v.t().dot(v);
    let mut denom = ker.k_pos.dot(w).dot(&vtv);
    let mut neg_quad = ker.k_neg.as_ref().map(|kn| kn.dot(w).dot(&vtv));
    let mut lin = ker.k.dot(v);
    if local != 0.0 {
        let c = v.sum_axis(Axis(0));
        denom += &(ker.k_pos.dot(w) * &c * local);
        if let (Some(nq), Some(kn)) = (neg_quad.as_mut(), ker.k_neg.as_ref()) {
            *nq += &(kn.dot(w) * &c * local);
        }
        lin *= 1.0 + local;
    }
    let (lin_pos, lin_neg) = split_signs(&lin);
    if let Some(ln) = lin_neg {
        denom += &ln;
    }
    finish(multiplicative_update(w, &denom, &lin_pos, neg_quad.as_ref(), guard), "W", iter)
}

/// `V <- V * (K W + lambda S V) / (V W'KW + lambda D V)` for a graph, or the
/// locality rule `V * (1+lambda) K W / (V W'KW + lambda/2 (A' + B'))`.
fn v_step(
    ker: &Kernel,
    w: &Array2<f64>,
    v: &Array2<f64>,
    graph: Option<(&GraphWeights, f64)>,
    local: f64,
    guard: f64,
    iter: usize,
) -> Result<Array2<f64>> {
    let mut denom = v.dot(&w.t().dot(&ker.k_pos.dot(w)));
    let neg_quad = ker.k_neg.as_ref().map(|kn| v.dot(&w.t().dot(&kn.dot(w))));
    let kw = ker.k.dot(w);
    let mut lin = kw.clone();
    if let Some((g, lambda)) = graph {
        if lambda != 0.0 {
            lin += &(g.s.dot(v) * lambda);
            denom += &(v * &g.d.view().insert_axis(Axis(1)) * lambda);
        }
    }
    if local != 0.0 {
        lin *= 1.0 + local;
        let kdiag = ker.k.diag();
        let wkw_diag = (w * &kw).sum_axis(Axis(0));
        let ab = Array2::from_shape_fn(v.dim(), |(i, r)| 0.5 * local * (kdiag[i] + wkw_diag[r]));
        denom += &ab;
    }
    let (lin_pos, lin_neg) = split_signs(&lin);
    if let Some(ln) = lin_neg {
        denom += &ln;
    }
    finish(multiplicative_update(v, &denom, &lin_pos, neg_quad.as_ref(), guard), "V", iter)
}

/// Called after every iteration with the updated `W`, `V`.
pub type BaselineObserver<'a> = dyn FnMut(&Array2<f64>, &Array2<f64>, &IterRecord) + 'a;

#[derive(Clone, Copy)]
enum Variant<'g> {
    Cf,
    Lccf(&'g GraphWeights),
    Lcf,
}

fn run(
    x: &Array2<f64>,
    p: &BaselineParams,
    seed: u64,
    variant: Variant<'_>,
    observer: &mut BaselineObserver<'_>,
) -> Result<BaselineFit> {
    p.validate()?;
    let n = x.ncols();
    if p.rank > n {
        return Err(usage(format!("rank {} exceeds sample count {n}", p.rank)));
    }
    if !linalg::all_finite(&x.view()) {
        return Err(usage("data contains non-finite entries"));
    }
    let name = match variant {
        Variant::Cf => "cf",
        Variant::Lccf(g) => {
            if g.s.dim() != (n, n) {
                return Err(usage("graph size does not match the data"));
            }
            "lccf"
        }
        Variant::Lcf => "lcf",
    };
    let objective = |w: &Array2<f64>, v: &Array2<f64>| match variant {
        Variant::Cf => cf_objective(x, w, v),
        Variant::Lccf(g) => lccf_objective(x, w, v, p.lambda, g),
        Variant::Lcf => lcf_objective(x, w, v, p.lambda),
    };
    let ker = Kernel::new(x);
    let (mut w, mut v) = init_factors(n, p.rank, seed);
    let mut trace = FitTrace::new(name);
    let local = if matches!(variant, Variant::Lcf) { p.lambda } else { 0.0 };
    let graph = match variant {
        Variant::Lccf(g) => Some((g, p.lambda)),
        _ => None,
    };
    for it in 0..p.max_iter {
        let started = Instant::now();
        let step = w_step(&ker, &w, &v, local, p.guard_delta, it)
            .and_then(|nw| v_step(&ker, &nw, &v, graph, local, p.guard_delta, it).map(|nv| (nw, nv)));
        let (nw, nv) = match step {
            Ok(s) => s,
            Err(Error::Numerical { iter, msg, .. }) => {
                return Err(Error::Numerical {
                    iter,
                    msg,
                    trace: Some(Box::new(trace)),
                })
            }
            Err(e) => return Err(e),
        };
        let divergence = linalg::frobenius(&(&nv - &v).view());
        w = nw;
        v = nv;
        let record = IterRecord {
            iter: it + 1,
            objective: objective(&w, &v),
            terms: None,
            surrogate_start: None,
            surrogate_end: None,
            divergence,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        trace.iterations_run += 1;
        observer(&w, &v, &record);
        let done = divergence <= p.eps_conv;
        trace.records.push(record);
        if done {
            trace.converged = true;
            break;
        }
    }
    Ok(BaselineFit { w, v, trace })
}

pub fn cf_fit(x: &Array2<f64>, p: &BaselineParams, seed: u64) -> Result<BaselineFit> {
    run(x, p, seed, Variant::Cf, &mut |_, _, _| {})
}

pub fn cf_fit_observed(
    x: &Array2<f64>,
    p: &BaselineParams,
    seed: u64,
    observer: &mut BaselineObserver<'_>,
) -> Result<BaselineFit> {
    run(x, p, seed, Variant::Cf, observer)
}

pub fn lccf_fit(x: &Array2<f64>, p: &BaselineParams, graph: &GraphWeights, seed: u64) -> Result<BaselineFit> {
    run(x, p, seed, Variant::Lccf(graph), &mut |_, _, _| {})
}

pub fn lccf_fit_observed(
    x: &Array2<f64>,
    p: &BaselineParams,
    graph: &GraphWeights,
    seed: u64,
    observer: &mut BaselineObserver<'_>,
) -> Result<BaselineFit> {
    run(x, p, seed, Variant::Lccf(graph), observer)
}

pub fn lcf_fit(x: &Array2<f64>, p: &BaselineParams, seed: u64) -> Result<BaselineFit> {
    run(x, p, seed, Variant::Lcf, &mut |_, _, _| {})
}

pub fn lcf_fit_observed(
    x: &Array2<f64>,
    p: &BaselineParams,
    seed: u64,
    observer: &mut BaselineObserver<'_>,
) -> Result<BaselineFit> {
    run(x, p, seed, Variant::Lcf, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_columns_with_two_neighbours() {
        let x = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let g = knn_cosine_graph(&x, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 1.0 };
                assert!((g.s[[i, j]] - want).abs() < 1e-12);
            }
        }
        assert!(g.l.sum_axis(Axis(1)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn nearest_tie_goes_to_lower_index() {
        let x = array![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        let g = knn_cosine_graph(&x, 1).unwrap();
        // 0 -> 1, 1 -> 0, 2 -> 0; the pair (1, 2) has no edge.
        assert_eq!(g.s[[1, 2]], 0.0);
        assert!((g.s[[0, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_columns_have_no_weight() {
        let x = Array2::<f64>::eye(4);
        let g = knn_cosine_graph(&x, 2).unwrap();
        assert!(g.s.iter().all(|&v| v == 0.0));
        assert!(g.l.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_neighbourhood_size() {
        let x = Array2::<f64>::eye(3);
        assert!(matches!(knn_cosine_graph(&x, 3), Err(Error::Usage(_))));
        assert!(matches!(knn_cosine_graph(&x, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn exact_factorization_is_a_fixed_point() {
        // X W V' = X with W = V = I.
        let x = array![[1.0, 2.0, 0.5], [0.0, 1.0, 3.0]];
        let ker = Kernel::new(&x);
        let eye = Array2::<f64>::eye(3);
        let w = w_step(&ker, &eye, &eye, 0.0, 1e-12, 0).unwrap();
        let v = v_step(&ker, &w, &eye, None, 0.0, 1e-12, 0).unwrap();
        assert!(cf_objective(&x, &w, &v) < 1e-24);
    }
}
