//! Dense helpers shared by the solvers: sign splitting, the majorize-minimize
//! multiplicative step, cosine similarity and a guarded SPD solve.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub fn frobenius_sq(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn frobenius(a: &ArrayView2<f64>) -> f64 {
    frobenius_sq(a).sqrt()
}

/// Splits `a` into elementwise nonnegative parts with `a = pos - neg`.
/// The negative part is `None` when `a` has no negative entries.
pub fn split_signs(a: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
    if a.iter().all(|&v| v >= 0.0) {
        return (a.clone(), None);
    }
    (a.mapv(|v| v.max(0.0)), Some(a.mapv(|v| (-v).max(0.0))))
}

pub fn row_norms(a: &ArrayView2<f64>) -> Array1<f64> {
    a.map_axis(Axis(1), |row| row.dot(&row).sqrt())
}

pub fn all_finite(a: &ArrayView2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// One majorize-minimize multiplicative step for a nonnegative variable `z`
/// of a quadratic `1/2 z'Hz + c'z`, given the gradient split at `z`:
///
/// * `denom`    = (H+ z) + c+  (positive part of the gradient)
/// * `neg_lin`  = c-
/// * `neg_quad` = H- z, or `None` when the curvature has no negative part
///
/// Without negative curvature this is the familiar `z * c- / denom`. With it,
/// the minimizer of the auxiliary function is the positive root of
/// `denom t^2 - c- t - h- = 0` (scaled by `z`). Both forms leave `z`
/// unchanged when `c- + h- == denom`, and zeros stay zero.
pub fn multiplicative_update(
    z: &Array2<f64>,
    denom: &Array2<f64>,
    neg_lin: &Array2<f64>,
    neg_quad: Option<&Array2<f64>>,
    guard: f64,
) -> Array2<f64> {
    let mut out = z.clone();
    match neg_quad {
        None => Zip::from(&mut out)
            .and(denom)
            .and(neg_lin)
            .for_each(|o, &p, &n| *o *= n / p.max(guard)),
        Some(hneg) => Zip::from(&mut out)
            .and(denom)
            .and(neg_lin)
            .and(hneg)
            .for_each(|o, &p, &n, &h| {
                let p = p.max(guard);
                *o *= (n + (n * n + 4.0 * p * h).sqrt()) / (2.0 * p);
            }),
    }
    out
}

/// Cosine similarity between the columns of `x`. Columns with zero norm get
/// similarity 0 to everything (including themselves); their indices are
/// returned alongside.
pub fn cosine_similarity(x: &ArrayView2<f64>) -> (Array2<f64>, Vec<usize>) {
    let norms = x.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    let mut unit = x.to_owned();
    let mut zero = Vec::new();
    for (j, mut col) in unit.axis_iter_mut(Axis(1)).enumerate() {
        if norms[j] > 0.0 {
            col /= norms[j];
        } else {
            zero.push(j);
        }
    }
    let mut sim = unit.t().dot(&unit);
    for &j in &zero {
        sim.row_mut(j).fill(0.0);
        sim.column_mut(j).fill(0.0);
    }
    (sim, zero)
}

pub(crate) fn to_nalgebra(a: &ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub x: Array2<f64>,
    /// Ridge added to the diagonal, if the system needed one.
    pub ridge: Option<f64>,
    /// Squared ratio of the extreme Cholesky pivots.
    pub cond_estimate: f64,
}

/// Solves `A X = B` for symmetric positive (semi)definite `A` by Cholesky,
/// with one step of iterative refinement. If the factorization fails or the
/// condition estimate exceeds `max_cond`, a ridge of `guard * max(1, max diag)`
/// is added and reported.
pub fn solve_spd(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    guard: f64,
    max_cond: f64,
) -> Result<SpdSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Dimension(format!(
            "system matrix {}x{} with right-hand side {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let sym = (&a.view() + &a.t()) * 0.5;
    let am = to_nalgebra(&sym.view());
    let bm = to_nalgebra(b);

    let factor = |m: &DMatrix<f64>| -> Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
        let chol = m.clone().cholesky()?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..n {
            let d = l[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let cond = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
        Some((chol, cond))
    };

    let mut ridge = None;
    let mut work = am.clone();
    let (chol, cond) = match factor(&work) {
        Some((c, cond)) if cond <= max_cond => (c, cond),
        _ => {
            let max_diag = (0..n).map(|i| work[(i, i)].abs()).fold(0.0, f64::max);
            let lambda = guard * max_diag.max(1.0);
            for i in 0..n {
                work[(i, i)] += lambda;
            }
            ridge = Some(lambda);
            factor(&work).ok_or_else(|| {
                Error::Internal("system is not positive definite even after ridge".into())
            })?
        }
    };

    let mut x = chol.solve(&bm);
    // One refinement step against the (possibly ridged) system.
    let resid = &bm - &work * &x;
    x += chol.solve(&resid);

    Ok(SpdSolution {
        x: from_nalgebra(&x),
        ridge,
        cond_estimate: cond,
    })
}
