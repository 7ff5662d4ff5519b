//! The alternating solver: multiplicative updates for `W`, `V` and `Q`, a
//! linear solve for `P`, the closed-form bias and L2,1 reweighting.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};

use crate::error::{usage, Error, Result};
use crate::factor::{
    gram, init_factors, objective_value, residual_matrix, reweight_m, reweight_s, surrogate_value,
    surrogate_value_uncentered, FactorState, Hyperparams, UpdateIntermediates,
};
use crate::linalg::{self, multiplicative_update, split_signs, SpdSolution};
use crate::trace::{FitTrace, IterRecord};

/// Condition estimate above which the projection solve is ridged.
pub const MAX_CONDITION: f64 = 1e12;

fn numerical(iter: usize, msg: impl Into<String>) -> Error {
    Error::Numerical {
        iter,
        msg: msg.into(),
        trace: None,
    }
}

fn check_finite(a: &Array2<f64>, what: &str, iter: usize) -> Result<()> {
    if linalg::all_finite(&a.view()) {
        Ok(())
    } else {
        Err(numerical(iter, format!("non-finite entries in {what}")))
    }
}

fn add_opt(acc: &mut Option<Array2<f64>>, term: Array2<f64>) {
    match acc {
        Some(a) => *a += &term,
        None => *acc = Some(term),
    }
}

/// Cosine-similarity graph with negatives clamped and a zero diagonal,
/// `P = I`, `M = S = 1`, `b = 0` and seeded factors in `(0, 1]`. Returned
/// warnings name any all-zero sample.
pub fn init_state(x: &Array2<f64>, hp: &Hyperparams, seed: u64) -> Result<(FactorState, Vec<String>)> {
    hp.validate()?;
    let (d, n) = x.dim();
    if hp.rank > n {
        return Err(usage(format!("rank {} exceeds sample count {n}", hp.rank)));
    }
    let (mut q, zero) = linalg::cosine_similarity(&x.view());
    q.mapv_inplace(|v| v.max(0.0));
    q.diag_mut().fill(0.0);
    let warnings = zero
        .iter()
        .map(|j| format!("sample {j} is all zeros; its graph weights are set to 0"))
        .collect();
    let (w, v) = init_factors(n, hp.rank, seed);
    Ok((
        FactorState {
            w,
            v,
            p: Array2::eye(d),
            q,
            b: Array1::zeros(d),
            m: Array1::ones(n),
            s: Array1::ones(d),
            iter: 0,
        },
        warnings,
    ))
}

/// Bias minimizing the `M`-weighted residual for the current factors:
/// `b = (X W V' M e - P' X M e) / N_M`.
pub fn compute_bias(x: &Array2<f64>, state: &FactorState) -> Array1<f64> {
    let n_m = state.m.sum();
    let recon = x.dot(&state.w.dot(&state.v.t().dot(&state.m)));
    let proj = state.p.t().dot(&x.dot(&state.m));
    (recon - proj) / n_m
}

/// One majorize-minimize step on `W` with everything else frozen.
pub fn update_w(
    _x: &Array2<f64>,
    state: &FactorState,
    im: &UpdateIntermediates,
    hp: &Hyperparams,
) -> Result<Array2<f64>> {
    let (w, v) = (&state.w, &state.v);
    let cv_pos = im.apply_c_pos(v);
    let cv_neg = im.apply_c_neg(v);
    let vcv_pos = v.t().dot(&cv_pos);
    let vcv_neg = cv_neg.as_ref().map(|c| v.t().dot(c));

    let kw_pos = im.k_pos.dot(w);
    let mut h_pos = kw_pos.dot(&vcv_pos);
    let mut h_neg: Option<Array2<f64>> = None;
    if let Some(vn) = &vcv_neg {
        add_opt(&mut h_neg, kw_pos.dot(vn));
    }
    if let Some(kn) = &im.k_neg {
        let kw_neg = kn.dot(w);
        add_opt(&mut h_neg, kw_neg.dot(&vcv_pos));
        if let Some(vn) = &vcv_neg {
            h_pos += &kw_neg.dot(vn);
        }
    }

    let cv = match cv_neg {
        Some(n) => cv_pos - n,
        None => cv_pos,
    };
    let mut lin = im.ky.dot(&cv);

    if hp.alpha != 0.0 {
        let col_sums = v.sum_axis(Axis(0));
        h_pos += &(im.kp_pos.dot(w) * &col_sums * hp.alpha);
        if let Some(kn) = &im.kp_neg {
            add_opt(&mut h_neg, kn.dot(w) * &col_sums * hp.alpha);
        }
        lin += &(im.kp.dot(v) * hp.alpha);
    }
    if hp.beta != 0.0 {
        h_pos += &(im.g_pos.dot(w) * hp.beta);
        if let Some(gn) = &im.g_neg {
            add_opt(&mut h_neg, gn.dot(w) * hp.beta);
        }
    }

    let (lin_pos, lin_neg) = split_signs(&lin);
    if let Some(ln) = lin_neg {
        h_pos += &ln;
    }
    let out = multiplicative_update(w, &h_pos, &lin_pos, h_neg.as_ref(), hp.guard_delta);
    check_finite(&out, "W", state.iter)?;
    Ok(out)
}

/// One majorize-minimize step on `V`, using `state.w` as already updated.
pub fn update_v(
    _x: &Array2<f64>,
    state: &FactorState,
    im: &UpdateIntermediates,
    hp: &Hyperparams,
) -> Result<Array2<f64>> {
    let (w, v) = (&state.w, &state.v);
    let wkw_pos = w.t().dot(&im.k_pos.dot(w));
    let vwkw_pos = v.dot(&wkw_pos);
    let mut h_pos = im.apply_c_pos(&vwkw_pos);
    let mut h_neg = im.apply_c_neg(&vwkw_pos);
    if let Some(kn) = &im.k_neg {
        let vwkw_neg = v.dot(&w.t().dot(&kn.dot(w)));
        add_opt(&mut h_neg, im.apply_c_pos(&vwkw_neg));
        if let Some(t) = im.apply_c_neg(&vwkw_neg) {
            h_pos += &t;
        }
    }

    let mut lin = im.apply_c(&im.ky.t().dot(w));
    let mut extra_pos: Option<Array2<f64>> = None;
    if hp.alpha != 0.0 {
        let kpw = im.kp.dot(w);
        lin += &(&kpw * hp.alpha);
        let kp_diag = im.kp.diag();
        let wkpw_diag = (w * &kpw).sum_axis(Axis(0));
        let n = w.nrows();
        let r = w.ncols();
        let ab = Array2::from_shape_fn((n, r), |(i, k)| 0.5 * hp.alpha * (kp_diag[i] + wkpw_diag[k]));
        extra_pos = Some(ab);
    }
    if hp.beta != 0.0 {
        h_pos += &(im.g_pos.dot(v) * hp.beta);
        if let Some(gn) = &im.g_neg {
            add_opt(&mut h_neg, gn.dot(v) * hp.beta);
        }
    }

    let (lin_pos, lin_neg) = split_signs(&lin);
    if let Some(ln) = lin_neg {
        h_pos += &ln;
    }
    if let Some(e) = extra_pos {
        h_pos += &e;
    }
    let out = multiplicative_update(v, &h_pos, &lin_pos, h_neg.as_ref(), hp.guard_delta);
    check_finite(&out, "V", state.iter)?;
    Ok(out)
}

/// Exact minimizer over `P`: solves
/// `(X (C + alpha Xi + beta G) X' + gamma diag(S)) P = X C V W' X'`.
pub fn update_p(
    x: &Array2<f64>,
    state: &FactorState,
    im: &UpdateIntermediates,
    hp: &Hyperparams,
) -> Result<SpdSolution> {
    let mut t = im.c.clone();
    if hp.alpha != 0.0 {
        t.scaled_add(hp.alpha, &im.xi);
    }
    if hp.beta != 0.0 {
        t.scaled_add(hp.beta, &im.g);
    }
    let mut a = x.dot(&t).dot(&x.t());
    if hp.gamma != 0.0 {
        for (i, s) in state.s.iter().enumerate() {
            a[[i, i]] += hp.gamma * s;
        }
    }
    let rhs = x.dot(&im.apply_c(&state.v)).dot(&x.dot(&state.w).t());
    check_finite(&a, "projection system", state.iter)?;
    check_finite(&rhs, "projection right-hand side", state.iter)?;
    let sol = linalg::solve_spd(&a.view(), &rhs.view(), hp.guard_delta, MAX_CONDITION)?;
    check_finite(&sol.x, "P", state.iter)?;
    Ok(sol)
}

/// The left-hand side and right-hand side of the projection system, for
/// residual checks.
pub fn projection_system(
    x: &Array2<f64>,
    state: &FactorState,
    im: &UpdateIntermediates,
    hp: &Hyperparams,
) -> (Array2<f64>, Array2<f64>) {
    let t = &im.c + &(&im.xi * hp.alpha) + &(&im.g * hp.beta);
    let mut a = x.dot(&t).dot(&x.t());
    for (i, s) in state.s.iter().enumerate() {
        a[[i, i]] += hp.gamma * s;
    }
    let rhs = x.dot(&im.apply_c(&state.v)).dot(&x.dot(&state.w).t());
    (a, rhs)
}

/// One majorize-minimize step on `Q` for `tr(H (I - Q)(I - Q)' H')`; with a
/// nonnegative `H'H` this is `q * (H'H) / (H'H Q)`. The diagonal is kept at 0.
pub fn update_q(state: &FactorState, im: &UpdateIntermediates, hp: &Hyperparams) -> Result<Array2<f64>> {
    let z = im.h.t().dot(&im.h);
    let z = (&z + &z.t()) * 0.5;
    let (z_pos, z_neg) = split_signs(&z);
    let q = &state.q;
    let mut denom = z_pos.dot(q);
    let neg_quad = z_neg.as_ref().map(|zn| {
        denom += zn;
        zn.dot(q)
    });
    let mut out = multiplicative_update(q, &denom, &z_pos, neg_quad.as_ref(), hp.guard_delta);
    out.diag_mut().fill(0.0);
    check_finite(&out, "Q", state.iter)?;
    Ok(out)
}

/// Called after every completed iteration; returning an error aborts the fit.
pub type Observer<'a> = dyn FnMut(&FactorState, &IterRecord) -> Result<()> + 'a;

/// Full solver from a seeded initialization.
pub fn fit(x: &Array2<f64>, hp: &Hyperparams, seed: u64) -> Result<(FactorState, FitTrace)> {
    fit_observed(x, hp, seed, &mut |_, _| Ok(()))
}

pub fn fit_observed(
    x: &Array2<f64>,
    hp: &Hyperparams,
    seed: u64,
    observer: &mut Observer<'_>,
) -> Result<(FactorState, FitTrace)> {
    let (state, warnings) = init_state(x, hp, seed)?;
    let mut trace = FitTrace::new("rfa_lcf");
    for w in warnings {
        trace.warn(w);
    }
    fit_from_state(x, hp, state, trace, observer)
}

/// Continues from an existing state (e.g. a checkpoint); `hp.max_iter`
/// counts further iterations.
pub fn fit_from_state(
    x: &Array2<f64>,
    hp: &Hyperparams,
    state: FactorState,
    trace: FitTrace,
    observer: &mut Observer<'_>,
) -> Result<(FactorState, FitTrace)> {
    run(x, hp, state, trace, false, observer)
}

/// The solver with `P = I`, `M = 1`, `b = 0` frozen and no graph update,
/// which leaves only the plain concept factorization updates.
pub fn fit_reduced_cf_mode(x: &Array2<f64>, hp: &Hyperparams, seed: u64) -> Result<(FactorState, FitTrace)> {
    fit_reduced_cf_mode_observed(x, hp, seed, &mut |_, _| Ok(()))
}

pub fn fit_reduced_cf_mode_observed(
    x: &Array2<f64>,
    hp: &Hyperparams,
    seed: u64,
    observer: &mut Observer<'_>,
) -> Result<(FactorState, FitTrace)> {
    if hp.alpha != 0.0 || hp.beta != 0.0 {
        return Err(usage("reduced CF mode requires alpha = beta = 0"));
    }
    let (state, _) = init_state(x, hp, seed)?;
    run(x, hp, state, FitTrace::new("rfa_lcf_reduced_cf"), true, observer)
}

fn run(
    x: &Array2<f64>,
    hp: &Hyperparams,
    mut state: FactorState,
    mut trace: FitTrace,
    reduced: bool,
    observer: &mut Observer<'_>,
) -> Result<(FactorState, FitTrace)> {
    hp.validate()?;
    if !linalg::all_finite(&x.view()) {
        return Err(usage("data contains non-finite entries"));
    }
    state.check_shapes(x.nrows(), x.ncols())?;
    let attach = |e: Error, trace: &FitTrace| match e {
        Error::Numerical { iter, msg, .. } => Error::Numerical {
            iter,
            msg,
            trace: Some(Box::new(trace.clone())),
        },
        other => other,
    };

    let mut im = UpdateIntermediates::new(x, gram(x), &state, !reduced)?;
    let surrogate = |s: &FactorState| {
        if reduced {
            surrogate_value_uncentered(x, s, hp)
        } else {
            surrogate_value(x, s, hp)
        }
    };

    for _ in 0..hp.max_iter {
        let started = Instant::now();
        let s_start = surrogate(&state)?;
        let v_old = state.v.clone();
        let step = (|| -> Result<()> {
            state.w = update_w(x, &state, &im, hp)?;
            state.v = update_v(x, &state, &im, hp)?;
            im.refresh_factors(&state);
            if reduced {
                return Ok(());
            }
            let sol = update_p(x, &state, &im, hp)?;
            if let Some(ridge) = sol.ridge {
                trace.warn(format!(
                    "iteration {}: projection system ill-conditioned (estimate {:.3e}), ridge {ridge:.3e} added",
                    state.iter, sol.cond_estimate
                ));
            }
            state.p = sol.x;
            im.refresh_projection(x, &state);
            state.q = update_q(&state, &im, hp)?;
            im.refresh_graph(&state);
            Ok(())
        })();
        if let Err(e) = step {
            return Err(attach(e, &trace));
        }
        let s_end = surrogate(&state)?;
        if !reduced {
            state.b = compute_bias(x, &state);
            let r = residual_matrix(x, &state)?;
            state.m = reweight_m(&r.view(), hp.guard_delta);
            state.s = reweight_s(&state.p.view(), hp.guard_delta);
            im.refresh_weights(&state);
        }
        state.iter += 1;

        let (objective, terms) = if reduced {
            let d = x - &x.dot(&state.w).dot(&state.v.t());
            (linalg::frobenius_sq(&d.view()), None)
        } else {
            let ob = objective_value(x, &state, hp)?;
            (ob.total, Some(ob))
        };
        let divergence = linalg::frobenius(&(&state.v - &v_old).view());
        let record = IterRecord {
            iter: state.iter,
            objective,
            terms,
            surrogate_start: Some(s_start),
            surrogate_end: Some(s_end),
            divergence,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        trace.records.push(record);
        trace.iterations_run += 1;
        if !objective.is_finite() || !divergence.is_finite() {
            let e = numerical(state.iter, "objective is not finite");
            return Err(attach(e, &trace));
        }
        observer(&state, trace.records.last().expect("record just pushed"))?;
        if divergence <= hp.eps_conv {
            trace.converged = true;
            break;
        }
    }
    Ok((state, trace))
}
