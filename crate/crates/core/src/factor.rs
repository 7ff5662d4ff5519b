//! Factorization state, the robust objective, its trace-form surrogate and
//! the per-iteration intermediates shared by the update rules.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{read_cfm, write_cfm};
use crate::error::{dim, usage, Error, Result};
use crate::linalg::{self, split_signs};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Locality / coordinate-coding weight.
    pub alpha: f64,
    /// Auto-weighting (adaptive graph) weight.
    pub beta: f64,
    /// Row sparsity weight on the projection.
    pub gamma: f64,
    pub rank: usize,
    pub eps_conv: f64,
    pub max_iter: usize,
    pub guard_delta: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 1e4,
            beta: 1e6,
            gamma: 1e-4,
            rank: 2,
            eps_conv: 1e-3,
            max_iter: 100,
            guard_delta: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(usage(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.rank == 0 {
            return Err(usage("rank must be >= 1"));
        }
        if !(self.eps_conv > 0.0) {
            return Err(usage("eps_conv must be > 0"));
        }
        if !(self.guard_delta > 0.0) {
            return Err(usage("guard_delta must be > 0"));
        }
        Ok(())
    }
}

/// Seeded `N x r` factors with entries in `(0, 1]`, shared by every solver so
/// that runs with equal seeds start from identical points.
pub fn init_factors(n: usize, rank: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = seed::rng(seed);
    let mut draw = || 1.0 - rng.random::<f64>();
    let w = Array2::from_shape_simple_fn((n, rank), &mut draw);
    let v = Array2::from_shape_simple_fn((n, rank), &mut draw);
    (w, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    /// `N x r` concept weights.
    pub w: Array2<f64>,
    /// `N x r` representations, one row per sample.
    pub v: Array2<f64>,
    /// `d x d` projection.
    pub p: Array2<f64>,
    /// `N x N` reconstruction weights with zero diagonal.
    pub q: Array2<f64>,
    pub b: Array1<f64>,
    /// Per-sample reweighting diagonal.
    pub m: Array1<f64>,
    /// Per-feature reweighting diagonal.
    pub s: Array1<f64>,
    pub iter: usize,
}

const TAGS: [&[u8; 4]; 8] = [b"W   ", b"V   ", b"P   ", b"Q   ", b"b   ", b"M   ", b"S   ", b"iter"];

impl FactorState {
    pub fn n_samples(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    /// Checks shapes against a `d x N` data matrix.
    pub fn check_shapes(&self, d: usize, n: usize) -> Result<()> {
        let r = self.rank();
        let ok = self.w.dim() == (n, r)
            && self.v.dim() == (n, r)
            && self.p.dim() == (d, d)
            && self.q.dim() == (n, n)
            && self.b.len() == d
            && self.m.len() == n
            && self.s.len() == d;
        if ok {
            Ok(())
        } else {
            Err(dim(format!(
                "state (W {:?}, V {:?}, P {:?}, Q {:?}, b {}, M {}, S {}) does not fit data {d}x{n}",
                self.w.dim(),
                self.v.dim(),
                self.p.dim(),
                self.q.dim(),
                self.b.len(),
                self.m.len(),
                self.s.len()
            )))
        }
    }

    /// Sign, diagonal and finiteness constraints.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes(self.dim(), self.n_samples())?;
        if self.w.iter().chain(self.v.iter()).chain(self.q.iter()).any(|&x| !(x >= 0.0)) {
            return Err(usage("W, V and Q must be nonnegative"));
        }
        if self.q.diag().iter().any(|&x| x != 0.0) {
            return Err(usage("Q must have a zero diagonal"));
        }
        if self.m.iter().chain(self.s.iter()).any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(usage("M and S must be positive and finite"));
        }
        if !linalg::all_finite(&self.p.view()) || self.b.iter().any(|x| !x.is_finite()) {
            return Err(usage("P and b must be finite"));
        }
        Ok(())
    }

    /// Writes one tagged `CFM1` block per field.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        let col = |a: &Array1<f64>| a.clone().insert_axis(Axis(1));
        let blocks = [
            self.w.clone(),
            self.v.clone(),
            self.p.clone(),
            self.q.clone(),
            col(&self.b),
            col(&self.m),
            col(&self.s),
            Array2::from_elem((1, 1), self.iter as f64),
        ];
        for (tag, block) in TAGS.iter().zip(blocks.iter()) {
            out.write_all(*tag)?;
            write_cfm(block, out)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Self> {
        let mut fields: [Option<Array2<f64>>; 8] = Default::default();
        loop {
            let mut tag = [0u8; 4];
            let mut got = 0;
            while got < 4 {
                let n = input.read(&mut tag[got..])?;
                if n == 0 {
                    break;
                }
                got += n;
            }
            if got == 0 {
                break;
            }
            if got < 4 {
                return Err(Error::Format("truncated block tag".into()));
            }
            let idx = TAGS
                .iter()
                .position(|t| **t == tag)
                .ok_or_else(|| Error::Format(format!("unknown block tag {tag:?}")))?;
            fields[idx] = Some(read_cfm(input)?);
        }
        let mut take = |i: usize| {
            fields[i]
                .take()
                .ok_or_else(|| Error::Format(format!("missing block {:?}", String::from_utf8_lossy(TAGS[i]))))
        };
        let vec = |a: Array2<f64>| a.column(0).to_owned();
        let state = FactorState {
            w: take(0)?,
            v: take(1)?,
            p: take(2)?,
            q: take(3)?,
            b: vec(take(4)?),
            m: vec(take(5)?),
            s: vec(take(6)?),
            iter: take(7)?[[0, 0]] as usize,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub residual_l21: f64,
    pub locality: f64,
    pub autoweight: f64,
    pub proj_sparsity: f64,
    pub total: f64,
    /// Trace-form surrogate at the state's own M and S.
    pub surrogate_total: f64,
}

/// `R = X'P + e b' - V W' X'` (`N x d`); row `i` is sample `i`'s residual.
pub fn residual_matrix(x: &Array2<f64>, state: &FactorState) -> Result<Array2<f64>> {
    state.check_shapes(x.nrows(), x.ncols())?;
    let y = state.p.t().dot(x);
    let recon = x.dot(&state.w).dot(&state.v.t());
    let mut r = y - recon;
    r += &state.b.view().insert_axis(Axis(1));
    Ok(r.reversed_axes())
}

/// Sum of the Euclidean norms of the rows.
pub fn l21_norm(a: &ArrayView2<f64>) -> f64 {
    a.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum()
}

/// `m_i = 1 / (2 max(|r^i|, delta))` for the rows of `R`.
pub fn reweight_m(r: &ArrayView2<f64>, delta: f64) -> Array1<f64> {
    linalg::row_norms(r).mapv(|n| 1.0 / (2.0 * n.max(delta)))
}

/// `S_ii = 0.5 / max(|P^i|, delta)` for the rows of `P`.
pub fn reweight_s(p: &ArrayView2<f64>, delta: f64) -> Array1<f64> {
    linalg::row_norms(p).mapv(|n| 0.5 / n.max(delta))
}

/// `sum_i sum_r |v_ir| * |Y w_r - y_i|^2` with `Y = P'X`.
pub(crate) fn locality_sum(y: &Array2<f64>, w: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let anchors = y.dot(w);
    let mut total = 0.0;
    for (i, yi) in y.columns().into_iter().enumerate() {
        for (r, u) in anchors.columns().into_iter().enumerate() {
            let vir = v[[i, r]].abs();
            if vir != 0.0 {
                let d2: f64 = yi.iter().zip(u.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
                total += vir * d2;
            }
        }
    }
    total
}

/// `|H - H Q|_F^2` with `H = (Y; W'; V')`.
pub(crate) fn autoweight_sum(y: &Array2<f64>, state: &FactorState) -> f64 {
    let f = |h: ArrayView2<f64>| linalg::frobenius_sq(&(&h - &h.dot(&state.q)).view());
    f(y.view()) + f(state.w.t()) + f(state.v.t())
}

/// Weighted residual of `D = Y - X W V'` with the bias eliminated:
/// `min_b sum_i m_i |d_i + b|^2` (equal to `tr(D C D')`), or the plain
/// `sum_i m_i |d_i|^2` when `centered` is false.
pub(crate) fn weighted_residual(
    y: &Array2<f64>,
    x: &Array2<f64>,
    state: &FactorState,
    centered: bool,
) -> f64 {
    let mut d = y - &x.dot(&state.w).dot(&state.v.t());
    if centered {
        let n_m = state.m.sum();
        let shift = d.dot(&state.m) / n_m;
        d -= &shift.insert_axis(Axis(1));
    }
    d.columns()
        .into_iter()
        .zip(state.m.iter())
        .map(|(c, &m)| m * c.dot(&c))
        .sum()
}

fn surrogate_with(x: &Array2<f64>, y: &Array2<f64>, state: &FactorState, hp: &Hyperparams, centered: bool) -> f64 {
    let mut total = weighted_residual(y, x, state, centered);
    if hp.alpha != 0.0 {
        total += hp.alpha * locality_sum(y, &state.w, &state.v);
    }
    if hp.beta != 0.0 {
        total += hp.beta * autoweight_sum(y, state);
    }
    if hp.gamma != 0.0 {
        let rows = linalg::row_norms(&state.p.view());
        total += hp.gamma * rows.iter().zip(state.s.iter()).map(|(n, s)| s * n * n).sum::<f64>();
    }
    total
}

/// The trace-form surrogate evaluated at the state's frozen `M` and `S`:
/// `tr(D C D') + alpha tr(Y Xi Y') + beta tr(H G H') + gamma tr(P' S P)`.
pub fn surrogate_value(x: &Array2<f64>, state: &FactorState, hp: &Hyperparams) -> Result<f64> {
    state.check_shapes(x.nrows(), x.ncols())?;
    let y = state.p.t().dot(x);
    Ok(surrogate_with(x, &y, state, hp, true))
}

/// Surrogate without the bias elimination (`C = diag(M)`).
pub fn surrogate_value_uncentered(x: &Array2<f64>, state: &FactorState, hp: &Hyperparams) -> Result<f64> {
    state.check_shapes(x.nrows(), x.ncols())?;
    let y = state.p.t().dot(x);
    Ok(surrogate_with(x, &y, state, hp, false))
}

fn checked_term(name: &str, v: f64) -> Result<f64> {
    if v.is_nan() || v < -1e-9 * v.abs().max(1.0) {
        return Err(Error::Internal(format!("objective term {name} is {v}")));
    }
    Ok(v.max(0.0))
}

/// Every term of the robust objective at `state`, plus the surrogate.
pub fn objective_value(x: &Array2<f64>, state: &FactorState, hp: &Hyperparams) -> Result<ObjectiveBreakdown> {
    let r = residual_matrix(x, state)?;
    let y = state.p.t().dot(x);
    let residual_l21 = checked_term("residual", l21_norm(&r.view()))?;
    let locality = checked_term("locality", hp.alpha * locality_sum(&y, &state.w, &state.v))?;
    let autoweight = checked_term("autoweight", hp.beta * autoweight_sum(&y, state))?;
    let proj_sparsity = checked_term("projection", hp.gamma * l21_norm(&state.p.view()))?;
    let surrogate_total = surrogate_with(x, &y, state, hp, true);
    Ok(ObjectiveBreakdown {
        residual_l21,
        locality,
        autoweight,
        proj_sparsity,
        total: residual_l21 + locality + autoweight + proj_sparsity,
        surrogate_total,
    })
}

/// Symmetrized Gram matrix `X'X`.
pub fn gram(x: &Array2<f64>) -> Array2<f64> {
    let k = x.t().dot(x);
    (&k + &k.t()) * 0.5
}

fn is_identity(p: &Array2<f64>) -> bool {
    p.indexed_iter().all(|((i, j), &v)| v == if i == j { 1.0 } else { 0.0 })
}

/// Quantities reused by the update rules within one iteration. Fields that
/// depend on a variable are refreshed by the matching `refresh_*` method
/// after that variable changes.
#[derive(Debug, Clone)]
pub struct UpdateIntermediates {
    /// `X'X`, with its elementwise sign split.
    pub k: Array2<f64>,
    pub k_pos: Array2<f64>,
    pub k_neg: Option<Array2<f64>>,
    /// Projected data `Y = P'X`.
    pub y: Array2<f64>,
    /// `Y'Y = X'P P'X` and its sign split.
    pub kp: Array2<f64>,
    pub kp_pos: Array2<f64>,
    pub kp_neg: Option<Array2<f64>>,
    /// `X'Y = X'P'X`.
    pub ky: Array2<f64>,
    /// Weighted centering operator `I - e e_M' / N_M`.
    pub he: Array2<f64>,
    pub e_m: Array1<f64>,
    pub n_m: f64,
    /// `He' M He`; equals `diag(M)` when the bias is not eliminated.
    pub c: Array2<f64>,
    pub centered: bool,
    /// `(I - Q)(I - Q)'` and its sign split.
    pub g: Array2<f64>,
    pub g_pos: Array2<f64>,
    pub g_neg: Option<Array2<f64>>,
    /// `(E - W) L (E - W)'` in its closed form
    /// `diag(V 1) - V W' - W V' + W diag(V'1) W'`.
    pub xi: Array2<f64>,
    /// `N x r` all-ones.
    pub e: Array2<f64>,
    /// `r x N`, every row `diag(Y'Y)'`.
    pub a: Array2<f64>,
    /// `r x N`, every column `diag(W' Y'Y W)`.
    pub b: Array2<f64>,
    /// `(Y; W'; V')`.
    pub h: Array2<f64>,
    v_abs: Array2<f64>,
}

pub fn build_intermediates(x: &Array2<f64>, state: &FactorState) -> Result<UpdateIntermediates> {
    UpdateIntermediates::new(x, gram(x), state, true)
}

impl UpdateIntermediates {
    /// `k` must be `gram(x)`; passing it in lets a solver reuse it across
    /// iterations.
    pub fn new(x: &Array2<f64>, k: Array2<f64>, state: &FactorState, centered: bool) -> Result<Self> {
        let (d, n) = x.dim();
        state.check_shapes(d, n)?;
        if k.dim() != (n, n) {
            return Err(dim("Gram matrix does not match data"));
        }
        let r = state.rank();
        let (k_pos, k_neg) = split_signs(&k);
        let mut im = Self {
            k,
            k_pos,
            k_neg,
            y: Array2::zeros((d, n)),
            kp: Array2::zeros((n, n)),
            kp_pos: Array2::zeros((n, n)),
            kp_neg: None,
            ky: Array2::zeros((n, n)),
            he: Array2::zeros((n, n)),
            e_m: Array1::zeros(n),
            n_m: 0.0,
            c: Array2::zeros((n, n)),
            centered,
            g: Array2::zeros((n, n)),
            g_pos: Array2::zeros((n, n)),
            g_neg: None,
            xi: Array2::zeros((n, n)),
            e: Array2::ones((n, r)),
            a: Array2::zeros((r, n)),
            b: Array2::zeros((r, n)),
            h: Array2::zeros((d + 2 * r, n)),
            v_abs: Array2::zeros((n, r)),
        };
        im.refresh_weights(state);
        im.refresh_graph(state);
        im.refresh_projection(x, state);
        im.refresh_factors(state);
        Ok(im)
    }

    /// `L_i = diag(|v_i|)`, returned as its diagonal.
    pub fn l_i(&self, i: usize) -> Array1<f64> {
        self.v_abs.row(i).to_owned()
    }

    /// After `M` changes.
    pub fn refresh_weights(&mut self, state: &FactorState) {
        let n = state.m.len();
        self.e_m = state.m.clone();
        self.n_m = state.m.sum();
        if self.centered {
            let em_row = self.e_m.view().insert_axis(Axis(0));
            self.he = Array2::eye(n) - &(Array2::<f64>::ones((n, 1)).dot(&em_row) / self.n_m);
            let u = self.e_m.view().insert_axis(Axis(1));
            self.c = Array2::from_diag(&self.e_m) - &(u.dot(&u.t()) / self.n_m);
        } else {
            self.he = Array2::eye(n);
            self.c = Array2::from_diag(&self.e_m);
        }
    }

    /// After `Q` changes.
    pub fn refresh_graph(&mut self, state: &FactorState) {
        let n = state.q.nrows();
        let iq = Array2::<f64>::eye(n) - &state.q;
        self.g = iq.dot(&iq.t());
        let (pos, neg) = split_signs(&self.g);
        self.g_pos = pos;
        self.g_neg = neg;
    }

    /// After `P` changes (also refreshes the parts of `H`, `A`, `B` that
    /// depend on it).
    pub fn refresh_projection(&mut self, x: &Array2<f64>, state: &FactorState) {
        if is_identity(&state.p) {
            self.y = x.clone();
            self.kp = self.k.clone();
            self.ky = self.k.clone();
            self.kp_pos = self.k_pos.clone();
            self.kp_neg = self.k_neg.clone();
        } else {
            self.y = state.p.t().dot(x);
            let kp = self.y.t().dot(&self.y);
            self.kp = (&kp + &kp.t()) * 0.5;
            self.ky = x.t().dot(&self.y);
            let (pos, neg) = split_signs(&self.kp);
            self.kp_pos = pos;
            self.kp_neg = neg;
        }
        let diag = self.kp.diag().to_owned();
        let r = self.a.nrows();
        for k in 0..r {
            self.a.row_mut(k).assign(&diag);
        }
        self.refresh_factors(state);
    }

    /// After `W` or `V` change.
    pub fn refresh_factors(&mut self, state: &FactorState) {
        let (w, v) = (&state.w, &state.v);
        let n = w.nrows();
        let r = w.ncols();
        let row_sums = v.sum_axis(Axis(1));
        let col_sums = v.sum_axis(Axis(0));
        let vw = v.dot(&w.t());
        let mut xi = Array2::from_diag(&row_sums) - &vw - &vw.t();
        xi += &(w * &col_sums).dot(&w.t());
        self.xi = xi;
        let wkw = w.t().dot(&self.kp.dot(w));
        let bdiag = wkw.diag().to_owned();
        for j in 0..n {
            self.b.column_mut(j).assign(&bdiag);
        }
        let d = self.y.nrows();
        self.h.slice_mut(ndarray::s![..d, ..]).assign(&self.y);
        self.h.slice_mut(ndarray::s![d..d + r, ..]).assign(&w.t());
        self.h.slice_mut(ndarray::s![d + r.., ..]).assign(&v.t());
        self.v_abs = v.mapv(f64::abs);
    }

    /// `C Z` without forming the product with the `N x N` matrix.
    pub fn apply_c(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = self.apply_c_pos(z);
        if let Some(neg) = self.apply_c_neg(z) {
            out -= &neg;
        }
        out
    }

    /// `diag(M) Z`.
    pub fn apply_c_pos(&self, z: &Array2<f64>) -> Array2<f64> {
        if self.e_m.iter().all(|&m| m == 1.0) {
            return z.clone();
        }
        z * &self.e_m.view().insert_axis(Axis(1))
    }

    /// `e_M e_M' Z / N_M`, or `None` when the bias is not eliminated.
    pub fn apply_c_neg(&self, z: &Array2<f64>) -> Option<Array2<f64>> {
        if !self.centered {
            return None;
        }
        let u = self.e_m.view().insert_axis(Axis(1));
        Some(u.dot(&u.t().dot(z)) / self.n_m)
    }
}
