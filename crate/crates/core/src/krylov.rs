//! Iterative solvers for the linear reconstruction subproblem.
//!
//! [`lsqr`] is the classical Paige–Saunders recurrence with no regularization
//! other than the iteration count. [`hybrid_lsqr`] runs Golub–Kahan
//! bidiagonalization with full reorthogonalization and solves a Tikhonov
//! problem on the small projected system at every step,
//!
//! ```text
//! y_k(λ) = argmin ‖B_k y − β₁ e₁‖² + λ² ‖y‖²,   f_k = V_k y_k(λ),
//! ```
//!
//! with `λ` either fixed, chosen by weighted GCV, or chosen to minimize the
//! error against a known solution (a reference only available in
//! simulations).
//!
//! # Weighted GCV
//!
//! With the SVD `B_k = P Σ Qᵀ`, `b̂ = Pᵀ β₁e₁`, filter factors
//! `φ_j = σ_j² / (σ_j² + λ²)` and `t₀ = β₁² − ‖b̂‖²`,
//!
//! ```text
//! G_ω(λ) = k · ‖B_k y(λ) − β₁e₁‖² / ((k + 1) − ω Σ_j φ_j)²
//! ```
//!
//! `ω = 1` is ordinary GCV on the projected problem. In adaptive mode the
//! weight follows the hybrid-LSQR rule: at each step take the smallest
//! singular value `σ_min` of `B_k` as a stand-in for the optimal `λ`, solve
//! `∂G_ω/∂λ = 0` at `λ = σ_min` for `ω`, clip to `(0, 1]`, and use the mean of
//! the weights collected so far.
//!
//! `G_ω` is minimized over `log λ` on `[10⁻¹⁰, 10²] · s`, where `s` is the
//! larger of `β₁` and `σ_max(B_k)`: a coarse scan locates the best bracket,
//! and golden-section search refines it to `10⁻⁴` relative tolerance.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::forward::{dot, norm2};
use crate::sparse::SparseMatrix;

/// Linear map with an exact adjoint.
pub trait LinearOperator {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>>;
}

impl LinearOperator for SparseMatrix {
    fn n_rows(&self) -> usize {
        SparseMatrix::n_rows(self)
    }

    fn n_cols(&self) -> usize {
        SparseMatrix::n_cols(self)
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        SparseMatrix::apply(self, x)
    }

    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        SparseMatrix::apply_transpose(self, y)
    }
}

/// Dense row-major operator, mostly for small problems and tests.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    pub matrix: DMatrix<f64>,
}

impl LinearOperator for DenseOperator {
    fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    fn n_cols(&self) -> usize {
        self.matrix.ncols()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(self.matrix.ncols(), x.len())?;
        Ok((&self.matrix * nalgebra::DVector::from_column_slice(x))
            .data
            .into())
    }

    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(self.matrix.nrows(), y.len())?;
        Ok(
            (self.matrix.tr_mul(&nalgebra::DVector::from_column_slice(y)))
                .data
                .into(),
        )
    }
}

/// Relative size below which a new `α` or `β` counts as a breakdown.
pub const BREAKDOWN_TOL: f64 = 1e-14;

pub const LAMBDA_BRACKET: (f64, f64) = (1e-10, 1e2);
const LAMBDA_GRID_PER_DECADE: usize = 10;
const GOLDEN_REL_TOL: f64 = 1e-4;
const FLAT_GCV_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    /// A bidiagonal coefficient vanished; the Krylov space is exhausted.
    Breakdown,
    /// The GCV curve became flat (hybrid only, when enabled).
    FlatGcv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub residual_norm: f64,
    pub solution_norm: f64,
    pub lambda: Option<f64>,
    pub gcv_value: Option<f64>,
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub history: Vec<IterationRecord>,
    pub solution: Vec<f64>,
    pub stop_reason: StopReason,
}

impl SolveReport {
    /// Iteration with the smallest recorded error, and that error.
    pub fn min_error(&self) -> Option<(usize, f64)> {
        self.history
            .iter()
            .filter_map(|r| r.rel_error.map(|e| (r.iter, e)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn final_error(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.rel_error)
    }

    pub fn final_lambda(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.lambda)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut out = String::from("iter,residual_norm,solution_norm,lambda,gcv_value,rel_error\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{:e},{:e},{},{},{}\n",
                r.iter,
                r.residual_norm,
                r.solution_norm,
                opt(r.lambda),
                opt(r.gcv_value),
                opt(r.rel_error)
            ));
        }
        out
    }
}

/// Plain LSQR for `min ‖A f − g‖₂`, starting from zero.
pub fn lsqr(
    op: &dyn LinearOperator,
    g: &[f64],
    max_iter: usize,
    truth: Option<&[f64]>,
) -> Result<SolveReport> {
    Error::check_len(op.n_rows(), g.len())?;
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if let Some(t) = truth {
        Error::check_len(op.n_cols(), t.len())?;
    }
    let n = op.n_cols();
    let mut x = vec![0.0; n];
    let mut history = Vec::with_capacity(max_iter);
    let beta1 = norm2(g);
    if beta1 == 0.0 {
        return Ok(SolveReport {
            history,
            solution: x,
            stop_reason: StopReason::Breakdown,
        });
    }
    let tol = BREAKDOWN_TOL * beta1;
    let mut u: Vec<f64> = g.iter().map(|v| v / beta1).collect();
    let mut v = op.apply_transpose(&u)?;
    let mut alpha = norm2(&v);
    if alpha <= tol {
        return Ok(SolveReport {
            history,
            solution: x,
            stop_reason: StopReason::Breakdown,
        });
    }
    scale(&mut v, 1.0 / alpha);
    let mut w = v.clone();
    let mut phibar = beta1;
    let mut rhobar = alpha;
    let mut stop_reason = StopReason::MaxIterations;

    for iter in 1..=max_iter {
        let av = op.apply(&v)?;
        for (ui, avi) in u.iter_mut().zip(&av) {
            *ui = avi - alpha * *ui;
        }
        let beta = norm2(&u);
        let beta_ok = beta > tol;
        if beta_ok {
            scale(&mut u, 1.0 / beta);
        }
        let beta = if beta_ok { beta } else { 0.0 };

        let mut alpha_ok = false;
        if beta_ok {
            let atu = op.apply_transpose(&u)?;
            for (vi, a) in v.iter_mut().zip(&atu) {
                *vi = a - beta * *vi;
            }
            alpha = norm2(&v);
            alpha_ok = alpha > tol;
            if alpha_ok {
                scale(&mut v, 1.0 / alpha);
            } else {
                alpha = 0.0;
            }
        }

        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;
        let step = phi / rho;
        let ratio = theta / rho;
        for ((xi, wi), vi) in x.iter_mut().zip(w.iter_mut()).zip(&v) {
            *xi += step * *wi;
            *wi = vi - ratio * *wi;
        }

        history.push(IterationRecord {
            iter,
            residual_norm: phibar.abs(),
            solution_norm: norm2(&x),
            lambda: None,
            gcv_value: None,
            rel_error: truth.map(|t| rel_err_unchecked(&x, t)),
        });
        if !(beta_ok && alpha_ok) {
            stop_reason = StopReason::Breakdown;
            break;
        }
    }
    Ok(SolveReport {
        history,
        solution: x,
        stop_reason,
    })
}

/// Golub–Kahan bidiagonalization `A V_k = U_{k+1} B_k`.
///
/// `B_k` is lower bidiagonal, `(k+1) × k`, with diagonal `α_1..α_k` and
/// subdiagonal `β_2..β_{k+1}`.
#[derive(Debug, Clone)]
pub struct BidiagState {
    beta1: f64,
    alphas: Vec<f64>,
    betas: Vec<f64>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    reorth: bool,
    breakdown: bool,
}

impl BidiagState {
    /// Starts from `u_1 = g / ‖g‖`.
    pub fn new(g: &[f64], reorth: bool) -> Result<Self> {
        let beta1 = norm2(g);
        if beta1 == 0.0 {
            return Err(Error::invalid("cannot bidiagonalize from a zero vector"));
        }
        Ok(Self {
            beta1,
            alphas: Vec::new(),
            betas: Vec::new(),
            u: vec![g.iter().map(|v| v / beta1).collect()],
            v: Vec::new(),
            reorth,
            breakdown: false,
        })
    }

    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `β_2..β_{k+1}`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn u_basis(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn v_basis(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn is_broken_down(&self) -> bool {
        self.breakdown
    }

    pub fn reorthogonalizes(&self) -> bool {
        self.reorth
    }

    /// Dense `B_k`.
    pub fn bidiagonal(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut b = DMatrix::zeros(k + 1, k);
        for j in 0..k {
            b[(j, j)] = self.alphas[j];
            b[(j + 1, j)] = self.betas[j];
        }
        b
    }

    /// `V_k y`.
    pub fn expand(&self, y: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.v.first().map_or(0, Vec::len)];
        for (vj, &yj) in self.v.iter().zip(y) {
            for (fi, vi) in f.iter_mut().zip(vj) {
                *fi += yj * vi;
            }
        }
        f
    }
}

/// Two passes of classical Gram–Schmidt against `basis`.
fn reorthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        let coeffs: Vec<f64> = basis.iter().map(|b| dot(b, w)).collect();
        for (b, c) in basis.iter().zip(coeffs) {
            for (wi, bi) in w.iter_mut().zip(b) {
                *wi -= c * bi;
            }
        }
    }
}

fn scale(v: &mut [f64], s: f64) {
    v.iter_mut().for_each(|x| *x *= s);
}

/// Extends the factorization by one column. A vanishing `α` or `β` (below
/// `10⁻¹⁴ β₁`) is recorded as a breakdown and stops further extension; the
/// returned state is still a valid factorization.
pub fn golub_kahan_step(state: &mut BidiagState, op: &dyn LinearOperator) -> Result<()> {
    if state.breakdown {
        return Ok(());
    }
    let tol = BREAKDOWN_TOL * state.beta1;
    let k = state.k();
    let u_k1 = &state.u[k];
    let mut w = op.apply_transpose(u_k1)?;
    if k > 0 {
        let beta = state.betas[k - 1];
        for (wi, vi) in w.iter_mut().zip(&state.v[k - 1]) {
            *wi -= beta * vi;
        }
    }
    if state.reorth {
        reorthogonalize(&mut w, &state.v);
    }
    let alpha = norm2(&w);
    if alpha <= tol {
        state.breakdown = true;
        return Ok(());
    }
    scale(&mut w, 1.0 / alpha);

    let mut p = op.apply(&w)?;
    for (pi, ui) in p.iter_mut().zip(&state.u[k]) {
        *pi -= alpha * ui;
    }
    if state.reorth {
        reorthogonalize(&mut p, &state.u);
    }
    let beta = norm2(&p);
    state.alphas.push(alpha);
    state.v.push(w);
    if beta <= tol {
        state.betas.push(0.0);
        state.u.push(vec![0.0; p.len()]);
        state.breakdown = true;
    } else {
        scale(&mut p, 1.0 / beta);
        state.betas.push(beta);
        state.u.push(p);
    }
    Ok(())
}

/// SVD of the projected problem, reused for every `λ` evaluated at one step.
#[derive(Debug, Clone)]
pub struct ProjectedSvd {
    sigma: Vec<f64>,
    bhat: Vec<f64>,
    /// Right singular vectors as columns.
    q: DMatrix<f64>,
    /// Part of `‖β₁e₁‖²` outside the range of `B_k`.
    t0: f64,
    rows: usize,
    beta1: f64,
}

impl ProjectedSvd {
    pub fn new(b: &DMatrix<f64>, beta1: f64) -> Self {
        let rows = b.nrows();
        let svd = b.clone().svd(true, true);
        let p = svd.u.expect("left singular vectors requested");
        let vt = svd.v_t.expect("right singular vectors requested");
        let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
        let bhat: Vec<f64> = (0..sigma.len()).map(|j| beta1 * p[(0, j)]).collect();
        let t0 = (beta1 * beta1 - bhat.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        Self {
            sigma,
            bhat,
            q: vt.transpose(),
            t0,
            rows,
            beta1,
        }
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    fn k(&self) -> usize {
        self.sigma.len()
    }

    /// Coefficients of `y(λ)` in the right singular basis.
    fn coeffs(&self, lambda: f64) -> Vec<f64> {
        let l2 = lambda * lambda;
        self.sigma
            .iter()
            .zip(&self.bhat)
            .map(|(&s, &b)| {
                let d = s * s + l2;
                if d == 0.0 {
                    0.0
                } else {
                    s * b / d
                }
            })
            .collect()
    }

    pub fn solve(&self, lambda: f64) -> Vec<f64> {
        let c = self.coeffs(lambda);
        let mut y = vec![0.0; self.k()];
        for (j, cj) in c.iter().enumerate() {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += self.q[(i, j)] * cj;
            }
        }
        y
    }

    /// `‖B_k y(λ) − β₁e₁‖²`.
    pub fn residual_sq(&self, lambda: f64) -> f64 {
        let l2 = lambda * lambda;
        let in_range: f64 = self
            .sigma
            .iter()
            .zip(&self.bhat)
            .map(|(&s, &b)| {
                let d = s * s + l2;
                let r = if d == 0.0 { b } else { l2 * b / d };
                r * r
            })
            .sum();
        in_range + self.t0
    }

    fn filtered_dof(&self, lambda: f64) -> f64 {
        let l2 = lambda * lambda;
        self.sigma
            .iter()
            .map(|&s| {
                let d = s * s + l2;
                if d == 0.0 {
                    0.0
                } else {
                    s * s / d
                }
            })
            .sum()
    }

    /// Weighted GCV function `G_ω(λ)`.
    pub fn gcv(&self, lambda: f64, omega: f64) -> f64 {
        let trace = self.rows as f64 - omega * self.filtered_dof(lambda);
        self.k() as f64 * self.residual_sq(lambda) / (trace * trace)
    }

    /// Weight making `λ = σ_min` a stationary point of `G_ω`, clipped to `(0, 1]`.
    pub fn omega_estimate(&self) -> f64 {
        let alpha = self.sigma.iter().cloned().fold(f64::INFINITY, f64::min);
        let a2 = alpha * alpha;
        let mut dof = 0.0;
        let mut d_resid = 0.0; // Σ b̂²σ²/(σ²+α²)³
        let mut d_dof = 0.0; // Σ σ²/(σ²+α²)²
        for (&s, &b) in self.sigma.iter().zip(&self.bhat) {
            let tt = 1.0 / (s * s + a2);
            dof += s * s * tt;
            d_resid += b * b * s * s * tt * tt * tt;
            d_dof += s * s * tt * tt;
        }
        let resid = self.residual_sq(alpha);
        let m = self.rows as f64;
        let omega = m * a2 * d_resid / (a2 * d_resid * dof + d_dof * resid);
        if omega.is_finite() && omega > 0.0 {
            omega.min(1.0)
        } else {
            1.0
        }
    }

    pub fn lambda_bracket(&self) -> (f64, f64) {
        let s_max = self.sigma.iter().cloned().fold(0.0, f64::max);
        let scale = self.beta1.max(s_max);
        (LAMBDA_BRACKET.0 * scale, LAMBDA_BRACKET.1 * scale)
    }
}

/// `y = argmin ‖B_k y − β₁e₁‖² + λ²‖y‖²` via the SVD of `B_k`.
pub fn projected_tikhonov(b: &DMatrix<f64>, beta1: f64, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("λ must be >= 0, got {lambda}")));
    }
    Ok(ProjectedSvd::new(b, beta1).solve(lambda))
}

/// Minimizes `objective(λ)` over `log λ ∈ [log lo, log hi]`: coarse scan,
/// then golden-section refinement of the best bracket. Returns
/// `(λ, value, flat)` where `flat` means the scan saw no variation.
fn minimize_log(lo: f64, hi: f64, objective: impl Fn(f64) -> f64) -> (f64, f64, bool) {
    let (a, b) = (lo.ln(), hi.ln());
    let decades = (hi / lo).log10();
    let points = (decades * LAMBDA_GRID_PER_DECADE as f64).ceil() as usize + 1;
    let grid: Vec<f64> = (0..points)
        .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&t| objective(t.exp())).collect();
    let (best, &fbest) = values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty grid");
    let fmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let flat = (fmax - fbest).abs() <= FLAT_GCV_TOL * fbest.abs().max(f64::MIN_POSITIVE);
    if flat {
        return (grid[best].exp(), fbest, true);
    }

    let mut left = grid[best.saturating_sub(1)];
    let mut right = grid[(best + 1).min(points - 1)];
    let tol = GOLDEN_REL_TOL.ln_1p();
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = right - inv_phi * (right - left);
    let mut x2 = left + inv_phi * (right - left);
    let mut f1 = objective(x1.exp());
    let mut f2 = objective(x2.exp());
    while right - left > tol {
        if f1 <= f2 {
            right = x2;
            x2 = x1;
            f2 = f1;
            x1 = right - inv_phi * (right - left);
            f1 = objective(x1.exp());
        } else {
            left = x1;
            x1 = x2;
            f1 = f2;
            x2 = left + inv_phi * (right - left);
            f2 = objective(x2.exp());
        }
    }
    let mut candidates = [(grid[best], fbest), (x1, f1), (x2, f2)];
    candidates.sort_by(|p, q| p.1.total_cmp(&q.1));
    (candidates[0].0.exp(), candidates[0].1, false)
}

/// Result of a weighted-GCV parameter choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WgcvChoice {
    pub lambda: f64,
    pub gcv_value: f64,
    /// The GCV curve was flat; `lambda` is the previous choice when one was given.
    pub flat: bool,
}

fn select_on(svd: &ProjectedSvd, omega: f64, previous: Option<f64>) -> WgcvChoice {
    let (lo, hi) = svd.lambda_bracket();
    let (lambda, gcv_value, flat) = minimize_log(lo, hi, |l| svd.gcv(l, omega));
    match (flat, previous) {
        (true, Some(prev)) => WgcvChoice {
            lambda: prev,
            gcv_value: svd.gcv(prev, omega),
            flat: true,
        },
        _ => WgcvChoice {
            lambda,
            gcv_value,
            flat,
        },
    }
}

/// Minimizer of `G_ω` for the projected problem `(B_k, β₁)`.
pub fn wgcv_select(
    b: &DMatrix<f64>,
    beta1: f64,
    omega: f64,
    previous: Option<f64>,
) -> Result<WgcvChoice> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::invalid(format!("ω must lie in (0, 1], got {omega}")));
    }
    Ok(select_on(&ProjectedSvd::new(b, beta1), omega, previous))
}

/// Weight used by the weighted-GCV strategy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OmegaRule {
    Fixed {
        omega: f64,
    },
    /// Running mean of per-step stationary-point estimates.
    Adaptive,
}

/// How `λ` is chosen at each hybrid step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    Fixed(f64),
    Wgcv(OmegaRule),
    /// Minimize the error against the supplied truth.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridOptions {
    pub max_iter: usize,
    pub reorth: bool,
    /// Stop early once the GCV curve is flat.
    pub stop_on_flat_gcv: bool,
}

impl Default for HybridOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            reorth: true,
            stop_on_flat_gcv: false,
        }
    }
}

/// Hybrid LSQR: Golub–Kahan projection plus Tikhonov on the projected problem.
pub fn hybrid_lsqr(
    op: &dyn LinearOperator,
    g: &[f64],
    opts: &HybridOptions,
    strategy: Regularization,
    truth: Option<&[f64]>,
) -> Result<SolveReport> {
    Error::check_len(op.n_rows(), g.len())?;
    if opts.max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if let Some(t) = truth {
        Error::check_len(op.n_cols(), t.len())?;
    }
    match strategy {
        Regularization::Optimal if truth.is_none() => {
            return Err(Error::invalid(
                "optimal regularization needs the true solution",
            ));
        }
        Regularization::Fixed(l) if !(l >= 0.0) => {
            return Err(Error::invalid(format!("λ must be >= 0, got {l}")));
        }
        Regularization::Wgcv(OmegaRule::Fixed { omega }) if !(omega > 0.0 && omega <= 1.0) => {
            return Err(Error::invalid(format!("ω must lie in (0, 1], got {omega}")));
        }
        _ => {}
    }
    if norm2(g) == 0.0 {
        return Ok(SolveReport {
            history: Vec::new(),
            solution: vec![0.0; op.n_cols()],
            stop_reason: StopReason::Breakdown,
        });
    }

    let mut state = BidiagState::new(g, opts.reorth)?;
    let truth_norm_sq = truth.map(|t| dot(t, t));
    // Vᵀ f_true, grown one entry per step.
    let mut truth_coeffs: Vec<f64> = Vec::new();
    let mut omegas: Vec<f64> = Vec::new();
    let mut history = Vec::with_capacity(opts.max_iter);
    let mut y = Vec::new();
    let mut previous_lambda = None;
    let mut stop_reason = StopReason::MaxIterations;

    for iter in 1..=opts.max_iter {
        golub_kahan_step(&mut state, op)?;
        let k = state.k();
        if k < iter {
            stop_reason = StopReason::Breakdown;
            break;
        }
        if let Some(t) = truth {
            truth_coeffs.push(dot(&state.v[k - 1], t));
        }
        let svd = ProjectedSvd::new(&state.bidiagonal(), state.beta1);
        let (lambda, gcv_value, flat) = match strategy {
            Regularization::Fixed(l) => (l, None, false),
            Regularization::Wgcv(rule) => {
                let omega = match rule {
                    OmegaRule::Fixed { omega } => omega,
                    OmegaRule::Adaptive => {
                        omegas.push(svd.omega_estimate());
                        omegas.iter().sum::<f64>() / omegas.len() as f64
                    }
                };
                let choice = select_on(&svd, omega, previous_lambda);
                (choice.lambda, Some(choice.gcv_value), choice.flat)
            }
            Regularization::Optimal => {
                let (lo, hi) = svd.lambda_bracket();
                let err_sq = |l: f64| {
                    let yl = svd.solve(l);
                    let cross = dot(&yl, &truth_coeffs);
                    dot(&yl, &yl) - 2.0 * cross + truth_norm_sq.unwrap_or(0.0)
                };
                let (l, _, _) = minimize_log(lo, hi, err_sq);
                (l, None, false)
            }
        };
        previous_lambda = Some(lambda);
        y = svd.solve(lambda);
        let rel_error = truth.map(|t| rel_err_unchecked(&state.expand(&y), t));
        history.push(IterationRecord {
            iter,
            residual_norm: svd.residual_sq(lambda).sqrt(),
            solution_norm: norm2(&y),
            lambda: Some(lambda),
            gcv_value,
            rel_error,
        });
        if state.is_broken_down() {
            stop_reason = StopReason::Breakdown;
            break;
        }
        if flat && opts.stop_on_flat_gcv {
            stop_reason = StopReason::FlatGcv;
            break;
        }
    }
    Ok(SolveReport {
        history,
        solution: state.expand(&y),
        stop_reason,
    })
}

fn rel_err_unchecked(x: &[f64], t: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    (num / dot(t, t)).sqrt()
}
