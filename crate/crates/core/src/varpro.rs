//! Gauss–Newton variable projection for joint motion estimation and
//! reconstruction.
//!
//! The image is eliminated by the inner linear solve `f(γ)`; the outer loop
//! works on the reduced residual `r(γ) = A(γ) f(γ) − g`. The Jacobian with
//! respect to `γ` is block diagonal with one column per angle,
//! `d_i = A_i ∂[K(γ_i) f]/∂γ_i`, so the Gauss–Newton normal equations
//! decouple into scalar divisions.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{dot, norm2, rel_error, ForwardOperator, Sinogram};
use crate::geometry::Image;
use crate::krylov::{hybrid_lsqr, lsqr, HybridOptions, OmegaRule, Regularization, SolveReport};
use crate::motion::{stretch_apply, stretch_apply_derivative, DerivativeBackend, MotionParams};
use crate::radon::ProjectionSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    /// Plain LSQR; regularization by the iteration count only.
    Lsqr,
    /// Hybrid LSQR with weighted-GCV parameter choice.
    Wgcv,
    /// Hybrid LSQR with `λ` minimizing the error against the true image.
    Optimal,
}

impl InnerSolver {
    pub fn label(self) -> &'static str {
        match self {
            InnerSolver::Lsqr => "GN-LSQR",
            InnerSolver::Wgcv => "GN-HyBR",
            InnerSolver::Optimal => "GN-HyBR-opt",
        }
    }
}

/// Backtracking on `½‖A(γ + αs) f − g‖²` with `f` held fixed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LineSearch {
    pub enabled: bool,
    pub factor: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            enabled: false,
            factor: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GNConfig {
    pub max_gn_iters: usize,
    pub inner_solver: InnerSolver,
    pub inner_max_iter: usize,
    pub omega: OmegaRule,
    pub reorth: bool,
    pub derivative: DerivativeBackend,
    pub line_search: LineSearch,
    /// Blocks with `d_iᵀd_i` below this fraction of the largest are frozen.
    pub degeneracy_threshold: f64,
    /// Stop once `‖s‖ / ‖γ‖` falls below this.
    pub step_tolerance: f64,
    /// Halvings allowed to keep every `1 + γ_i` positive.
    pub max_halvings: usize,
}

impl Default for GNConfig {
    fn default() -> Self {
        Self {
            max_gn_iters: 6,
            inner_solver: InnerSolver::Wgcv,
            inner_max_iter: 100,
            omega: OmegaRule::Adaptive,
            reorth: true,
            derivative: DerivativeBackend::default(),
            line_search: LineSearch::default(),
            degeneracy_threshold: 1e-12,
            step_tolerance: 1e-6,
            max_halvings: 30,
        }
    }
}

impl GNConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_gn_iters == 0 || self.inner_max_iter == 0 {
            return Err(Error::invalid("iteration limits must be at least 1"));
        }
        let ls = &self.line_search;
        let positive = [
            self.degeneracy_threshold,
            self.step_tolerance,
            ls.sufficient_decrease,
        ];
        if positive.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if !(ls.factor > 0.0 && ls.factor < 1.0) {
            return Err(Error::invalid("backtracking factor must lie in (0, 1)"));
        }
        if let DerivativeBackend::FiniteDifference { step } = self.derivative {
            if !(step > 0.0) {
                return Err(Error::invalid("finite-difference step must be positive"));
            }
        }
        if let OmegaRule::Fixed { omega } = self.omega {
            if !(omega > 0.0 && omega <= 1.0) {
                return Err(Error::invalid("ω must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Reference solution used to report errors (and by the optimal inner solver).
#[derive(Debug, Clone, Copy)]
pub struct Truth<'a> {
    pub image: &'a Image,
    pub gammas: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GNIteration {
    /// `0` is the initial guess.
    pub iter: usize,
    pub gammas: Vec<f64>,
    pub eps_gamma: Option<f64>,
    pub eps_f: Option<f64>,
    /// `λ` of the inner solve; `0` for plain LSQR.
    pub lambda: f64,
    pub residual_norm: f64,
    /// Norm of the accepted update `αs`; `None` on the last record.
    pub step_norm: Option<f64>,
    pub backtracks: usize,
    pub degenerate_blocks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GNStopReason {
    MaxIterations,
    SmallStep,
    StalledStep,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GNReport {
    pub variant: InnerSolver,
    pub iterations: Vec<GNIteration>,
    pub image: Image,
    pub motion: MotionParams,
    pub stop_reason: GNStopReason,
    /// The line search, if used, held `f` fixed rather than re-solving.
    pub line_search_fixed_image: bool,
}

/// `ε_γ`: relative error, or the absolute norm when the true motion is zero.
pub fn motion_error(gammas: &[f64], truth: &[f64]) -> Result<f64> {
    Error::check_len(truth.len(), gammas.len())?;
    if norm2(truth) == 0.0 {
        return Ok(norm2(gammas));
    }
    rel_error(gammas, truth)
}

/// `f(γ)` from the configured inner solver on `A(γ)`.
pub fn solve_linear_subproblem(
    projections: &Arc<ProjectionSet>,
    gamma: &MotionParams,
    g: &Sinogram,
    cfg: &GNConfig,
    truth: Option<&Image>,
) -> Result<(Image, SolveReport)> {
    let op = ForwardOperator::new(Arc::clone(projections), gamma.clone())?;
    solve_with_operator(&op, g, cfg, truth)
}

fn solve_with_operator(
    op: &ForwardOperator,
    g: &Sinogram,
    cfg: &GNConfig,
    truth: Option<&Image>,
) -> Result<(Image, SolveReport)> {
    if g.scan() != op.scan() {
        return Err(Error::GeometryMismatch(
            "sinogram scan differs from operator scan".into(),
        ));
    }
    if let Some(t) = truth {
        if t.grid() != op.grid() {
            return Err(Error::GeometryMismatch(
                "truth grid differs from operator grid".into(),
            ));
        }
    }
    let truth_vals = truth.map(Image::values);
    let report = match cfg.inner_solver {
        InnerSolver::Lsqr => lsqr(op, g.values(), cfg.inner_max_iter, truth_vals)?,
        strategy => {
            let reg = match strategy {
                InnerSolver::Wgcv => Regularization::Wgcv(cfg.omega),
                _ => Regularization::Optimal,
            };
            let opts = HybridOptions {
                max_iter: cfg.inner_max_iter,
                reorth: cfg.reorth,
                stop_on_flat_gcv: false,
            };
            hybrid_lsqr(op, g.values(), &opts, reg, truth_vals)?
        }
    };
    let image = Image::from_values(*op.grid(), report.solution.clone())?;
    Ok((image, report))
}

/// `d_i = A_i ∂[K(γ_i) f]/∂γ_i`, one column per angle.
pub fn jacobian_columns(
    projections: &ProjectionSet,
    gamma: &MotionParams,
    f: &Image,
    backend: DerivativeBackend,
) -> Result<Vec<Vec<f64>>> {
    Error::check_len(projections.scan().n_angles(), gamma.len())?;
    let grid = projections.grid();
    let c = gamma.baseline_c();
    gamma
        .gammas()
        .par_iter()
        .enumerate()
        .map(|(i, &gi)| {
            let dk = stretch_apply_derivative(grid, gi, c, f, backend)?;
            projections.matrix(i).apply(&dk)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GNStep {
    pub step: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl GNStep {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// Solves `JᵀJ s = −Jᵀr` for block-diagonal `J`: `s_i = −d_iᵀr_i / d_iᵀd_i`.
pub fn gn_step(residual_blocks: &[&[f64]], columns: &[Vec<f64>], threshold: f64) -> Result<GNStep> {
    Error::check_len(columns.len(), residual_blocks.len())?;
    for (r, d) in residual_blocks.iter().zip(columns) {
        Error::check_len(d.len(), r.len())?;
    }
    let norms: Vec<f64> = columns.iter().map(|d| dot(d, d)).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let mut step = Vec::with_capacity(columns.len());
    let mut degenerate = Vec::with_capacity(columns.len());
    for ((r, d), &dd) in residual_blocks.iter().zip(columns).zip(&norms) {
        if max == 0.0 || dd < threshold * max {
            step.push(0.0);
            degenerate.push(true);
        } else {
            step.push(-dot(d, r) / dd);
            degenerate.push(false);
        }
    }
    if degenerate.iter().all(|&d| d) {
        return Err(Error::StalledStep);
    }
    Ok(GNStep { step, degenerate })
}

/// `½‖A(γ) f − g‖²`, evaluated angle by angle.
fn half_misfit(
    projections: &ProjectionSet,
    gammas: &[f64],
    c: f64,
    f: &[f64],
    g: &Sinogram,
) -> Result<f64> {
    let grid = projections.grid();
    let parts = gammas
        .par_iter()
        .enumerate()
        .map(|(i, &gi)| {
            let block = projections
                .matrix(i)
                .apply(&stretch_apply(grid, gi, c, f)?)?;
            Ok(block
                .iter()
                .zip(g.block(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(0.5 * parts.iter().sum::<f64>())
}

fn admissible(gammas: &[f64]) -> bool {
    gammas.iter().all(|g| 1.0 + g > 0.0 && g.is_finite())
}

fn shifted(gammas: &[f64], step: &[f64], alpha: f64) -> Vec<f64> {
    gammas
        .iter()
        .zip(step)
        .map(|(g, s)| g + alpha * s)
        .collect()
}

/// Alternates inner solves for `f(γ)` with decoupled Gauss–Newton updates of
/// `γ`. Record `k` holds `γ^(k)` and the inner solve at `γ^(k)`; the update
/// after the last record is not taken.
pub fn gauss_newton(
    projections: &Arc<ProjectionSet>,
    g: &Sinogram,
    gamma0: &MotionParams,
    cfg: &GNConfig,
    truth: Option<Truth<'_>>,
) -> Result<GNReport> {
    cfg.validate()?;
    if g.scan() != projections.scan() {
        return Err(Error::GeometryMismatch(
            "sinogram scan differs from projection scan".into(),
        ));
    }
    Error::check_len(projections.scan().n_angles(), gamma0.len())?;
    if let Some(t) = truth {
        Error::check_len(gamma0.len(), t.gammas.len())?;
    }
    if cfg.inner_solver == InnerSolver::Optimal && truth.is_none() {
        return Err(Error::invalid(
            "the optimal inner solver needs the true image",
        ));
    }
    let c = gamma0.baseline_c();
    let mut motion = gamma0.clone();
    let mut iterations = Vec::with_capacity(cfg.max_gn_iters);
    let mut stop_reason = GNStopReason::MaxIterations;
    let mut image;

    let mut k = 0;
    loop {
        let op = ForwardOperator::new(Arc::clone(projections), motion.clone())?;
        let (f, report) = solve_with_operator(&op, g, cfg, truth.map(|t| t.image))?;
        image = f;
        let predicted = crate::forward::forward_apply(&op, &image)?;
        let residual: Vec<f64> = predicted
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| a - b)
            .collect();
        let mut record = GNIteration {
            iter: k,
            gammas: motion.gammas().to_vec(),
            eps_gamma: truth
                .map(|t| motion_error(motion.gammas(), t.gammas))
                .transpose()?,
            eps_f: truth
                .map(|t| rel_error(image.values(), t.image.values()))
                .transpose()?,
            lambda: report.final_lambda().unwrap_or(0.0),
            residual_norm: norm2(&residual),
            step_norm: None,
            backtracks: 0,
            degenerate_blocks: 0,
        };
        if k + 1 >= cfg.max_gn_iters {
            iterations.push(record);
            break;
        }

        let columns = jacobian_columns(projections, &motion, &image, cfg.derivative)?;
        let m = g.scan().n_radii();
        let blocks: Vec<&[f64]> = residual.chunks_exact(m).collect();
        let step = match gn_step(&blocks, &columns, cfg.degeneracy_threshold) {
            Ok(s) => s,
            Err(Error::StalledStep) => {
                record.degenerate_blocks = motion.len();
                iterations.push(record);
                stop_reason = GNStopReason::StalledStep;
                break;
            }
            Err(e) => return Err(e),
        };
        record.degenerate_blocks = step.degenerate_count();

        let mut alpha = 1.0;
        let mut halvings = 0;
        while !admissible(&shifted(motion.gammas(), &step.step, alpha)) {
            if halvings == cfg.max_halvings {
                return Err(Error::Solver(format!(
                    "update stays inadmissible after {halvings} halvings"
                )));
            }
            alpha *= 0.5;
            halvings += 1;
        }

        if cfg.line_search.enabled {
            let ls = cfg.line_search;
            let phi0 = 0.5 * dot(&residual, &residual);
            let slope: f64 = step
                .step
                .iter()
                .zip(&columns)
                .zip(&blocks)
                .map(|((s, d), r)| s * dot(d, r))
                .sum();
            let mut accepted = false;
            for attempt in 0..=ls.max_backtracks {
                let trial = shifted(motion.gammas(), &step.step, alpha);
                let phi = half_misfit(projections, &trial, c, image.values(), g)?;
                if phi <= phi0 + ls.sufficient_decrease * alpha * slope {
                    record.backtracks = attempt;
                    accepted = true;
                    break;
                }
                if attempt < ls.max_backtracks {
                    alpha *= ls.factor;
                }
            }
            if !accepted {
                record.backtracks = ls.max_backtracks;
                record.step_norm = Some(0.0);
                iterations.push(record);
                stop_reason = GNStopReason::LineSearchFailed;
                break;
            }
        }

        let update: Vec<f64> = step.step.iter().map(|s| alpha * s).collect();
        let step_norm = norm2(&update);
        record.step_norm = Some(step_norm);
        iterations.push(record);
        let gamma_norm = norm2(motion.gammas());
        motion = motion.with_gammas(shifted(motion.gammas(), &update, 1.0))?;
        k += 1;
        if step_norm <= cfg.step_tolerance * gamma_norm || step_norm == 0.0 {
            stop_reason = GNStopReason::SmallStep;
            let op = ForwardOperator::new(Arc::clone(projections), motion.clone())?;
            let (f, report) = solve_with_operator(&op, g, cfg, truth.map(|t| t.image))?;
            image = f;
            let predicted = crate::forward::forward_apply(&op, &image)?;
            iterations.push(GNIteration {
                iter: k,
                gammas: motion.gammas().to_vec(),
                eps_gamma: truth
                    .map(|t| motion_error(motion.gammas(), t.gammas))
                    .transpose()?,
                eps_f: truth
                    .map(|t| rel_error(image.values(), t.image.values()))
                    .transpose()?,
                lambda: report.final_lambda().unwrap_or(0.0),
                residual_norm: predicted
                    .values()
                    .iter()
                    .zip(g.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                step_norm: None,
                backtracks: 0,
                degenerate_blocks: 0,
            });
            break;
        }
    }

    Ok(GNReport {
        variant: cfg.inner_solver,
        iterations,
        image,
        motion,
        stop_reason,
        line_search_fixed_image: cfg.line_search.enabled,
    })
}
