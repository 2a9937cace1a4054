//! Vertical-stretch deformations.
//!
//! At measurement angle `i` the object is stretched vertically about the base
//! line `x2 = c` by the factor `a = 1 + γ_i`:
//! `Φ(x) = (x1, c + a (x2 - c))`. The deformed image is the pull-back
//! `f_i(y) = f(Ψ(y))` with `Ψ(y) = (y1, c + (y2 - c) / a)`, and intensities are
//! carried along unchanged (no mass-conserving factor).
//!
//! Since `Ψ` fixes `x1`, the bilinear interpolation weights collapse to 1D
//! linear interpolation along each image column. Samples that fall outside
//! the outermost pixel centres see zero.

use crate::error::{Error, Result};
use crate::geometry::{Image, ImageGrid};
use crate::sparse::{RowBuilder, SparseMatrix};

/// Default central-difference step in γ.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Fractional row distances below this are treated as landing on a centre.
const NODE_SNAP: f64 = 1e-10;

/// Per-angle stretch perturbations `γ` and the fixed base line `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    gammas: Vec<f64>,
    baseline_c: f64,
}

impl MotionParams {
    pub fn new(gammas: Vec<f64>, baseline_c: f64) -> Result<Self> {
        for (i, &g) in gammas.iter().enumerate() {
            check_gamma(g).map_err(|_| {
                Error::invalid(format!(
                    "stretch factor 1 + γ[{i}] = {} is not positive",
                    1.0 + g
                ))
            })?;
        }
        if !baseline_c.is_finite() {
            return Err(Error::invalid("base line must be finite"));
        }
        Ok(Self { gammas, baseline_c })
    }

    pub fn zeros(n: usize, baseline_c: f64) -> Self {
        Self {
            gammas: vec![0.0; n],
            baseline_c,
        }
    }

    /// `γ_i = amplitude · cos(frequency · φ_i)`.
    pub fn cosine(angles: &[f64], amplitude: f64, frequency: f64, baseline_c: f64) -> Result<Self> {
        Self::new(
            angles
                .iter()
                .map(|phi| amplitude * (frequency * phi).cos())
                .collect(),
            baseline_c,
        )
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn baseline_c(&self) -> f64 {
        self.baseline_c
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    /// Stretch factors `a_i = 1 + γ_i`.
    pub fn stretch_factors(&self) -> Vec<f64> {
        self.gammas.iter().map(|g| 1.0 + g).collect()
    }

    pub fn with_gammas(&self, gammas: Vec<f64>) -> Result<Self> {
        Self::new(gammas, self.baseline_c)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && 1.0 + gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "stretch factor 1 + γ = {} must be positive",
            1.0 + gamma
        )))
    }
}

/// Interpolation tap for one output row: the output samples
/// `(1 - t) f[lo] + t f[lo + 1]` along its column.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: isize,
    t: f64,
    /// `∂v/∂γ` where `v` is the fractional source row.
    dv_dgamma: f64,
}

fn taps(grid: &ImageGrid, gamma: f64, c: f64) -> Vec<Tap> {
    let a = 1.0 + gamma;
    let ps = grid.pixel_size();
    (0..grid.n_side())
        .map(|row| {
            let y2 = grid.x2_of_row(row);
            let v = grid.row_coord(c + (y2 - c) / a);
            let mut lo = v.floor();
            let mut t = v - lo;
            if t < NODE_SNAP {
                t = 0.0;
            } else if t > 1.0 - NODE_SNAP {
                lo += 1.0;
                t = 0.0;
            }
            Tap {
                lo: lo as isize,
                t,
                dv_dgamma: (y2 - c) / (a * a * ps),
            }
        })
        .collect()
}

#[inline]
fn at(column: &[f64], k: isize) -> f64 {
    if k < 0 || k as usize >= column.len() {
        0.0
    } else {
        column[k as usize]
    }
}

/// Sparse `K(γ)`, `N × N`. `γ = 0` gives the identity exactly.
pub fn stretch_matrix(grid: &ImageGrid, gamma: f64, baseline_c: f64) -> Result<SparseMatrix> {
    check_gamma(gamma)?;
    let n = grid.n_side();
    if gamma == 0.0 {
        return Ok(SparseMatrix::identity(grid.len()));
    }
    let taps = taps(grid, gamma, baseline_c);
    let in_range = |k: isize| k >= 0 && (k as usize) < n;
    let mut builder = RowBuilder::new(grid.len());
    for col in 0..n {
        for tap in &taps {
            if in_range(tap.lo) {
                builder.add(grid.index(tap.lo as usize, col), 1.0 - tap.t);
            }
            if tap.t > 0.0 && in_range(tap.lo + 1) {
                builder.add(grid.index((tap.lo + 1) as usize, col), tap.t);
            }
            builder.finish_row();
        }
    }
    Ok(builder.build())
}

/// `K(γ) f` evaluated directly, without forming the matrix.
pub fn stretch_apply(grid: &ImageGrid, gamma: f64, baseline_c: f64, f: &[f64]) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    Error::check_len(grid.len(), f.len())?;
    let n = grid.n_side();
    let taps = taps(grid, gamma, baseline_c);
    let mut out = vec![0.0; grid.len()];
    for (column, dst) in f.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        for (o, tap) in dst.iter_mut().zip(&taps) {
            *o = (1.0 - tap.t) * at(column, tap.lo) + tap.t * at(column, tap.lo + 1);
        }
    }
    Ok(out)
}

/// How `∂[K(γ) f]/∂γ` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DerivativeBackend {
    /// `[K(γ+h) f − K(γ−h) f] / 2h`.
    FiniteDifference { step: f64 },
    /// Slope of the column interpolant times `∂v/∂γ`. On a pixel centre the
    /// left and right slopes are averaged.
    Analytic,
}

impl Default for DerivativeBackend {
    fn default() -> Self {
        DerivativeBackend::FiniteDifference {
            step: DEFAULT_FD_STEP,
        }
    }
}

pub fn stretch_apply_derivative(
    grid: &ImageGrid,
    gamma: f64,
    baseline_c: f64,
    f: &Image,
    backend: DerivativeBackend,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if f.grid() != grid {
        return Err(Error::GeometryMismatch(
            "image grid differs from operator grid".into(),
        ));
    }
    match backend {
        DerivativeBackend::FiniteDifference { step } => {
            if !(step > 0.0) {
                return Err(Error::invalid(format!(
                    "finite-difference step must be positive, got {step}"
                )));
            }
            check_gamma(gamma - step)?;
            let plus = stretch_apply(grid, gamma + step, baseline_c, f.values())?;
            let minus = stretch_apply(grid, gamma - step, baseline_c, f.values())?;
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * step))
                .collect())
        }
        DerivativeBackend::Analytic => {
            let n = grid.n_side();
            let taps = taps(grid, gamma, baseline_c);
            let mut out = vec![0.0; grid.len()];
            for (column, dst) in f.values().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                for (o, tap) in dst.iter_mut().zip(&taps) {
                    let right = at(column, tap.lo + 1) - at(column, tap.lo);
                    let slope = if tap.t == 0.0 {
                        0.5 * (right + at(column, tap.lo) - at(column, tap.lo - 1))
                    } else {
                        right
                    };
                    *o = slope * tap.dv_dgamma;
                }
            }
            Ok(out)
        }
    }
}
