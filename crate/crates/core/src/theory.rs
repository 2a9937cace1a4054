//! Checkable sufficient conditions for stable recovery under a vertical
//! stretch, and a quadrature oracle for the continuous forward model.
//!
//! The stretch model is `Φ(φ, x) = (x₁, c + a(φ)(x₂ − c))` with the object
//! support `K` inside the disc of radius `1 − ε`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::motion::MotionParams;

/// `1 / √(2ε − ε²)`.
pub fn c_epsilon(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!("ε must lie in (0, 1], got {eps}")));
    }
    Ok(1.0 / (2.0 * eps - eps * eps).sqrt())
}

/// Stretch factors `a_i = 1 + γ_i` sampled at the scan angles.
#[derive(Debug, Clone, PartialEq)]
pub struct StretchProfile {
    angles: Vec<f64>,
    a: Vec<f64>,
    baseline_c: f64,
    eps: f64,
}

impl StretchProfile {
    pub fn new(angles: Vec<f64>, a: Vec<f64>, baseline_c: f64, eps: f64) -> Result<Self> {
        Error::check_len(angles.len(), a.len())?;
        if a.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("stretch factors must be positive"));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::invalid(format!("ε must lie in (0, 1), got {eps}")));
        }
        if angles.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("angles must be strictly increasing"));
        }
        Ok(Self {
            angles,
            a,
            baseline_c,
            eps,
        })
    }

    pub fn from_motion(angles: &[f64], motion: &MotionParams, eps: f64) -> Result<Self> {
        Self::new(
            angles.to_vec(),
            motion.stretch_factors(),
            motion.baseline_c(),
            eps,
        )
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn baseline_c(&self) -> f64 {
        self.baseline_c
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Vertical extent of `Φ(φ_i, K)` over all angles, for `K` spanning
    /// `[x2_lo, x2_hi]` vertically.
    pub fn deformed_x2_range(&self, x2_lo: f64, x2_hi: f64) -> (f64, f64) {
        let c = self.baseline_c;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &a in &self.a {
            for x2 in [x2_lo, x2_hi] {
                let y = c + a * (x2 - c);
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
        (lo, hi)
    }
}

/// `ε` with `K ⊂ D_{1−ε}` when `K` is the bounding box `[x1_lo, x1_hi] × [x2_lo, x2_hi]`.
pub fn eps_for_box(x1: (f64, f64), x2: (f64, f64)) -> Result<f64> {
    let r = [x1.0, x1.1]
        .iter()
        .flat_map(|&u| [x2.0, x2.1].map(move |v| u.hypot(v)))
        .fold(0.0, f64::max);
    if !(r < 1.0) {
        return Err(Error::invalid("support box is not inside the unit disc"));
    }
    Ok(1.0 - r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BolkerCheck {
    pub holds: bool,
    /// `1 / ((3 + |c|) C_ε)`.
    pub bound: f64,
    pub max_ratio: f64,
    pub margin: f64,
    pub worst_angle_index: usize,
}

/// Checks `max_i |a′_i / a_i| ≤ 1 / ((3 + |c|) C_ε)` with `a′` from central
/// differences on the angle grid (one-sided at the ends).
pub fn bolker_bound_check(profile: &StretchProfile) -> Result<BolkerCheck> {
    let n = profile.a.len();
    if n < 3 {
        return Err(Error::invalid("need at least 3 angle samples"));
    }
    let (phi, a) = (&profile.angles, &profile.a);
    let bound = 1.0 / ((3.0 + profile.baseline_c.abs()) * c_epsilon(profile.eps)?);
    let mut max_ratio = 0.0;
    let mut worst = 0;
    for i in 0..n {
        let (l, r) = match i {
            0 => (0, 1),
            _ if i == n - 1 => (n - 2, n - 1),
            _ => (i - 1, i + 1),
        };
        let da = (a[r] - a[l]) / (phi[r] - phi[l]);
        let ratio = (da / a[i]).abs();
        if ratio > max_ratio {
            max_ratio = ratio;
            worst = i;
        }
    }
    Ok(BolkerCheck {
        holds: max_ratio <= bound,
        bound,
        max_ratio,
        margin: bound - max_ratio,
        worst_angle_index: worst,
    })
}

/// Visibility for transducers on the arc `[α, β]`: a scan spanning more than
/// a full turn always sees everything; otherwise the deformed support must lie
/// above `max(sin α, sin β)`.
pub fn visibility_check(angles: &[f64], k_min_phi2: f64) -> Result<bool> {
    if angles.is_empty() {
        return Err(Error::invalid("no angles"));
    }
    let alpha = angles.iter().cloned().fold(f64::INFINITY, f64::min);
    let beta = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if beta - alpha > 2.0 * PI {
        return Ok(true);
    }
    Ok(k_min_phi2 > alpha.sin().max(beta.sin()))
}

const ORACLE_START_SAMPLES: usize = 1 << 14;
const ORACLE_MAX_SAMPLES: usize = 1 << 22;
const ORACLE_CONVERGENCE_TOL: f64 = 1e-8;
const ORACLE_ROUTE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    /// Weighted integral over the ellipse `E(φ, r)` of rest positions.
    pub ellipse_route: f64,
    /// Arc-length integral of `f ∘ Ψ` over the measurement circle.
    pub circle_route: f64,
    pub samples: usize,
}

/// Periodic trapezoid rule on `[0, 2π)`, doubled until converged.
fn periodic_integral(integrand: &dyn Fn(f64) -> f64) -> Result<(f64, usize)> {
    let eval = |n: usize| {
        let h = 2.0 * PI / n as f64;
        (0..n).map(|k| integrand(k as f64 * h)).sum::<f64>() * h
    };
    let mut n = ORACLE_START_SAMPLES;
    let mut prev = eval(n);
    while n < ORACLE_MAX_SAMPLES {
        n *= 2;
        let next = eval(n);
        if (next - prev).abs() <= ORACLE_CONVERGENCE_TOL * next.abs().max(f64::MIN_POSITIVE)
            || next == prev
        {
            return Ok((next, n));
        }
        prev = next;
    }
    Err(Error::Solver(format!(
        "quadrature did not converge with {n} samples"
    )))
}

/// Generalized circular mean of `f` for the transducer at angle `φ`, radius
/// `r` and stretch `a` about `x₂ = c`, evaluated by two independent routes
/// that must agree before a value is returned.
pub fn continuous_forward_oracle(
    f: &dyn Fn(f64, f64) -> f64,
    phi: f64,
    r: f64,
    a: f64,
    c: f64,
) -> Result<OracleValue> {
    if !(a > 0.0) || !(r > 0.0) {
        return Err(Error::invalid("stretch factor and radius must be positive"));
    }
    let (z1, z2) = (phi.cos(), phi.sin());

    let ellipse = |t: f64| {
        let (s, co) = t.sin_cos();
        let x1 = z1 + r * co;
        let x2 = c + (z2 + r * s - c) / a;
        // Φ(x) and its Jacobian diag(1, a).
        let p1 = x1;
        let p2 = c + a * (x2 - c);
        let (d1, d2) = (z1 - p1, z2 - p2);
        let num = a * d1.hypot(d2);
        let den = d1.hypot(a * d2);
        let speed = (r * s).hypot(r * co / a);
        f(x1, x2) * num / den * speed
    };
    let circle = |t: f64| {
        let (s, co) = t.sin_cos();
        let y1 = z1 + r * co;
        let y2 = z2 + r * s;
        f(y1, c + (y2 - c) / a) * r
    };
    let (ellipse_route, n1) = periodic_integral(&ellipse)?;
    let (circle_route, n2) = periodic_integral(&circle)?;
    let scale = ellipse_route.abs().max(circle_route.abs());
    if (ellipse_route - circle_route).abs() > ORACLE_ROUTE_TOL * scale {
        return Err(Error::Solver(format!(
            "oracle routes disagree: {ellipse_route} vs {circle_route}"
        )));
    }
    Ok(OracleValue {
        value: circle_route,
        ellipse_route,
        circle_route,
        samples: n1.max(n2),
    })
}
