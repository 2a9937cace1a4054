//! Coordinate conventions, image grids, scan geometry and synthetic phantoms.
//!
//! The object lives on the square `[-extent, extent]²` centred at the origin,
//! strictly inside the unit disc on which the transducers sit. Pixel `(row, col)`
//! has its centre at
//!
//! ```text
//! x1 = -extent + (col + 0.5) * pixel_size
//! x2 =  extent - (row + 0.5) * pixel_size
//! ```
//!
//! so row 0 is the top of the image. Images are vectorized column-major:
//! the linear index of `(row, col)` is `col * n_side + row`. Every operator in
//! the crate uses this convention.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGrid {
    n_side: usize,
    extent: f64,
}

impl ImageGrid {
    pub fn new(n_side: usize, extent: f64) -> Result<Self> {
        if n_side < 2 {
            return Err(Error::invalid(format!("n_side must be >= 2, got {n_side}")));
        }
        if !(extent > 0.0 && extent < 1.0) {
            return Err(Error::invalid(format!(
                "extent must lie in (0, 1), got {extent}"
            )));
        }
        Ok(Self { n_side, extent })
    }

    pub fn n_side(&self) -> usize {
        self.n_side
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 * self.extent / self.n_side as f64
    }

    /// Number of pixels `N = n_side²`.
    pub fn len(&self) -> usize {
        self.n_side * self.n_side
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        col * self.n_side + row
    }

    #[inline]
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index % self.n_side, index / self.n_side)
    }

    #[inline]
    pub fn x1_of_col(&self, col: usize) -> f64 {
        -self.extent + (col as f64 + 0.5) * self.pixel_size()
    }

    #[inline]
    pub fn x2_of_row(&self, row: usize) -> f64 {
        self.extent - (row as f64 + 0.5) * self.pixel_size()
    }

    /// Physical centre `(x1, x2)` of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (self.x1_of_col(col), self.x2_of_row(row))
    }

    /// Fractional column coordinate; integer values land on pixel centres.
    #[inline]
    pub fn col_coord(&self, x1: f64) -> f64 {
        (x1 + self.extent) / self.pixel_size() - 0.5
    }

    /// Fractional row coordinate; integer values land on pixel centres.
    #[inline]
    pub fn row_coord(&self, x2: f64) -> f64 {
        (self.extent - x2) / self.pixel_size() - 0.5
    }

    /// Nearest pixel to a physical point, or `None` outside the grid.
    pub fn pixel_at(&self, x1: f64, x2: f64) -> Option<(usize, usize)> {
        let r = self.row_coord(x2).round();
        let c = self.col_coord(x1).round();
        let n = self.n_side as f64;
        if r < 0.0 || c < 0.0 || r >= n || c >= n {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    pub fn contains(&self, x1: f64, x2: f64) -> bool {
        x1.abs() <= self.extent && x2.abs() <= self.extent
    }
}

/// A discretized object on an [`ImageGrid`], stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    grid: ImageGrid,
    values: Vec<f64>,
}

impl Image {
    pub fn zeros(grid: ImageGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: ImageGrid, values: Vec<f64>) -> Result<Self> {
        Error::check_len(grid.len(), values.len())?;
        Ok(Self { grid, values })
    }

    /// Samples `f(x1, x2)` at every pixel centre.
    pub fn from_fn(grid: ImageGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.n_side();
        let mut values = Vec::with_capacity(grid.len());
        for col in 0..n {
            let x1 = grid.x1_of_col(col);
            for row in 0..n {
                values.push(f(x1, grid.x2_of_row(row)));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.index(row, col)]
    }
}

/// Transducer angles on the unit circle and the radius grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    angles: Vec<f64>,
    radii: Vec<f64>,
}

/// Largest radius that can still meet an object inside the unit disc.
pub const MAX_RADIUS: f64 = 2.0;

impl ScanGeometry {
    pub fn new(angles: Vec<f64>, radii: Vec<f64>) -> Result<Self> {
        if angles.is_empty() || radii.is_empty() {
            return Err(Error::invalid(
                "scan needs at least one angle and one radius",
            ));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("non-finite transducer angle"));
        }
        if radii[0] <= 0.0 || !radii[0].is_finite() {
            return Err(Error::invalid("radii must be strictly positive"));
        }
        if radii.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("radii must be strictly increasing"));
        }
        if *radii.last().unwrap() > MAX_RADIUS {
            return Err(Error::invalid(format!(
                "radii must not exceed {MAX_RADIUS}"
            )));
        }
        Ok(Self { angles, radii })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_radii(&self) -> usize {
        self.radii.len()
    }

    /// Transducer position `z_i = (cos φ_i, sin φ_i)`.
    pub fn transducer(&self, i: usize) -> (f64, f64) {
        let phi = self.angles[i];
        (phi.cos(), phi.sin())
    }
}

pub fn make_grid(n_side: usize, extent: f64) -> Result<ImageGrid> {
    ImageGrid::new(n_side, extent)
}

/// Angles `start + k * step` (degrees, converted to radians) and radii
/// `j * r_max / n_radii` for `j = 1..=n_radii`.
pub fn make_scan(
    n_angles: usize,
    start_deg: f64,
    step_deg: f64,
    n_radii: usize,
    r_max: f64,
) -> Result<ScanGeometry> {
    if n_angles == 0 || n_radii == 0 {
        return Err(Error::invalid("angle and radius counts must be positive"));
    }
    if !(r_max > 0.0 && r_max <= MAX_RADIUS) {
        return Err(Error::invalid(format!(
            "r_max must lie in (0, {MAX_RADIUS}], got {r_max}"
        )));
    }
    let angles = (0..n_angles)
        .map(|k| (start_deg + k as f64 * step_deg) * PI / 180.0)
        .collect();
    let radii = (1..=n_radii)
        .map(|j| j as f64 * r_max / n_radii as f64)
        .collect();
    ScanGeometry::new(angles, radii)
}

/// Axis-aligned ellipse with an additive intensity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x1: f64, x2: f64) -> bool {
        let u = (x1 - self.center[0]) / self.semi_axes[0];
        let v = (x2 - self.center[1]) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }

    /// Lowest and highest `x2` covered by the ellipse.
    pub fn x2_range(&self) -> (f64, f64) {
        (
            self.center[1] - self.semi_axes[1],
            self.center[1] + self.semi_axes[1],
        )
    }
}

/// Ellipse-based phantom. Values are clamped to the 8-bit display range.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub shapes: Vec<Ellipse>,
}

impl PhantomSpec {
    /// Multi-ellipse head-like phantom. Its support stays well inside the
    /// half-unit square under vertical stretches of ±5% about `x2 = -1/2`.
    pub fn default_ellipses() -> Self {
        let e = |cx: f64, cy: f64, ax: f64, ay: f64, v: f64| Ellipse {
            center: [cx, cy],
            semi_axes: [ax, ay],
            intensity: v,
        };
        Self {
            shapes: vec![
                e(0.0, -0.04, 0.38, 0.36, 110.0),
                e(0.0, -0.04, 0.34, 0.32, -40.0),
                e(-0.14, 0.08, 0.07, 0.13, 120.0),
                e(0.13, 0.06, 0.09, 0.10, 90.0),
                e(0.0, 0.22, 0.06, 0.04, 140.0),
                e(0.0, -0.20, 0.18, 0.05, 80.0),
                e(-0.08, -0.30, 0.04, 0.03, 100.0),
                e(0.10, -0.30, 0.05, 0.025, 120.0),
                e(0.0, -0.06, 0.03, 0.03, 60.0),
            ],
        }
    }

    /// Vertical extent `(min x2, max x2)` of the union of shapes.
    pub fn x2_support(&self) -> Option<(f64, f64)> {
        self.shapes
            .iter()
            .map(Ellipse::x2_range)
            .fold(None, |acc, (lo, hi)| {
                Some(match acc {
                    None => (lo, hi),
                    Some((a, b)) => (f64::min(a, lo), f64::max(b, hi)),
                })
            })
    }

    /// Largest distance from the origin of any point of the shapes' bounding boxes.
    pub fn bounding_radius(&self) -> f64 {
        self.shapes
            .iter()
            .map(|s| {
                let x = s.center[0].abs() + s.semi_axes[0];
                let y = s.center[1].abs() + s.semi_axes[1];
                x.hypot(y)
            })
            .fold(0.0, f64::max)
    }
}

pub const PIXEL_MAX: f64 = 255.0;

pub fn make_phantom(grid: &ImageGrid, spec: &PhantomSpec) -> Result<Image> {
    let e = grid.extent();
    for (k, s) in spec.shapes.iter().enumerate() {
        if !(s.semi_axes[0] > 0.0 && s.semi_axes[1] > 0.0) {
            return Err(Error::invalid(format!(
                "shape {k}: semi-axes must be positive"
            )));
        }
        let covers_whole =
            s.contains(-e, -e) && s.contains(-e, e) && s.contains(e, -e) && s.contains(e, e);
        let inside =
            s.center[0].abs() + s.semi_axes[0] <= e && s.center[1].abs() + s.semi_axes[1] <= e;
        if !(inside || covers_whole) {
            return Err(Error::invalid(format!(
                "shape {k} extends outside the grid domain"
            )));
        }
    }
    Ok(Image::from_fn(*grid, |x1, x2| {
        spec.shapes
            .iter()
            .filter(|s| s.contains(x1, x2))
            .map(|s| s.intensity)
            .sum::<f64>()
            .clamp(0.0, PIXEL_MAX)
    }))
}
