//! The stacked forward operator `A(γ) = [A_1 K(γ_1); …; A_n K(γ_n)]`, data
//! simulation and error metrics.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Image, ImageGrid, ScanGeometry};
use crate::krylov::LinearOperator;
use crate::motion::{stretch_matrix, MotionParams};
use crate::radon::ProjectionSet;
use crate::sparse::SparseMatrix;

/// Measurements blocked by angle: block `i` holds the `m` radius samples of
/// angle `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    scan: ScanGeometry,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(scan: ScanGeometry, values: Vec<f64>) -> Result<Self> {
        Error::check_len(scan.n_angles() * scan.n_radii(), values.len())?;
        Ok(Self { scan, values })
    }

    pub fn zeros(scan: ScanGeometry) -> Self {
        let len = scan.n_angles() * scan.n_radii();
        Self {
            scan,
            values: vec![0.0; len],
        }
    }

    pub fn scan(&self) -> &ScanGeometry {
        &self.scan
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, i: usize) -> &[f64] {
        let m = self.scan.n_radii();
        &self.values[i * m..(i + 1) * m]
    }
}

/// `A(γ)` for one fixed motion state. Projection matrices are shared; the
/// stretch matrices are rebuilt for each new γ.
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    projections: Arc<ProjectionSet>,
    motion: MotionParams,
    stretch: Vec<SparseMatrix>,
}

impl ForwardOperator {
    pub fn new(projections: Arc<ProjectionSet>, motion: MotionParams) -> Result<Self> {
        Error::check_len(projections.scan().n_angles(), motion.len())?;
        let grid = *projections.grid();
        let c = motion.baseline_c();
        let stretch = motion
            .gammas()
            .par_iter()
            .map(|&g| stretch_matrix(&grid, g, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projections,
            motion,
            stretch,
        })
    }

    /// Same projections, new motion state.
    pub fn with_motion(&self, motion: MotionParams) -> Result<Self> {
        Self::new(Arc::clone(&self.projections), motion)
    }

    pub fn projections(&self) -> &Arc<ProjectionSet> {
        &self.projections
    }

    pub fn motion(&self) -> &MotionParams {
        &self.motion
    }

    pub fn grid(&self) -> &ImageGrid {
        self.projections.grid()
    }

    pub fn scan(&self) -> &ScanGeometry {
        self.projections.scan()
    }

    pub fn stretch(&self, i: usize) -> &SparseMatrix {
        &self.stretch[i]
    }

    /// `A_i K(γ_i) f` for a single angle.
    pub fn apply_block(&self, i: usize, f: &[f64]) -> Result<Vec<f64>> {
        let deformed = self.stretch[i].apply(f)?;
        self.projections.matrix(i).apply(&deformed)
    }

    fn apply_vec(&self, f: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(self.grid().len(), f.len())?;
        let blocks = (0..self.scan().n_angles())
            .into_par_iter()
            .map(|i| self.apply_block(i, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(blocks.concat())
    }

    fn adjoint_vec(&self, g: &[f64]) -> Result<Vec<f64>> {
        let m = self.scan().n_radii();
        Error::check_len(self.scan().n_angles() * m, g.len())?;
        let partials = (0..self.scan().n_angles())
            .into_par_iter()
            .map(|i| {
                let back = self
                    .projections
                    .matrix(i)
                    .apply_transpose(&g[i * m..(i + 1) * m])?;
                self.stretch[i].apply_transpose(&back)
            })
            .collect::<Result<Vec<_>>>()?;
        // Fixed summation order keeps the adjoint independent of scheduling.
        let mut out = vec![0.0; self.grid().len()];
        for p in &partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Ok(out)
    }
}

impl LinearOperator for ForwardOperator {
    fn n_rows(&self) -> usize {
        self.scan().n_angles() * self.scan().n_radii()
    }

    fn n_cols(&self) -> usize {
        self.grid().len()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply_vec(x)
    }

    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.adjoint_vec(y)
    }
}

pub fn forward_apply(op: &ForwardOperator, f: &Image) -> Result<Sinogram> {
    if f.grid() != op.grid() {
        return Err(Error::GeometryMismatch(
            "image grid differs from operator grid".into(),
        ));
    }
    Sinogram::new(op.scan().clone(), op.apply_vec(f.values())?)
}

pub fn forward_adjoint(op: &ForwardOperator, g: &Sinogram) -> Result<Image> {
    if g.scan() != op.scan() {
        return Err(Error::GeometryMismatch(
            "sinogram scan differs from operator scan".into(),
        ));
    }
    Image::from_values(*op.grid(), op.adjoint_vec(g.values())?)
}

/// Adds white Gaussian noise scaled so that `‖e‖ / ‖g‖ = level` exactly.
///
/// The noise direction is drawn from a ChaCha8 stream seeded with `seed`
/// (standard normals via `rand_distr::StandardNormal`), so realizations are
/// reproducible across platforms.
pub fn add_noise(g: &Sinogram, level: f64, seed: u64) -> Result<Sinogram> {
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::invalid(format!(
            "noise level must be >= 0, got {level}"
        )));
    }
    if level == 0.0 {
        return Ok(g.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..g.values.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let scale = level * norm2(&g.values) / norm2(&w);
    let values = g
        .values
        .iter()
        .zip(&w)
        .map(|(gv, wv)| gv + scale * wv)
        .collect();
    Sinogram::new(g.scan.clone(), values)
}

/// `‖x − x_true‖₂ / ‖x_true‖₂`.
pub fn rel_error(x: &[f64], x_true: &[f64]) -> Result<f64> {
    Error::check_len(x_true.len(), x.len())?;
    let denom = norm2(x_true);
    if denom == 0.0 {
        return Err(Error::invalid("reference vector has zero norm"));
    }
    let num = x
        .iter()
        .zip(x_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_grid, make_phantom, make_scan, PhantomSpec};
    use crate::radon::assemble_all;
    use rand::Rng;

    fn small_operator(gammas: Vec<f64>) -> ForwardOperator {
        let grid = make_grid(24, 0.5).unwrap();
        let scan = make_scan(gammas.len(), 5.0, 360.0 / gammas.len() as f64, 30, 2.0).unwrap();
        let set = Arc::new(assemble_all(&grid, &scan, 4).unwrap());
        ForwardOperator::new(set, MotionParams::new(gammas, -0.5).unwrap()).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let op = small_operator(vec![0.02, -0.03, 0.01]);
        let g = forward_apply(&op, &Image::zeros(*op.grid())).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        let f = forward_adjoint(&op, &Sinogram::zeros(op.scan().clone())).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_motion_is_pure_projection() {
        let op = small_operator(vec![0.0; 4]);
        let f = make_phantom(op.grid(), &PhantomSpec::default_ellipses()).unwrap();
        let g = forward_apply(&op, &f).unwrap();
        for i in 0..4 {
            let direct = op.projections().matrix(i).apply(f.values()).unwrap();
            assert_eq!(g.block(i), direct.as_slice());
        }
    }

    #[test]
    fn adjoint_identity_random() {
        let op = small_operator(vec![0.04, -0.02, 0.0, 0.05, -0.05]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let f: Vec<f64> = (0..op.n_cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..op.n_rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let af = op.apply(&f).unwrap();
            let atg = op.apply_transpose(&g).unwrap();
            let lhs = dot(&af, &g);
            let rhs = dot(&f, &atg);
            assert!((lhs - rhs).abs() <= 1e-12 * norm2(&af) * norm2(&g));
        }
    }

    #[test]
    fn linear_in_image() {
        let op = small_operator(vec![0.03, -0.01]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1: Vec<f64> = (0..op.n_cols()).map(|_| rng.gen::<f64>()).collect();
        let f2: Vec<f64> = (0..op.n_cols()).map(|_| rng.gen::<f64>()).collect();
        let (a, b) = (2.5, -0.75);
        let combo: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();
        let lhs = op.apply(&combo).unwrap();
        let (g1, g2) = (op.apply(&f1).unwrap(), op.apply(&f2).unwrap());
        for k in 0..lhs.len() {
            let rhs = a * g1[k] + b * g2[k];
            assert!((lhs[k] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let op = small_operator(vec![0.0, 0.0]);
        let other = Image::zeros(make_grid(12, 0.5).unwrap());
        assert!(matches!(
            forward_apply(&op, &other),
            Err(Error::GeometryMismatch(_))
        ));
        let wrong = Sinogram::zeros(make_scan(2, 0.0, 10.0, 30, 2.0).unwrap());
        assert!(forward_adjoint(&op, &wrong).is_err());
    }

    #[test]
    fn explicit_products_match_factored_path() {
        let op = small_operator(vec![0.04, -0.03, 0.02]);
        let f = make_phantom(op.grid(), &PhantomSpec::default_ellipses()).unwrap();
        for i in 0..3 {
            let product = op.projections().matrix(i).matmul(op.stretch(i)).unwrap();
            let explicit = product.apply(f.values()).unwrap();
            let factored = op.apply_block(i, f.values()).unwrap();
            let diff: Vec<f64> = explicit.iter().zip(&factored).map(|(a, b)| a - b).collect();
            assert!(norm2(&diff) <= 1e-12 * norm2(&factored));
        }
    }

    #[test]
    fn noise_level_is_exact_and_seeded() {
        let op = small_operator(vec![0.01, 0.02, 0.03]);
        let f = make_phantom(op.grid(), &PhantomSpec::default_ellipses()).unwrap();
        let g = forward_apply(&op, &f).unwrap();
        assert_eq!(add_noise(&g, 0.0, 1).unwrap(), g);
        let noisy = add_noise(&g, 0.03, 42).unwrap();
        let level = rel_error(noisy.values(), g.values()).unwrap();
        assert!((level - 0.03).abs() < 1e-14);
        assert_eq!(add_noise(&g, 0.03, 42).unwrap(), noisy);
        assert_ne!(add_noise(&g, 0.03, 43).unwrap(), noisy);
        assert!(add_noise(&g, -0.1, 1).is_err());
    }

    #[test]
    fn rel_error_examples() {
        let x = vec![1.0, -2.0, 2.0];
        assert_eq!(rel_error(&x, &x).unwrap(), 0.0);
        assert_eq!(rel_error(&[0.0; 3], &x).unwrap(), 1.0);
        let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_eq!(rel_error(&doubled, &x).unwrap(), 1.0);
        assert!(rel_error(&x, &[0.0; 3]).is_err());
        assert!(rel_error(&x, &[1.0; 2]).is_err());
    }

    #[test]
    fn permuting_angles_permutes_blocks() {
        let grid = make_grid(20, 0.5).unwrap();
        let angles = [0.1, 1.3, 2.2, 4.0];
        let gammas = [0.02, -0.04, 0.0, 0.03];
        let radii: Vec<f64> = (1..=25).map(|j| j as f64 * 0.08).collect();
        let perm = [2usize, 0, 3, 1];
        let build = |order: &[usize]| {
            let scan = ScanGeometry::new(order.iter().map(|&k| angles[k]).collect(), radii.clone())
                .unwrap();
            let set = Arc::new(assemble_all(&grid, &scan, 4).unwrap());
            let motion =
                MotionParams::new(order.iter().map(|&k| gammas[k]).collect(), -0.5).unwrap();
            ForwardOperator::new(set, motion).unwrap()
        };
        let a = build(&[0, 1, 2, 3]);
        let b = build(&perm);
        let f = make_phantom(&grid, &PhantomSpec::default_ellipses()).unwrap();
        let ga = forward_apply(&a, &f).unwrap();
        let gb = forward_apply(&b, &f).unwrap();
        for (pos, &k) in perm.iter().enumerate() {
            assert_eq!(gb.block(pos), ga.block(k));
        }
    }

    #[test]
    fn adjoint_of_single_entry_hugs_the_ellipse() {
        let grid = make_grid(96, 0.5).unwrap();
        let c = -0.5;
        let a = 1.05;
        let scan = ScanGeometry::new(vec![0.9], vec![1.0]).unwrap();
        let set = Arc::new(assemble_all(&grid, &scan, 4).unwrap());
        let op = ForwardOperator::new(set, MotionParams::new(vec![a - 1.0], c).unwrap()).unwrap();
        let g = Sinogram::new(scan.clone(), vec![1.0]).unwrap();
        let img = forward_adjoint(&op, &g).unwrap();
        let (z1, z2) = scan.transducer(0);
        let ps = grid.pixel_size();
        let mut hit = 0;
        for col in 0..96 {
            for row in 0..96 {
                if img.get(row, col) == 0.0 {
                    continue;
                }
                hit += 1;
                let (x1, x2) = grid.pixel_center(row, col);
                // Φ(x) lies on the circle |z − Φ(x)| = r.
                let phi2 = c + a * (x2 - c);
                let dist = (z1 - x1).hypot(z2 - phi2);
                assert!(
                    (dist - 1.0).abs() <= 2.5 * ps,
                    "pixel ({row},{col}) at {dist}"
                );
            }
        }
        assert!(hit > 0);
    }
}
