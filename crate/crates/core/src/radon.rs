//! Discrete circular Radon transform.
//!
//! Row `j` of the projection matrix for angle `i` integrates the image over the
//! circle of radius `r_j` centred at the transducer `z_i`, restricted to the
//! image square. The circle is clipped analytically against the square, each
//! inside arc is split into equal pieces no longer than `pixel_size / q`, and
//! the midpoint of every piece carries the piece's arc length, splatted onto
//! the four surrounding pixel centres with bilinear weights. Points in the
//! half-pixel border outside the outermost centres use the nearest edge
//! pixel, so the weights of a row always sum to the clipped arc length.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ImageGrid, ScanGeometry};
use crate::io::{read_f64, read_u64, write_f64, write_u64};
use crate::sparse::{RowBuilder, SparseMatrix};

pub const DEFAULT_OVERSAMPLING: usize = 4;

const CACHE_MAGIC: &[u8; 8] = b"PATCSR01";

/// Arcs `[θa, θb]` (parameter of `z + r(cos θ, sin θ)`) lying inside the square
/// `[-extent, extent]²`.
pub fn clipped_arcs(center: (f64, f64), r: f64, extent: f64) -> Vec<(f64, f64)> {
    let two_pi = 2.0 * PI;
    let mut cuts = vec![0.0, two_pi];
    let wrap = |t: f64| t.rem_euclid(two_pi);
    for bound in [-extent, extent] {
        let c = (bound - center.0) / r;
        if c.abs() <= 1.0 {
            let t = c.acos();
            cuts.push(wrap(t));
            cuts.push(wrap(-t));
        }
        let s = (bound - center.1) / r;
        if s.abs() <= 1.0 {
            let t = s.asin();
            cuts.push(wrap(t));
            cuts.push(wrap(PI - t));
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let inside = |t: f64| {
        let x = center.0 + r * t.cos();
        let y = center.1 + r * t.sin();
        x.abs() <= extent && y.abs() <= extent
    };
    let mut arcs: Vec<(f64, f64)> = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 0.0 || !inside(0.5 * (a + b)) {
            continue;
        }
        match arcs.last_mut() {
            Some(last) if last.1 == a => last.1 = b,
            _ => arcs.push((a, b)),
        }
    }
    arcs
}

/// Length of the part of the circle inside the square.
pub fn clipped_arc_length(center: (f64, f64), r: f64, extent: f64) -> f64 {
    clipped_arcs(center, r, extent)
        .iter()
        .map(|(a, b)| r * (b - a))
        .sum()
}

/// Adds `weight` at physical point `(x1, x2)` to a row with bilinear weights.
#[inline]
fn splat(builder: &mut RowBuilder, grid: &ImageGrid, x1: f64, x2: f64, weight: f64) {
    let n = grid.n_side();
    let last = (n - 1) as f64;
    let u = grid.col_coord(x1).clamp(0.0, last);
    let v = grid.row_coord(x2).clamp(0.0, last);
    let c0 = (u.floor() as usize).min(n - 2);
    let r0 = (v.floor() as usize).min(n - 2);
    let tu = u - c0 as f64;
    let tv = v - r0 as f64;
    let w00 = weight * (1.0 - tu) * (1.0 - tv);
    let w10 = weight * (1.0 - tu) * tv;
    let w01 = weight * tu * (1.0 - tv);
    let w11 = weight * tu * tv;
    builder.add(grid.index(r0, c0), w00);
    builder.add(grid.index(r0 + 1, c0), w10);
    builder.add(grid.index(r0, c0 + 1), w01);
    builder.add(grid.index(r0 + 1, c0 + 1), w11);
}

/// Projection matrix `A_i` (shape `m × N`) for one transducer angle.
pub fn assemble_projection(
    grid: &ImageGrid,
    scan: &ScanGeometry,
    angle_index: usize,
    oversampling: usize,
) -> Result<SparseMatrix> {
    if angle_index >= scan.n_angles() {
        return Err(Error::invalid(format!(
            "angle index {angle_index} out of range for {} angles",
            scan.n_angles()
        )));
    }
    if oversampling == 0 {
        return Err(Error::invalid("oversampling factor must be positive"));
    }
    let z = scan.transducer(angle_index);
    let h = grid.pixel_size() / oversampling as f64;
    let mut builder = RowBuilder::new(grid.len());
    for &r in scan.radii() {
        for (a, b) in clipped_arcs(z, r, grid.extent()) {
            let len = r * (b - a);
            let pieces = (len / h).ceil().max(1.0) as usize;
            let dt = (b - a) / pieces as f64;
            let weight = len / pieces as f64;
            for k in 0..pieces {
                let t = a + (k as f64 + 0.5) * dt;
                splat(
                    &mut builder,
                    grid,
                    z.0 + r * t.cos(),
                    z.1 + r * t.sin(),
                    weight,
                );
            }
        }
        builder.finish_row();
    }
    Ok(builder.build())
}

/// All per-angle projection matrices for one grid and scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    grid: ImageGrid,
    scan: ScanGeometry,
    oversampling: usize,
    matrices: Vec<SparseMatrix>,
}

impl ProjectionSet {
    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn scan(&self) -> &ScanGeometry {
        &self.scan
    }

    pub fn oversampling(&self) -> usize {
        self.oversampling
    }

    pub fn matrices(&self) -> &[SparseMatrix] {
        &self.matrices
    }

    pub fn matrix(&self, i: usize) -> &SparseMatrix {
        &self.matrices[i]
    }

    pub fn mean_sparsity(&self) -> f64 {
        self.matrices
            .iter()
            .map(SparseMatrix::sparsity)
            .sum::<f64>()
            / self.matrices.len() as f64
    }

    pub fn total_nnz(&self) -> usize {
        self.matrices.iter().map(SparseMatrix::nnz).sum()
    }

    /// Writes the `PATCSR01` cache file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        write_header(&mut w, &self.grid, &self.scan, self.oversampling)?;
        for m in &self.matrices {
            write_u64(&mut w, m.n_rows() as u64)?;
            write_u64(&mut w, m.n_cols() as u64)?;
            write_u64(&mut w, m.nnz() as u64)?;
            for &p in m.row_ptr() {
                write_u64(&mut w, p as u64)?;
            }
            for &c in m.col_idx() {
                write_u64(&mut w, c as u64)?;
            }
            for &v in m.values() {
                write_f64(&mut w, v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a cache file and checks that it was built for exactly this
    /// grid, scan and oversampling factor.
    pub fn load(
        path: &Path,
        grid: &ImageGrid,
        scan: &ScanGeometry,
        oversampling: usize,
    ) -> Result<Self> {
        let set = Self::load_unchecked(path)?;
        if set.grid != *grid || set.scan != *scan || set.oversampling != oversampling {
            return Err(Error::GeometryMismatch(format!(
                "cache {} was built for a different grid or scan",
                path.display()
            )));
        }
        Ok(set)
    }

    /// Reads a cache file without validating its geometry against a request.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a PATCSR01 cache file".into()));
        }
        let (grid, scan, oversampling) = read_header(&mut r)?;
        let mut matrices = Vec::with_capacity(scan.n_angles());
        for _ in 0..scan.n_angles() {
            let n_rows = read_u64(&mut r)? as usize;
            let n_cols = read_u64(&mut r)? as usize;
            let nnz = read_u64(&mut r)? as usize;
            if n_rows != scan.n_radii() || n_cols != grid.len() {
                return Err(Error::Format("matrix shape disagrees with header".into()));
            }
            let row_ptr = (0..=n_rows)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let col_idx = (0..nnz)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let values = (0..nnz)
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>>>()?;
            matrices.push(SparseMatrix::from_csr(
                n_rows, n_cols, row_ptr, col_idx, values,
            )?);
        }
        Ok(Self {
            grid,
            scan,
            oversampling,
            matrices,
        })
    }
}

fn write_header(
    w: &mut impl Write,
    grid: &ImageGrid,
    scan: &ScanGeometry,
    oversampling: usize,
) -> Result<()> {
    write_u64(w, grid.n_side() as u64)?;
    write_f64(w, grid.extent())?;
    write_u64(w, oversampling as u64)?;
    write_u64(w, scan.n_angles() as u64)?;
    for &a in scan.angles() {
        write_f64(w, a)?;
    }
    write_u64(w, scan.n_radii() as u64)?;
    for &r in scan.radii() {
        write_f64(w, r)?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(ImageGrid, ScanGeometry, usize)> {
    let n_side = read_u64(r)? as usize;
    let extent = read_f64(r)?;
    let oversampling = read_u64(r)? as usize;
    let n_angles = read_u64(r)? as usize;
    let angles = (0..n_angles)
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    let n_radii = read_u64(r)? as usize;
    let radii = (0..n_radii)
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    let grid = ImageGrid::new(n_side, extent).map_err(|e| Error::Format(e.to_string()))?;
    let scan = ScanGeometry::new(angles, radii).map_err(|e| Error::Format(e.to_string()))?;
    Ok((grid, scan, oversampling))
}

/// Assembles one matrix per angle. Angles are built independently in
/// parallel; each matrix depends only on its own angle, so the result does
/// not depend on scheduling.
pub fn assemble_all(
    grid: &ImageGrid,
    scan: &ScanGeometry,
    oversampling: usize,
) -> Result<ProjectionSet> {
    let matrices = (0..scan.n_angles())
        .into_par_iter()
        .map(|i| assemble_projection(grid, scan, i, oversampling))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProjectionSet {
        grid: *grid,
        scan: scan.clone(),
        oversampling,
        matrices,
    })
}

/// Loads the cache at `path` if it matches, otherwise assembles and writes it.
pub fn load_or_assemble(
    path: Option<&Path>,
    grid: &ImageGrid,
    scan: &ScanGeometry,
    oversampling: usize,
) -> Result<ProjectionSet> {
    if let Some(p) = path {
        if p.exists() {
            return ProjectionSet::load(p, grid, scan, oversampling);
        }
    }
    let set = assemble_all(grid, scan, oversampling)?;
    if let Some(p) = path {
        if let Some(dir) = p.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        set.save(p)?;
    }
    Ok(set)
}

pub fn apply(mat: &SparseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    mat.apply(x)
}

pub fn apply_transpose(mat: &SparseMatrix, y: &[f64]) -> Result<Vec<f64>> {
    mat.apply_transpose(y)
}

pub fn sparsity(mat: &SparseMatrix) -> f64 {
    mat.sparsity()
}
