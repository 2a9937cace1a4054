//! Experiment configuration and the commands behind the `patmo` binary.
//!
//! A configuration is a TOML document; every command reads one, and the
//! artifacts it writes depend only on the configuration (including the noise
//! seed).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{add_noise, forward_apply, norm2, rel_error, ForwardOperator, Sinogram};
use crate::geometry::{
    make_grid, make_phantom, make_scan, Image, ImageGrid, PhantomSpec, ScanGeometry,
};
use crate::io::{image_to_pgm, read_sinogram, sinogram_to_pgm, write_image_raw, write_sinogram};
use crate::krylov::SolveReport;
use crate::motion::MotionParams;
use crate::radon::{assemble_all, load_or_assemble, ProjectionSet, DEFAULT_OVERSAMPLING};
use crate::theory::{
    bolker_bound_check, eps_for_box, visibility_check, BolkerCheck, StretchProfile,
};
use crate::varpro::{
    gauss_newton, solve_linear_subproblem, GNConfig, GNReport, InnerSolver, Truth,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n_side: usize,
    pub extent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub n_angles: usize,
    pub start_deg: f64,
    pub step_deg: f64,
    pub n_radii: usize,
    pub r_max: f64,
}

/// True motion used for simulation and error reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionSpec {
    /// `γ_i = amplitude · cos(frequency · φ_i)`.
    Cosine {
        amplitude: f64,
        frequency: f64,
        baseline_c: f64,
    },
    Explicit {
        gammas: Vec<f64>,
        baseline_c: f64,
    },
    Zero {
        baseline_c: f64,
    },
}

impl MotionSpec {
    pub fn baseline_c(&self) -> f64 {
        match *self {
            MotionSpec::Cosine { baseline_c, .. }
            | MotionSpec::Explicit { baseline_c, .. }
            | MotionSpec::Zero { baseline_c } => baseline_c,
        }
    }

    pub fn build(&self, angles: &[f64]) -> Result<MotionParams> {
        match self {
            MotionSpec::Cosine {
                amplitude,
                frequency,
                baseline_c,
            } => MotionParams::cosine(angles, *amplitude, *frequency, *baseline_c),
            MotionSpec::Explicit { gammas, baseline_c } => {
                Error::check_len(angles.len(), gammas.len())?;
                MotionParams::new(gammas.clone(), *baseline_c)
            }
            MotionSpec::Zero { baseline_c } => Ok(MotionParams::zeros(angles.len(), *baseline_c)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub level: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    pub oversampling: usize,
    /// Inner solvers run by `gn`, in order.
    pub variants: Vec<InnerSolver>,
    pub grid: GridConfig,
    pub scan: ScanConfig,
    pub motion: MotionSpec,
    pub noise: NoiseConfig,
    pub gn: GNConfig,
    pub phantom: PhantomSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

impl ExperimentConfig {
    /// `Paper`: 256² grid, 120 angles at 3°, 363 radii. `Desk`: 128² grid,
    /// 60 angles at 6°, 181 radii. Both use `γ_i = 0.05 cos(10 φ_i)` about
    /// `x₂ = −1/2`, 3% noise and six Gauss–Newton iterations.
    pub fn profile(profile: Profile) -> Self {
        let (n_side, n_angles, step_deg, n_radii) = match profile {
            Profile::Paper => (256, 120, 3.0, 363),
            Profile::Desk => (128, 60, 6.0, 181),
        };
        Self {
            output_dir: PathBuf::from("out"),
            cache_path: None,
            oversampling: DEFAULT_OVERSAMPLING,
            variants: vec![InnerSolver::Lsqr, InnerSolver::Wgcv, InnerSolver::Optimal],
            grid: GridConfig {
                n_side,
                extent: 0.5,
            },
            scan: ScanConfig {
                n_angles,
                start_deg: 0.0,
                step_deg,
                n_radii,
                r_max: 2.0,
            },
            motion: MotionSpec::Cosine {
                amplitude: 0.05,
                frequency: 10.0,
                baseline_c: -0.5,
            },
            noise: NoiseConfig {
                level: 0.03,
                seed: 1,
            },
            gn: GNConfig::default(),
            phantom: PhantomSpec::default_ellipses(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.grid().map_err(cfg_err)?;
        let scan = self.scan_geometry().map_err(cfg_err)?;
        self.motion.build(scan.angles()).map_err(cfg_err)?;
        self.gn.validate().map_err(cfg_err)?;
        if self.oversampling == 0 {
            return Err(Error::Config("oversampling must be at least 1".into()));
        }
        if !(self.noise.level >= 0.0) {
            return Err(Error::Config("noise level must be >= 0".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config(
                "at least one solver variant is required".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<ImageGrid> {
        make_grid(self.grid.n_side, self.grid.extent)
    }

    pub fn scan_geometry(&self) -> Result<ScanGeometry> {
        let s = &self.scan;
        make_scan(s.n_angles, s.start_deg, s.step_deg, s.n_radii, s.r_max)
    }
}

/// Everything derived from a configuration before any solve.
#[derive(Debug, Clone)]
pub struct Setup {
    pub projections: Arc<ProjectionSet>,
    pub truth_image: Image,
    pub truth_motion: MotionParams,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    let grid = cfg.grid()?;
    let scan = cfg.scan_geometry()?;
    let projections = load_or_assemble(cfg.cache_path.as_deref(), &grid, &scan, cfg.oversampling)?;
    Ok(Setup {
        projections: Arc::new(projections),
        truth_image: make_phantom(&grid, &cfg.phantom)?,
        truth_motion: cfg.motion.build(scan.angles())?,
    })
}

/// Noiseless and noisy data for the configured truth.
pub fn simulate(setup: &Setup, cfg: &ExperimentConfig) -> Result<(Sinogram, Sinogram)> {
    let op = ForwardOperator::new(Arc::clone(&setup.projections), setup.truth_motion.clone())?;
    let clean = forward_apply(&op, &setup.truth_image)?;
    let noisy = add_noise(&clean, cfg.noise.level, cfg.noise.seed)?;
    Ok((clean, noisy))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".patmo.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Io(std::io::Error::new(
                    e.kind(),
                    format!(
                        "output directory {} is in use ({} exists)",
                        dir.display(),
                        path.display()
                    ),
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.12e}")
}

fn gamma_csv(angles: &[f64], gammas: &[f64]) -> String {
    let mut out = String::from("angle_index,angle_deg,gamma\n");
    for (i, (a, g)) in angles.iter().zip(gammas).enumerate() {
        let _ = writeln!(out, "{i},{},{}", fmt_f(a.to_degrees()), fmt_f(*g));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub clean: Sinogram,
    pub noisy: Sinogram,
    pub noise_ratio: f64,
    pub files: Vec<PathBuf>,
}

/// Writes `sinogram_clean.bin`, `sinogram.bin`, `sinogram.pgm`,
/// `truth_image.bin`, `truth_image.pgm` and `truth_gamma.csv`.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateSummary> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let setup = prepare(cfg)?;
    let (clean, noisy) = simulate(&setup, cfg)?;
    let dir = &cfg.output_dir;
    let files = vec![
        dir.join("sinogram_clean.bin"),
        dir.join("sinogram.bin"),
        dir.join("sinogram.pgm"),
        dir.join("truth_image.bin"),
        dir.join("truth_image.pgm"),
        dir.join("truth_gamma.csv"),
    ];
    write_sinogram(&files[0], &clean)?;
    write_sinogram(&files[1], &noisy)?;
    std::fs::write(&files[2], sinogram_to_pgm(&noisy))?;
    write_image_raw(&files[3], &setup.truth_image)?;
    std::fs::write(&files[4], image_to_pgm(&setup.truth_image))?;
    std::fs::write(
        &files[5],
        gamma_csv(
            setup.projections.scan().angles(),
            setup.truth_motion.gammas(),
        ),
    )?;
    let diff: Vec<f64> = noisy
        .values()
        .iter()
        .zip(clean.values())
        .map(|(a, b)| a - b)
        .collect();
    let noise_ratio = if clean.values().iter().all(|&v| v == 0.0) {
        0.0
    } else {
        norm2(&diff) / norm2(clean.values())
    };
    Ok(SimulateSummary {
        clean,
        noisy,
        noise_ratio,
        files,
    })
}

/// Motion state used by `reconstruct`.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaSource {
    Zero,
    Truth,
    /// CSV as written by `simulate` or `gn` (last column is `γ`).
    File(PathBuf),
}

pub fn read_gamma_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.rsplit(',')
                .next()
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("bad γ line {l:?} in {}", path.display())))
        })
        .collect()
}

/// Loads data from `path`, or simulates it when no path is given.
pub fn load_data(cfg: &ExperimentConfig, setup: &Setup, path: Option<&Path>) -> Result<Sinogram> {
    let g = match path {
        Some(p) => read_sinogram(p)?,
        None => simulate(setup, cfg)?.1,
    };
    if g.scan() != setup.projections.scan() {
        return Err(Error::GeometryMismatch(
            "sinogram scan differs from the configured scan".into(),
        ));
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructSummary {
    pub image: Image,
    pub report: SolveReport,
    pub rel_error: f64,
}

/// Fixed-motion reconstruction with the given inner solver. Writes
/// `recon.bin`, `recon.pgm` and `solve_report.csv`.
pub fn cmd_reconstruct(
    cfg: &ExperimentConfig,
    sinogram: Option<&Path>,
    gamma: &GammaSource,
    solver: InnerSolver,
) -> Result<ReconstructSummary> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let setup = prepare(cfg)?;
    let g = load_data(cfg, &setup, sinogram)?;
    let c = cfg.motion.baseline_c();
    let n = setup.projections.scan().n_angles();
    let motion = match gamma {
        GammaSource::Zero => MotionParams::zeros(n, c),
        GammaSource::Truth => setup.truth_motion.clone(),
        GammaSource::File(p) => {
            let gs = read_gamma_csv(p)?;
            if gs.len() != n {
                return Err(Error::GeometryMismatch(format!(
                    "{} holds {} motion parameters, scan has {n} angles",
                    p.display(),
                    gs.len()
                )));
            }
            MotionParams::new(gs, c)?
        }
    };
    let gn = GNConfig {
        inner_solver: solver,
        ..cfg.gn
    };
    let (image, report) = solve_linear_subproblem(
        &setup.projections,
        &motion,
        &g,
        &gn,
        Some(&setup.truth_image),
    )?;
    let dir = &cfg.output_dir;
    write_image_raw(&dir.join("recon.bin"), &image)?;
    std::fs::write(dir.join("recon.pgm"), image_to_pgm(&image))?;
    std::fs::write(dir.join("solve_report.csv"), report.to_csv())?;
    let rel_error = rel_error(image.values(), setup.truth_image.values())?;
    Ok(ReconstructSummary {
        image,
        report,
        rel_error,
    })
}

/// Per-iteration error table: `variant,gn_iter,eps_gamma,eps_f,lambda`.
pub fn gn_table_csv(reports: &[GNReport]) -> String {
    let mut out = String::from("variant,gn_iter,eps_gamma,eps_f,lambda\n");
    for rep in reports {
        for it in &rep.iterations {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                rep.variant.label(),
                it.iter,
                fmt_f(it.eps_gamma.unwrap_or(f64::NAN)),
                fmt_f(it.eps_f.unwrap_or(f64::NAN)),
                fmt_f(it.lambda)
            );
        }
    }
    out
}

/// Motion estimates per variant and iteration next to the truth.
pub fn gamma_trajectory_csv(angles: &[f64], truth: &[f64], reports: &[GNReport]) -> String {
    let mut out = String::from("variant,gn_iter,angle_index,angle_deg,gamma,gamma_true\n");
    for rep in reports {
        for it in &rep.iterations {
            for (i, g) in it.gammas.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{i},{},{},{}",
                    rep.variant.label(),
                    it.iter,
                    fmt_f(angles[i].to_degrees()),
                    fmt_f(*g),
                    fmt_f(truth[i])
                );
            }
        }
    }
    out
}

fn variant_stem(v: InnerSolver) -> &'static str {
    match v {
        InnerSolver::Lsqr => "gn_lsqr",
        InnerSolver::Wgcv => "gn_hybr",
        InnerSolver::Optimal => "gn_hybr_opt",
    }
}

/// Runs Gauss–Newton from `γ = 0` for every configured variant. Writes
/// `gn_table.csv`, `gamma_trajectory.csv` and per-variant images and final
/// motion estimates.
pub fn cmd_gn(cfg: &ExperimentConfig, sinogram: Option<&Path>) -> Result<Vec<GNReport>> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let setup = prepare(cfg)?;
    let g = load_data(cfg, &setup, sinogram)?;
    let reports = run_gn_variants(cfg, &setup, &g)?;
    let dir = &cfg.output_dir;
    let angles = setup.projections.scan().angles();
    std::fs::write(dir.join("gn_table.csv"), gn_table_csv(&reports))?;
    std::fs::write(
        dir.join("gamma_trajectory.csv"),
        gamma_trajectory_csv(angles, setup.truth_motion.gammas(), &reports),
    )?;
    for rep in &reports {
        let stem = variant_stem(rep.variant);
        write_image_raw(&dir.join(format!("{stem}.bin")), &rep.image)?;
        std::fs::write(dir.join(format!("{stem}.pgm")), image_to_pgm(&rep.image))?;
        std::fs::write(
            dir.join(format!("{stem}_gamma.csv")),
            gamma_csv(angles, rep.motion.gammas()),
        )?;
    }
    Ok(reports)
}

/// Gauss–Newton for every configured variant, without touching the disk.
pub fn run_gn_variants(
    cfg: &ExperimentConfig,
    setup: &Setup,
    g: &Sinogram,
) -> Result<Vec<GNReport>> {
    let n = setup.projections.scan().n_angles();
    let gamma0 = MotionParams::zeros(n, cfg.motion.baseline_c());
    let truth = Truth {
        image: &setup.truth_image,
        gammas: setup.truth_motion.gammas(),
    };
    cfg.variants
        .iter()
        .map(|&v| {
            let gn = GNConfig {
                inner_solver: v,
                ..cfg.gn
            };
            gauss_newton(&setup.projections, g, &gamma0, &gn, Some(truth))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub eps: f64,
    pub bolker: BolkerCheck,
    pub k_min_phi2: f64,
    pub visible: bool,
}

impl CheckReport {
    pub fn render(&self) -> String {
        let b = &self.bolker;
        format!(
            "support margin eps = {}\n\
             bolker bound = {}\n\
             bolker max |a'/a| = {} (angle index {})\n\
             bolker margin = {}\n\
             bolker holds = {}\n\
             deformed support min x2 = {}\n\
             visibility holds = {}\n",
            fmt_f(self.eps),
            fmt_f(b.bound),
            fmt_f(b.max_ratio),
            b.worst_angle_index,
            fmt_f(b.margin),
            b.holds,
            fmt_f(self.k_min_phi2),
            self.visible
        )
    }
}

/// Sufficient-condition checks for the configured motion. The support `K`
/// is the bounding box of the phantom shapes, stretched by every `a_i`.
pub fn theory_check(cfg: &ExperimentConfig) -> Result<CheckReport> {
    let scan = cfg.scan_geometry()?;
    let motion = cfg.motion.build(scan.angles())?;
    let (x2_lo, x2_hi) = cfg
        .phantom
        .x2_support()
        .ok_or_else(|| Error::Config("phantom has no shapes".into()))?;
    let x1_lo = cfg
        .phantom
        .shapes
        .iter()
        .map(|s| s.center[0] - s.semi_axes[0])
        .fold(f64::INFINITY, f64::min);
    let x1_hi = cfg
        .phantom
        .shapes
        .iter()
        .map(|s| s.center[0] + s.semi_axes[0])
        .fold(f64::NEG_INFINITY, f64::max);
    // ε does not depend on the profile; any valid placeholder works here.
    let probe = StretchProfile::from_motion(scan.angles(), &motion, 0.5)?;
    let deformed = probe.deformed_x2_range(x2_lo, x2_hi);
    let eps = eps_for_box((x1_lo, x1_hi), deformed)?;
    let profile = StretchProfile::from_motion(scan.angles(), &motion, eps)?;
    Ok(CheckReport {
        eps,
        bolker: bolker_bound_check(&profile)?,
        k_min_phi2: deformed.0,
        visible: visibility_check(scan.angles(), deformed.0)?,
    })
}

/// Writes `check.txt`.
pub fn cmd_check(cfg: &ExperimentConfig) -> Result<CheckReport> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let report = theory_check(cfg)?;
    std::fs::write(cfg.output_dir.join("check.txt"), report.render())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub assembly_secs: f64,
    pub assembly_secs_per_angle: f64,
    pub runs: usize,
    /// Mean time of one full forward application `A(γ) f`.
    pub matvec_secs: f64,
    pub matvec_secs_per_angle: f64,
    pub mean_sparsity: f64,
    pub total_nnz: usize,
}

impl BenchReport {
    pub fn amortization_ratio(&self) -> f64 {
        self.assembly_secs / self.matvec_secs
    }

    pub fn render(&self) -> String {
        format!(
            "assembly: {:.4} s ({:.4} s per angle)\n\
             forward mat-vec: {:.6} s averaged over {} runs ({:.6} s per angle)\n\
             assembly / mat-vec: {:.1}\n\
             mean sparsity: {:.4}% zeros, {} nonzeros\n",
            self.assembly_secs,
            self.assembly_secs_per_angle,
            self.matvec_secs,
            self.runs,
            self.matvec_secs_per_angle,
            self.amortization_ratio(),
            100.0 * self.mean_sparsity,
            self.total_nnz
        )
    }
}

/// Times assembly and the cached forward product (mean over `runs`). Writes
/// `bench.txt`.
pub fn cmd_bench(cfg: &ExperimentConfig, runs: usize) -> Result<BenchReport> {
    cfg.validate()?;
    if runs == 0 {
        return Err(Error::Config("bench needs at least one run".into()));
    }
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let grid = cfg.grid()?;
    let scan = cfg.scan_geometry()?;
    let t0 = Instant::now();
    let projections = Arc::new(assemble_all(&grid, &scan, cfg.oversampling)?);
    let assembly_secs = t0.elapsed().as_secs_f64();
    let motion = cfg.motion.build(scan.angles())?;
    let op = ForwardOperator::new(Arc::clone(&projections), motion)?;
    let f = make_phantom(&grid, &cfg.phantom)?;
    let t1 = Instant::now();
    for _ in 0..runs {
        std::hint::black_box(forward_apply(&op, &f)?);
    }
    let matvec_secs = t1.elapsed().as_secs_f64() / runs as f64;
    let n = scan.n_angles() as f64;
    let report = BenchReport {
        assembly_secs,
        assembly_secs_per_angle: assembly_secs / n,
        runs,
        matvec_secs,
        matvec_secs_per_angle: matvec_secs / n,
        mean_sparsity: projections.mean_sparsity(),
        total_nnz: projections.total_nnz(),
    };
    std::fs::write(cfg.output_dir.join("bench.txt"), report.render())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheInfo {
    pub path: PathBuf,
    pub n_side: usize,
    pub n_angles: usize,
    pub n_radii: usize,
    pub oversampling: usize,
    pub total_nnz: usize,
    pub mean_sparsity: f64,
    pub matches_config: bool,
}

fn cache_path(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.cache_path
        .as_deref()
        .ok_or_else(|| Error::Config("no cache path configured".into()))
}

/// Assembles the configured projections and writes them to the cache path,
/// replacing any existing file.
pub fn cmd_cache_build(cfg: &ExperimentConfig) -> Result<CacheInfo> {
    cfg.validate()?;
    let path = cache_path(cfg)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let set = assemble_all(&cfg.grid()?, &cfg.scan_geometry()?, cfg.oversampling)?;
    set.save(path)?;
    cmd_cache_inspect(cfg)
}

pub fn cmd_cache_inspect(cfg: &ExperimentConfig) -> Result<CacheInfo> {
    let path = cache_path(cfg)?;
    let set = ProjectionSet::load_unchecked(path)?;
    let matches_config = *set.grid() == cfg.grid()?
        && *set.scan() == cfg.scan_geometry()?
        && set.oversampling() == cfg.oversampling;
    Ok(CacheInfo {
        path: path.to_path_buf(),
        n_side: set.grid().n_side(),
        n_angles: set.scan().n_angles(),
        n_radii: set.scan().n_radii(),
        oversampling: set.oversampling(),
        total_nnz: set.total_nnz(),
        mean_sparsity: set.mean_sparsity(),
        matches_config,
    })
}

/// Removes the cache file; returns whether one existed.
pub fn cmd_cache_clear(cfg: &ExperimentConfig) -> Result<bool> {
    let path = cache_path(cfg)?;
    match std::fs::remove_file(path) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.grid.n_side = 32;
        cfg.scan.n_angles = 12;
        cfg.scan.step_deg = 30.0;
        cfg.scan.n_radii = 45;
        cfg.gn.max_gn_iters = 2;
        cfg.gn.inner_max_iter = 10;
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("patmo-exp-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn profiles() {
        let p = ExperimentConfig::default();
        assert_eq!(
            (p.grid.n_side, p.scan.n_angles, p.scan.n_radii),
            (256, 120, 363)
        );
        assert_eq!(p.scan.step_deg, 3.0);
        assert_eq!(p.noise.level, 0.03);
        assert_eq!(p.gn.max_gn_iters, 6);
        assert_eq!(p.gn.inner_max_iter, 100);
        assert_eq!(p.motion.baseline_c(), -0.5);
        let d = ExperimentConfig::profile(Profile::Desk);
        assert_eq!(
            (d.grid.n_side, d.scan.n_angles, d.scan.n_radii),
            (128, 60, 181)
        );
        assert_eq!(
            d.scan_geometry()
                .unwrap()
                .angles()
                .last()
                .unwrap()
                .to_degrees()
                .round(),
            354.0
        );
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.cache_path = Some(PathBuf::from("cache/desk.csr"));
        cfg.motion = MotionSpec::Explicit {
            gammas: (0..60).map(|i| 0.001 * i as f64 - 0.0123456789).collect(),
            baseline_c: -0.25,
        };
        cfg.gn.line_search.enabled = true;
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let text = ExperimentConfig::default().to_toml().unwrap();
        assert_eq!(
            ExperimentConfig::from_toml(&text).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn rejects_bad_config() {
        assert!(matches!(
            ExperimentConfig::from_toml("nonsense = ["),
            Err(Error::Config(_))
        ));
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.motion = MotionSpec::Explicit {
            gammas: vec![0.0; 3],
            baseline_c: 0.0,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.scan.r_max = 3.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = scratch("lock");
        let a = OutputLock::acquire(&dir).unwrap();
        assert!(OutputLock::acquire(&dir).is_err());
        drop(a);
        assert!(OutputLock::acquire(&dir).is_ok());
    }

    #[test]
    fn simulate_without_motion_or_noise_is_pure_projection() {
        let dir = scratch("sim");
        let mut cfg = tiny(&dir);
        cfg.motion = MotionSpec::Zero { baseline_c: -0.5 };
        cfg.noise.level = 0.0;
        let s = cmd_simulate(&cfg).unwrap();
        let setup = prepare(&cfg).unwrap();
        let direct: Vec<f64> = (0..12)
            .flat_map(|i| {
                setup
                    .projections
                    .matrix(i)
                    .apply(setup.truth_image.values())
                    .unwrap()
            })
            .collect();
        assert_eq!(s.noisy.values(), &direct[..]);
        assert_eq!(s.noise_ratio, 0.0);
        for f in &s.files {
            assert!(f.exists(), "{}", f.display());
        }
    }

    #[test]
    fn simulate_noise_level_and_reproducibility() {
        let dir = scratch("sim-noise");
        let cfg = tiny(&dir);
        let a = cmd_simulate(&cfg).unwrap();
        assert!((a.noise_ratio - 0.03).abs() < 1e-12);
        let bytes_a = std::fs::read(dir.join("sinogram.bin")).unwrap();
        cmd_simulate(&cfg).unwrap();
        assert_eq!(bytes_a, std::fs::read(dir.join("sinogram.bin")).unwrap());
    }

    #[test]
    fn gn_table_has_every_row() {
        let dir = scratch("gn");
        let cfg = tiny(&dir);
        let reports = cmd_gn(&cfg, None).unwrap();
        let csv = std::fs::read_to_string(dir.join("gn_table.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        let expected: usize = reports.iter().map(|r| r.iterations.len()).sum();
        assert_eq!(rows.len(), expected);
        assert!(rows
            .iter()
            .all(|r| r.split(',').count() == 5 && !r.contains("NaN")));
        assert!(rows[0].starts_with("GN-LSQR,0,1.000000000000e0,"));
    }

    #[test]
    fn reconstruct_reads_gamma_file() {
        let dir = scratch("recon");
        let cfg = tiny(&dir);
        cmd_simulate(&cfg).unwrap();
        let sino = dir.join("sinogram.bin");
        let truth =
            cmd_reconstruct(&cfg, Some(&sino), &GammaSource::Truth, InnerSolver::Wgcv).unwrap();
        let from_file = cmd_reconstruct(
            &cfg,
            Some(&sino),
            &GammaSource::File(dir.join("truth_gamma.csv")),
            InnerSolver::Wgcv,
        )
        .unwrap();
        assert!((truth.rel_error - from_file.rel_error).abs() < 1e-12);
        assert!(dir.join("solve_report.csv").exists());
    }

    #[test]
    fn mismatched_sinogram_is_rejected() {
        let dir = scratch("mismatch");
        let cfg = tiny(&dir);
        cmd_simulate(&cfg).unwrap();
        let mut other = cfg.clone();
        other.scan.n_radii = 40;
        let err = cmd_gn(&other, Some(&dir.join("sinogram.bin"))).unwrap_err();
        assert!(matches!(err, Error::GeometryMismatch(_)));
    }

    #[test]
    fn check_without_motion_has_full_margin() {
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.motion = MotionSpec::Zero { baseline_c: 0.0 };
        let r = theory_check(&cfg).unwrap();
        assert_eq!(r.bolker.margin, r.bolker.bound);
        assert!(r.bolker.holds);
    }

    #[test]
    fn desk_wgcv_lambda_settles() {
        let cfg = ExperimentConfig::profile(Profile::Desk);
        let setup = prepare(&cfg).unwrap();
        let (_, g) = simulate(&setup, &cfg).unwrap();
        let op = ForwardOperator::new(Arc::clone(&setup.projections), setup.truth_motion.clone())
            .unwrap();
        let rep = crate::krylov::hybrid_lsqr(
            &op,
            g.values(),
            &crate::krylov::HybridOptions::default(),
            crate::krylov::Regularization::Wgcv(crate::krylov::OmegaRule::Adaptive),
            None,
        )
        .unwrap();
        let tail: Vec<f64> = rep.history[rep.history.len() - 10..]
            .iter()
            .map(|h| h.lambda.unwrap())
            .collect();
        let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((hi - lo) / hi < 0.05, "λ range {lo:.4e}..{hi:.4e}");
    }

    #[test]
    fn cache_lifecycle() {
        let dir = scratch("cache");
        let mut cfg = tiny(&dir);
        cfg.cache_path = Some(dir.join("c.csr"));
        let info = cmd_cache_build(&cfg).unwrap();
        assert!(info.matches_config);
        assert_eq!((info.n_side, info.n_angles, info.n_radii), (32, 12, 45));
        let mut other = cfg.clone();
        other.grid.n_side = 24;
        assert!(!cmd_cache_inspect(&other).unwrap().matches_config);
        assert!(matches!(prepare(&other), Err(Error::GeometryMismatch(_))));
        assert!(cmd_cache_clear(&cfg).unwrap());
        assert!(!cmd_cache_clear(&cfg).unwrap());
    }
}
