use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use patmo::experiment::{
    cmd_bench, cmd_cache_build, cmd_cache_clear, cmd_cache_inspect, cmd_check, cmd_gn,
    cmd_reconstruct, cmd_simulate, CacheInfo, ExperimentConfig, GammaSource, Profile,
};
use patmo::varpro::InnerSolver;
use patmo::Error;

#[derive(Parser)]
#[command(
    name = "patmo",
    version,
    about = "Motion-compensated photoacoustic reconstruction experiments"
)]
struct Cli {
    /// TOML experiment configuration; defaults to the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Projection-matrix cache file (overrides the config).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Noise seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Built-in parameter set used when no config file is given.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Lsqr,
    Wgcv,
    Optimal,
}

impl From<SolverArg> for InnerSolver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Lsqr => InnerSolver::Lsqr,
            SolverArg::Wgcv => InnerSolver::Wgcv,
            SolverArg::Optimal => InnerSolver::Optimal,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy data for the configured phantom and motion.
    Simulate,
    /// Reconstruct at a fixed motion state.
    Reconstruct {
        /// Sinogram file; simulated in memory when omitted.
        #[arg(long)]
        sinogram: Option<PathBuf>,
        /// `zero`, `truth`, or a motion CSV file.
        #[arg(long, default_value = "truth")]
        gamma: String,
        #[arg(long, value_enum, default_value = "wgcv")]
        solver: SolverArg,
    },
    /// Joint motion estimation and reconstruction for each configured variant.
    Gn {
        #[arg(long)]
        sinogram: Option<PathBuf>,
    },
    /// Check the sufficient conditions for the configured motion.
    Check,
    /// Time assembly and the forward product.
    Bench {
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
    /// Manage the projection-matrix cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Subcommand)]
enum CacheAction {
    Build,
    Inspect,
    Clear,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::GeometryMismatch(_)
        | Error::DimensionMismatch { .. }
        | Error::Format(_)
        | Error::Io(_) => 2,
        Error::Solver(_) | Error::StalledStep => 3,
    }
}

fn resolve_config(cli: &Cli) -> patmo::Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.profile) {
        (Some(path), _) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
            other => other,
        })?,
        (None, Some(ProfileArg::Desk)) => ExperimentConfig::profile(Profile::Desk),
        (None, _) => ExperimentConfig::profile(Profile::Paper),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(cache) = &cli.cache {
        cfg.cache_path = Some(cache.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.noise.seed = seed;
    }
    Ok(cfg)
}

fn print_cache(info: &CacheInfo) {
    println!("cache: {}", info.path.display());
    println!(
        "grid: {0}x{0}, oversampling {1}",
        info.n_side, info.oversampling
    );
    println!("scan: {} angles x {} radii", info.n_angles, info.n_radii);
    println!(
        "nonzeros: {} (mean sparsity {:.4}%)",
        info.total_nnz,
        100.0 * info.mean_sparsity
    );
    println!("matches config: {}", info.matches_config);
}

fn run(cli: &Cli) -> patmo::Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Simulate => {
            let s = cmd_simulate(&cfg)?;
            println!("noise ratio ||e||/||g|| = {:.6}", s.noise_ratio);
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Reconstruct {
            sinogram,
            gamma,
            solver,
        } => {
            let source = match gamma.as_str() {
                "zero" => GammaSource::Zero,
                "truth" => GammaSource::Truth,
                path => GammaSource::File(PathBuf::from(path)),
            };
            let r = cmd_reconstruct(&cfg, sinogram.as_deref(), &source, (*solver).into())?;
            println!("iterations: {}", r.report.history.len());
            if let Some(l) = r.report.final_lambda() {
                println!("final lambda: {l:.6e}");
            }
            if let Some((k, e)) = r.report.min_error() {
                println!("minimum error {e:.6} at iteration {k}");
            }
            println!("relative error: {:.6}", r.rel_error);
        }
        Command::Gn { sinogram } => {
            let reports = cmd_gn(&cfg, sinogram.as_deref())?;
            println!(
                "{:<12} {:>4} {:>10} {:>10} {:>12}",
                "variant", "iter", "eps_gamma", "eps_f", "lambda"
            );
            for rep in &reports {
                for it in &rep.iterations {
                    println!(
                        "{:<12} {:>4} {:>10.4} {:>10.4} {:>12.4e}",
                        rep.variant.label(),
                        it.iter,
                        it.eps_gamma.unwrap_or(f64::NAN),
                        it.eps_f.unwrap_or(f64::NAN),
                        it.lambda
                    );
                }
            }
            println!("wrote {}", cfg.output_dir.join("gn_table.csv").display());
        }
        Command::Check => print!("{}", cmd_check(&cfg)?.render()),
        Command::Bench { runs } => print!("{}", cmd_bench(&cfg, *runs)?.render()),
        Command::Cache { action } => match action {
            CacheAction::Build => print_cache(&cmd_cache_build(&cfg)?),
            CacheAction::Inspect => print_cache(&cmd_cache_inspect(&cfg)?),
            CacheAction::Clear => {
                let removed = cmd_cache_clear(&cfg)?;
                println!(
                    "{}",
                    if removed {
                        "cache removed"
                    } else {
                        "no cache file"
                    }
                );
            }
        },
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
