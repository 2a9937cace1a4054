//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use patmo::experiment::{cmd_gn, prepare, simulate, ExperimentConfig, Profile, Setup};
use patmo::forward::{forward_apply, rel_error, ForwardOperator};
use patmo::geometry::{make_grid, make_scan, Image};
use patmo::krylov::{hybrid_lsqr, lsqr, HybridOptions, LinearOperator, OmegaRule, Regularization};
use patmo::motion::{stretch_matrix, DerivativeBackend, MotionParams};
use patmo::radon::assemble_all;
use patmo::theory::{bolker_bound_check, c_epsilon, continuous_forward_oracle, StretchProfile};
use patmo::varpro::{gn_step, jacobian_columns, GNReport, InnerSolver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn smooth_image(grid: patmo::geometry::ImageGrid) -> Image {
    Image::from_fn(grid, |x, y| {
        100.0 * (-((x - 0.05).powi(2) + (y - 0.1).powi(2)) / (2.0 * 0.08 * 0.08)).exp()
            + 60.0 * (-((x + 0.15).powi(2) + (y + 0.12).powi(2)) / (2.0 * 0.05 * 0.05)).exp()
    })
}

fn adjoint_identity(desk: &Setup) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = desk.projections.scan().n_angles();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let gammas: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let motion = MotionParams::new(gammas, -0.5).unwrap();
        let op = ForwardOperator::new(Arc::clone(&desk.projections), motion).unwrap();
        for _ in 0..20 {
            let f: Vec<f64> = (0..op.n_cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..op.n_rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let af = op.apply(&f).unwrap();
            let atg = op.apply_transpose(&g).unwrap();
            let defect = (dot(&af, &g) - dot(&f, &atg)).abs() / (norm(&af) * norm(&g));
            worst = worst.max(defect);
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max relative defect {worst:.2e} over 100 pairs (tol 1e-12)"),
    )
}

fn motion_identity(desk: &Setup) -> Outcome {
    let grid = desk.projections.grid();
    let k = stretch_matrix(grid, 0.0, -0.5).unwrap();
    let n = grid.len();
    let diagonal = (0..n).all(|i| k.get(i, i) == 1.0);
    let pass = k.nnz() == n && k.values().iter().all(|&v| v == 1.0) && diagonal;
    outcome(
        pass,
        format!(
            "nnz {} for N = {n}, all entries 1.0 on the diagonal: {}",
            k.nnz(),
            pass
        ),
    )
}

fn jacobian_check(desk: &Setup) -> Outcome {
    let proj = &desk.projections;
    let f = smooth_image(*proj.grid());
    let motion = desk.truth_motion.clone();
    let n = proj.scan().n_angles();
    let m = proj.scan().n_radii();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let angles: Vec<usize> = (0..10).map(|_| rng.gen_range(0..n)).collect();
    let h = 1e-5;
    let mut worst = [0.0f64; 2];
    let backends = [DerivativeBackend::default(), DerivativeBackend::Analytic];
    let cols: Vec<Vec<Vec<f64>>> = backends
        .iter()
        .map(|&b| jacobian_columns(proj, &motion, &f, b).unwrap())
        .collect();
    for &i in &angles {
        let perturbed = |delta: f64| {
            let mut gs = motion.gammas().to_vec();
            gs[i] += delta;
            let op =
                ForwardOperator::new(Arc::clone(proj), motion.with_gammas(gs).unwrap()).unwrap();
            forward_apply(&op, &f).unwrap().into_values()
        };
        let (plus, minus) = (perturbed(h), perturbed(-h));
        for (b, c) in cols.iter().enumerate() {
            let mut err = 0.0;
            for (k, (p, q)) in plus.iter().zip(&minus).enumerate() {
                let fd = (p - q) / (2.0 * h);
                let j = if k / m == i { c[i][k % m] } else { 0.0 };
                err += (fd - j) * (fd - j);
            }
            worst[b] = worst[b].max(err.sqrt() / norm(&c[i]));
        }
    }
    outcome(
        worst[0] <= 1e-3,
        format!(
            "max relative mismatch {:.2e} over 10 angles (tol 1e-3); analytic backend {:.2e}",
            worst[0], worst[1]
        ),
    )
}

fn gn_step_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.gen_range(3..20);
        let d: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let r: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let blocks: Vec<&[f64]> = r.iter().map(Vec::as_slice).collect();
        let s = gn_step(&blocks, &d, 1e-12).unwrap();
        let mut j = DMatrix::zeros(3 * m, 3);
        for (i, col) in d.iter().enumerate() {
            for (k, v) in col.iter().enumerate() {
                j[(i * m + k, i)] = *v;
            }
        }
        let rv = DVector::from_iterator(3 * m, r.iter().flatten().copied());
        let dense = (j.transpose() * &j)
            .lu()
            .solve(&(-(j.transpose() * rv)))
            .unwrap();
        let diff = (DVector::from_column_slice(&s.step) - &dense).norm() / dense.norm();
        worst = worst.max(diff);
    }
    outcome(
        worst <= 1e-12,
        format!("max relative difference {worst:.2e} over 100 trials (tol 1e-12)"),
    )
}

/// Length of the part of a circle inside the square `[-e, e]²`, by dense
/// sampling of the parameter.
fn sampled_arc_length(cos_t: &[f64], sin_t: &[f64], center: (f64, f64), r: f64, e: f64) -> f64 {
    let inside = cos_t
        .iter()
        .zip(sin_t)
        .filter(|(c, s)| {
            let x = center.0 + r * **c;
            let y = center.1 + r * **s;
            x.abs() <= e && y.abs() <= e
        })
        .count();
    2.0 * PI * r * inside as f64 / cos_t.len() as f64
}

fn quadrature_fidelity(desk: &Setup) -> Outcome {
    let proj = &desk.projections;
    let e = proj.grid().extent();
    let ones = vec![1.0; proj.grid().len()];
    let samples = 40_000;
    let (cos_t, sin_t): (Vec<f64>, Vec<f64>) = (0..samples)
        .map(|k| {
            let t = 2.0 * PI * (k as f64 + 0.5) / samples as f64;
            (t.cos(), t.sin())
        })
        .unzip();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for i in 0..proj.scan().n_angles() {
        let sums = proj.matrix(i).apply(&ones).unwrap();
        let z = proj.scan().transducer(i);
        for (j, &r) in proj.scan().radii().iter().enumerate() {
            let len = sampled_arc_length(&cos_t, &sin_t, z, r, e);
            if len > 0.1 {
                rows += 1;
                worst = worst.max((sums[j] - len).abs() / len);
            }
        }
    }
    outcome(
        worst <= 0.01,
        format!("max relative error {worst:.2e} over {rows} rows (tol 1e-2)"),
    )
}

fn continuous_oracle(paper: &Setup) -> Outcome {
    let proj = &paper.projections;
    let grid = *proj.grid();
    let (cx, cy, s) = (0.05, 0.08, 0.08);
    let f = move |x: f64, y: f64| {
        100.0 * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
    };
    let image = Image::from_fn(grid, f);
    let n = proj.scan().n_angles();
    let radii = proj.scan().radii();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let pairs: Vec<(usize, f64)> = (0..20)
        .map(|_| (rng.gen_range(0..n), rng.gen_range(-1.5..1.5)))
        .collect();
    let mut worst: f64 = 0.0;
    for a in [0.95, 1.0, 1.05] {
        let motion = MotionParams::new(vec![a - 1.0; n], -0.5).unwrap();
        let op = ForwardOperator::new(Arc::clone(proj), motion).unwrap();
        for &(i, offset) in &pairs {
            // Radius passing through the stretched bump, offset by up to 1.5σ.
            let (z1, z2) = proj.scan().transducer(i);
            let py = -0.5 + a * (cy + 0.5);
            let target = (z1 - cx).hypot(z2 - py) + offset * s;
            let j = radii.partition_point(|&r| r < target).min(radii.len() - 1);
            let discrete = op.apply_block(i, image.values()).unwrap()[j];
            let phi = proj.scan().angles()[i];
            let exact = continuous_forward_oracle(&f, phi, radii[j], a, -0.5)
                .unwrap()
                .value;
            worst = worst.max((discrete - exact).abs() / exact.abs());
        }
    }
    outcome(
        worst <= 0.02,
        format!("max relative error {worst:.2e} over 60 samples (tol 2e-2)"),
    )
}

struct LinearRuns {
    lsqr_errors: Vec<f64>,
    hybrid_errors: Vec<f64>,
    zero_motion_error: f64,
}

fn linear_runs(desk: &Setup, cfg: &ExperimentConfig) -> LinearRuns {
    let (_, g) = simulate(desk, cfg).unwrap();
    let truth = desk.truth_image.values();
    let op =
        ForwardOperator::new(Arc::clone(&desk.projections), desk.truth_motion.clone()).unwrap();
    let ls = lsqr(&op, g.values(), 100, Some(truth)).unwrap();
    let opts = HybridOptions::default();
    let strategy = Regularization::Wgcv(OmegaRule::Adaptive);
    let hy = hybrid_lsqr(&op, g.values(), &opts, strategy, Some(truth)).unwrap();
    let still = op
        .with_motion(MotionParams::zeros(desk.truth_motion.len(), -0.5))
        .unwrap();
    let hz = hybrid_lsqr(&still, g.values(), &opts, strategy, Some(truth)).unwrap();
    let errors =
        |r: &patmo::krylov::SolveReport| r.history.iter().map(|h| h.rel_error.unwrap()).collect();
    LinearRuns {
        lsqr_errors: errors(&ls),
        hybrid_errors: errors(&hy),
        zero_motion_error: rel_error(&hz.solution, truth).unwrap(),
    }
}

fn argmin(v: &[f64]) -> (usize, f64) {
    v.iter()
        .cloned()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

fn semiconvergence(runs: &LinearRuns) -> Outcome {
    let e = &runs.lsqr_errors;
    let (k, best) = argmin(e);
    let last = *e.last().unwrap();
    let pass = k > 0 && k + 1 < e.len() && last >= 1.05 * best;
    outcome(
        pass,
        format!(
            "LSQR error minimum {best:.4} at iteration {}, final {last:.4} (ratio {:.2}, need >= 1.05)",
            k + 1,
            last / best
        ),
    )
}

fn hybrid_stabilization(runs: &LinearRuns) -> Outcome {
    let e = &runs.hybrid_errors;
    let (_, best) = argmin(e);
    let last = *e.last().unwrap();
    let lsqr_last = *runs.lsqr_errors.last().unwrap();
    let pass = last <= 1.10 * best && last <= lsqr_last;
    outcome(
        pass,
        format!("hybrid final {last:.4}, running minimum {best:.4} (ratio {:.3}, need <= 1.10), LSQR final {lsqr_last:.4}", last / best),
    )
}

fn motion_artifacts(runs: &LinearRuns) -> Outcome {
    let at_truth = *runs.hybrid_errors.last().unwrap();
    let ratio = runs.zero_motion_error / at_truth;
    outcome(
        ratio >= 1.15,
        format!(
            "eps_f with zero motion {:.4}, with true motion {at_truth:.4} (ratio {ratio:.2}, need >= 1.15)",
            runs.zero_motion_error
        ),
    )
}

fn sparsity(paper: &Setup) -> Outcome {
    let worst = paper
        .projections
        .matrices()
        .iter()
        .map(|m| m.sparsity())
        .fold(f64::INFINITY, f64::min);
    let mean = paper.projections.mean_sparsity();
    outcome(
        worst >= 0.99,
        format!("minimum sparsity {worst:.5}, mean {mean:.5} at 256x256, 363 radii (need >= 0.99)"),
    )
}

fn report_for(reports: &[GNReport], v: InnerSolver) -> &GNReport {
    reports
        .iter()
        .find(|r| r.variant == v)
        .expect("variant was run")
}

fn gn_recovery(reports: &[GNReport]) -> Outcome {
    let eps: Vec<f64> = report_for(reports, InnerSolver::Wgcv)
        .iterations
        .iter()
        .map(|r| r.eps_gamma.unwrap())
        .collect();
    let monotone = eps.windows(2).all(|w| w[1] < w[0]);
    let last = *eps.last().unwrap();
    let listed: Vec<String> = eps.iter().map(|e| format!("{e:.4}")).collect();
    outcome(
        monotone && last <= 0.6 && eps.len() == 6,
        format!(
            "GN-HyBR eps_gamma {} (monotone: {monotone}, need final <= 0.6)",
            listed.join(" -> ")
        ),
    )
}

fn variant_ordering(reports: &[GNReport]) -> Outcome {
    let hybr = report_for(reports, InnerSolver::Wgcv);
    let opt = report_for(reports, InnerSolver::Optimal);
    let lsqr = report_for(reports, InnerSolver::Lsqr);
    let f_ok = opt
        .iterations
        .iter()
        .zip(&hybr.iterations)
        .all(|(o, h)| o.eps_f.unwrap() <= h.eps_f.unwrap());
    let g_h = hybr.iterations.last().unwrap().eps_gamma.unwrap();
    let g_l = lsqr.iterations.last().unwrap().eps_gamma.unwrap();
    let eps_f = |r: &GNReport| -> String {
        r.iterations
            .iter()
            .map(|i| format!("{:.4}", i.eps_f.unwrap()))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        f_ok && g_h <= g_l,
        format!(
            "eps_f opt [{}] vs HyBR [{}]; final eps_gamma HyBR {g_h:.4} vs LSQR {g_l:.4}",
            eps_f(opt),
            eps_f(hybr)
        ),
    )
}

fn bolker_constants() -> Outcome {
    let c = c_epsilon(0.5).unwrap();
    let angles: Vec<f64> = (0..10).map(|k| k as f64 * 0.1).collect();
    let profile = StretchProfile::new(angles, vec![1.0; 10], 0.0, 0.5).unwrap();
    let bound = bolker_bound_check(&profile).unwrap().bound;
    let want_c = 2.0 / 3f64.sqrt();
    let want_b = 1.0 / (2.0 * 3f64.sqrt());
    let pass = (c - want_c).abs() <= 1e-12 && (bound - want_b).abs() <= 1e-12;
    outcome(
        pass,
        format!("C_eps(1/2) = {c:.15}, bound(c = 0, eps = 1/2) = {bound:.15}"),
    )
}

fn determinism(first: &std::path::Path, second: &std::path::Path) -> Outcome {
    let mut identical = true;
    let mut compared = Vec::new();
    for name in [
        "gn_table.csv",
        "gamma_trajectory.csv",
        "gn_hybr_gamma.csv",
        "gn_lsqr_gamma.csv",
        "gn_hybr_opt_gamma.csv",
    ] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        identical &= a == b;
        compared.push(name);
    }
    outcome(
        identical,
        format!("compared {} CSV files byte for byte", compared.len()),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id: u32, name: &'static str, run: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = run();
        println!(
            "[{}] {id:>2} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        results.push((id, name, o));
    };

    let scratch = std::env::temp_dir().join(format!("patmo-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&scratch);
    let mut desk_cfg = ExperimentConfig::profile(Profile::Desk);
    desk_cfg.output_dir = scratch.join("gn-a");
    let desk = prepare(&desk_cfg).unwrap();
    let paper_grid = make_grid(256, 0.5).unwrap();
    let paper_scan = make_scan(120, 0.0, 3.0, 363, 2.0).unwrap();
    let paper = Setup {
        projections: Arc::new(assemble_all(&paper_grid, &paper_scan, 4).unwrap()),
        truth_image: Image::zeros(paper_grid),
        truth_motion: MotionParams::zeros(120, -0.5),
    };

    record(1, "adjoint identity", &mut || adjoint_identity(&desk));
    record(2, "motion identity", &mut || motion_identity(&desk));
    record(3, "Jacobian check", &mut || jacobian_check(&desk));
    record(4, "gn_step oracle", &mut || gn_step_oracle());
    record(5, "quadrature fidelity", &mut || quadrature_fidelity(&desk));
    record(6, "continuous-model oracle", &mut || {
        continuous_oracle(&paper)
    });

    let runs = linear_runs(&desk, &desk_cfg);
    record(7, "semiconvergence", &mut || semiconvergence(&runs));
    record(8, "hybrid stabilization", &mut || {
        hybrid_stabilization(&runs)
    });
    record(9, "sparsity", &mut || sparsity(&paper));
    record(10, "motion artifacts", &mut || motion_artifacts(&runs));

    let reports = cmd_gn(&desk_cfg, None).unwrap();
    record(11, "Gauss-Newton recovery", &mut || gn_recovery(&reports));
    record(12, "variant ordering", &mut || variant_ordering(&reports));
    record(13, "Bolker bound constants", &mut || bolker_constants());

    let mut again = desk_cfg.clone();
    again.output_dir = scratch.join("gn-b");
    cmd_gn(&again, None).unwrap();
    record(14, "determinism", &mut || {
        determinism(&desk_cfg.output_dir, &again.output_dir)
    });

    let _ = std::fs::remove_dir_all(&scratch);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "{} of {} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
