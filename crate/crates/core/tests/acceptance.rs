//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use r2n::experiment::{emit_table, emit_trace, parse_config, run_experiment, solver_defaults, SolverSpec, TableFormat};
use r2n::linops::IdentityOperator;
use r2n::objectives::{gradient_check, LeastSquares, SmoothObjective};
use r2n::problems::{
    bpdn_generate, denoise_generate, mc_generate, svm_generate, BpdnParams, DenoiseParams, McParams, ProblemInstance,
    SvmParams,
};
use r2n::quasinewton::{DiagonalUpdate, HessianModel, Lbfgs};
use r2n::regularizers::{matrix_rank, NonsmoothTerm, Regularizer, RegularizerKind, Shape};
use r2n::rng;
use r2n::solvers::{solve, Method, RunRecord, SolverOptions, Status};
use r2n::{Error, Result};

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn run_named(name: &str, inst: &ProblemInstance) -> Result<RunRecord> {
    let spec = SolverSpec { name: name.into(), options: solver_defaults(name) };
    let mut rec = solve(
        &spec.method(inst.x0.len()),
        inst.objective.as_ref(),
        &inst.regularizer,
        &inst.x0,
        &spec.options,
        None,
    )?;
    rec.solver = spec.display_name().to_string();
    Ok(rec)
}

fn run_ok(name: &str, inst: &ProblemInstance) -> std::result::Result<RunRecord, String> {
    run_named(name, inst).map_err(|e| format!("{name}: {e}"))
}

// Grid of 1e-4 spacing on [-10, 10]; index CENTER is 0.
const GRID: usize = 200_001;
const CENTER: usize = 100_000;

fn grid() -> Vec<f64> {
    (0..GRID).map(|i| (i as f64 - CENTER as f64) * 1e-4).collect()
}

/// Minimum of `phi` over `points`.
fn grid_min(points: &[f64], phi: impl Fn(f64) -> f64) -> f64 {
    // eight independent lanes so the scan vectorizes
    let mut best = [f64::INFINITY; 8];
    let chunks = points.chunks_exact(8);
    let rest = chunks.remainder();
    for chunk in chunks {
        for (b, &t) in best.iter_mut().zip(chunk) {
            let v = phi(t);
            *b = if v < *b { v } else { *b };
        }
    }
    rest.iter().map(|&t| phi(t)).chain(best).fold(f64::INFINITY, f64::min)
}

fn c1_prox_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::seeded(2024);
    let points = grid();
    let mut worst = f64::NEG_INFINITY;
    for kind in [RegularizerKind::L0, RegularizerKind::L1] {
        for _ in 0..10_000 {
            let lambda = rng.random_range(0.01..5.0);
            let nu = rng.random_range(0.01..5.0);
            let q = rng.random_range(-10.0..10.0);
            let h = Regularizer::new(kind, lambda, Shape::Vector(1)).map_err(|e| e.to_string())?;
            let y = h.prox(nu, &DVector::from_element(1, q)).map_err(|e| e.to_string())?[0];
            let w = 0.5 / nu;
            let quad = |t: f64| (t - q) * (t - q) * w;
            let (value, grid) = match kind {
                RegularizerKind::L0 => {
                    let off = |t: f64| lambda + quad(t);
                    let value = if y != 0.0 { off(y) } else { quad(0.0) };
                    let grid = quad(0.0).min(grid_min(&points[..CENTER], off)).min(grid_min(&points[CENTER + 1..], off));
                    (value, grid)
                }
                _ => {
                    let phi = |t: f64| lambda * t.abs() + quad(t);
                    (phi(y), grid_min(&points, phi))
                }
            };
            let gap = value - grid;
            worst = worst.max(gap);
            ensure!(gap <= 1e-8, "{kind:?}: lambda={lambda} nu={nu} q={q}: prox value exceeds grid min by {gap:e}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("20000 instances, worst excess {worst:.2e}, {secs:.2} s"))
}

fn c2_weak_secant() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::seeded(7);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=50);
        let (s, y) = loop {
            let s = rng::gaussian_vector(&mut rng, n);
            let y = rng::gaussian_vector(&mut rng, n);
            if s.dot(&y) > 0.0 {
                break (s, y);
            }
        };
        let sy = s.dot(&y);
        for kind in [DiagonalUpdate::Spectral, DiagonalUpdate::Psb, DiagonalUpdate::Andrei] {
            let mut b = HessianModel::diagonal(kind, n);
            b.update(&s, &y).map_err(|e| e.to_string())?;
            let sbs = s.dot(&b.apply(&s).map_err(|e| e.to_string())?);
            let rel = (sbs - sy).abs() / sy.abs();
            worst = worst.max(rel);
            ensure!(rel <= 1e-9, "trial {trial}, {kind:?}, n={n}: relative secant error {rel:e}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2} s");
    Ok(format!("1000 pairs x 3 updates, worst {worst:.2e}, {secs:.2} s"))
}

fn dense_bfgs(l: &Lbfgs, n: usize) -> DMatrix<f64> {
    let mut b = DMatrix::<f64>::identity(n, n) * l.delta();
    for (s, y) in l.pairs() {
        let bs = &b * s;
        b = &b - &bs * bs.transpose() / s.dot(&bs) + y * y.transpose() / y.dot(s);
    }
    b
}

fn c3_lbfgs() -> Outcome {
    let mut rng = rng::seeded(31);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=20 {
        for pairs in 1..=10 {
            let mut l = Lbfgs::new(n, 10);
            for _ in 0..pairs {
                let s = rng::gaussian_vector(&mut rng, n);
                let g = rng::gaussian_matrix(&mut rng, n, n);
                let y = (&g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1) * &s;
                ensure!(l.push(&s, &y), "pair with positive curvature rejected");
            }
            let b = dense_bfgs(&l, n);
            let h = b.clone().try_inverse().ok_or("dense BFGS matrix singular")?;
            for _ in 0..100 {
                let v = rng::gaussian_vector(&mut rng, n);
                let want = &b * &v;
                let want_inv = &h * &v;
                let e1 = (l.apply(&v) - &want).norm() / want.norm();
                let e2 = (l.apply_inverse(&v) - &want_inv).norm() / want_inv.norm();
                worst = worst.max(e1).max(e2);
                ensure!(e1 <= 1e-8 && e2 <= 1e-8, "n={n} pairs={pairs}: errors {e1:e}, {e2:e}");
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} configurations x 100 vectors, worst relative error {worst:.2e}"))
}

fn desk_problems() -> Result<Vec<(&'static str, ProblemInstance)>> {
    let rank = McParams { kind: RegularizerKind::Rank, ..McParams::default() };
    Ok(vec![
        ("bpdn", bpdn_generate(&BpdnParams::default())?),
        ("mc-nuclear", mc_generate(&McParams::default())?),
        ("mc-rank", mc_generate(&rank)?),
        ("svm", svm_generate(&SvmParams::default())?),
        ("denoise", denoise_generate(&DenoiseParams::default())?),
    ])
}

fn applicable(name: &str, inst: &ProblemInstance) -> bool {
    if name.starts_with("lm-") {
        return inst.objective.as_residual().is_some();
    }
    match name {
        "r2dh-psb" | "r2dh-andrei" | "r2dh-dbfgs" => inst.regularizer.is_separable(),
        _ => true,
    }
}

fn c4_monitors() -> Outcome {
    let problems = desk_problems().map_err(|e| e.to_string())?;
    let mut runs = 0;
    let mut checks = 0;
    for (label, inst) in &problems {
        for name in r2n::experiment::SOLVER_NAMES {
            if !applicable(name, inst) {
                continue;
            }
            let rec = run_ok(name, inst)?;
            ensure!(
                rec.monitor.is_clean(),
                "{label}/{name}: {} violations, first: {}",
                rec.monitor.violations.len(),
                rec.monitor.violations[0]
            );
            ensure!(rec.monitor.checks > 0, "{label}/{name}: no monitor checks ran");
            runs += 1;
            checks += rec.monitor.checks;
        }
    }
    Ok(format!("{runs} runs, {checks} checks, 0 violations"))
}

fn c5_gradients() -> Outcome {
    let svm = svm_generate(&SvmParams::default()).map_err(|e| e.to_string())?;
    let denoise = denoise_generate(&DenoiseParams::default()).map_err(|e| e.to_string())?;
    let mut rng = rng::seeded(5);
    let mut worst: f64 = 0.0;
    for (label, inst) in [("svm", &svm), ("denoise", &denoise)] {
        let n = inst.objective.dim();
        for _ in 0..5 {
            let x = rng::gaussian_vector(&mut rng, n) * 0.5;
            let err = gradient_check(inst.objective.as_ref(), &x);
            worst = worst.max(err);
            ensure!(err < 1e-5, "{label}: relative error {err:e}");
        }
    }
    Ok(format!("10 points, worst relative error {worst:.2e}"))
}

fn support(x: &DVector<f64>) -> Vec<usize> {
    x.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
}

fn c6_bpdn() -> Outcome {
    let start = Instant::now();
    let params = BpdnParams::default();
    ensure!(
        (params.m, params.n, params.k_sparse, params.noise_std) == (200, 512, 10, 0.1),
        "desk BPDN defaults changed"
    );
    let inst = bpdn_generate(&params).map_err(|e| e.to_string())?;
    let planted = support(inst.ground_truth.as_ref().unwrap());
    let r2 = run_ok("r2", &inst)?;
    let mut notes = Vec::new();
    for name in ["r2dh-spec", "r2dh-spec-nm"] {
        let rec = run_ok(name, &inst)?;
        ensure!(rec.status == Status::FirstOrder, "{name}: status {}", rec.status.as_str());
        ensure!(rec.iterations <= 1000, "{name}: {} iterations", rec.iterations);
        let nnz = support(&rec.x);
        ensure!((rec.h_over_lambda() - 10.0).abs() <= 1e-9, "{name}: h/lambda = {}", rec.h_over_lambda());
        ensure!(nnz == planted, "{name}: support {nnz:?} differs from planted {planted:?}");
        if name == "r2dh-spec-nm" {
            ensure!(rec.counts.f <= r2.counts.f, "R2DH-Spec-NM #f {} > R2 #f {}", rec.counts.f, r2.counts.f);
        }
        notes.push(format!("{name}: {} its, #f {}", rec.iterations, rec.counts.f));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.2} s");
    Ok(format!("{}; R2 #f {}; support recovered; {secs:.2} s", notes.join("; "), r2.counts.f))
}

fn c7_mc() -> Outcome {
    let start = Instant::now();
    let params = McParams::default();
    ensure!((params.n, params.rank) == (24, 4), "desk MC defaults changed");
    let nuclear = mc_generate(&params).map_err(|e| e.to_string())?;
    let names = ["r2", "r2dh-spec", "lm-r2", "lm-r2dh"];
    let mut values = Vec::new();
    for name in names {
        let rec = run_ok(name, &nuclear)?;
        ensure!(rec.status == Status::FirstOrder, "{name} (nuclear): status {}", rec.status.as_str());
        values.push(rec.f_plus_h());
    }
    let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
    for (name, v) in names.iter().zip(&values) {
        ensure!((v - best).abs() <= 0.05 * best.abs(), "{name}: f+h {v} not within 5% of best {best}");
    }

    let rank_inst = mc_generate(&McParams { kind: RegularizerKind::Rank, ..params.clone() }).map_err(|e| e.to_string())?;
    let n = params.n;
    let mut ranks = Vec::new();
    for name in names {
        let rec = run_ok(name, &rank_inst)?;
        ranks.push((name, matrix_rank(&DMatrix::from_column_slice(n, n, rec.x.as_slice()))));
    }
    let r2dh = ranks[1].1;
    for (name, r) in &ranks {
        ensure!(r2dh <= *r, "R2DH rank {r2dh} > {name} rank {r}");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.2} s");
    let spread = values.iter().map(|v| (v - best) / best.abs()).fold(0.0, f64::max);
    Ok(format!("nuclear f+h spread {:.2e}; ranks {ranks:?}; {secs:.2} s", spread))
}

fn c8_r2n_gradients() -> Outcome {
    let start = Instant::now();
    let svm_params = SvmParams::default();
    ensure!(
        matches!(svm_params.source, r2n::problems::SvmSource::Synthetic { m: 200, n: 50, .. }),
        "desk SVM defaults changed"
    );
    let denoise_params = DenoiseParams::default();
    ensure!(
        matches!(denoise_params.source, r2n::problems::DenoiseSource::Synthetic { side: 16, .. }),
        "desk denoise defaults changed"
    );
    let problems = [
        ("svm", svm_generate(&svm_params).map_err(|e| e.to_string())?),
        ("denoise", denoise_generate(&denoise_params).map_err(|e| e.to_string())?),
    ];
    let mut notes = Vec::new();
    for (label, inst) in &problems {
        let r2 = run_ok("r2", inst)?.counts.grad;
        for name in ["r2n-r2", "r2n-r2dh"] {
            let g = run_ok(name, inst)?.counts.grad;
            ensure!(g < r2, "{label}: {name} #grad {g} not below R2 #grad {r2}");
            notes.push(format!("{label} {name} {g} < {r2}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.2} s");
    Ok(format!("{}; {secs:.2} s", notes.join(", ")))
}

/// `-kappa |x|^2` on `{x_0 <= 1}`, `+inf` elsewhere. Its prox is unbounded
/// below once `nu >= 1 / (2 kappa)`.
struct ConcaveHalfSpace {
    kappa: f64,
}

impl NonsmoothTerm for ConcaveHalfSpace {
    fn name(&self) -> String {
        "concave-half-space".into()
    }

    fn weight(&self) -> f64 {
        1.0
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(if x[0] > 1.0 { f64::INFINITY } else { -self.kappa * x.norm_squared() })
    }

    fn prox(&self, nu: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
        let c = 1.0 - 2.0 * self.kappa * nu;
        if c <= 0.0 {
            return Err(Error::ProxUnbounded { name: self.name(), nu });
        }
        let mut y = q / c;
        y[0] = y[0].min(1.0);
        Ok(y)
    }
}

fn c9_extended_arithmetic() -> Outcome {
    let h = ConcaveHalfSpace { kappa: 1.0 };
    ensure!(h.value(&DVector::from_vec(vec![1.5, 0.0])).unwrap() == f64::INFINITY, "h finite off the half-space");
    // f = 2 |x - a|^2; f + h is minimized at x = 2a with x_0 capped at 1
    let a = DVector::from_vec(vec![0.8, -0.3, 0.5]);
    let f = LeastSquares::new(Arc::new(IdentityOperator::new(3)), a.clone());
    let f = Scaled { inner: f, factor: 4.0 };
    let x0 = DVector::zeros(3);
    let rec = solve(&Method::R2, &f, &h, &x0, &SolverOptions::default(), None).map_err(|e| e.to_string())?;
    let t = &rec.trace;
    ensure!(t.len() >= 2, "only {} iterations", t.len());
    ensure!(t[0].rho == 0.0, "rho_0 = {}", t[0].rho);
    ensure!(t[0].status.as_str() == "unsuccessful", "iteration 0 was {}", t[0].status.as_str());
    ensure!(
        (t[1].sigma - 3.0 * t[0].sigma).abs() <= 1e-12 * t[1].sigma,
        "sigma went {} -> {}",
        t[0].sigma,
        t[1].sigma
    );
    let first_success = t.iter().position(|r| r.status.accepted()).ok_or("no successful iteration")?;
    ensure!(rec.status == Status::FirstOrder, "status {}", rec.status.as_str());
    let want = DVector::from_vec(vec![1.0, -0.6, 1.0]);
    let err = (&rec.x - &want).norm();
    ensure!(err < 1e-4, "x = {:?}, expected {:?}", rec.x.as_slice(), want.as_slice());
    ensure!(rec.monitor.is_clean(), "monitor violations: {:?}", rec.monitor.violations);
    Ok(format!(
        "rho_0 = 0, sigma {:.3e} -> {:.3e}, first success at k={first_success}, converged in {} its",
        t[0].sigma, t[1].sigma, rec.iterations
    ))
}

/// `factor * inner`.
struct Scaled<F> {
    inner: F,
    factor: f64,
}

impl<F: SmoothObjective> SmoothObjective for Scaled<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.factor * self.inner.value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.gradient(x) * self.factor
    }
}

fn strip_time(table: &str) -> String {
    table.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

fn c10_determinism() -> Outcome {
    let configs = [
        "problem = bpdn\nseed = 3\ntrace = true\nsolvers = r2, r2dh-spec, r2dh-spec-nm, r2dh-dbfgs, r2n-r2dh, lm-r2\n",
        "problem = mc\nseed = 2\ntrace = true\nsolvers = r2, r2dh-spec, lm-r2dh\n",
        "problem = svm\ntrace = true\nsolvers = r2, r2n-r2\n",
        "problem = denoise\ntrace = true\nsolvers = r2dh-psb, r2n-r2dh\n",
    ];
    let mut files = 0;
    for text in configs {
        let cfg = parse_config(text).map_err(|e| e.to_string())?;
        let emit = || -> std::result::Result<Vec<String>, String> {
            let records: Vec<RunRecord> = run_experiment(&cfg, None)
                .into_iter()
                .map(|r| r.result.map_err(|e| format!("{}: {e}", r.solver)))
                .collect::<std::result::Result<_, _>>()?;
            let mut out = vec![strip_time(&emit_table(&records, TableFormat::Csv).map_err(|e| e.to_string())?)];
            for r in &records {
                out.push(emit_trace(r).map_err(|e| e.to_string())?);
            }
            Ok(out)
        };
        let first = emit()?;
        let second = emit()?;
        ensure!(first == second, "outputs differ for config {text:?}");
        files += first.len();
    }
    Ok(format!("{files} tables and traces byte-identical across two runs"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("prox oracle suite", c1_prox_oracle),
        ("weak secant", c2_weak_secant),
        ("L-BFGS equivalence", c3_lbfgs),
        ("algorithm-law monitors", c4_monitors),
        ("gradient checks", c5_gradients),
        ("desk BPDN", c6_bpdn),
        ("desk matrix completion", c7_mc),
        ("R2N gradient counts", c8_r2n_gradients),
        ("extended-arithmetic path", c9_extended_arithmetic),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (title, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} ({title}): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {:>2} ({title}): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
