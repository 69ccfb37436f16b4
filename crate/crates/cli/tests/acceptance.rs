//! Acceptance criteria 1 to 11, one PASS/FAIL line each.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use spn_bloch::assembly::transcribed_a;
use spn_bloch::c64;
use spn_bloch::density::{
    check_jellium, check_wiener_grid, lattice_points, sup_norm, wiener_terms, IonDensity,
};
use spn_bloch::dynamics::{
    band_localized_field, decay_curve, evolve_many, horizon, BlochField, Gauge, InitialData, WeightedNormSpec,
    C_HORIZON,
};
use spn_bloch::fiber::FiberProblem;
use spn_bloch::grid::ThetaGrid;
use spn_bloch::linalg::{hermiticity_defect, max_abs, max_abs_diff, norm_sqr};
use spn_bloch::rank_one::ProjectorSum;
use spn_bloch::resolvent::{lap_scan, ResolventProbe};
use spn_bloch::spectral::{build_k, growth_fit, similarity_distance, sqrt_b, TOL_PSD};
use spn_bloch::sweep::{detect_flat_bands, sweep_bands, FlatBandReport, LazySpectra, SpectraSource};
use spn_bloch_cli::commands::random_field;
use spn_bloch_cli::{run, Command, RunConfig};

type Verdict = Result<(bool, String), String>;

/// Budgets are stated for eight cores; fewer cores stretch them.
fn budget(seconds: f64) -> Duration {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()) as f64;
    Duration::from_secs_f64(seconds * (8.0 / cores).max(1.0))
}

fn example(cutoff: usize) -> FiberProblem {
    FiberProblem::new(IonDensity::example(), cutoff).unwrap()
}

fn jellium() -> Verdict {
    let t0 = Instant::now();
    let ex = check_jellium(&IonDensity::example(), 5, 1e-12).map_err(|e| e.to_string())?;
    let gauss = IonDensity::gaussian(1.0, 1.0, 1.0, 1.0).map_err(|e| e.to_string())?;
    let g = check_jellium(&gauss, 5, 1e-12).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let ok = ex.passed && !g.passed && sup_norm(g.worst_m) == 1 && elapsed < budget(1.0);
    Ok((
        ok,
        format!(
            "example worst {:.2e}; gaussian offender m = {:?} value {:.2e}; {:.3}s",
            ex.worst_value,
            g.worst_m,
            g.worst_value,
            elapsed.as_secs_f64()
        ),
    ))
}

fn wiener() -> Verdict {
    let d = IonDensity::example();
    let grid = ThetaGrid::new(8).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let report = check_wiener_grid(&d, &grid, 8, 0.0, 1e-6).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let last_shell = grid
        .points()
        .par_iter()
        .map(|&th| wiener_terms(&d, th, 8, 1e-6).map(|s| s.last_shell))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| e.to_string())?
        .into_iter()
        .fold(0.0, f64::max);
    let (_, min) = report.worst().ok_or("empty grid")?;
    let ok = report.passed && min > 0.0 && last_shell < 1e-10 && elapsed < budget(5.0);
    Ok((
        ok,
        format!(
            "min lambda_min(Sigma) = {min:.4e}, last shell {last_shell:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn structure() -> Verdict {
    let p = example(2);
    let op = p.operators([PI; 3]).map_err(|e| e.to_string())?;
    let herm = hermiticity_defect(&op.bmat);
    let jd = op.j.to_dense();
    let jj = &jd * &jd;
    let b = op.layout.b;
    let j_exact = (0..op.dim()).all(|r| {
        (0..op.dim()).all(|c| {
            let want = if r != c {
                0.0
            } else if r < 2 * b {
                -0.25
            } else {
                -1.0
            };
            jj[(r, c)] == want
        })
    });
    let a_diff = max_abs_diff(&op.amat(), &transcribed_a(&op));
    let s = sqrt_b(&op.bmat, TOL_PSD).map_err(|e| e.to_string())?;
    let sq_rel = max_abs_diff(&(&s.lambda * &s.lambda), &op.bmat) / max_abs(&op.bmat);
    let k = build_k(&s.lambda, &op.j);
    let k_rel = hermiticity_defect(&k) / max_abs(&k);
    let ok = herm < 1e-13 && j_exact && a_diff < 1e-13 && sq_rel < 1e-9 && k_rel < 1e-12;
    Ok((
        ok,
        format!(
            "|B-B^H| {herm:.1e}, J^2 exact {j_exact}, |JB-A| {a_diff:.1e}, Lambda^2 {sq_rel:.1e}, K {k_rel:.1e}"
        ),
    ))
}

fn positivity() -> Verdict {
    let t0 = Instant::now();
    let src = LazySpectra::new(example(2), ThetaGrid::new(8).map_err(|e| e.to_string())?);
    let surface = sweep_bands(&src);
    let elapsed = t0.elapsed();
    let lmin = surface.lambda_min_b.iter().copied().fold(f64::INFINITY, f64::min);
    let kmin = surface.kappa.iter().copied().fold(f64::INFINITY, f64::min);
    let ok = surface.failures.is_empty() && lmin > 0.0 && kmin > 0.0 && elapsed < budget(600.0);
    Ok((
        ok,
        format!(
            "{} failures, min lambda_min(B) = {lmin:.4e}, min kappa = {kmin:.4e}, {:.1}s",
            surface.failures.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn similarity() -> Verdict {
    let p = example(2);
    let grid = ThetaGrid::new(8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let theta = grid.point(rng.random_range(0..grid.len()));
        let op = p.operators(theta).map_err(|e| e.to_string())?;
        let fiber = p.solve(theta).map_err(|e| e.to_string())?;
        let d = similarity_distance(&op.amat(), fiber.omegas()).map_err(|e| e.to_string())?;
        worst = worst.max(d / fiber.spectral.max_abs_omega());
    }
    Ok((worst < 1e-7, format!("worst Hausdorff distance / max|omega| = {worst:.2e}")))
}

/// `T1(theta) = sum_m |sigma_hat(2 pi m - theta)|^2 xi xi^T / |xi|^2`.
fn t1_eigenvalues(d: &IonDensity, theta: [f64; 3], radius: usize) -> Vec<f64> {
    let mut t = ProjectorSum::new();
    for m in lattice_points(radius) {
        let xi = [0, 1, 2].map(|a| 2.0 * PI * m[a] as f64 - theta[a]);
        t.push(d.sigma_hat(xi).norm_sqr(), xi);
    }
    t.eigen().values.to_vec()
}

fn phonons() -> Verdict {
    let mut p = example(2);
    p.density = p.density.with_coupling_disabled();
    let grid = ThetaGrid::new(4).map_err(|e| e.to_string())?;
    let m_ion = p.density.m_ion();
    let radius = p.assembly.radius;
    let per_point = grid
        .points()
        .par_iter()
        .map(|&theta| {
            let fiber = p.solve(theta).map_err(|e| e.to_string())?;
            let targets: Vec<f64> = t1_eigenvalues(&p.density, theta, radius)
                .into_iter()
                .flat_map(|t| {
                    let w = (t / m_ion).sqrt();
                    [w, -w]
                })
                .collect();
            let l = fiber.layout;
            let v = &fiber.spectral.vectors;
            let mut count = 0;
            let mut worst: f64 = 0.0;
            for (k, &w) in fiber.omegas().iter().enumerate() {
                let weight: f64 = l.q().chain(l.p()).map(|r| v[(r, k)].norm_sqr()).sum();
                if weight > 0.5 {
                    count += 1;
                    let d = targets.iter().map(|t| (t - w).abs()).fold(f64::INFINITY, f64::min);
                    worst = worst.max(d);
                }
            }
            // each target is hit
            for t in &targets {
                let d = fiber.omegas().iter().map(|w| (t - w).abs()).fold(f64::INFINITY, f64::min);
                worst = worst.max(d);
            }
            Ok::<_, String>((count, worst))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sectors_ok = per_point.iter().all(|(c, _)| *c == 6);
    let worst = per_point.iter().map(|x| x.1).fold(0.0, f64::max);
    Ok((
        sectors_ok && worst < 1e-8,
        format!("six qp bands at every point: {sectors_ok}, worst deviation {worst:.2e}"),
    ))
}

fn growth() -> Verdict {
    let theta = [1.0, 2.0, 3.0];
    let fiber = example(3).solve(theta).map_err(|e| e.to_string())?;
    let fit = growth_fit(fiber.omegas(), 20, 150).map_err(|e| e.to_string())?;
    let ok = (0.55..=0.80).contains(&fit.slope) && fit.epsilon_q > 0.0;
    Ok((ok, format!("slope {:.4}, min |omega_k|/k^(2/3) = {:.4e}", fit.slope, fit.epsilon_q)))
}

fn conservation() -> Verdict {
    let times = [0.0, 1.0, 10.0, 100.0];
    let src = LazySpectra::new(example(2), ThetaGrid::new(8).map_err(|e| e.to_string())?);
    let field = random_field(src.grid(), src.dim(), 8, 1.0);
    let norms: Vec<f64> = evolve_many(&field, &src, &times, Gauge::Z)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|f| f.grid_norm())
        .collect();
    let energies = field
        .values
        .par_iter()
        .enumerate()
        .map(|(p, y)| {
            let fiber = src.fiber(p)?;
            Ok(times.map(|t| fiber.energy(&fiber.propagate_y(y, t))))
        })
        .collect::<Result<Vec<[f64; 4]>, spn_bloch::Error>>()
        .map_err(|e| e.to_string())?;
    let energy: Vec<f64> = (0..times.len()).map(|i| energies.iter().map(|e| e[i]).sum()).collect();
    let drift = |v: &[f64]| v.iter().map(|x| (x - v[0]).abs()).fold(0.0, f64::max) / v[0];
    let (dn, de) = (drift(&norms), drift(&energy));
    Ok((dn < 1e-9 && de < 1e-9, format!("Z-gauge norm drift {dn:.2e}, Y-gauge energy drift {de:.2e}")))
}

/// The `L = 16`, `N = 2` grid shared by the decay and resolvent criteria.
struct Large {
    source: LazySpectra,
    flat: FlatBandReport,
    initial: BlochField,
    t_max: f64,
    setup: Duration,
}

fn large() -> Result<Large, String> {
    let t0 = Instant::now();
    let source = LazySpectra::new(example(2), ThetaGrid::new(16).map_err(|e| e.to_string())?);
    let surface = sweep_bands(&source);
    let flat = detect_flat_bands(&surface, 1e-6).map_err(|e| e.to_string())?;
    let spec = InitialData::default();
    let column: Vec<f64> = (0..surface.grid.len())
        .map(|p| surface.sorted[p * surface.dim + spec.band])
        .collect();
    let t_max = horizon(&surface.grid, &column, C_HORIZON);
    let initial = band_localized_field(&source, &spec).map_err(|e| e.to_string())?;
    Ok(Large {
        source,
        flat,
        initial,
        t_max,
        setup: t0.elapsed(),
    })
}

fn decay(g: &Large) -> Verdict {
    let t0 = Instant::now();
    let times: Vec<f64> = (0..=4).map(|i| g.t_max * i as f64 / 4.0).chain([2.0 * g.t_max]).collect();
    let spec = WeightedNormSpec::new(-2.0).map_err(|e| e.to_string())?;
    let table = decay_curve(&g.initial, &g.source, &g.flat, &times, &spec, 4, g.t_max).map_err(|e| e.to_string())?;
    let first = &table.rows[0];
    let last = table.last_trusted().ok_or("no trusted time")?;
    let ratio = last.continuous_weighted_norm / first.continuous_weighted_norm;
    let x0 = table
        .rows
        .iter()
        .map(|r| (r.continuous_x0_norm - first.continuous_x0_norm).abs())
        .fold(0.0, f64::max)
        / first.continuous_x0_norm;
    let elapsed = g.setup + t0.elapsed();
    let ok = ratio < 0.5 && x0 < 1e-9 && elapsed < budget(1800.0);
    Ok((
        ok,
        format!(
            "t_max {:.4}, weighted-norm ratio {ratio:.4}, X0 drift {x0:.2e}, {} flat bands, {:.0}s",
            g.t_max,
            g.flat.bands.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn resolvent(g: &Large) -> Verdict {
    let epsilons: Vec<f64> = (0..16).map(|i| 10.0 * 0.8f64.powi(i)).collect();
    let probe =
        ResolventProbe::new(&g.initial, &g.source, &g.flat, epsilons.clone()).map_err(|e| e.to_string())?;
    let omegas = probe.omega_mesh(7);
    let spec = WeightedNormSpec::new(-4.0).map_err(|e| e.to_string())?;
    let table = lap_scan(&probe, &omegas, &spec, 4).map_err(|e| e.to_string())?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut stable = true;
    for s in &table.stability {
        match (s.min_ratio, s.max_ratio) {
            (Some(a), Some(b)) => {
                lo = lo.min(a);
                hi = hi.max(b);
            }
            _ => stable = false,
        }
    }
    stable &= lo >= 0.8 && hi <= 1.25;

    // residual and antisymmetry at the largest and smallest epsilon, with
    // K applied blockwise in a single pass over the grid
    let cases: Vec<(f64, f64)> = omegas
        .iter()
        .flat_map(|&w| [(w, epsilons[0]), (w, epsilons[15])])
        .collect();
    let images: Vec<BlochField> = cases
        .iter()
        .map(|&(w, e)| probe.resolvent_image(w, e))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let z = &probe.field;
    let residual = z
        .values
        .par_iter()
        .enumerate()
        .map(|(p, v)| {
            if v.iter().all(|x| x.norm() == 0.0) {
                return Ok(0.0);
            }
            let fiber = g.source.fiber(p)?;
            let mut worst: f64 = 0.0;
            for (&(w, e), img) in cases.iter().zip(&images) {
                let r = &img.values[p];
                let kr = fiber.apply_k(r);
                let shift = c64::new(w, e);
                let res: Vec<c64> = kr.iter().zip(r).zip(v).map(|((a, b), c)| a - shift * b - c).collect();
                worst = worst.max(norm_sqr(&res).sqrt());
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>, spn_bloch::Error>>()
        .map_err(|e| e.to_string())?
        .into_iter()
        .fold(0.0, f64::max);
    let mut antisym: f64 = 0.0;
    for &(w, e) in &cases {
        let plus = z.inner(&probe.resolvent_image(w, e).map_err(|e| e.to_string())?);
        let minus = z.inner(&probe.resolvent_image(w, -e).map_err(|e| e.to_string())?);
        antisym = antisym.max((plus.im + minus.im).abs() / plus.im.abs().max(1e-300));
    }
    let ok = stable && residual < 1e-9 && antisym < 1e-12;
    Ok((
        ok,
        format!(
            "ratios in [{lo:.4}, {hi:.4}] at {} omegas, residual {residual:.2e}, antisymmetry {antisym:.2e}",
            omegas.len()
        ),
    ))
}

fn determinism() -> Verdict {
    let cfg = RunConfig {
        seed: 42,
        ..RunConfig::default()
    };
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        run(Command::Bands, &cfg, Some(dir.path())).map_err(|e| e.to_string())?;
        outputs.push(std::fs::read(dir.path().join("bands.csv")).map_err(|e| e.to_string())?);
    }
    let same = outputs[0] == outputs[1];
    Ok((same, format!("bands.csv of {} bytes identical: {same}", outputs[0].len())))
}

fn report(id: usize, name: &str, verdict: Verdict, failed: &mut usize) {
    let (ok, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e}")));
    if !ok {
        *failed += 1;
    }
    println!("criterion {id:>2} {name:<14} {} {detail}", if ok { "PASS" } else { "FAIL" });
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    report(1, "jellium", jellium(), &mut failed);
    report(2, "wiener", wiener(), &mut failed);
    report(3, "structure", structure(), &mut failed);
    report(4, "positivity", positivity(), &mut failed);
    report(5, "similarity", similarity(), &mut failed);
    report(6, "phonons", phonons(), &mut failed);
    report(7, "growth", growth(), &mut failed);
    report(8, "conservation", conservation(), &mut failed);
    match large() {
        Ok(g) => {
            report(9, "decay", decay(&g), &mut failed);
            report(10, "resolvent", resolvent(&g), &mut failed);
        }
        Err(e) => {
            report(9, "decay", Err(e.clone()), &mut failed);
            report(10, "resolvent", Err(e), &mut failed);
        }
    }
    report(11, "determinism", determinism(), &mut failed);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
