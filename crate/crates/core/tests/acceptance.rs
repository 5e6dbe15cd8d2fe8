//! Acceptance gate: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the lines always reach stdout and
//! each criterion is timed on its own.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use morseflow::complex::{betti, betti_twisted, build_complex, build_cover_complex, verify_d2, verify_d2_twisted, Representation};
use morseflow::connections::{find_all_connections, ConnectionConfig, ConnectionDb};
use morseflow::derham::{battery_names, form_by_name, DerhamConfig, DerhamContext};
use morseflow::flow::{flow_x, flow_y, standard_flow_x, standard_flow_y, standard_level_map, FlowConfig};
use morseflow::geometry::ManifoldModel;
use morseflow::morse::{Landscape, MorseSystem, StandardQuadratic};
use morseflow::perturb::{cutoff_beta, cutoff_gamma, demo_v_plus, perturb_demo, perturbed_system, DemoParams, ModelBox};
use morseflow::scenario::Scenario;
use morseflow::strata::{enumerate_broken, product_faces, FaceLattice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

type Outcome = Result<String, String>;

const SURFACES: [&str; 3] = ["torus", "peanut", "round_sphere"];

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn setup(name: &str) -> Result<(Scenario, Landscape, ConnectionDb), String> {
    let sc = Scenario::builtin(name).map_err(err)?;
    let land = sc.landscape().map_err(err)?;
    let db = find_all_connections(&land, &sc.connections).map_err(err)?;
    Ok((sc, land, db))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Numerical flows of the standard model against their closed forms.
fn closed_form_flows() -> Outcome {
    let start = Instant::now();
    let n = 9;
    let cfg = FlowConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in 0..=n {
        let sys = MorseSystem::new(ManifoldModel::standard(n, k).map_err(err)?, Arc::new(StandardQuadratic { dim: n, index: k }));
        for _ in 0..10 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let plus: f64 = x[k..].iter().map(|v| v * v).sum();
            let h = sys.h(&x);
            for j in 0..10 {
                let t = -1.0 + 2.0 * j as f64 / 9.0;
                worst = worst.max(dist(&flow_x(&sys, &x, t, &cfg).map_err(err)?, &standard_flow_x(k, &x, t)));
                let s = if k == 0 { 0.09 * (j + 1) as f64 * plus / 2.0 } else { 0.1 * (j + 1) as f64 };
                let numeric = flow_y(&sys, &x, s, &cfg).map_err(err)?;
                let closed = standard_flow_y(k, &x, s).ok_or("closed-form rescaled flow undefined")?;
                let level = standard_level_map(k, &x, h - s).ok_or("level map undefined")?;
                worst = worst.max(dist(&numeric, &closed)).max(dist(&numeric, &level));
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-8, format!("max error {worst:.3e}"))?;
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("max error {worst:.3e} over 3000 comparisons in {elapsed:.2?}"))
}

/// Random coordinates away from the parametrization's coordinate poles.
fn random_point(land: &Landscape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    land.sys
        .model
        .periods()
        .iter()
        .map(|p| match p {
            Some(per) => rng.gen_range(0.0..*per),
            None => rng.gen_range(0.2..std::f64::consts::PI - 0.2),
        })
        .collect()
}

fn energy_law() -> Outcome {
    let mut lines = Vec::new();
    for name in SURFACES.iter().chain(&["upright_torus"]) {
        let sc = Scenario::builtin(name).map_err(err)?;
        let land = sc.landscape().map_err(err)?;
        let floor = land.points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut worst, mut done, mut skipped) = (0.0f64, 0, 0);
        while done < 500 {
            let x = random_point(&land, &mut rng);
            let h = land.sys.h(&x);
            let room = h - floor;
            if room < 1e-3 {
                continue;
            }
            let s = rng.gen_range(0.0..0.9 * room);
            match flow_y(&land.sys, &x, s, &sc.flow) {
                Ok(y) => {
                    worst = worst.max((land.sys.h(&y) - h + s).abs());
                    done += 1;
                }
                Err(e) if e.kind() == "DegenerateMetric" || e.kind() == "HitCriticalLevel" => skipped += 1,
                Err(e) => return Err(format!("{name}: {e}")),
            }
        }
        ensure(worst < 1e-8, format!("{name}: max |h(Ψ_s x) − h(x) + s| = {worst:.3e}"))?;
        ensure(skipped <= 25, format!("{name}: {skipped} samples left the coordinate chart"))?;
        lines.push(format!("{name} {worst:.1e} (skipped {skipped})"));
    }
    Ok(lines.join(", "))
}

fn census() -> Outcome {
    let expected: [(&str, Vec<usize>); 3] = [("torus", vec![2, 1, 1, 0]), ("peanut", vec![2, 2, 1, 0]), ("round_sphere", vec![2, 0])];
    let mut lines = Vec::new();
    for (name, want) in expected {
        let start = Instant::now();
        let land = Scenario::builtin(name).and_then(|s| s.landscape()).map_err(err)?;
        let elapsed = start.elapsed();
        let mut got: Vec<usize> = land.points.iter().map(|p| p.index).collect();
        got.sort_unstable_by(|a, b| b.cmp(a));
        ensure(got == want, format!("{name}: indices {got:?}, expected {want:?}"))?;
        ensure(elapsed < Duration::from_secs(5), format!("{name}: took {elapsed:?}"))?;
        lines.push(format!("{name} {got:?} in {elapsed:.2?}"));
    }
    Ok(lines.join(", "))
}

fn d_squared() -> Outcome {
    let mut checks = 0;
    for name in SURFACES {
        let (sc, land, db) = setup(name)?;
        let cx = build_complex(&land, &db).map_err(err)?;
        ensure(verify_d2(&cx) == 0, format!("{name}: d∘d ≠ 0"))?;
        checks += 1;
        for cov in &sc.covering {
            for kappa in cov.kappas() {
                let rep = Representation { m: cov.m, kappa, coordinate: cov.coordinate };
                let tc = build_cover_complex(&db, &cx, rep).map_err(err)?;
                ensure(verify_d2_twisted(&tc) == 0, format!("{name}: twisted d∘d ≠ 0 at m = {}, κ = {kappa}", cov.m))?;
                checks += 1;
            }
        }
    }
    Ok(format!("{checks} complexes with d∘d = 0 exactly"))
}

fn betti_numbers() -> Outcome {
    for (name, want) in [("torus", vec![1, 2, 1]), ("peanut", vec![1, 0, 1]), ("round_sphere", vec![1, 0, 1])] {
        let (_, land, db) = setup(name)?;
        let cx = build_complex(&land, &db).map_err(err)?;
        let got = betti(&cx);
        ensure(got == want, format!("{name}: betti {got:?}, expected {want:?}"))?;
    }
    let (_, land, db) = setup("torus")?;
    let cx = build_complex(&land, &db).map_err(err)?;
    for m in [2, 3, 5] {
        for coordinate in [0, 1] {
            for kappa in 0..m {
                let tc = build_cover_complex(&db, &cx, Representation { m, kappa, coordinate }).map_err(err)?;
                let want = if kappa == 0 { vec![1, 2, 1] } else { vec![0, 0, 0] };
                let got = betti_twisted(&tc);
                ensure(got == want, format!("twisted torus m = {m}, κ = {kappa}, axis {coordinate}: {got:?}"))?;
            }
        }
    }
    Ok("torus (1,2,1), peanut and sphere (1,0,1), twisted torus matches for m = 2, 3, 5".into())
}

fn resolution_stability() -> Outcome {
    for name in SURFACES {
        let sc = Scenario::builtin(name).map_err(err)?;
        let land = sc.landscape().map_err(err)?;
        let reference = find_all_connections(&land, &ConnectionConfig { scan_resolution: 64, ..sc.connections })
            .map_err(err)?
            .fingerprint();
        for m in [128, 256] {
            let fp = find_all_connections(&land, &ConnectionConfig { scan_resolution: m, ..sc.connections })
                .map_err(err)?
                .fingerprint();
            ensure(fp == reference, format!("{name}: resolution {m} differs from 64"))?;
        }
        let half = find_all_connections(&land.with_eps_scaled(0.5), &sc.connections).map_err(err)?.fingerprint();
        ensure(half == reference, format!("{name}: ε/2 changes the trajectories"))?;
    }
    Ok("counts and signs agree at m = 64/128/256 and at ε/2".into())
}

/// Residuals below this are round-off; the doubling ratio is not required there.
const NOISE_FLOOR: f64 = 1e-8;

/// The runtime bound covers the battery at resolution 256; the doubling run
/// at 512 is timed and reported separately.
fn stokes() -> Outcome {
    let mut lines = Vec::new();
    for name in SURFACES {
        let start = Instant::now();
        let (sc, land, db) = setup(name)?;
        let cx = build_complex(&land, &db).map_err(err)?;
        let ctx = DerhamContext::new(&land, &db, DerhamConfig { check_convergence: false, ..Default::default() }, sc.connections);
        let forms = battery_names(&land).into_iter().map(|f| form_by_name(&land, f).map(|form| (f, form))).collect::<Result<Vec<_>, _>>().map_err(err)?;
        let mut coarse = Vec::new();
        for (form_name, form) in &forms {
            let r = ctx.chain_map_residual(&cx, form, 256).map_err(err)?.residual;
            ensure(r < 1e-3, format!("{name}/{form_name}: residual {r:.3e} at 256"))?;
            coarse.push(r);
        }
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(60), format!("{name}: took {elapsed:?} at 256"))?;
        let start = Instant::now();
        let mut worst_ratio = f64::INFINITY;
        for ((form_name, form), c) in forms.iter().zip(&coarse) {
            let fine = ctx.chain_map_residual(&cx, form, 512).map_err(err)?.residual;
            ensure(*c < NOISE_FLOOR || fine <= c / 4.0, format!("{name}/{form_name}: {c:.3e} -> {fine:.3e} on doubling"))?;
            if *c >= NOISE_FLOOR {
                worst_ratio = worst_ratio.min(c / fine.max(f64::MIN_POSITIVE));
            }
        }
        let worst = coarse.iter().cloned().fold(0.0, f64::max);
        lines.push(format!(
            "{name} max {worst:.1e} in {elapsed:.1?} (doubling {:.1?}, smallest ratio {worst_ratio:.0})",
            start.elapsed()
        ));
    }
    Ok(lines.join(", "))
}

fn h1_realization() -> Outcome {
    let (sc, land, db) = setup("torus")?;
    let cx = build_complex(&land, &db).map_err(err)?;
    let ctx = DerhamContext::new(&land, &db, DerhamConfig::default(), sc.connections);
    let mut cols = Vec::new();
    for name in ["dx_over_2pi", "dy_over_2pi"] {
        let form = form_by_name(&land, name).map_err(err)?;
        cols.push(ctx.int_map(&cx, &form, 256).map_err(err)?.iter().map(|i| i.value).collect::<Vec<_>>());
    }
    ensure(cols[0].len() == 2, "torus needs two degree-1 generators")?;
    let det = cols[0][0] * cols[1][1] - cols[1][0] * cols[0][1];
    ensure((det.abs() - 1.0).abs() < 1e-3, format!("det {det}"))?;
    Ok(format!("det = {det:.9}"))
}

fn perturbation() -> Outcome {
    let r = perturb_demo(DemoParams { k: 2, n: 3, rho: 1.0, s0: 1.0, eta: 0.5, alpha: None, seed: 3 }).map_err(err)?;
    ensure((r.beta_integral - r.alpha).abs() < 1e-10, format!("∫β − α = {:.3e}", r.beta_integral - r.alpha))?;
    ensure(r.displacement_error < 1e-8, format!("displacement error {:.3e}", r.displacement_error))?;
    let before = r.unperturbed.margin_value();
    let after = r.perturbed.margin_value();
    ensure(!r.unperturbed.transversal && before < 1e-6, format!("unperturbed margin {before:.3e}"))?;
    ensure(r.perturbed.transversal && after > 1e-3, format!("perturbed margin {after:.3e}"))?;
    let c0 = |eta: f64| -> Result<f64, String> {
        let bx = ModelBox::new(3, 2, 1.0, 1.0, eta, Some(demo_v_plus(2, 3, 1.0).map_err(err)?)).map_err(err)?;
        let alpha = bx.delta().map_err(err)?;
        let sys = perturbed_system(&bx, cutoff_beta(1.0, eta, bx.ell, alpha).map_err(err)?, cutoff_gamma(1.0, bx.ell).map_err(err)?, &[alpha])
            .map_err(err)?;
        Ok(sys.deviation(1.0, 1.0).0)
    };
    let devs = [c0(0.5)?, c0(0.25)?, c0(0.125)?];
    for w in devs.windows(2) {
        let ratio = w[0] / w[1];
        ensure((ratio / 2.0 - 1.0).abs() < 0.05, format!("C0 deviation ratio {ratio} on halving η"))?;
    }
    Ok(format!("margin {before:.1e} -> {after:.3}, C0 deviations {:.3e} {:.3e} {:.3e}", devs[0], devs[1], devs[2]))
}

fn histogram(l: &FaceLattice) -> Vec<usize> {
    let top = l.strata.iter().map(|s| s.codim).max().unwrap_or(0);
    let mut h = vec![0; top + 1];
    for s in &l.strata {
        h[s.codim] += 1;
    }
    h
}

fn stratification() -> Outcome {
    let mut lattices = Vec::new();
    let mut elapsed = Duration::ZERO;
    for name in SURFACES {
        let (_, land, db) = setup(name)?;
        let start = Instant::now();
        for v in &land.points {
            for w in &land.points {
                if v.index <= w.index {
                    continue;
                }
                let l = enumerate_broken(&land, &db, &v.id, &w.id).map_err(err)?;
                if l.is_empty() {
                    continue;
                }
                let expected = v.index as i64 - w.index as i64 - 1;
                let top = l.strata.iter().filter(|s| s.codim == 0).map(|s| s.dim).max();
                ensure(top == Some(expected), format!("{name}: dim B({}, {}) = {top:?}, expected {expected}", v.id, w.id))?;
                l.validate().map_err(err)?;
                lattices.push(l);
            }
        }
        elapsed += start.elapsed();
    }
    let start = Instant::now();
    lattices.push(FaceLattice::interval());
    lattices.push(product_faces(&FaceLattice::interval(), &FaceLattice::interval()));
    for a in &lattices {
        for b in &lattices {
            let (ha, hb) = (histogram(a), histogram(b));
            let mut conv = vec![0; ha.len() + hb.len() - 1];
            for (i, x) in ha.iter().enumerate() {
                for (j, y) in hb.iter().enumerate() {
                    conv[i + j] += x * y;
                }
            }
            let prod = product_faces(a, b);
            ensure(histogram(&prod) == conv, "product histogram differs from the convolution")?;
            prod.validate().map_err(err)?;
        }
    }
    elapsed += start.elapsed();
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("{} populated pairs, {} products, {elapsed:.2?}", lattices.len() - 2, lattices.len().pow(2)))
}

fn negative_control() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_morseflow"))
        .args(["connections", "--scenario", "upright_torus", "--threads", "1"])
        .env("MORSEFLOW_LOG", "off")
        .output()
        .map_err(err)?;
    let code = out.status.code();
    ensure(code == Some(3), format!("exit code {code:?}"))?;
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(err)?;
    let kind = report["errors"][0]["kind"].as_str().unwrap_or("");
    ensure(kind == "NonTransversalSuspected", format!("error kind {kind:?}"))?;
    Ok(format!("exit 3, {kind} for {} -> {}", report["errors"][0]["from"], report["errors"][0]["to"]))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("closed-form flows", closed_form_flows),
        ("energy law", energy_law),
        ("critical-point census", census),
        ("d squared is zero", d_squared),
        ("Betti numbers", betti_numbers),
        ("resolution and epsilon stability", resolution_stability),
        ("Stokes chain map", stokes),
        ("H1 realization", h1_realization),
        ("perturbation", perturbation),
        ("stratification", stratification),
        ("non-transversal negative control", negative_control),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1} s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1} s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
