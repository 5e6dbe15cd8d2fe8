//! Unbroken trajectory spaces `T(v, w)` between critical points of adjacent
//! index: shooting from the unstable sphere, coherent signs and level
//! crossing data.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::{descend, integrate_y, DescendOptions, Descent, FlowConfig};
use crate::geometry::ModelKind;
use crate::linalg::{condition_number, least_squares};
use crate::morse::Landscape;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectionConfig {
    /// Number of points `m` on the unstable circle scanned for sign changes.
    pub scan_resolution: usize,
    pub root_tol: f64,
    pub slope_tol: f64,
    pub dedupe_tol: f64,
    /// Capture radius as a fraction of the target chart radius.
    pub capture_radius: f64,
    /// Seed radius on the unstable disk, as a fraction of the chart radius.
    pub seed_radius: f64,
    /// Region (fraction of the target chart radius) on which the crossing
    /// function is evaluated during the scan.
    pub scan_radius: f64,
    pub flow: FlowConfig,
}

impl Default for ConnectionConfig {
    fn default() -> Self {
        Self {
            scan_resolution: 64,
            root_tol: 1e-10,
            slope_tol: 1e-4,
            dedupe_tol: 1e-8,
            capture_radius: 0.5,
            seed_radius: 1e-3,
            scan_radius: 2.0,
            flow: FlowConfig::default(),
        }
    }
}

/// A point `x⁻_j = γ(c_j − ε_j)` where a trajectory crosses below a critical level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Crossing {
    pub level: f64,
    pub eps: f64,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub from_id: String,
    pub to_id: String,
    /// Direction on the unstable sphere of `from` (chart coordinates).
    pub direction: Vec<f64>,
    /// Circle parameter when `i(from) = 2`.
    pub theta: Option<f64>,
    /// `(s, point)` with `s = h(from) − h`.
    pub samples: Vec<(f64, Vec<f64>)>,
    pub sign: i32,
    pub crossings: Vec<Crossing>,
    pub deck: Vec<i64>,
}

/// All trajectories found for one adjacent-index pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairConnections {
    pub from: String,
    pub to: String,
    pub trajectories: Vec<Trajectory>,
}

impl PairConnections {
    pub fn incidence(&self) -> i64 {
        self.trajectories.iter().map(|t| t.sign as i64).sum()
    }
}

/// Connection database over every adjacent-index pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConnectionDb {
    pub pairs: Vec<PairConnections>,
    pub searched: BTreeSet<(String, String)>,
}

impl ConnectionDb {
    pub fn pair(&self, from: &str, to: &str) -> Option<&PairConnections> {
        self.pairs.iter().find(|p| p.from == from && p.to == to)
    }

    pub fn trajectories(&self, from: &str, to: &str) -> &[Trajectory] {
        self.pair(from, to).map_or(&[], |p| &p.trajectories)
    }

    pub fn was_searched(&self, from: &str, to: &str) -> bool {
        self.searched.contains(&(from.to_string(), to.to_string()))
    }

    /// `(from, to, count, signs)` fingerprint used by the stability checks.
    pub fn fingerprint(&self) -> Vec<(String, String, Vec<i32>)> {
        self.pairs
            .iter()
            .map(|p| (p.from.clone(), p.to.clone(), p.trajectories.iter().map(|t| t.sign).collect()))
            .collect()
    }
}

/// Deterministic unit directions on `S^{k−1}`.
fn sphere_directions(k: usize, m: usize) -> Vec<DVector<f64>> {
    match k {
        1 => vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        2 => (0..m)
            .map(|j| {
                let t = circle_param(j, m);
                DVector::from_vec(vec![t.cos(), t.sin()])
            })
            .collect(),
        _ => {
            // Fibonacci lattice on the first three coordinates.
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..m)
                .map(|j| {
                    let y = 1.0 - 2.0 * (j as f64 + 0.5) / m as f64;
                    let rad = (1.0 - y * y).sqrt();
                    let mut v = DVector::zeros(k);
                    v[0] = rad * (golden * j as f64).cos();
                    v[1] = rad * (golden * j as f64).sin();
                    v[2] = y;
                    v
                })
                .collect()
        }
    }
}

/// Offset scan grid `θ_j = 2π (j + ½)/m`.
pub fn circle_param(j: usize, m: usize) -> f64 {
    2.0 * PI * (j as f64 + 0.5) / m as f64
}

/// A point of `W⁻_v` near `v` on level `c_v − δ²/2` in direction `u`, with
/// the pushed-forward unstable frame (columns ordered as `O⁻_v`). Coordinates
/// are unwrapped relative to `v`.
pub fn unstable_seed(
    land: &Landscape,
    pos: usize,
    u: &DVector<f64>,
    cfg: &ConnectionConfig,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chart = &land.charts[pos];
    let (n, k) = (chart.center.len(), chart.index);
    let delta = cfg.seed_radius * chart.radius;
    let mut z = DVector::zeros(n);
    z.rows_mut(0, k).copy_from(&(u * delta));
    let p = chart.to_manifold(&z);
    let frame = chart.frame.columns(0, k).into_owned();
    // Settle onto the exact model level so all seeds share one level.
    let s = land.sys.h(&p) - (chart.value - 0.5 * delta * delta);
    let sol = integrate_y(&land.sys, &p, Some(&frame), s, &cfg.flow)?;
    let q = sol.y_end[..n].to_vec();
    let f = DMatrix::from_column_slice(n, k, &sol.y_end[n..]);
    Ok((q, f))
}

/// Descend the seed in direction `u` from `v` to level `target`.
pub fn descend_from(
    land: &Landscape,
    pos: usize,
    u: &DVector<f64>,
    target: f64,
    with_frame: bool,
    no_handoff: bool,
    cfg: &ConnectionConfig,
) -> Result<Descent> {
    let (seed, frame) = unstable_seed(land, pos, u, cfg)?;
    let opts = DescendOptions { frame: with_frame.then_some(frame), no_handoff };
    descend(land, &seed, target, &opts, &cfg.flow)
}

/// Points of `S⁻_v = W⁻_v ∩ L_{c_v − ε}`: `m` directions for `i(v) ≥ 2`,
/// exactly two for `i(v) = 1`.
pub fn unstable_sphere_samples(
    land: &Landscape,
    id: &str,
    m: usize,
    cfg: &ConnectionConfig,
) -> Result<Vec<Vec<f64>>> {
    let pos = position(land, id)?;
    let v = &land.points[pos];
    if v.index == 0 {
        return Err(Error::IndexZero { id: id.to_string() });
    }
    let target = v.value - land.ladder.eps_at(v.value);
    sphere_directions(v.index, m)
        .par_iter()
        .map(|u| {
            let d = descend_from(land, pos, u, target, false, false, cfg)?;
            land.sys.model.canonicalize(&d.end)
        })
        .collect()
}

fn position(land: &Landscape, id: &str) -> Result<usize> {
    land.position(id).ok_or_else(|| Error::Precondition(format!("unknown critical point {id}")))
}

/// Outcome of shooting one sample down to `c_w + ε_w`: chart coordinates of
/// the landed point in the chart of `w`, the descent, and whether the point
/// is captured by `w`.
struct Shot {
    z: DVector<f64>,
    descent: Descent,
    captured: bool,
}

fn map_stuck(land: &Landscape, from: usize, e: Error, theta: f64) -> Error {
    if let Error::StuckOnStableManifold { id } = &e {
        if let Some(u) = land.point(id) {
            if u.index >= land.points[from].index {
                return Error::NonTransversalSuspected {
                    from: land.points[from].id.clone(),
                    to: id.clone(),
                    theta,
                };
            }
        }
    }
    e
}

fn shoot(
    land: &Landscape,
    from: usize,
    to: usize,
    u: &DVector<f64>,
    theta: f64,
    with_frame: bool,
    cfg: &ConnectionConfig,
) -> Result<Option<Shot>> {
    let w = &land.points[to];
    let target = w.value + land.ladder.eps_at(w.value);
    let d = match descend_from(land, from, u, target, with_frame, false, cfg) {
        Ok(d) => d,
        // A measure-zero hit on a lower-index stable manifold: no value here.
        Err(Error::StuckOnStableManifold { id })
            if land.point(&id).is_some_and(|p| p.index < land.points[from].index) =>
        {
            return Ok(None)
        }
        Err(e) => return Err(map_stuck(land, from, e, theta)),
    };
    let chart = &land.charts[to];
    let z = chart.to_chart(&land.sys.model, &d.end);
    let in_zone = |z: &DVector<f64>, r: f64, k: usize| z.norm() <= r && z.rows(0, k).norm() <= cfg.capture_radius * r;
    let captured = in_zone(&z, chart.radius, chart.index);
    if captured {
        // A second stable sphere on the same level claiming the point.
        for other in land.members_at(w.value) {
            if other == to || land.points[other].index != w.index {
                continue;
            }
            let oc = &land.charts[other];
            if in_zone(&oc.to_chart(&land.sys.model, &d.end), oc.radius, oc.index) {
                return Err(Error::CaptureAmbiguous {
                    theta,
                    first: w.id.clone(),
                    second: land.points[other].id.clone(),
                });
            }
        }
    }
    Ok(Some(Shot { z, descent: d, captured }))
}

/// Chart coordinates of the point of `S⁺_w` in the stable direction of `z`:
/// backward rescaled flow from a point of the stable disk near `w`.
fn stable_sphere_point(
    land: &Landscape,
    to: usize,
    z: &DVector<f64>,
    cfg: &ConnectionConfig,
) -> Result<DVector<f64>> {
    let chart = &land.charts[to];
    let k = chart.index;
    let n = z.len();
    let zplus = z.rows(k, n - k).into_owned();
    let delta = cfg.seed_radius * chart.radius;
    let mut seed = DVector::zeros(n);
    seed.rows_mut(k, n - k).copy_from(&(zplus.normalize() * delta));
    let p = chart.to_manifold(&seed);
    let target = chart.value + land.ladder.eps_at(chart.value);
    let sol = integrate_y(&land.sys, &p, None, land.sys.h(&p) - target, &cfg.flow)?;
    Ok(chart.to_chart(&land.sys.model, &sol.y_end))
}

fn circle_direction(theta: f64) -> DVector<f64> {
    DVector::from_vec(vec![theta.cos(), theta.sin()])
}

/// Landed chart coordinates in the chart of `w` for circle parameter `θ`.
fn landed(land: &Landscape, from: usize, to: usize, theta: f64, cfg: &ConnectionConfig) -> Result<Option<DVector<f64>>> {
    Ok(shoot(land, from, to, &circle_direction(theta), theta, false, cfg)?.map(|s| s.z))
}

/// Signed crossing function: unstable chart component of the landed point
/// relative to the stable sphere of `w`, defined on the scan region.
fn sigma_of(land: &Landscape, to: usize, z: &DVector<f64>, cfg: &ConnectionConfig) -> Result<Option<f64>> {
    let chart = &land.charts[to];
    if z.norm() > cfg.scan_radius * chart.radius || z.rows(chart.index, z.len() - chart.index).norm() == 0.0 {
        return Ok(None);
    }
    let sp = stable_sphere_point(land, to, z, cfg)?;
    // Index-1 targets only: the unstable component is a scalar.
    Ok(Some(z[0] - sp[0]))
}

fn sigma(land: &Landscape, from: usize, to: usize, theta: f64, cfg: &ConnectionConfig) -> Result<Option<f64>> {
    match landed(land, from, to, theta, cfg)? {
        Some(z) => sigma_of(land, to, &z, cfg),
        None => Ok(None),
    }
}

/// Find the trajectories from `from` to `to` (`i(from) = i(to) + 1`).
pub fn find_connections(
    land: &Landscape,
    from: &str,
    to: &str,
    cfg: &ConnectionConfig,
) -> Result<Vec<Trajectory>> {
    let (fp, tp) = (position(land, from)?, position(land, to)?);
    let (v, w) = (&land.points[fp], &land.points[tp]);
    if v.index != w.index + 1 {
        return Err(Error::IndexMismatch {
            from: from.to_string(),
            to: to.to_string(),
            diff: v.index as i64 - w.index as i64,
        });
    }
    if w.value >= v.value {
        return Ok(Vec::new());
    }
    let directions: Vec<(DVector<f64>, Option<f64>)> = match v.index {
        1 => sphere_directions(1, 2).into_iter().map(|u| (u, None)).collect(),
        2 => scan_roots(land, fp, tp, cfg)?
            .into_iter()
            .map(|t| (DVector::from_vec(vec![t.cos(), t.sin()]), Some(t)))
            .collect(),
        k => {
            return Err(Error::Precondition(format!(
                "connection search supports unstable dimension 1 or 2, got {k}"
            )))
        }
    };
    let mut out = Vec::new();
    for (u, theta) in directions {
        let tag = theta.unwrap_or(if u[0] > 0.0 { 0.0 } else { PI });
        if let Some(Shot { z, descent, captured: true }) = shoot(land, fp, tp, &u, tag, true, cfg)? {
            out.push(build_trajectory(land, fp, tp, &u, theta, z, descent, cfg)?);
        }
    }
    Ok(out)
}

/// Maximum number of extra shots spent refining the scan.
const REFINE_BUDGET: usize = 20_000;

/// Sign changes of `σ` on the offset grid, refined by bisection.
///
/// The grid is first refined until consecutive landed points are within the
/// capture radius of each other in the chart of `w`, so every crossing of
/// the stable sphere is bracketed by samples inside the scan region no
/// matter how strongly the flow spreads the unstable circle.
fn scan_roots(land: &Landscape, fp: usize, tp: usize, cfg: &ConnectionConfig) -> Result<Vec<f64>> {
    let m = cfg.scan_resolution.max(4);
    let chart_r = land.charts[tp].radius;
    let gap = cfg.capture_radius * chart_r;
    let mut thetas: Vec<f64> = (0..=m).map(|j| circle_param(j, m)).collect();
    let mut zs: Vec<Option<DVector<f64>>> =
        thetas[..m].par_iter().map(|t| landed(land, fp, tp, *t, cfg)).collect::<Result<_>>()?;
    zs.push(zs[0].clone());
    let mut spent = 0;
    loop {
        let needs: Vec<usize> = (0..thetas.len() - 1)
            .filter(|&j| {
                let wide = thetas[j + 1] - thetas[j] > 1e-9;
                let far = match (&zs[j], &zs[j + 1]) {
                    (Some(a), Some(b)) => (a - b).norm() > gap,
                    _ => true,
                };
                wide && far
            })
            .collect();
        if needs.is_empty() || spent + needs.len() > REFINE_BUDGET {
            if !needs.is_empty() {
                log::warn!("scan refinement budget exhausted for {} -> {}", land.points[fp].id, land.points[tp].id);
            }
            break;
        }
        spent += needs.len();
        let mids: Vec<f64> = needs.iter().map(|&j| 0.5 * (thetas[j] + thetas[j + 1])).collect();
        let new: Vec<Option<DVector<f64>>> =
            mids.par_iter().map(|t| landed(land, fp, tp, *t, cfg)).collect::<Result<_>>()?;
        for (k, (&j, (t, z))) in needs.iter().zip(mids.into_iter().zip(new)).enumerate().rev() {
            let _ = k;
            thetas.insert(j + 1, t);
            zs.insert(j + 1, z);
        }
    }
    let values: Vec<Option<f64>> = zs
        .par_iter()
        .map(|z| match z {
            Some(z) => sigma_of(land, tp, z, cfg),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    let mut roots: Vec<f64> = Vec::new();
    for j in 0..thetas.len() - 1 {
        let (a, b) = (thetas[j], thetas[j + 1]);
        let (Some(sa), Some(sb)) = (values[j], values[j + 1]) else { continue };
        if sa == 0.0 {
            roots.push(a.rem_euclid(2.0 * PI));
            continue;
        }
        if sa * sb > 0.0 {
            continue;
        }
        let (mut lo, mut hi, mut slo) = (a, b, sa);
        let mut ok = true;
        while hi - lo > cfg.root_tol {
            let mid = 0.5 * (lo + hi);
            match sigma(land, fp, tp, mid, cfg)? {
                Some(sm) if sm * slo > 0.0 => {
                    lo = mid;
                    slo = sm;
                }
                Some(_) => hi = mid,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        let root = 0.5 * (lo + hi);
        // Reject brackets around a jump rather than a zero.
        let residual = sigma(land, fp, tp, root, cfg)?;
        if !ok || residual.map_or(true, |r| r.abs() > 1e-6 * chart_r) {
            log::debug!("discarded bracket [{a}, {b}] for {} -> {}", land.points[fp].id, land.points[tp].id);
            continue;
        }
        let h = 1e-6;
        let (Some(sp), Some(sm)) = (sigma(land, fp, tp, root + h, cfg)?, sigma(land, fp, tp, root - h, cfg)?) else {
            continue;
        };
        let slope = (sp - sm) / (2.0 * h);
        if slope.abs() < cfg.slope_tol {
            return Err(Error::NonTransversalSuspected {
                from: land.points[fp].id.clone(),
                to: land.points[tp].id.clone(),
                theta: root.rem_euclid(2.0 * PI),
            });
        }
        roots.push(root.rem_euclid(2.0 * PI));
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < cfg.dedupe_tol);
    if roots.len() > 1 && roots[0] + 2.0 * PI - roots[roots.len() - 1] < cfg.dedupe_tol {
        roots.pop();
    }
    Ok(roots)
}

#[allow(clippy::too_many_arguments)]
fn build_trajectory(
    land: &Landscape,
    fp: usize,
    tp: usize,
    u: &DVector<f64>,
    theta: Option<f64>,
    z: DVector<f64>,
    d: Descent,
    cfg: &ConnectionConfig,
) -> Result<Trajectory> {
    let (v, w) = (&land.points[fp], &land.points[tp]);
    let sys = &land.sys;
    let chart = &land.charts[tp];
    let frame = d.frame.clone().ok_or(Error::SingularTransport { condition: f64::INFINITY })?;
    let sign = frame_sign(land, tp, &d.end, &frame)?;

    // Samples from v along the flow, then into w along its stable model.
    let mut samples = vec![(0.0, v.coords.clone())];
    for (s, p) in d.samples() {
        samples.push((v.value - d.start_level + s, p));
    }
    let zplus = z.rows(chart.index, z.len() - chart.index).into_owned();
    let mut tail = DVector::zeros(z.len());
    tail.rows_mut(chart.index, z.len() - chart.index).copy_from(&(zplus * 0.5));
    let near = add(&d.end, &chart.push_vector(&(&tail - &z)));
    let end = add(&d.end, &chart.push_vector(&(-&z)));
    samples.push((v.value - sys.h(&near), near));
    samples.push((v.value - w.value, end.clone()));
    let mut mono: Vec<(f64, Vec<f64>)> = Vec::with_capacity(samples.len());
    for (s, p) in samples {
        if mono.last().map_or(true, |(ls, _)| s > *ls) {
            mono.push((s, p));
        }
    }

    let crossings = land
        .ladder
        .levels
        .iter()
        .filter(|l| l.value > w.value && l.value <= v.value + 1e-12)
        .filter_map(|l| {
            d.at_level(l.value - l.eps).map(|(p, _)| Crossing { level: l.value, eps: l.eps, point: p })
        })
        .collect();

    let deck = deck_of(land, &w.coords, &end)?;
    let _ = cfg;
    Ok(Trajectory {
        from_id: v.id.clone(),
        to_id: w.id.clone(),
        direction: u.iter().copied().collect(),
        theta,
        samples: mono,
        sign,
        crossings,
        deck,
    })
}

fn add(a: &[f64], b: &DVector<f64>) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
}

/// Winding of an unwrapped end point relative to the canonical target.
fn deck_of(land: &Landscape, target: &[f64], end: &[f64]) -> Result<Vec<i64>> {
    if !matches!(land.sys.model.kind(), ModelKind::FlatTorus { .. }) {
        return Ok(vec![0; end.len()]);
    }
    land.sys
        .model
        .periods()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let Some(p) = p else { return Ok(0) };
            let q = (end[i] - target[i]) / p;
            let k = q.round();
            if (q - k).abs() * p >= 0.01 * p {
                return Err(Error::Precondition(format!("deck residual {} too large", (q - k) * p)));
            }
            Ok(k as i64)
        })
        .collect()
}

/// `ε = sign det C` where the transported frame equals
/// `[X(p), O⁻_w] · C` at the landing point `p`.
pub fn frame_sign(land: &Landscape, to: usize, p: &[f64], frame: &DMatrix<f64>) -> Result<i32> {
    let chart = &land.charts[to];
    let n = p.len();
    let k = chart.index;
    let mut basis = DMatrix::zeros(n, k + 1);
    basis.set_column(0, &land.sys.field_x(p));
    for j in 0..k {
        basis.set_column(j + 1, &chart.frame.column(j));
    }
    let mut normalized = frame.clone();
    for mut c in normalized.column_iter_mut() {
        let nrm = c.norm();
        if nrm > 0.0 {
            c /= nrm;
        }
    }
    let cond = condition_number(&normalized);
    if !(cond <= 1e8) {
        return Err(Error::SingularTransport { condition: cond });
    }
    let c = least_squares(&basis, frame).ok_or(Error::SingularTransport { condition: f64::INFINITY })?;
    if c.nrows() != c.ncols() {
        return Err(Error::SingularTransport { condition: f64::INFINITY });
    }
    let det = c.determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::SingularTransport { condition: f64::INFINITY });
    }
    Ok(if det > 0.0 { 1 } else { -1 })
}

/// Search every adjacent-index pair, in deterministic order.
pub fn find_all_connections(land: &Landscape, cfg: &ConnectionConfig) -> Result<ConnectionDb> {
    let mut pairs = Vec::new();
    for v in &land.points {
        for w in &land.points {
            if v.index == w.index + 1 {
                pairs.push((v.id.clone(), w.id.clone()));
            }
        }
    }
    morse_smale_scan(land, cfg)?;
    let found: Vec<PairConnections> = pairs
        .par_iter()
        .map(|(a, b)| {
            Ok(PairConnections { from: a.clone(), to: b.clone(), trajectories: find_connections(land, a, b, cfg)? })
        })
        .collect::<Result<_>>()?;
    Ok(ConnectionDb { pairs: found, searched: pairs.into_iter().collect() })
}

/// Flow every index-1 unstable branch to the bottom; a branch converging to a
/// point of equal or higher index violates the Morse–Smale condition.
pub fn morse_smale_scan(land: &Landscape, cfg: &ConnectionConfig) -> Result<()> {
    let Some(bottom) = land.ladder.levels.last() else { return Ok(()) };
    for (pos, v) in land.points.iter().enumerate() {
        if v.index != 1 || v.value <= bottom.value {
            continue;
        }
        for u in sphere_directions(1, 2) {
            let theta = if u[0] > 0.0 { 0.0 } else { PI };
            if let Err(e) = descend_from(land, pos, &u, bottom.value + bottom.eps, false, false, cfg) {
                match map_stuck(land, pos, e, theta) {
                    e @ Error::NonTransversalSuspected { .. } => return Err(e),
                    Error::StuckOnStableManifold { .. } => {}
                    e => return Err(e),
                }
            }
        }
    }
    Ok(())
}

/// Trajectory samples as CSV rows `s, x1..xn, h`.
pub fn samples_csv(land: &Landscape, traj: &Trajectory) -> String {
    let n = land.sys.dim();
    let mut out = String::from("s");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",h\n");
    for (s, p) in &traj.samples {
        out.push_str(&format!("{s:.16e}"));
        for x in p {
            out.push_str(&format!(",{x:.16e}"));
        }
        out.push_str(&format!(",{:.16e}\n", land.sys.h(p)));
    }
    out
}
