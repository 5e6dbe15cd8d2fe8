//! The gradient flow `Φ_t`, the rescaled flow `Ψ_s` (unit speed in `h`), the
//! closed-form flows of the standard model and level transfer maps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::morse::{standard_h, Landscape, MorseSystem};
use crate::ode::{integrate, OdeConfig, Solution};
use crate::quadrature::gauss_legendre;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Level tolerance for landed points.
    pub event_tol: f64,
    /// Handoff to the chart model happens for points within
    /// `stop_radius · r` of a critical point (unstable chart component).
    pub stop_radius: f64,
    /// Unstable chart component below `stuck_tol · r` counts as lying on the
    /// stable manifold.
    pub stuck_tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-11,
            abs_tol: 1e-11,
            max_step: 0.25,
            event_tol: 1e-12,
            stop_radius: 0.5,
            stuck_tol: 1e-7,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rel_tol, self.abs_tol, self.max_step, self.event_tol, self.stop_radius, self.stuck_tol];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Precondition("flow tolerances must be positive".into()));
        }
        if self.event_tol > self.abs_tol {
            return Err(Error::Precondition("event_tol must not exceed abs_tol".into()));
        }
        Ok(())
    }

    pub fn ode(&self) -> OdeConfig {
        OdeConfig { rel_tol: self.rel_tol, abs_tol: self.abs_tol, max_step: self.max_step, ..OdeConfig::default() }
    }

    /// Same configuration with both integrator tolerances set to `tol`.
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.rel_tol = tol;
        self.abs_tol = tol;
        self.event_tol = self.event_tol.min(tol);
        self
    }
}

/// `Φ_t(x)` by adaptive integration of `dx/dt = X(x)` (raw coordinates).
pub fn flow_x_raw(sys: &MorseSystem, x: &[f64], t: f64, cfg: &FlowConfig) -> Result<Vec<f64>> {
    let sol = integrate(
        |_, y, d| d.copy_from_slice(sys.field_x(y).as_slice()),
        0.0,
        x,
        t,
        &cfg.ode(),
    )?;
    Ok(sol.y_end)
}

/// `Φ_t(x)`, canonicalized.
pub fn flow_x(sys: &MorseSystem, x: &[f64], t: f64, cfg: &FlowConfig) -> Result<Vec<f64>> {
    let y = flow_x_raw(sys, x, t, cfg)?;
    sys.model.canonicalize(&y)
}

fn y_rhs(sys: &MorseSystem, y: &[f64], d: &mut [f64]) {
    let x = sys.field_x(y);
    let xh = sys.dh(y).dot(&x);
    if xh.abs() < 1e-300 || !xh.is_finite() {
        d.iter_mut().for_each(|v| *v = f64::NAN);
        return;
    }
    for (di, xi) in d.iter_mut().zip(x.iter()) {
        *di = -xi / xh;
    }
}

/// Directional derivative `DY(x)·w` by central differences.
///
/// `Y` varies on the length scale `1/|Y|` (the distance to a critical
/// point), so the difference step is a fixed fraction of that scale, kept
/// above the round-off floor of the coordinates.
fn dy_times(sys: &MorseSystem, x: &[f64], y_at_x: &[f64], w: &[f64]) -> Vec<f64> {
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = x.len();
    if wn == 0.0 {
        return vec![0.0; n];
    }
    let scale = 1.0 / y_at_x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let floor = 1e-8 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let eta = (1e-5 * scale).max(floor) / wn;
    let xp: Vec<f64> = x.iter().zip(w).map(|(a, b)| a + eta * b).collect();
    let xm: Vec<f64> = x.iter().zip(w).map(|(a, b)| a - eta * b).collect();
    let mut yp = vec![0.0; n];
    let mut ym = vec![0.0; n];
    y_rhs(sys, &xp, &mut yp);
    y_rhs(sys, &xm, &mut ym);
    yp.iter().zip(&ym).map(|(a, b)| (a - b) / (2.0 * eta)).collect()
}

/// Integrate `Ψ` for parameter `s` from `x`, optionally transporting tangent
/// vectors (columns of `frame`) by the linearized flow. State layout is
/// `[x, frame columns...]`.
pub fn integrate_y(
    sys: &MorseSystem,
    x: &[f64],
    frame: Option<&DMatrix<f64>>,
    s: f64,
    cfg: &FlowConfig,
) -> Result<Solution> {
    let n = x.len();
    let m = frame.map_or(0, |f| f.ncols());
    let mut y0 = x.to_vec();
    if let Some(f) = frame {
        y0.extend(f.iter());
    }
    integrate(
        |_, y, d| {
            y_rhs(sys, &y[..n], &mut d[..n]);
            let y_at_x = d[..n].to_vec();
            for k in 0..m {
                let w = &y[n + k * n..n + (k + 1) * n];
                let dw = dy_times(sys, &y[..n], &y_at_x, w);
                d[n + k * n..n + (k + 1) * n].copy_from_slice(&dw);
            }
        },
        0.0,
        &y0,
        s,
        &cfg.ode(),
    )
}

/// `Ψ_s(x)`, canonicalized. Satisfies `h(Ψ_s x) = h(x) − s` whenever defined.
pub fn flow_y(sys: &MorseSystem, x: &[f64], s: f64, cfg: &FlowConfig) -> Result<Vec<f64>> {
    let sol = integrate_y(sys, x, None, s, cfg).map_err(|e| match e {
        Error::StepUnderflow { point, .. } => {
            Error::HitCriticalLevel { level: sys.h(&point), point }
        }
        other => other,
    })?;
    sys.model.canonicalize(&sol.y_end)
}

/// Reparametrization `τ(s; x) = ∫₀^s −1/X(h)(Ψ_{s'} x) ds'` by Gauss–Legendre
/// quadrature over the dense output of `Ψ`.
pub fn reparam_time(sys: &MorseSystem, x: &[f64], s: f64, cfg: &FlowConfig) -> Result<f64> {
    let sol = integrate_y(sys, x, None, s, cfg)?;
    let (nodes, weights) = gauss_legendre(16);
    let panels = 64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = s * p as f64 / panels as f64;
        let b = s * (p + 1) as f64 / panels as f64;
        for (t, w) in nodes.iter().zip(&weights) {
            let sp = 0.5 * (a + b) + 0.5 * (b - a) * t;
            let pt = sol.eval(sp);
            total += 0.5 * (b - a) * w * (-1.0 / sys.x_of_h(&pt));
        }
    }
    Ok(total)
}

/// Closed-form standard flow `Φ^{(k)}_t(x) = (e^t x⁻, e^{−t} x⁺)`.
pub fn standard_flow_x(k: usize, x: &[f64], t: f64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, v)| if i < k { v * t.exp() } else { v * (-t).exp() })
        .collect()
}

fn split_norms(k: usize, z: &[f64]) -> (f64, f64) {
    let a: f64 = z[..k].iter().map(|v| v * v).sum();
    let b: f64 = z[k..].iter().map(|v| v * v).sum();
    (a, b)
}

/// Closed-form rescaled standard flow `Ψ^{(k)}_s(z)`.
///
/// For `z⁻ = 0` this is `(1 − 2s/|z⁺|²)^{1/2} z`, defined for
/// `s < |z⁺|²/2`; otherwise the reparametrized `Φ^{(k)}` with `s(t) =
/// |z⁻|²(e^{2t} − 1)/2 + |z⁺|²(1 − e^{−2t})/2`.
pub fn standard_flow_y(k: usize, z: &[f64], s: f64) -> Option<Vec<f64>> {
    let (a, b) = split_norms(k, z);
    if a == 0.0 {
        let f2 = 1.0 - 2.0 * s / b;
        if b == 0.0 || f2 <= 0.0 {
            return None;
        }
        return Some(z.iter().map(|v| v * f2.sqrt()).collect());
    }
    // A u² + (B − A − 2s) u − B = 0 with u = e^{2t}.
    let p = b - a - 2.0 * s;
    let u = if p <= 0.0 {
        (-p + (p * p + 4.0 * a * b).sqrt()) / (2.0 * a)
    } else {
        2.0 * b / (p + (p * p + 4.0 * a * b).sqrt())
    };
    if !(u > 0.0) {
        return None;
    }
    Some(standard_flow_x(k, z, 0.5 * u.ln()))
}

/// Continuous extension `Ψ^{(k)}_a : h_k⁻¹(a) → h_k⁻¹(0)` for `a = h_k(z) > 0`.
pub fn standard_rescaled_to_zero(k: usize, z: &[f64]) -> Vec<f64> {
    let (a, b) = split_norms(k, z);
    if a == 0.0 {
        return vec![0.0; z.len()];
    }
    let (nm, np) = (a.sqrt(), b.sqrt());
    let up = (np / nm).sqrt();
    let down = (nm / np).sqrt();
    z.iter().enumerate().map(|(i, v)| if i < k { v * up } else { v * down }).collect()
}

/// Chart-model map from level `μ = h_k(z) > 0` to level `β`, `β < μ`.
/// Requires `z⁻ ≠ 0` when `β ≤ 0`.
pub fn standard_level_map(k: usize, z: &[f64], beta: f64) -> Option<Vec<f64>> {
    let (a, b) = split_norms(k, z);
    if a == 0.0 {
        if beta <= 0.0 {
            return None;
        }
        let scale = (2.0 * beta / b).sqrt();
        return Some(z.iter().map(|v| v * scale).collect());
    }
    // −A u/2 + B/(2u) = β  ⇒  A u² + 2β u − B = 0.
    let disc = (beta * beta + a * b).sqrt();
    let u = if beta <= 0.0 { (-beta + disc) / a } else { b / (beta + disc) };
    Some(standard_flow_x(k, z, 0.5 * u.ln()))
}

/// Options for [`descend`].
#[derive(Debug, Clone, Default)]
pub struct DescendOptions {
    /// Tangent vectors to transport by the linearized flow.
    pub frame: Option<DMatrix<f64>>,
    /// Disable the chart-model handoff and integrate straight through.
    pub no_handoff: bool,
}

/// A piece of a descending trajectory parametrized by `s = h(start) − h`.
#[derive(Debug, Clone)]
pub enum Piece {
    Flow { s0: f64, sol: Solution },
    /// A passage through the chart of a critical point by its quadratic model.
    Pass { s0: f64, s1: f64, id: String, from: Vec<f64>, to: Vec<f64> },
}

/// Result of flowing a point down to a target level.
#[derive(Debug, Clone)]
pub struct Descent {
    pub dim: usize,
    pub start_level: f64,
    pub pieces: Vec<Piece>,
    /// End point in unwrapped coordinates.
    pub end: Vec<f64>,
    pub frame: Option<DMatrix<f64>>,
    /// Critical point the continuous extension collapsed onto, if any.
    pub collapsed_to: Option<String>,
}

impl Descent {
    /// Point (and transported frame) at level `c`, unwrapped.
    pub fn at_level(&self, c: f64) -> Option<(Vec<f64>, Option<DMatrix<f64>>)> {
        let s = self.start_level - c;
        for piece in &self.pieces {
            if let Piece::Flow { s0, sol } = piece {
                let lo = s0 + sol.t_start.min(sol.t_end);
                let hi = s0 + sol.t_start.max(sol.t_end);
                if s >= lo - 1e-15 && s <= hi + 1e-15 {
                    return Some(self.split(sol.eval(s - s0)));
                }
            }
        }
        self.pieces.iter().find_map(|piece| match piece {
            Piece::Pass { s1, to, .. } if (s - s1).abs() < 1e-15 => Some((to.clone(), None)),
            _ => None,
        })
    }

    /// Split an integrator state into the point and the transported frame.
    pub fn split_state(&self, y: Vec<f64>) -> (Vec<f64>, Option<DMatrix<f64>>) {
        self.split(y)
    }

    fn split(&self, y: Vec<f64>) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let n = self.dim;
        if y.len() > n {
            let m = (y.len() - n) / n;
            (y[..n].to_vec(), Some(DMatrix::from_column_slice(n, m, &y[n..])))
        } else {
            (y, None)
        }
    }

    /// `(s, point)` samples at accepted integrator steps and pass endpoints.
    pub fn samples(&self) -> Vec<(f64, Vec<f64>)> {
        let n = self.dim;
        let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
        for piece in &self.pieces {
            match piece {
                Piece::Flow { s0, sol } => {
                    if out.is_empty() {
                        out.push((*s0, sol.eval(sol.t_start)[..n].to_vec()));
                    }
                    for st in &sol.steps {
                        out.push((s0 + st.t1(), st.end()[..n].to_vec()));
                    }
                }
                Piece::Pass { s0, s1, from, to, .. } => {
                    if out.is_empty() {
                        out.push((*s0, from.clone()));
                    }
                    out.push((*s1, to.clone()));
                }
            }
        }
        out
    }
}

struct Walker<'a> {
    land: &'a Landscape,
    cfg: &'a FlowConfig,
    start_level: f64,
    cur: Vec<f64>,
    frame: Option<DMatrix<f64>>,
    pieces: Vec<Piece>,
}

impl Walker<'_> {
    fn level(&self) -> f64 {
        self.land.sys.h(&self.cur)
    }

    /// Flow by `Ψ_s` and record the piece.
    fn flow(&mut self, s: f64) -> Result<()> {
        if s == 0.0 {
            return Ok(());
        }
        let s0 = self.start_level - self.level();
        let sol = integrate_y(&self.land.sys, &self.cur, self.frame.as_ref(), s, self.cfg)
            .map_err(|e| self.stuck_or(e))?;
        let n = self.cur.len();
        self.cur = sol.y_end[..n].to_vec();
        if let Some(f) = &self.frame {
            self.frame = Some(DMatrix::from_column_slice(n, f.ncols(), &sol.y_end[n..]));
        }
        self.pieces.push(Piece::Flow { s0, sol });
        Ok(())
    }

    /// Move `cur` to its canonical coordinates (the parametrization of an
    /// embedded surface extends past its coordinate poles, and chart lookups
    /// need the canonical representative). The frame follows by the
    /// Jacobian of the coordinate change.
    fn canonicalize(&mut self) -> Result<()> {
        let model = &self.land.sys.model;
        let q = model.canonicalize(&self.cur)?;
        if model.displacement(&self.cur, &q).norm() <= 1e-12 {
            return Ok(());
        }
        if let Some(f) = &self.frame {
            let n = self.cur.len();
            let h = 1e-7;
            let mut jac = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut plus = self.cur.clone();
                let mut minus = self.cur.clone();
                plus[i] += h;
                minus[i] -= h;
                let d = model.displacement(&model.canonicalize(&minus)?, &model.canonicalize(&plus)?);
                jac.set_column(i, &(d / (2.0 * h)));
            }
            self.frame = Some(jac * f);
        }
        self.cur = q;
        Ok(())
    }

    /// An integrator failure next to a critical point means the trajectory
    /// converges to it.
    fn stuck_or(&self, e: Error) -> Error {
        if let Error::StepUnderflow { point, .. } = &e {
            let near = self
                .land
                .points
                .iter()
                .min_by(|a, b| {
                    let da = self.land.sys.model.separation(&a.coords, point);
                    let db = self.land.sys.model.separation(&b.coords, point);
                    da.total_cmp(&db)
                });
            if let Some(v) = near {
                if self.land.sys.model.separation(&v.coords, point) < v.chart_radius {
                    return Error::StuckOnStableManifold { id: v.id.clone() };
                }
            }
            return Error::HitCriticalLevel { level: self.land.sys.h(point), point: point.clone() };
        }
        e
    }
}

/// Flow `x` (on level `a = h(x)`) down to level `b ≤ a` through intermediate
/// critical levels.
///
/// Between critical values the rescaled flow is integrated. At `c + ε` a
/// trajectory inside the handoff zone of a critical point `v` on level `c`
/// is carried across by the quadratic chart model. When `b = c` the
/// continuous extension is used, sending stable-manifold points to `v`.
pub fn descend(
    land: &Landscape,
    x: &[f64],
    b: f64,
    opts: &DescendOptions,
    cfg: &FlowConfig,
) -> Result<Descent> {
    let sys = &land.sys;
    let a = sys.h(x);
    if b > a + cfg.event_tol {
        return Err(Error::Precondition(format!("target level {b} above start level {a}")));
    }
    let mut w = Walker {
        land,
        cfg,
        start_level: a,
        cur: x.to_vec(),
        frame: opts.frame.clone(),
        pieces: Vec::new(),
    };
    let mut collapsed_to = None;
    let level_tol = 1e-12 * (1.0 + a.abs());
    loop {
        let cur_level = w.level();
        if cur_level - b <= cfg.event_tol.min(1e-12) {
            break;
        }
        let next = land
            .ladder
            .levels
            .iter()
            .find(|l| l.value < cur_level - level_tol && l.value >= b - level_tol);
        let Some(level) = next else {
            w.flow(cur_level - b)?;
            break;
        };
        let (c, eps) = (level.value, level.eps);
        if cur_level > c + eps {
            w.flow(cur_level - (c + eps))?;
        }
        if b > c + level_tol {
            let s = w.level() - b;
            w.flow(s)?;
            break;
        }
        let hit = if opts.no_handoff {
            None
        } else {
            w.canonicalize()?;
            handoff_member(land, &w.cur, c, cfg)
        };
        match hit {
            None => {
                let target = b.max(c - eps);
                let s = w.level() - target;
                w.flow(s)?;
                if b >= c - eps - level_tol {
                    break;
                }
            }
            Some((pos, z)) => {
                let chart = &land.charts[pos];
                let v = &land.points[pos];
                let k = chart.index;
                let zminus = z.rows(0, k).norm();
                let on_stable = zminus <= cfg.stuck_tol * chart.radius;
                let at_critical = (b - c).abs() <= level_tol;
                let s0 = a - w.level();
                let from = w.cur.clone();
                let znew = if at_critical {
                    if on_stable {
                        collapsed_to = Some(v.id.clone());
                        vec![0.0; z.len()]
                    } else {
                        standard_rescaled_to_zero(k, z.as_slice())
                    }
                } else {
                    if on_stable {
                        return Err(Error::StuckOnStableManifold { id: v.id.clone() });
                    }
                    let beta = (b - c).max(-eps);
                    standard_level_map(k, z.as_slice(), beta)
                        .ok_or_else(|| Error::StuckOnStableManifold { id: v.id.clone() })?
                };
                let dz = DVector::from_vec(znew.clone()) - &z;
                let jump = chart.push_vector(&dz);
                let pass_map = |p: &[f64]| -> Option<Vec<f64>> {
                    let zz = chart.to_chart(&sys.model, p);
                    let mapped = if at_critical {
                        standard_rescaled_to_zero(k, zz.as_slice())
                    } else {
                        standard_level_map(k, zz.as_slice(), (b - c).max(-eps))?
                    };
                    let d = chart.push_vector(&(DVector::from_vec(mapped) - &zz));
                    Some(p.iter().zip(d.iter()).map(|(a, b)| a + b).collect())
                };
                if let Some(f) = &w.frame {
                    w.frame = Some(pass_jacobian(&pass_map, &w.cur, f)?);
                }
                w.cur = w.cur.iter().zip(jump.iter()).map(|(p, d)| p + d).collect();
                let target = if at_critical { c } else { c + (b - c).max(-eps) };
                let s1 = a - target;
                w.pieces.push(Piece::Pass { s0, s1, id: v.id.clone(), from, to: w.cur.clone() });
                if collapsed_to.is_some() {
                    break;
                }
                // The chart is only approximately standard: settle onto the exact level.
                if !at_critical {
                    let s = w.level() - target;
                    w.flow(s)?;
                }
                if at_critical || b >= c - eps - level_tol {
                    break;
                }
            }
        }
    }
    Ok(Descent {
        dim: x.len(),
        start_level: a,
        pieces: w.pieces,
        end: w.cur,
        frame: w.frame,
        collapsed_to,
    })
}

fn pass_jacobian(
    map: &dyn Fn(&[f64]) -> Option<Vec<f64>>,
    p: &[f64],
    frame: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = p.len();
    let mut out = DMatrix::zeros(n, frame.ncols());
    for k in 0..frame.ncols() {
        let col = frame.column(k);
        let eta = 1e-7 / col.norm().max(1e-300);
        let plus: Vec<f64> = p.iter().zip(col.iter()).map(|(a, b)| a + eta * b).collect();
        let minus: Vec<f64> = p.iter().zip(col.iter()).map(|(a, b)| a - eta * b).collect();
        let (Some(mp), Some(mm)) = (map(&plus), map(&minus)) else {
            return Err(Error::SingularTransport { condition: f64::INFINITY });
        };
        for i in 0..n {
            out[(i, k)] = (mp[i] - mm[i]) / (2.0 * eta);
        }
    }
    Ok(out)
}

/// The critical point on level `c` whose handoff zone contains `p`, with
/// the chart coordinates of `p`.
pub fn handoff_member(
    land: &Landscape,
    p: &[f64],
    c: f64,
    cfg: &FlowConfig,
) -> Option<(usize, DVector<f64>)> {
    land.members_at(c).into_iter().find_map(|pos| {
        let chart = &land.charts[pos];
        let z = chart.to_chart(&land.sys.model, p);
        let k = chart.index;
        let zminus = z.rows(0, k).norm();
        (z.norm() <= chart.radius && zminus <= cfg.stop_radius * chart.radius).then_some((pos, z))
    })
}

/// Level transfer `L_a → L_b` (`b ≤ a = h(x)`), canonicalized.
pub fn level_transfer(land: &Landscape, x: &[f64], b: f64, cfg: &FlowConfig) -> Result<Vec<f64>> {
    let d = descend(land, x, b, &DescendOptions::default(), cfg)?;
    land.sys.model.canonicalize(&d.end)
}

/// Value of `h_k` at chart coordinates (re-exported for tests and demos).
pub fn model_level(k: usize, z: &[f64]) -> f64 {
    standard_h(k, &DVector::from_column_slice(z))
}

/// Level transfer upward (`b ≥ h(x)`) by the reverse rescaled flow, with no
/// critical value in between.
pub fn ascend(sys: &MorseSystem, x: &[f64], b: f64, cfg: &FlowConfig) -> Result<Vec<f64>> {
    let a = sys.h(x);
    Ok(integrate_y(sys, x, None, a - b, cfg)?.y_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldModel;
    use crate::morse::{CosSum, MorseConfig, StandardQuadratic};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn standard(n: usize, k: usize) -> MorseSystem {
        MorseSystem::new(
            ManifoldModel::standard(n, k).unwrap(),
            Arc::new(StandardQuadratic { dim: n, index: k }),
        )
    }

    fn torus() -> Landscape {
        let sys = MorseSystem::new(
            ManifoldModel::flat_torus(vec![2.0 * PI, 2.0 * PI]).unwrap(),
            Arc::new(CosSum { amplitudes: vec![1.0, 1.0] }),
        );
        Landscape::analyze(sys, 8, &MorseConfig::default()).unwrap()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn standard_flow_examples() {
        let cfg = FlowConfig::default();
        let sys = standard(2, 1);
        let p = flow_x(&sys, &[1.0, 1.0], 2f64.ln(), &cfg).unwrap();
        assert!(dist(&p, &[2.0, 0.5]) < 1e-9);
        assert_eq!(flow_x(&sys, &[0.3, 0.4], 0.0, &cfg).unwrap(), vec![0.3, 0.4]);
        let y = flow_y(&sys, &[0.0, 2f64.sqrt()], 0.5, &cfg).unwrap();
        assert!(dist(&y, &[0.0, 1.0]) < 1e-9);
        let closed = standard_flow_y(1, &[0.0, 2f64.sqrt()], 0.5).unwrap();
        assert!(dist(&closed, &[0.0, 1.0]) < 1e-14);
        assert_eq!(flow_y(&sys, &[0.3, 0.4], 0.0, &cfg).unwrap(), vec![0.3, 0.4]);
    }

    #[test]
    fn rescaled_to_zero_examples() {
        let z = standard_rescaled_to_zero(1, &[1.0, 4.0]);
        assert!(dist(&z, &[2.0, 2.0]) < 1e-14);
        assert_eq!(standard_rescaled_to_zero(1, &[0.0, 3.0]), vec![0.0, 0.0]);
        let same = standard_rescaled_to_zero(1, &[2.0, 2.0]);
        assert!(dist(&same, &[2.0, 2.0]) < 1e-14);
    }

    #[test]
    fn closed_form_rescaled_flow_has_unit_speed() {
        for z in [[0.5, 1.5], [-0.2, 0.9], [1.0, 0.1]] {
            for s in [0.1, 0.3, -0.4] {
                if let Some(y) = standard_flow_y(1, &z, s) {
                    let dh = model_level(1, &z) - model_level(1, &y);
                    assert!((dh - s).abs() < 1e-13, "{z:?} {s}");
                }
            }
        }
    }

    #[test]
    fn torus_flow_decreases_h() {
        let land = torus();
        let cfg = FlowConfig::default();
        let start = [0.1, PI];
        let p = flow_x(&land.sys, &start, 1.0, &cfg).unwrap();
        assert!(land.sys.h(&p) < land.sys.h(&start));
        // Separable: x' = sin x along y = π.
        let exact = 2.0 * ((0.05f64).tan() * 1f64.exp()).atan();
        assert!((p[0] - exact).abs() < 1e-9);
        let y = flow_y(&land.sys, &[0.8, 1.2], 0.5, &cfg).unwrap();
        assert!((land.sys.h(&y) - (land.sys.h(&[0.8, 1.2]) - 0.5)).abs() < 1e-8);
    }

    #[test]
    fn group_law() {
        let land = torus();
        let cfg = FlowConfig::default();
        let x = [0.4, 2.0];
        let a = flow_x(&land.sys, &x, 0.7, &cfg).unwrap();
        let b = flow_x(&land.sys, &flow_x(&land.sys, &x, 0.3, &cfg).unwrap(), 0.4, &cfg).unwrap();
        assert!(dist(&a, &b) < 10.0 * cfg.abs_tol);
    }

    #[test]
    fn level_transfer_to_minimum_neighbourhood() {
        let land = torus();
        let cfg = FlowConfig::default();
        let x = [0.3, PI];
        let p = level_transfer(&land, &x, -2.0 + 1e-3, &cfg).unwrap();
        assert!(dist(&p, &[PI, PI]) < 0.08);
        assert!((land.sys.h(&p) + 2.0 - 1e-3).abs() < 1e-8);
        assert_eq!(level_transfer(&land, &x, land.sys.h(&x), &cfg).unwrap(), land.sys.model.canonicalize(&x).unwrap());
    }

    #[test]
    fn stable_manifold_point_gets_stuck() {
        let land = torus();
        let r = level_transfer(&land, &[0.0, PI - 0.2], -1.0, &FlowConfig::default());
        assert!(matches!(r, Err(Error::StuckOnStableManifold { .. })), "{r:?}");
    }

    #[test]
    fn continuous_extension_sends_stable_points_to_the_saddle() {
        let land = torus();
        let cfg = FlowConfig::default();
        let d = descend(&land, &[0.0, PI - 0.2], 0.0, &DescendOptions::default(), &cfg).unwrap();
        assert_eq!(d.collapsed_to.as_deref(), Some("c1_0"));
        let p = land.sys.model.canonicalize(&d.end).unwrap();
        assert!(dist(&p, &[0.0, PI]) < 1e-12);
    }

    #[test]
    fn reversibility_between_critical_levels() {
        let land = torus();
        let cfg = FlowConfig::default();
        let x = [0.7, 1.1];
        let a = land.sys.h(&x);
        let b = a - 0.4;
        let down = level_transfer(&land, &x, b, &cfg).unwrap();
        let up = ascend(&land.sys, &down, a, &cfg).unwrap();
        assert!(dist(&land.sys.model.canonicalize(&up).unwrap(), &x) < 1e-6);
    }

    #[test]
    fn passes_through_a_saddle_chart() {
        let land = torus();
        let cfg = FlowConfig::default();
        // Close to the stable manifold x = 0 of the saddle (0, π).
        let x = [1e-3, PI - 0.6];
        let d = descend(&land, &x, -1.0, &DescendOptions::default(), &cfg).unwrap();
        assert!(d.pieces.iter().any(|p| matches!(p, Piece::Pass { .. })));
        assert!((land.sys.h(&d.end) + 1.0).abs() < 1e-9);
        // Compare against straight integration.
        let straight = descend(&land, &x, -1.0, &DescendOptions { no_handoff: true, ..Default::default() }, &cfg).unwrap();
        let e1 = land.sys.model.canonicalize(&d.end).unwrap();
        let e2 = land.sys.model.canonicalize(&straight.end).unwrap();
        assert!(dist(&e1, &e2) < 5e-2, "{e1:?} {e2:?}");
    }

    #[test]
    fn reparametrized_time_matches_gradient_flow() {
        let land = torus();
        let cfg = FlowConfig::default();
        let x = [0.9, 0.4];
        let s = 0.6;
        let tau = reparam_time(&land.sys, &x, s, &cfg).unwrap();
        let a = flow_x(&land.sys, &x, tau, &cfg).unwrap();
        let b = flow_y(&land.sys, &x, s, &cfg).unwrap();
        assert!(dist(&a, &b) < 1e-6);
    }
}
