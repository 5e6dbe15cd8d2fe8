//! Differential forms on the surface scenarios, their integrals over
//! unstable manifolds, the integration map `Int` and the Stokes identity
//! `Int ∘ d = δ ∘ Int`.

use std::f64::consts::PI;
use std::fmt;
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex::GeometricComplex;
use crate::connections::{descend_from, unstable_seed, ConnectionConfig, ConnectionDb};
use crate::flow::{descend, DescendOptions, Descent};
use crate::geometry::{Embedding, ModelKind};
use crate::morse::Landscape;
use crate::quadrature::{composite_rule, graded_rule, KahanSum};
use crate::{Error, Result};

type Eval = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A form of degree 0, 1 or 2 in canonical coordinates. Coefficients are
/// ordered by increasing index tuples: `[f]`, `[a_1, …, a_n]`, and
/// `[c_{12}, c_{13}, …]` for `Σ_{i<j} c_{ij} dx_i ∧ dx_j`.
#[derive(Clone)]
pub struct DifferentialForm {
    pub name: String,
    pub degree: usize,
    pub dim: usize,
    coeff: Eval,
    d_coeff: Option<Eval>,
    fd_step: f64,
}

impl fmt::Debug for DifferentialForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DifferentialForm")
            .field("name", &self.name)
            .field("degree", &self.degree)
            .field("dim", &self.dim)
            .field("analytic_d", &self.d_coeff.is_some())
            .finish()
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

fn coefficient_count(degree: usize, n: usize) -> usize {
    match degree {
        0 => 1,
        1 => n,
        2 => n * n.saturating_sub(1) / 2,
        _ => 0,
    }
}

impl DifferentialForm {
    pub fn new(
        name: &str,
        degree: usize,
        dim: usize,
        coeff: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        d_coeff: Option<Eval>,
    ) -> Result<Self> {
        if degree > 2 || degree > dim {
            return Err(Error::Precondition(format!("unsupported form degree {degree} in dimension {dim}")));
        }
        Ok(Self { name: name.into(), degree, dim, coeff: Arc::new(coeff), d_coeff, fd_step: DEFAULT_FD_STEP })
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        self.fd_step = step;
        self
    }

    pub fn zero(degree: usize, dim: usize) -> Self {
        let k = coefficient_count(degree, dim);
        let dk = coefficient_count(degree + 1, dim);
        Self {
            name: "zero".into(),
            degree,
            dim,
            coeff: Arc::new(move |_| vec![0.0; k]),
            d_coeff: Some(Arc::new(move |_| vec![0.0; dk])),
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn coefficients(&self, p: &[f64]) -> Vec<f64> {
        (self.coeff)(p)
    }

    pub fn has_analytic_d(&self) -> bool {
        self.d_coeff.is_some()
    }

    /// Coefficients of `dω` by central differences.
    pub fn fd_derivative(&self, p: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let h = self.fd_step;
        let partial = |i: usize| -> Vec<f64> {
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[i] += h;
            b[i] -= h;
            let (fa, fb) = ((self.coeff)(&a), (self.coeff)(&b));
            fa.iter().zip(&fb).map(|(x, y)| (x - y) / (2.0 * h)).collect()
        };
        match self.degree {
            0 => (0..n).map(|i| partial(i)[0]).collect(),
            1 => {
                let parts: Vec<Vec<f64>> = (0..n).map(partial).collect();
                pairs(n).into_iter().map(|(i, j)| parts[i][j] - parts[j][i]).collect()
            }
            _ => {
                // Only the surface case is needed: a 2-form in dimension 2 is closed.
                vec![0.0; coefficient_count(self.degree + 1, n)]
            }
        }
    }

    pub fn derivative_at(&self, p: &[f64]) -> Vec<f64> {
        match &self.d_coeff {
            Some(d) => d(p),
            None => self.fd_derivative(p),
        }
    }

    /// `dω`, with its own exterior derivative by finite differences.
    pub fn d(&self) -> DifferentialForm {
        let me = self.clone();
        DifferentialForm {
            name: format!("d({})", self.name),
            degree: self.degree + 1,
            dim: self.dim,
            coeff: Arc::new(move |p| me.derivative_at(p)),
            d_coeff: None,
            fd_step: self.fd_step,
        }
    }

    /// Evaluate on `degree` tangent vectors at `p`.
    pub fn apply(&self, p: &[f64], vectors: &[DVector<f64>]) -> f64 {
        let c = (self.coeff)(p);
        match self.degree {
            0 => c[0],
            1 => c.iter().zip(vectors[0].iter()).map(|(a, v)| a * v).sum(),
            _ => pairs(self.dim)
                .into_iter()
                .zip(&c)
                .map(|((i, j), cij)| cij * (vectors[0][i] * vectors[1][j] - vectors[0][j] * vectors[1][i]))
                .sum(),
        }
    }
}

/// Form on a flat 2-torus given by coefficient closures.
fn torus_form(
    name: &str,
    degree: usize,
    c: impl Fn(f64, f64) -> Vec<f64> + Send + Sync + 'static,
    d: impl Fn(f64, f64) -> Vec<f64> + Send + Sync + 'static,
) -> DifferentialForm {
    DifferentialForm::new(name, degree, 2, move |p| c(p[0], p[1]), Some(Arc::new(move |p: &[f64]| d(p[0], p[1]))))
        .expect("valid torus form")
}

/// Forms on a flat 2-torus with periods `2π`, by name.
pub fn torus_form_by_name(name: &str) -> Option<DifferentialForm> {
    let tau = 2.0 * PI;
    Some(match name {
        "sin_x" => torus_form(name, 0, |x, _| vec![x.sin()], |x, _| vec![x.cos(), 0.0]),
        "cos_x_cos_2y" => torus_form(
            name,
            0,
            |x, y| vec![x.cos() * (2.0 * y).cos()],
            |x, y| vec![-x.sin() * (2.0 * y).cos(), -2.0 * x.cos() * (2.0 * y).sin()],
        ),
        "sin_y_dx" => torus_form(name, 1, |_, y| vec![y.sin(), 0.0], |_, y| vec![-y.cos()]),
        "cos_x_dy" => torus_form(name, 1, |x, _| vec![0.0, x.cos()], |x, _| vec![-x.sin()]),
        "mixed_1form" => torus_form(
            name,
            1,
            |x, y| vec![(x + y).cos(), (2.0 * x).sin() + 0.5],
            |x, y| vec![2.0 * (2.0 * x).cos() + (x + y).sin()],
        ),
        "dx_over_2pi" => torus_form(name, 1, move |_, _| vec![1.0 / tau, 0.0], |_, _| vec![0.0]),
        "dy_over_2pi" => torus_form(name, 1, move |_, _| vec![0.0, 1.0 / tau], |_, _| vec![0.0]),
        "area" => torus_form(name, 2, move |_, _| vec![1.0 / (tau * tau)], |_, _| vec![]),
        _ => return None,
    })
}

type Ambient3 = fn(&Vector3<f64>) -> Vector3<f64>;

/// Pull back the ambient function `F` (with gradient `∇F`).
fn ambient_function(
    name: &str,
    emb: Arc<dyn Embedding>,
    f: fn(&Vector3<f64>) -> f64,
    grad: Ambient3,
) -> DifferentialForm {
    let e2 = emb.clone();
    DifferentialForm::new(
        name,
        0,
        2,
        move |p| vec![f(&emb.point(p))],
        Some(Arc::new(move |p: &[f64]| {
            let g = grad(&e2.point(p));
            let [xu, xv] = e2.partials(p);
            vec![g.dot(&xu), g.dot(&xv)]
        })),
    )
    .expect("valid ambient function")
}

/// Pull back the ambient 1-form `P · dX` (with `curl P`).
fn ambient_one_form(name: &str, emb: Arc<dyn Embedding>, field: Ambient3, curl: Ambient3) -> DifferentialForm {
    let e2 = emb.clone();
    DifferentialForm::new(
        name,
        1,
        2,
        move |p| {
            let v = field(&emb.point(p));
            let [xu, xv] = emb.partials(p);
            vec![v.dot(&xu), v.dot(&xv)]
        },
        Some(Arc::new(move |p: &[f64]| {
            let c = curl(&e2.point(p));
            let [xu, xv] = e2.partials(p);
            vec![c.dot(&xu.cross(&xv))]
        })),
    )
    .expect("valid ambient 1-form")
}

/// Pull back the flux 2-form of the ambient field `B`: `B · (X_u × X_v) du∧dv`.
fn ambient_flux(name: &str, emb: Arc<dyn Embedding>, field: Ambient3) -> DifferentialForm {
    DifferentialForm::new(
        name,
        2,
        2,
        move |p| {
            let b = field(&emb.point(p));
            let [xu, xv] = emb.partials(p);
            vec![b.dot(&xu.cross(&xv))]
        },
        Some(Arc::new(|_: &[f64]| vec![])),
    )
    .expect("valid flux form")
}

/// Forms pulled back from ambient expressions on an embedded surface.
pub fn ambient_form_by_name(name: &str, emb: Arc<dyn Embedding>) -> Option<DifferentialForm> {
    Some(match name {
        "ambient_x" => ambient_function(name, emb, |x| x[0], |_| Vector3::new(1.0, 0.0, 0.0)),
        "ambient_yz" => ambient_function(
            name,
            emb,
            |x| x[1] * x[2] + 0.5 * x[0] * x[0],
            |x| Vector3::new(x[0], x[2], x[1]),
        ),
        "ambient_z_dx" => ambient_one_form(name, emb, |x| Vector3::new(x[2], 0.0, 0.0), |_| Vector3::new(0.0, 1.0, 0.0)),
        "ambient_rot" => ambient_one_form(name, emb, |x| Vector3::new(-x[1], x[0], 0.0), |_| Vector3::new(0.0, 0.0, 2.0)),
        "ambient_mixed" => ambient_one_form(
            name,
            emb,
            |x| Vector3::new(x[1] * x[1], x[0] * x[2], x[0] + x[1]),
            |x| Vector3::new(1.0 - x[0], -1.0, x[2] - 2.0 * x[1]),
        ),
        "radial_flux" => ambient_flux(name, emb, |x| x / (4.0 * PI * x.norm().powi(3))),
        _ => return None,
    })
}

/// Named form for a landscape's model.
pub fn form_by_name(land: &Landscape, name: &str) -> Result<DifferentialForm> {
    let found = match land.sys.model.kind() {
        ModelKind::FlatTorus { periods } if periods.len() == 2 => torus_form_by_name(name),
        ModelKind::EmbeddedSurface { embedding } => ambient_form_by_name(name, embedding.clone()),
        _ => None,
    };
    found.ok_or_else(|| Error::InvalidScenario(format!("unknown form {name} for this model")))
}

/// The five-form battery (degrees 0 and 1) used by the chain-map check.
pub fn battery_names(land: &Landscape) -> Vec<&'static str> {
    match land.sys.model.kind() {
        ModelKind::FlatTorus { .. } => vec!["sin_x", "cos_x_cos_2y", "sin_y_dx", "cos_x_dy", "mixed_1form"],
        ModelKind::EmbeddedSurface { .. } => vec!["ambient_x", "ambient_yz", "ambient_z_dx", "ambient_rot", "ambient_mixed"],
        ModelKind::StandardModel { .. } => vec![],
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DerhamConfig {
    /// Quadrature nodes along each parameter axis of an unstable manifold
    /// (directions on `S⁻_v`, and levels), shared among the subintervals cut
    /// at connection directions and critical levels.
    pub resolution: usize,
    /// Integration stops this far above the terminal critical level; the
    /// remainder is closed by a straight segment or neglected (area `O(η)`).
    pub eta_tail: f64,
    /// Compare against half and quarter resolution.
    pub check_convergence: bool,
}

impl Default for DerhamConfig {
    fn default() -> Self {
        Self { resolution: 256, eta_tail: 1e-10, check_convergence: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Integral {
    pub value: f64,
    pub error_estimate: f64,
}

/// One weighted evaluation `weight · ω_p(vectors)`.
#[derive(Debug, Clone)]
pub struct Node {
    pub point: Vec<f64>,
    pub vectors: Vec<DVector<f64>>,
    pub weight: f64,
}

/// A quadrature rule on `W⁻_v` that integrates any form of top degree.
#[derive(Debug, Clone)]
pub struct UnstableQuadrature {
    pub id: String,
    pub index: usize,
    pub resolution: usize,
    pub nodes: Vec<Node>,
}

impl UnstableQuadrature {
    pub fn integrate(&self, form: &DifferentialForm) -> Result<f64> {
        if form.degree != self.index {
            return Err(Error::NotTopDegree { degree: form.degree, index: self.index });
        }
        let mut sum = KahanSum::default();
        for node in &self.nodes {
            sum.add(node.weight * form.apply(&node.point, &node.vectors));
        }
        Ok(sum.value())
    }
}

/// Distance in `θ` from a connection root below which columns are not
/// traced (they graze the saddle) but interpolated.
const ROOT_GUARD: f64 = 1e-6;

/// Closest approach, relative to the level scale, of the logarithmic level
/// rule to an interior critical level.
const LOG_RULE_DEPTH: f64 = 1e-15;

/// Nodes per subinterval when `total` nodes are shared by `parts` pieces.
fn share(total: usize, parts: usize) -> usize {
    (total / parts.max(1)).div_ceil(8).max(1) * 8
}

/// Build the quadrature for `W⁻_v` at the given resolution.
pub fn unstable_quadrature(
    land: &Landscape,
    db: &ConnectionDb,
    id: &str,
    resolution: usize,
    eta: f64,
    ccfg: &ConnectionConfig,
) -> Result<UnstableQuadrature> {
    let pos = land.position(id).ok_or_else(|| Error::Precondition(format!("unknown critical point {id}")))?;
    let v = &land.points[pos];
    let nodes = match v.index {
        0 => vec![Node { point: v.coords.clone(), vectors: Vec::new(), weight: 1.0 }],
        1 => line_nodes(land, pos, resolution, eta, ccfg)?,
        2 => surface_nodes(land, db, pos, resolution, eta, ccfg)?,
        k => {
            return Err(Error::Precondition(format!(
                "integration over {k}-dimensional unstable manifolds is not supported"
            )))
        }
    };
    Ok(UnstableQuadrature { id: id.to_string(), index: v.index, resolution, nodes })
}

/// Index of the critical point where the trajectory from `v` in direction
/// `u` ends.
fn terminal_point(land: &Landscape, pos: usize, u: &DVector<f64>, ccfg: &ConnectionConfig) -> Result<usize> {
    let bottom = land.ladder.levels.last().map_or(f64::NEG_INFINITY, |l| l.value);
    let (seed, _) = unstable_seed(land, pos, u, ccfg)?;
    match descend(land, &seed, bottom, &DescendOptions::default(), &ccfg.flow) {
        Ok(d) => d
            .collapsed_to
            .and_then(|id| land.position(&id))
            .ok_or_else(|| Error::Precondition("descent did not reach a minimum".into())),
        Err(Error::StuckOnStableManifold { id }) => {
            land.position(&id).ok_or_else(|| Error::Precondition(format!("unknown critical point {id}")))
        }
        Err(e) => Err(e),
    }
}

/// Level breakpoints strictly inside `(lo, hi)` plus the endpoints.
fn level_breaks(land: &Landscape, lo: f64, hi: f64) -> Vec<f64> {
    let mut b = vec![lo];
    for l in land.ladder.levels.iter().rev() {
        if l.value > lo + 1e-12 && l.value < hi - 1e-12 {
            b.push(l.value);
        }
    }
    b.push(hi);
    b
}

/// Quadrature on `[lo, hi]` split at critical levels. Next to the terminal
/// level `floor` and the source level `ceiling` the integrand behaves like a
/// power of `√|c − c_crit|`, so those end intervals are integrated in that
/// variable instead.
fn level_rule(land: &Landscape, lo: f64, hi: f64, floor: f64, ceiling: f64, total: usize) -> Vec<(f64, f64)> {
    let mut breaks = level_breaks(land, lo, hi);
    if breaks.len() == 2 {
        breaks.insert(1, 0.5 * (lo + hi));
    }
    let last = breaks.len() - 2;
    let n = share(total, last + 1);
    let mut rule = Vec::new();
    for (i, w) in breaks.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        if i == last {
            let (sa, sb) = ((ceiling - b).max(0.0).sqrt(), (ceiling - a).sqrt());
            rule.extend(graded_rule(sa, sb, n).into_iter().map(|(s, ws)| (ceiling - s * s, 2.0 * s * ws)));
        } else if i == 0 {
            let (sa, sb) = ((a - floor).max(0.0).sqrt(), (b - floor).sqrt());
            rule.extend(graded_rule(sa, sb, n).into_iter().map(|(s, ws)| (floor + s * s, 2.0 * s * ws)));
        } else {
            rule.extend(graded_rule(a, b, n));
        }
    }
    rule
}

/// Point of the descent on level `c`, with the dense-output level error
/// removed by Newton steps along `Y` (near a minimum the integrand is very
/// sensitive to the level, much less to the transverse position).
fn on_level(land: &Landscape, d: &Descent, c: f64) -> Result<(Vec<f64>, Option<nalgebra::DMatrix<f64>>)> {
    let (p, frame) = d.at_level(c).ok_or_else(|| Error::Precondition(format!("no trajectory point at level {c}")))?;
    Ok((snap_to_level(land, p, c), frame))
}

fn snap_to_level(land: &Landscape, mut p: Vec<f64>, c: f64) -> Vec<f64> {
    for _ in 0..3 {
        let gap = land.sys.h(&p) - c;
        if gap.abs() < 1e-15 {
            break;
        }
        let y = land.sys.field_y(&p);
        p.iter_mut().zip(y.iter()).for_each(|(x, yi)| *x += gap * yi);
    }
    p
}

/// Level quadrature for the columns of a two-dimensional cell on
/// `[lo, hi]`. Each stretch between consecutive critical levels is split in
/// half and each half is integrated in `log |c − c_crit|` towards its
/// critical end. Next to a saddle level a column passing at distance `Δ`
/// from the saddle has an integrand like `1/√((c − c_s)² + Δ²)`, smooth in
/// that variable; at the source and terminal levels the integrand is a
/// power of `|c − c_crit|`, smooth as well.
fn log_level_rule(land: &Landscape, lo: f64, hi: f64, floor: f64, ceiling: f64, total: usize) -> Vec<(f64, f64)> {
    let breaks = level_breaks(land, lo, hi);
    let halves = 2 * (breaks.len() - 1);
    let n = share(total, halves);
    let mut rule = Vec::new();
    for (i, w) in breaks.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let below = if i == 0 { floor } else { a };
        let above = if i == breaks.len() - 2 { ceiling } else { b };
        let tiny = LOG_RULE_DEPTH * (1.0 + below.abs());
        rule.extend(log_rule((a - below).max(tiny), mid - below, n).into_iter().map(|(x, wx)| (below + x, wx)));
        let tiny = LOG_RULE_DEPTH * (1.0 + above.abs());
        rule.extend(log_rule((above - b).max(tiny), above - mid, n).into_iter().map(|(x, wx)| (above - x, wx)));
    }
    rule
}

/// Midpoint rule over a full turn, spectrally accurate for the smooth
/// periodic column integral when no trajectory splits the circle.
fn periodic_rule(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let h = (b - a) / n as f64;
    (0..n).map(|j| (a + (j as f64 + 0.5) * h, h)).collect()
}

/// `θ`-rule on an interval between two connection roots. A column at
/// distance `Δ` from a root passes the saddle at distance `∝ Δ`, and its
/// integral behaves like `A + B ln Δ`. Graded nodes closer than
/// [`ROOT_GUARD`] are replaced by the log-linear interpolation through the
/// columns at `ROOT_GUARD` and `10 · ROOT_GUARD`, exact for that behaviour.
fn root_rule(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut near = [(0.0, 0.0); 2];
    let rg = ROOT_GUARD;
    for (t, w) in graded_rule(a, b, n) {
        let (side, dist) = if t - a < b - t { (0, t - a) } else { (1, b - t) };
        if dist >= rg {
            out.push((t, w));
            continue;
        }
        let lambda = (dist.max(f64::MIN_POSITIVE) / rg).log10();
        near[side].0 += w * (1.0 - lambda);
        near[side].1 += w * lambda;
    }
    for (side, (end, sign)) in [(a, 1.0), (b, -1.0)].into_iter().enumerate() {
        let (w_near, w_far) = near[side];
        if w_near != 0.0 || w_far != 0.0 {
            out.push((end + sign * rg, w_near));
            out.push((end + sign * 10.0 * rg, w_far));
        }
    }
    out
}

/// Gauss rule for `∫ f(x) dx` on `[x0, x1]`, `0 < x0 < x1`, in `ln x`.
fn log_rule(x0: f64, x1: f64, n: usize) -> Vec<(f64, f64)> {
    composite_rule(x0.ln(), x1.ln(), (n / 8).max(1), 8.min(n))
        .into_iter()
        .map(|(u, w)| (u.exp(), u.exp() * w))
        .collect()
}

fn straight_descent(land: &Landscape, pos: usize, u: &DVector<f64>, to: f64, frame: bool, ccfg: &ConnectionConfig) -> Result<Descent> {
    descend_from(land, pos, u, to, frame, true, ccfg)
}

/// Both branches of a one-dimensional `W⁻_v`: straight segments at the two
/// ends and Gauss nodes on `ω(Y) dc` in between. The branch leaving along
/// `+O⁻_v` counts positively.
fn line_nodes(land: &Landscape, pos: usize, resolution: usize, eta: f64, ccfg: &ConnectionConfig) -> Result<Vec<Node>> {
    let sys = &land.sys;
    let v = &land.points[pos];
    let mut nodes = Vec::new();
    for orientation in [1.0, -1.0] {
        let u = DVector::from_element(1, orientation);
        let term = terminal_point(land, pos, &u, ccfg)?;
        let w = &land.points[term];
        let (seed, _) = unstable_seed(land, pos, &u, ccfg)?;
        let top = sys.h(&seed);
        let bottom = w.value + eta;
        let d = straight_descent(land, pos, &u, bottom, false, ccfg)?;
        nodes.push(segment(&v.coords, &seed, orientation));
        for (c, wgt) in level_rule(land, bottom, top, w.value, v.value, resolution) {
            let (p, _) = on_level(land, &d, c)?;
            let y = sys.field_y(&p);
            nodes.push(Node { point: p, vectors: vec![y], weight: orientation * wgt });
        }
        let (end, _) = on_level(land, &d, bottom)?;
        let gap = sys.model.displacement(&end, &w.coords);
        let to: Vec<f64> = end.iter().zip(gap.iter()).map(|(a, g)| a + g).collect();
        nodes.push(segment(&end, &to, orientation));
    }
    Ok(nodes)
}

/// Midpoint node for the straight segment `a → b`.
fn segment(a: &[f64], b: &[f64], weight: f64) -> Node {
    let mid = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    let step = DVector::from_iterator(a.len(), b.iter().zip(a).map(|(y, x)| y - x));
    Node { point: mid, vectors: vec![step], weight }
}

/// A two-dimensional `W⁻_v` parametrized by direction `θ` on `S⁻_v` and
/// level `c`: `∂_θ` is the transported unstable frame applied to
/// `δ(−sin θ, cos θ)`, `∂_c = −Y`, and `(θ, c)` is positively oriented for
/// `O⁻_v`. The cap above the seed level is the chart disk of radius `δ`.
fn surface_nodes(
    land: &Landscape,
    db: &ConnectionDb,
    pos: usize,
    resolution: usize,
    eta: f64,
    ccfg: &ConnectionConfig,
) -> Result<Vec<Node>> {
    let v = &land.points[pos];
    let chart = &land.charts[pos];
    let delta = ccfg.seed_radius * chart.radius;
    // θ-breakpoints: directions of the trajectories to index-1 points.
    let mut roots: Vec<f64> = db
        .pairs
        .iter()
        .filter(|p| p.from == v.id)
        .flat_map(|p| p.trajectories.iter().filter_map(|t| t.theta))
        .collect();
    roots.sort_by(f64::total_cmp);
    let intervals: Vec<(f64, f64)> = if roots.is_empty() {
        vec![(0.0, 2.0 * PI)]
    } else {
        (0..roots.len())
            .map(|i| (roots[i], if i + 1 < roots.len() { roots[i + 1] } else { roots[0] + 2.0 * PI }))
            .collect()
    };
    let n_theta = share(resolution, intervals.len());
    let top = v.value - 0.5 * delta * delta;
    let mut nodes = Vec::new();
    for (a, b) in intervals {
        let mid = 0.5 * (a + b);
        let term = terminal_point(land, pos, &DVector::from_vec(vec![mid.cos(), mid.sin()]), ccfg)?;
        let floor = land.points[term].value;
        let bottom = floor + eta;
        let crule = log_level_rule(land, bottom, top, floor, v.value, resolution);
        let thetas = if roots.is_empty() { periodic_rule(a, b, n_theta) } else { root_rule(a, b, n_theta) };
        let columns: Vec<Vec<Node>> = thetas
            .par_iter()
            .map(|(theta, wt)| column_nodes(land, pos, *theta, *wt, &crule, bottom, ccfg))
            .collect::<Result<_>>()?;
        nodes.extend(columns.into_iter().flatten());
    }
    let e1 = chart.frame.column(0).into_owned();
    let e2 = chart.frame.column(1).into_owned();
    nodes.push(Node { point: v.coords.clone(), vectors: vec![e1, e2], weight: PI * delta * delta });
    Ok(nodes)
}

/// Nodes on the descent leaving `v` in direction `θ`, down to `bottom`,
/// carrying the `θ`-weight `wt`.
fn column_nodes(
    land: &Landscape,
    pos: usize,
    theta: f64,
    wt: f64,
    crule: &[(f64, f64)],
    bottom: f64,
    ccfg: &ConnectionConfig,
) -> Result<Vec<Node>> {
    let delta = ccfg.seed_radius * land.charts[pos].radius;
    let u = DVector::from_vec(vec![theta.cos(), theta.sin()]);
    let d = straight_descent(land, pos, &u, bottom, true, ccfg)?;
    let dir = DVector::from_vec(vec![-theta.sin() * delta, theta.cos() * delta]);
    crule
        .iter()
        .map(|(c, wc)| {
            let (p, frame) = on_level(land, &d, *c)?;
            let frame = frame.ok_or(Error::SingularTransport { condition: f64::INFINITY })?;
            let d_theta = &frame * &dir;
            let d_c = -land.sys.field_y(&p);
            Ok(Node { point: p, vectors: vec![d_theta, d_c], weight: wt * wc })
        })
        .collect()
}

/// Integrals over unstable manifolds with quadratures cached per critical
/// point and resolution, so a battery of forms shares the trajectory work.
pub struct DerhamContext<'a> {
    pub land: &'a Landscape,
    pub db: &'a ConnectionDb,
    pub config: DerhamConfig,
    pub connection: ConnectionConfig,
    cache: Mutex<BTreeMap<(String, usize), Arc<UnstableQuadrature>>>,
}

impl<'a> DerhamContext<'a> {
    pub fn new(land: &'a Landscape, db: &'a ConnectionDb, config: DerhamConfig, connection: ConnectionConfig) -> Self {
        Self { land, db, config, connection, cache: Mutex::new(BTreeMap::new()) }
    }

    pub fn quadrature(&self, id: &str, resolution: usize) -> Result<Arc<UnstableQuadrature>> {
        let key = (id.to_string(), resolution);
        if let Some(q) = self.cache.lock().expect("quadrature cache").get(&key) {
            return Ok(q.clone());
        }
        let q = Arc::new(unstable_quadrature(self.land, self.db, id, resolution, self.config.eta_tail, &self.connection)?);
        self.cache.lock().expect("quadrature cache").insert(key, q.clone());
        Ok(q)
    }

    /// `∫_{W⁻_v} ω` at the configured resolution.
    pub fn integrate(&self, id: &str, form: &DifferentialForm) -> Result<Integral> {
        self.integrate_at(id, form, self.config.resolution)
    }

    /// `∫_{W⁻_v} ω` at resolution `n`, with the change from `n/2` as error
    /// estimate. When the refinement changes the value by more than ten
    /// times the previous change the rule is not in its convergent regime.
    pub fn integrate_at(&self, id: &str, form: &DifferentialForm, n: usize) -> Result<Integral> {
        let index = self.land.point(id).map(|p| p.index);
        if let Some(index) = index {
            if form.degree != index {
                return Err(Error::NotTopDegree { degree: form.degree, index });
            }
            if index == 0 {
                return Ok(Integral { value: self.quadrature(id, 1)?.integrate(form)?, error_estimate: 0.0 });
            }
        }
        let full = self.quadrature(id, n)?.integrate(form)?;
        let half = self.quadrature(id, (n / 2).max(8))?.integrate(form)?;
        let estimate = (full - half).abs();
        if self.config.check_convergence {
            let quarter = self.quadrature(id, (n / 4).max(8))?.integrate(form)?;
            let previous = (half - quarter).abs();
            let floor = 1e-9 * (1.0 + full.abs());
            if estimate > 10.0 * previous + floor {
                return Err(Error::NonConvergent { value: half, refined: full, estimate: previous });
            }
        }
        Ok(Integral { value: full, error_estimate: estimate })
    }

    /// `Int(ω)`: one integral per generator of `X_q`, `q = deg ω`.
    pub fn int_map(&self, complex: &GeometricComplex, form: &DifferentialForm, n: usize) -> Result<Vec<Integral>> {
        let Some(gens) = complex.generators.get(form.degree) else { return Ok(Vec::new()) };
        gens.iter().map(|id| self.integrate_at(id, form, n)).collect()
    }

    /// `max_v |Int(dω)(v) − (δ^q Int(ω))(v)|` over `v ∈ X_{q+1}`.
    pub fn chain_map_residual(&self, complex: &GeometricComplex, form: &DifferentialForm, n: usize) -> Result<ChainMapCheck> {
        let q = form.degree;
        if q + 1 > complex.top_degree() {
            return Err(Error::Precondition(format!(
                "degree {q} has no coboundary on a {}-manifold",
                complex.top_degree()
            )));
        }
        let lower = self.int_map(complex, form, n)?;
        let upper = self.int_map(complex, &form.d(), n)?;
        let delta = complex.differential(q);
        let mut residual: f64 = 0.0;
        let mut err: f64 = 0.0;
        let mut rhs = Vec::with_capacity(upper.len());
        for (row, up) in delta.iter().zip(&upper) {
            let r: f64 = row.iter().zip(&lower).map(|(i, x)| *i as f64 * x.value).sum();
            let e: f64 = row.iter().zip(&lower).map(|(i, x)| (*i as f64).abs() * x.error_estimate).sum();
            residual = residual.max((up.value - r).abs());
            err = err.max(up.error_estimate + e);
            rhs.push(r);
        }
        Ok(ChainMapCheck {
            form: form.name.clone(),
            degree: q,
            resolution: n,
            lhs: upper.iter().map(|x| x.value).collect(),
            rhs,
            residual,
            error_estimate: err,
        })
    }
}

/// `∫_{W⁻_v} ω` for `deg ω = i(v)`, with a Richardson-style error estimate.
pub fn integrate_over_unstable(
    land: &Landscape,
    db: &ConnectionDb,
    id: &str,
    form: &DifferentialForm,
    dcfg: &DerhamConfig,
    ccfg: &ConnectionConfig,
) -> Result<Integral> {
    if land.point(id).is_none() {
        return Err(Error::Precondition(format!("unknown critical point {id}")));
    }
    DerhamContext::new(land, db, *dcfg, *ccfg).integrate(id, form)
}

/// `Int(ω)` at the configured resolution.
pub fn int_map(
    land: &Landscape,
    db: &ConnectionDb,
    complex: &GeometricComplex,
    form: &DifferentialForm,
    dcfg: &DerhamConfig,
    ccfg: &ConnectionConfig,
) -> Result<Vec<Integral>> {
    DerhamContext::new(land, db, *dcfg, *ccfg).int_map(complex, form, dcfg.resolution)
}

/// Both sides of the Stokes identity for one form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainMapCheck {
    pub form: String,
    pub degree: usize,
    pub resolution: usize,
    /// `Int(dω)` on `X_{q+1}`.
    pub lhs: Vec<f64>,
    /// `δ^q Int(ω)` on `X_{q+1}`.
    pub rhs: Vec<f64>,
    pub residual: f64,
    pub error_estimate: f64,
}

/// The chain-map residual at the configured resolution.
pub fn chain_map_residual(
    land: &Landscape,
    db: &ConnectionDb,
    complex: &GeometricComplex,
    form: &DifferentialForm,
    dcfg: &DerhamConfig,
    ccfg: &ConnectionConfig,
) -> Result<ChainMapCheck> {
    DerhamContext::new(land, db, *dcfg, *ccfg).chain_map_residual(complex, form, dcfg.resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RoundSphere, TorusOfRevolution};

    fn grid() -> Vec<[f64; 2]> {
        let mut g = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                g.push([0.3 + 0.41 * i as f64, 0.2 + 0.93 * j as f64]);
            }
        }
        g
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let torus_names = ["sin_x", "cos_x_cos_2y", "sin_y_dx", "cos_x_dy", "mixed_1form", "dx_over_2pi"];
        let mut forms: Vec<DifferentialForm> = torus_names.iter().map(|n| torus_form_by_name(n).unwrap()).collect();
        let emb: Arc<dyn Embedding> = Arc::new(RoundSphere::new(1.0));
        let emb2: Arc<dyn Embedding> = Arc::new(TorusOfRevolution { major: 2.0, minor: 1.0 });
        for n in ["ambient_x", "ambient_yz", "ambient_z_dx", "ambient_rot", "ambient_mixed"] {
            forms.push(ambient_form_by_name(n, emb.clone()).unwrap());
            forms.push(ambient_form_by_name(n, emb2.clone()).unwrap());
        }
        for f in &forms {
            for p in grid() {
                let a = f.derivative_at(&p);
                let b = f.fd_derivative(&p);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-5, "{} at {p:?}: {x} vs {y}", f.name);
                }
            }
        }
    }

    #[test]
    fn d_squared_vanishes() {
        for n in ["sin_x", "cos_x_cos_2y"] {
            let dd = torus_form_by_name(n).unwrap().d().d();
            for p in grid() {
                assert!(dd.coefficients(&p)[0].abs() < 1e-4);
            }
        }
        let emb: Arc<dyn Embedding> = Arc::new(RoundSphere::new(1.0));
        let dd = ambient_form_by_name("ambient_yz", emb).unwrap().d().d();
        for p in grid() {
            assert!(dd.coefficients(&p)[0].abs() < 1e-4);
        }
    }

    #[test]
    fn apply_conventions() {
        let f = torus_form_by_name("area").unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        let area = f.apply(&[0.0, 0.0], &[e1.clone(), e2.clone()]);
        assert!((area - 1.0 / (4.0 * PI * PI)).abs() < 1e-15);
        assert_eq!(f.apply(&[0.0, 0.0], &[e2, e1]), -area);
        let z = DifferentialForm::zero(1, 2);
        assert_eq!(z.coefficients(&[1.0, 2.0]), vec![0.0, 0.0]);
    }
}

#[cfg(test)]
mod torus_tests {
    use super::*;
    use crate::complex::build_complex;
    use crate::connections::find_all_connections;
    use crate::scenario::Scenario;

    #[test]
    fn torus_integrals_match_closed_forms() {
        let sc = Scenario::builtin("torus").unwrap();
        let land = sc.landscape().unwrap();
        let db = find_all_connections(&land, &sc.connections).unwrap();
        let cx = build_complex(&land, &db).unwrap();
        let ctx = DerhamContext::new(&land, &db, DerhamConfig { resolution: 128, ..Default::default() }, sc.connections);
        let area = torus_form_by_name("area").unwrap();
        let top = ctx.integrate("c0_0", &area).unwrap();
        assert!((top.value - 1.0).abs() < 1e-3, "{top:?}");
        assert!(top.error_estimate < 1e-3);
        // c1_0 = (0, π) spreads along x, c1_1 = (π, 0) along y.
        let dx = torus_form_by_name("dx_over_2pi").unwrap();
        let dy = torus_form_by_name("dy_over_2pi").unwrap();
        let ix = ctx.int_map(&cx, &dx, 128).unwrap();
        let iy = ctx.int_map(&cx, &dy, 128).unwrap();
        assert_eq!(cx.generators[1], vec!["c1_0".to_string(), "c1_1".to_string()]);
        assert!((ix[0].value.abs() - 1.0).abs() < 1e-6 && ix[1].value.abs() < 1e-6, "{ix:?}");
        assert!((iy[1].value.abs() - 1.0).abs() < 1e-6 && iy[0].value.abs() < 1e-6, "{iy:?}");
        for f in ["sin_x", "sin_y_dx", "cos_x_dy"] {
            let form = form_by_name(&land, f).unwrap();
            let chk = ctx.chain_map_residual(&cx, &form, 256).unwrap();
            assert!(chk.residual < 1e-6, "{f}: {chk:?}");
        }
        let err = ctx.integrate("c1_0", &area).unwrap_err();
        assert!(matches!(err, Error::NotTopDegree { degree: 2, index: 1 }));
    }
}
