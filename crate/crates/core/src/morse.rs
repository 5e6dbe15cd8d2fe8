//! Morse functions, critical points, standard charts and the critical-value
//! ladder.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Embedding, ManifoldModel, ModelKind};
use crate::linalg::{generalized_symmetric_eigen, sup_norm};
use crate::{Error, Result};

/// A smooth function in the global coordinates of a [`ManifoldModel`].
pub trait MorseFunction: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn value(&self, p: &[f64]) -> f64;
    /// The differential `dh` in coordinates.
    fn gradient(&self, p: &[f64]) -> DVector<f64>;
    /// Coordinate second derivatives.
    fn hessian(&self, p: &[f64]) -> DMatrix<f64>;
}

/// `h(x) = Σ a_i cos x_i`.
#[derive(Debug, Clone)]
pub struct CosSum {
    pub amplitudes: Vec<f64>,
}

impl MorseFunction for CosSum {
    fn name(&self) -> &str {
        "cos_sum"
    }
    fn value(&self, p: &[f64]) -> f64 {
        p.iter().zip(&self.amplitudes).map(|(x, a)| a * x.cos()).sum()
    }
    fn gradient(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(p.len(), p.iter().zip(&self.amplitudes).map(|(x, a)| -a * x.sin()))
    }
    fn hessian(&self, p: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            p.len(),
            p.iter().zip(&self.amplitudes).map(|(x, a)| -a * x.cos()),
        ))
    }
}

/// The standard model `h_k(x) = -|x⁻|²/2 + |x⁺|²/2` on `R^k × R^{n-k}`.
#[derive(Debug, Clone, Copy)]
pub struct StandardQuadratic {
    pub dim: usize,
    pub index: usize,
}

impl StandardQuadratic {
    fn sign(&self, i: usize) -> f64 {
        if i < self.index {
            -1.0
        } else {
            1.0
        }
    }
}

impl MorseFunction for StandardQuadratic {
    fn name(&self) -> &str {
        "standard_model_k"
    }
    fn value(&self, p: &[f64]) -> f64 {
        p.iter().enumerate().map(|(i, x)| 0.5 * self.sign(i) * x * x).sum()
    }
    fn gradient(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(p.len(), p.iter().enumerate().map(|(i, x)| self.sign(i) * x))
    }
    fn hessian(&self, p: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(p.len(), (0..p.len()).map(|i| self.sign(i))))
    }
}

/// An ambient quadratic `F(X) = ℓ·X + ½ XᵀQX` restricted to an embedded
/// surface, `h = F ∘ X`.
#[derive(Debug, Clone)]
pub struct AmbientQuadratic {
    pub name: String,
    pub embedding: Arc<dyn Embedding>,
    pub linear: Vector3<f64>,
    pub quadratic: Matrix3<f64>,
}

impl AmbientQuadratic {
    fn ambient_gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.linear + self.quadratic * x
    }
}

impl MorseFunction for AmbientQuadratic {
    fn name(&self) -> &str {
        &self.name
    }
    fn value(&self, p: &[f64]) -> f64 {
        let x = self.embedding.point(p);
        self.linear.dot(&x) + 0.5 * x.dot(&(self.quadratic * x))
    }
    fn gradient(&self, p: &[f64]) -> DVector<f64> {
        let grad = self.ambient_gradient(&self.embedding.point(p));
        let [xu, xv] = self.embedding.partials(p);
        DVector::from_vec(vec![grad.dot(&xu), grad.dot(&xv)])
    }
    fn hessian(&self, p: &[f64]) -> DMatrix<f64> {
        let grad = self.ambient_gradient(&self.embedding.point(p));
        let [xu, xv] = self.embedding.partials(p);
        let [xuu, xuv, xvv] = self.embedding.second_partials(p);
        let q = &self.quadratic;
        let huu = xu.dot(&(q * xu)) + grad.dot(&xuu);
        let huv = xu.dot(&(q * xv)) + grad.dot(&xuv);
        let hvv = xv.dot(&(q * xv)) + grad.dot(&xvv);
        DMatrix::from_row_slice(2, 2, &[huu, huv, huv, hvv])
    }
}

/// A Morse function together with the manifold it lives on.
#[derive(Debug, Clone)]
pub struct MorseSystem {
    pub model: ManifoldModel,
    pub func: Arc<dyn MorseFunction>,
}

impl MorseSystem {
    pub fn new(model: ManifoldModel, func: Arc<dyn MorseFunction>) -> Self {
        Self { model, func }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn h(&self, p: &[f64]) -> f64 {
        self.func.value(p)
    }

    pub fn dh(&self, p: &[f64]) -> DVector<f64> {
        self.func.gradient(p)
    }

    pub fn hess(&self, p: &[f64]) -> DMatrix<f64> {
        self.func.hessian(p)
    }

    /// `X = -g⁻¹ dh`.
    pub fn field_x(&self, p: &[f64]) -> DVector<f64> {
        let g = self.model.metric_unchecked(p);
        let dh = self.dh(p);
        match self.model.kind() {
            ModelKind::EmbeddedSurface { .. } => {
                let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
                DVector::from_vec(vec![
                    -(g[(1, 1)] * dh[0] - g[(0, 1)] * dh[1]) / det,
                    -(-g[(1, 0)] * dh[0] + g[(0, 0)] * dh[1]) / det,
                ])
            }
            _ => -dh,
        }
    }

    /// `X(h) = dh(X)`, negative off the critical set.
    pub fn x_of_h(&self, p: &[f64]) -> f64 {
        self.dh(p).dot(&self.field_x(p))
    }

    /// The rescaled field `Y = -X / X(h)`, which satisfies `Y(h) = -1`.
    pub fn field_y(&self, p: &[f64]) -> DVector<f64> {
        let x = self.field_x(p);
        let xh = self.dh(p).dot(&x);
        -x / xh
    }

    /// Riemannian norm of a tangent vector.
    pub fn norm(&self, p: &[f64], v: &DVector<f64>) -> f64 {
        let g = self.model.metric_unchecked(p);
        (v.dot(&(g * v))).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MorseConfig {
    pub newton_tol: f64,
    pub degeneracy_tol: f64,
    pub merge_radius: f64,
    pub max_newton_iter: usize,
    /// Cubic residual constant of the standard chart.
    pub chart_tol: f64,
    pub chart_radius_max: f64,
    pub chart_radius_min: f64,
    pub value_cluster_tol: f64,
    /// Half-width of the seed box for the (non-compact) standard model.
    pub standard_box: f64,
}

impl Default for MorseConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-11,
            degeneracy_tol: 1e-8,
            merge_radius: 1e-6,
            max_newton_iter: 50,
            chart_tol: 2.0,
            chart_radius_max: 0.5,
            chart_radius_min: 1e-3,
            value_cluster_tol: 1e-9,
            standard_box: 1.0,
        }
    }
}

/// A located and classified critical point.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPoint {
    pub id: String,
    pub coords: Vec<f64>,
    pub value: f64,
    pub index: usize,
    pub eigenvalues: Vec<f64>,
    /// `g`-orthonormal eigenvectors as columns, negative eigenvalues first.
    pub eigenframe: DMatrix<f64>,
    pub chart_radius: f64,
}

impl CriticalPoint {
    /// The ordered unstable frame fixing the orientation of `W⁻_v`.
    pub fn unstable_orientation(&self) -> Vec<DVector<f64>> {
        (0..self.index).map(|j| self.eigenframe.column(j).into_owned()).collect()
    }
}

/// Hessian eigenframe chart `φ_v(x) = v + E S x`, `S = diag(|λ_j|^{-1/2})`.
#[derive(Debug, Clone)]
pub struct StandardChart {
    pub center: Vec<f64>,
    pub value: f64,
    pub index: usize,
    /// The matrix `E S`.
    pub frame: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub radius: f64,
}

impl StandardChart {
    pub fn from_eigen(
        center: &[f64],
        value: f64,
        eigenvalues: &[f64],
        eigenframe: &DMatrix<f64>,
        radius: f64,
    ) -> Self {
        let n = center.len();
        let scale = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            eigenvalues.iter().map(|l| 1.0 / l.abs().sqrt()),
        ));
        let frame = eigenframe * scale;
        let inverse = frame.clone().try_inverse().expect("eigenframe is invertible");
        let index = eigenvalues.iter().filter(|l| **l < 0.0).count();
        Self { center: center.to_vec(), value, index, frame, inverse, radius }
    }

    pub fn to_manifold(&self, x: &DVector<f64>) -> Vec<f64> {
        let d = &self.frame * x;
        self.center.iter().zip(d.iter()).map(|(c, d)| c + d).collect()
    }

    /// Chart coordinates of a manifold point (shortest periodic image).
    pub fn to_chart(&self, model: &ManifoldModel, p: &[f64]) -> DVector<f64> {
        &self.inverse * model.displacement(&self.center, p)
    }

    /// The quadratic model value `h(v) - |x⁻|²/2 + |x⁺|²/2`.
    pub fn model_value(&self, x: &DVector<f64>) -> f64 {
        self.value + standard_h(self.index, x)
    }

    /// Push a chart vector forward to a coordinate tangent vector.
    pub fn push_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.frame * x
    }
}

/// `h_k` on chart coordinates.
pub fn standard_h(index: usize, x: &DVector<f64>) -> f64 {
    x.iter()
        .enumerate()
        .map(|(i, v)| if i < index { -0.5 * v * v } else { 0.5 * v * v })
        .sum()
}

/// Deterministic unit directions used to probe a ball in `R^n`.
fn probe_directions(n: usize) -> Vec<DVector<f64>> {
    let mut dirs = Vec::new();
    if n == 2 {
        for j in 0..16 {
            let t = std::f64::consts::PI * j as f64 / 8.0;
            dirs.push(DVector::from_vec(vec![t.cos(), t.sin()]));
        }
        return dirs;
    }
    for i in 0..n {
        for s in [-1.0, 1.0] {
            let mut v = DVector::zeros(n);
            v[i] = s;
            dirs.push(v);
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut v = DVector::zeros(n);
            v[i] = std::f64::consts::FRAC_1_SQRT_2;
            v[j] = -std::f64::consts::FRAC_1_SQRT_2;
            dirs.push(v);
        }
    }
    dirs
}

/// Largest residual `|h(φ(x)) − model(x)|` over probes of radius ≤ `r`.
pub fn chart_residual(sys: &MorseSystem, chart: &StandardChart, r: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for d in probe_directions(chart.center.len()) {
        for frac in [0.25, 0.5, 0.75, 1.0] {
            let x = &d * (r * frac);
            let p = chart.to_manifold(&x);
            worst = worst.max((sys.h(&p) - chart.model_value(&x)).abs());
        }
    }
    worst
}

/// Build the eigenframe chart at a critical point and choose its radius.
pub fn standard_chart(
    sys: &MorseSystem,
    v: &CriticalPoint,
    cfg: &MorseConfig,
) -> Result<StandardChart> {
    let mut chart = StandardChart::from_eigen(&v.coords, v.value, &v.eigenvalues, &v.eigenframe, 0.0);
    let mut r = cfg.chart_radius_max;
    while r >= cfg.chart_radius_min {
        if chart_residual(sys, &chart, r) <= cfg.chart_tol * r.powi(3) {
            chart.radius = r;
            return Ok(chart);
        }
        r *= 0.8;
    }
    Err(Error::ChartTooSmall { id: v.id.clone() })
}

impl CriticalPoint {
    pub fn chart(&self) -> StandardChart {
        StandardChart::from_eigen(
            &self.coords,
            self.value,
            &self.eigenvalues,
            &self.eigenframe,
            self.chart_radius,
        )
    }
}

fn seeds(sys: &MorseSystem, density: usize, cfg: &MorseConfig) -> Vec<Vec<f64>> {
    let n = sys.dim();
    let ranges: Vec<(f64, f64)> = match sys.model.kind() {
        ModelKind::StandardModel { .. } => vec![(-cfg.standard_box, cfg.standard_box); n],
        ModelKind::FlatTorus { periods } => periods.iter().map(|&p| (0.0, p)).collect(),
        ModelKind::EmbeddedSurface { embedding } => embedding
            .periods()
            .iter()
            .map(|p| (0.0, p.unwrap_or(std::f64::consts::PI)))
            .collect(),
    };
    let total = density.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|i| {
                    let j = idx % density;
                    idx /= density;
                    let (lo, hi) = ranges[i];
                    lo + (hi - lo) * (j as f64 + 0.5) / density as f64
                })
                .collect()
        })
        .collect()
}

fn newton(sys: &MorseSystem, seed: Vec<f64>, cfg: &MorseConfig) -> Option<Vec<f64>> {
    let mut p = seed;
    for _ in 0..cfg.max_newton_iter {
        let g = sys.dh(&p);
        if sup_norm(&g) < cfg.newton_tol {
            return sys.model.canonicalize(&p).ok();
        }
        let step = sys.hess(&p).lu().solve(&g)?;
        if !step.iter().all(|s| s.is_finite()) {
            return None;
        }
        for (x, s) in p.iter_mut().zip(step.iter()) {
            *x -= s;
        }
        if p.iter().any(|x| x.abs() > 1e6) {
            return None;
        }
    }
    let g = sys.dh(&p);
    (sup_norm(&g) < cfg.newton_tol).then(|| sys.model.canonicalize(&p).ok()).flatten()
}

/// Classify a converged point (id left empty, chart radius computed).
pub fn classify(sys: &MorseSystem, coords: Vec<f64>, cfg: &MorseConfig) -> Result<CriticalPoint> {
    let g = sys.model.metric_at(&coords)?;
    let hess = sys.hess(&coords);
    let hess = (&hess + hess.transpose()) * 0.5;
    let (eigenvalues, eigenframe) = generalized_symmetric_eigen(&hess, &g).ok_or_else(|| {
        Error::DegenerateMetric { point: coords.clone(), min_eigenvalue: 0.0 }
    })?;
    if let Some(&bad) = eigenvalues.iter().find(|l| l.abs() < cfg.degeneracy_tol) {
        return Err(Error::DegenerateCritical { point: coords, eigenvalue: bad });
    }
    let index = eigenvalues.iter().filter(|l| **l < 0.0).count();
    let mut v = CriticalPoint {
        id: String::new(),
        value: sys.h(&coords),
        coords,
        index,
        eigenvalues,
        eigenframe,
        chart_radius: 0.0,
    };
    v.chart_radius = standard_chart(sys, &v, cfg)?.radius;
    Ok(v)
}

/// Locate all critical points by Newton iteration from a regular seed grid.
///
/// Seeds that diverge are dropped; converged points are merged, classified
/// and sorted by decreasing value. Ids are `c{level}_{rank}`.
pub fn find_critical_points(
    sys: &MorseSystem,
    grid_density: usize,
    cfg: &MorseConfig,
) -> Result<Vec<CriticalPoint>> {
    if grid_density < 4 {
        return Err(Error::Precondition(format!("grid density {grid_density} < 4")));
    }
    let converged: Vec<Vec<f64>> = seeds(sys, grid_density, cfg)
        .into_par_iter()
        .filter_map(|s| newton(sys, s, cfg))
        // Coordinate singularities of a parametrization are not critical points.
        .filter(|p| sys.model.metric_at(p).is_ok())
        .collect();
    let mut unique: Vec<Vec<f64>> = Vec::new();
    for p in converged {
        if !unique.iter().any(|q| sys.model.separation(q, &p) < cfg.merge_radius) {
            unique.push(p);
        }
    }
    let mut points = unique
        .into_iter()
        .map(|p| classify(sys, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| {
        b.value.total_cmp(&a.value).then_with(|| {
            a.coords
                .iter()
                .zip(&b.coords)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    assign_ids(&mut points, cfg.value_cluster_tol);
    Ok(points)
}

fn assign_ids(points: &mut [CriticalPoint], cluster_tol: f64) {
    let mut level = 0;
    let mut rank = 0;
    for i in 0..points.len() {
        if i > 0 {
            if (points[i - 1].value - points[i].value).abs() > cluster_tol {
                level += 1;
                rank = 0;
            } else {
                rank += 1;
            }
        }
        points[i].id = format!("c{level}_{rank}");
    }
}

/// One rung of the critical-value ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub value: f64,
    pub radius: f64,
    pub eps: f64,
    pub members: Vec<String>,
}

/// Distinct critical values (descending) with chart radii and offsets `ε`
/// satisfying `c_j + r_j² < c_{j−1} − r_{j−1}²` and `0 < ε_j < (r_j/2)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    pub levels: Vec<Level>,
}

impl Ladder {
    pub fn level_of(&self, value: f64) -> Option<&Level> {
        self.levels.iter().min_by(|a, b| {
            (a.value - value).abs().total_cmp(&(b.value - value).abs())
        })
    }

    pub fn eps_at(&self, value: f64) -> f64 {
        self.level_of(value).map_or(0.0, |l| l.eps)
    }

    pub fn values(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.value).collect()
    }

    /// Every level scaled to `ε_j · factor` (for ε-independence checks).
    pub fn with_eps_scaled(&self, factor: f64) -> Ladder {
        let mut l = self.clone();
        for lvl in &mut l.levels {
            lvl.eps *= factor;
        }
        l
    }

    /// Whether both ladder inequalities hold literally.
    pub fn is_admissible(&self) -> bool {
        self.levels.iter().all(|l| l.eps > 0.0 && l.eps < (l.radius / 2.0).powi(2))
            && self.levels.windows(2).all(|w| {
                w[1].value + w[1].radius.powi(2) < w[0].value - w[0].radius.powi(2)
            })
    }
}

/// Build the ladder from located critical points. Also shrinks each point's
/// `chart_radius` to its level radius.
pub fn critical_ladder(points: &mut [CriticalPoint], cluster_tol: f64) -> Result<Ladder> {
    if points.is_empty() {
        return Err(Error::Precondition("critical ladder needs at least one point".into()));
    }
    let mut sorted: Vec<usize> = (0..points.len()).collect();
    sorted.sort_by(|&a, &b| points[b].value.total_cmp(&points[a].value));
    let mut levels: Vec<Level> = Vec::new();
    for &i in &sorted {
        let p = &points[i];
        match levels.last_mut() {
            Some(l) if (l.value - p.value).abs() <= cluster_tol => {
                l.radius = l.radius.min(p.chart_radius);
                l.members.push(p.id.clone());
            }
            Some(l) if (l.value - p.value).abs() < 4.0 * cluster_tol => {
                return Err(Error::LadderCollision { upper: l.value, lower: p.value });
            }
            _ => levels.push(Level {
                value: p.value,
                radius: p.chart_radius,
                eps: 0.0,
                members: vec![p.id.clone()],
            }),
        }
    }
    for j in 1..levels.len() {
        while levels[j].value + levels[j].radius.powi(2)
            >= levels[j - 1].value - levels[j - 1].radius.powi(2)
        {
            levels[j].radius *= 0.9;
            levels[j - 1].radius *= 0.9;
        }
    }
    for l in &mut levels {
        l.eps = (l.radius / 2.0).powi(2) / 2.0;
    }
    for p in points.iter_mut() {
        if let Some(l) = levels.iter().find(|l| l.members.contains(&p.id)) {
            p.chart_radius = p.chart_radius.min(l.radius);
        }
    }
    Ok(Ladder { levels })
}


/// Critical points of a system with their charts and ladder: everything the
/// flow and connection stages need.
#[derive(Debug, Clone)]
pub struct Landscape {
    pub sys: MorseSystem,
    pub points: Vec<CriticalPoint>,
    pub charts: Vec<StandardChart>,
    pub ladder: Ladder,
}

impl Landscape {
    pub fn analyze(sys: MorseSystem, grid_density: usize, cfg: &MorseConfig) -> Result<Self> {
        let points = find_critical_points(&sys, grid_density, cfg)?;
        Self::from_points(sys, points, cfg)
    }

    pub fn from_points(sys: MorseSystem, mut points: Vec<CriticalPoint>, cfg: &MorseConfig) -> Result<Self> {
        let ladder = critical_ladder(&mut points, cfg.value_cluster_tol)?;
        let charts = points.iter().map(|p| p.chart()).collect();
        Ok(Self { sys, points, charts, ladder })
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.points.iter().position(|p| p.id == id)
    }

    pub fn point(&self, id: &str) -> Option<&CriticalPoint> {
        self.points.iter().find(|p| p.id == id)
    }

    /// Positions of the critical points on the level closest to `value`.
    pub fn members_at(&self, value: f64) -> Vec<usize> {
        match self.ladder.level_of(value) {
            Some(l) => l.members.iter().filter_map(|id| self.position(id)).collect(),
            None => Vec::new(),
        }
    }

    /// Same landscape with every `ε_j` multiplied by `factor`.
    pub fn with_eps_scaled(&self, factor: f64) -> Self {
        Self { ladder: self.ladder.with_eps_scaled(factor), ..self.clone() }
    }
}
