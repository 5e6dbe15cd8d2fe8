//! Manifold models: the standard model `R^n`, flat tori and parametrized
//! surfaces in `R^3`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::linalg::min_symmetric_eigenvalue;
use crate::{Error, Result};

pub const DEFAULT_METRIC_FLOOR: f64 = 1e-10;

/// A parametrization `(u, v) -> R^3` with analytic partial derivatives.
pub trait Embedding: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn point(&self, p: &[f64]) -> Vector3<f64>;
    /// `(∂_u X, ∂_v X)`.
    fn partials(&self, p: &[f64]) -> [Vector3<f64>; 2];
    /// `(∂_uu X, ∂_uv X, ∂_vv X)`.
    fn second_partials(&self, p: &[f64]) -> [Vector3<f64>; 3];
    /// Period of each parameter, `None` for a non-periodic one.
    fn periods(&self) -> [Option<f64>; 2];
    fn canonicalize(&self, p: &[f64]) -> [f64; 2];
}

/// Torus of revolution about the `z` axis with tube radius `minor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusOfRevolution {
    pub major: f64,
    pub minor: f64,
}

impl Embedding for TorusOfRevolution {
    fn name(&self) -> &'static str {
        "torus"
    }

    fn point(&self, p: &[f64]) -> Vector3<f64> {
        let (u, v) = (p[0], p[1]);
        let w = self.major + self.minor * v.cos();
        Vector3::new(w * u.cos(), w * u.sin(), self.minor * v.sin())
    }

    fn partials(&self, p: &[f64]) -> [Vector3<f64>; 2] {
        let (u, v) = (p[0], p[1]);
        let w = self.major + self.minor * v.cos();
        let r = self.minor;
        [
            Vector3::new(-w * u.sin(), w * u.cos(), 0.0),
            Vector3::new(-r * v.sin() * u.cos(), -r * v.sin() * u.sin(), r * v.cos()),
        ]
    }

    fn second_partials(&self, p: &[f64]) -> [Vector3<f64>; 3] {
        let (u, v) = (p[0], p[1]);
        let w = self.major + self.minor * v.cos();
        let r = self.minor;
        [
            Vector3::new(-w * u.cos(), -w * u.sin(), 0.0),
            Vector3::new(r * v.sin() * u.sin(), -r * v.sin() * u.cos(), 0.0),
            Vector3::new(-r * v.cos() * u.cos(), -r * v.cos() * u.sin(), -r * v.sin()),
        ]
    }

    fn periods(&self) -> [Option<f64>; 2] {
        [Some(2.0 * PI), Some(2.0 * PI)]
    }

    fn canonicalize(&self, p: &[f64]) -> [f64; 2] {
        [wrap(p[0], 2.0 * PI), wrap(p[1], 2.0 * PI)]
    }
}

/// Round sphere in spherical coordinates about a tilted polar axis.
///
/// `X(u, v) = radius · F · (sin u cos v, sin u sin v, cos u)` where the third
/// column of the orthonormal frame `F` is the polar axis. The coordinate
/// poles are singular, so the axis is tilted away from the symmetry planes
/// of the bundled height functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSphere {
    pub radius: f64,
    pub frame: Matrix3<f64>,
}

impl RoundSphere {
    pub fn new(radius: f64) -> Self {
        Self::with_axis(radius, Vector3::new(1.0, 2.0, 3.0))
    }

    pub fn with_axis(radius: f64, axis: Vector3<f64>) -> Self {
        let d = axis.normalize();
        let helper = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let e1 = helper.cross(&d).normalize();
        let e2 = d.cross(&e1);
        Self { radius, frame: Matrix3::from_columns(&[e1, e2, d]) }
    }
}

impl Embedding for RoundSphere {
    fn name(&self) -> &'static str {
        "sphere"
    }

    fn point(&self, p: &[f64]) -> Vector3<f64> {
        let (u, v) = (p[0], p[1]);
        self.frame * Vector3::new(u.sin() * v.cos(), u.sin() * v.sin(), u.cos()) * self.radius
    }

    fn partials(&self, p: &[f64]) -> [Vector3<f64>; 2] {
        let (u, v) = (p[0], p[1]);
        let r = self.radius;
        [
            self.frame * Vector3::new(u.cos() * v.cos(), u.cos() * v.sin(), -u.sin()) * r,
            self.frame * Vector3::new(-u.sin() * v.sin(), u.sin() * v.cos(), 0.0) * r,
        ]
    }

    fn second_partials(&self, p: &[f64]) -> [Vector3<f64>; 3] {
        let (u, v) = (p[0], p[1]);
        let r = self.radius;
        [
            self.frame * Vector3::new(-u.sin() * v.cos(), -u.sin() * v.sin(), -u.cos()) * r,
            self.frame * Vector3::new(-u.cos() * v.sin(), u.cos() * v.cos(), 0.0) * r,
            self.frame * Vector3::new(-u.sin() * v.cos(), -u.sin() * v.sin(), 0.0) * r,
        ]
    }

    fn periods(&self) -> [Option<f64>; 2] {
        [None, Some(2.0 * PI)]
    }

    fn canonicalize(&self, p: &[f64]) -> [f64; 2] {
        let mut u = wrap(p[0], 2.0 * PI);
        let mut v = p[1];
        if u > PI {
            u = 2.0 * PI - u;
            v += PI;
        }
        [u, wrap(v, 2.0 * PI)]
    }
}

/// Wrap `x` into `[0, period)`.
pub fn wrap(x: f64, period: f64) -> f64 {
    let r = x.rem_euclid(period);
    // rem_euclid can round up to `period` for tiny negative inputs.
    if r >= period {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    /// `R^n` with the Euclidean metric; `index` is the index of the origin
    /// for the function `h_k`.
    StandardModel { index: usize },
    FlatTorus { periods: Vec<f64> },
    EmbeddedSurface { embedding: Arc<dyn Embedding> },
}

/// An ambient closed manifold (or the standard local model) in global,
/// possibly periodic, coordinates.
#[derive(Debug, Clone)]
pub struct ManifoldModel {
    kind: ModelKind,
    dim: usize,
    metric_floor: f64,
}

impl ManifoldModel {
    pub fn standard(dim: usize, index: usize) -> Result<Self> {
        if dim == 0 || index > dim {
            return Err(Error::Precondition(format!(
                "standard model needs n >= 1 and 0 <= k <= n (n = {dim}, k = {index})"
            )));
        }
        Ok(Self { kind: ModelKind::StandardModel { index }, dim, metric_floor: DEFAULT_METRIC_FLOOR })
    }

    pub fn flat_torus(periods: Vec<f64>) -> Result<Self> {
        if periods.is_empty() || periods.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Precondition("flat torus periods must be positive".into()));
        }
        let dim = periods.len();
        Ok(Self { kind: ModelKind::FlatTorus { periods }, dim, metric_floor: DEFAULT_METRIC_FLOOR })
    }

    pub fn embedded(embedding: Arc<dyn Embedding>) -> Self {
        Self { kind: ModelKind::EmbeddedSurface { embedding }, dim: 2, metric_floor: DEFAULT_METRIC_FLOOR }
    }

    pub fn with_metric_floor(mut self, floor: f64) -> Self {
        self.metric_floor = floor;
        self
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self) -> Option<&Arc<dyn Embedding>> {
        match &self.kind {
            ModelKind::EmbeddedSurface { embedding } => Some(embedding),
            _ => None,
        }
    }

    /// Period per coordinate (`None` where the coordinate is not periodic).
    pub fn periods(&self) -> Vec<Option<f64>> {
        match &self.kind {
            ModelKind::StandardModel { .. } => vec![None; self.dim],
            ModelKind::FlatTorus { periods } => periods.iter().map(|&p| Some(p)).collect(),
            ModelKind::EmbeddedSurface { embedding } => embedding.periods().to_vec(),
        }
    }

    fn check_dim(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: p.len() });
        }
        Ok(())
    }

    /// Canonical representative of a coordinate vector.
    pub fn canonicalize(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(p)?;
        Ok(match &self.kind {
            ModelKind::StandardModel { .. } => p.to_vec(),
            ModelKind::FlatTorus { periods } => {
                p.iter().zip(periods).map(|(&x, &per)| wrap(x, per)).collect()
            }
            ModelKind::EmbeddedSurface { embedding } => embedding.canonicalize(p).to_vec(),
        })
    }

    /// Riemannian metric in coordinates; the first fundamental form for
    /// embedded surfaces.
    pub fn metric_at(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(p)?;
        let g = self.metric_unchecked(p);
        if let ModelKind::EmbeddedSurface { .. } = self.kind {
            let min = min_symmetric_eigenvalue(&g);
            if !(min >= self.metric_floor) {
                return Err(Error::DegenerateMetric { point: p.to_vec(), min_eigenvalue: min });
            }
        }
        Ok(g)
    }

    pub(crate) fn metric_unchecked(&self, p: &[f64]) -> DMatrix<f64> {
        match &self.kind {
            ModelKind::StandardModel { .. } | ModelKind::FlatTorus { .. } => {
                DMatrix::identity(self.dim, self.dim)
            }
            ModelKind::EmbeddedSurface { embedding } => {
                let [xu, xv] = embedding.partials(p);
                let guv = xu.dot(&xv);
                DMatrix::from_row_slice(2, 2, &[xu.dot(&xu), guv, guv, xv.dot(&xv)])
            }
        }
    }

    /// Coordinate displacement `to - from`, using the shortest periodic image.
    pub fn displacement(&self, from: &[f64], to: &[f64]) -> DVector<f64> {
        let periods = self.periods();
        DVector::from_iterator(
            self.dim,
            (0..self.dim).map(|i| {
                let d = to[i] - from[i];
                match periods[i] {
                    Some(per) => d - per * (d / per).round(),
                    None => d,
                }
            }),
        )
    }

    /// A distance used for merging and proximity tests: ambient Euclidean
    /// distance for embedded surfaces, periodic coordinate distance otherwise.
    pub fn separation(&self, a: &[f64], b: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::EmbeddedSurface { embedding } => {
                (embedding.point(a) - embedding.point(b)).norm()
            }
            _ => self.displacement(a, b).norm(),
        }
    }

    /// Ambient position (embedded surfaces) or the coordinates themselves.
    pub fn ambient(&self, p: &[f64]) -> Vec<f64> {
        match &self.kind {
            ModelKind::EmbeddedSurface { embedding } => embedding.point(p).as_slice().to_vec(),
            _ => p.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TAU: f64 = 2.0 * PI;

    fn torus() -> ManifoldModel {
        ManifoldModel::flat_torus(vec![TAU, TAU]).unwrap()
    }

    #[test]
    fn flat_torus_wraps() {
        let p = torus().canonicalize(&[TAU + 0.1, -0.2]).unwrap();
        assert!((p[0] - 0.1).abs() < 1e-12);
        assert!((p[1] - (TAU - 0.2)).abs() < 1e-12);
        assert_eq!(torus().canonicalize(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn standard_model_is_identity() {
        let m = ManifoldModel::standard(2, 1).unwrap();
        assert_eq!(m.canonicalize(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let m3 = ManifoldModel::standard(3, 2).unwrap();
        assert_eq!(m3.metric_at(&[0.3, -1.0, 5.0]).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(torus().metric_at(&[1.0, 2.0]).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            torus().canonicalize(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn torus_of_revolution_metric_at_origin() {
        let m = ManifoldModel::embedded(Arc::new(TorusOfRevolution { major: 2.0, minor: 1.0 }));
        let g = m.metric_at(&[0.0, 0.0]).unwrap();
        assert!((g[(0, 0)] - 9.0).abs() < 1e-14);
        assert!((g[(1, 1)] - 1.0).abs() < 1e-14);
        assert!(g[(0, 1)].abs() < 1e-14);
    }

    fn fd_metric(e: &dyn Embedding, p: &[f64], step: f64) -> DMatrix<f64> {
        let d = |i: usize| {
            let mut a = p.to_vec();
            let mut b = p.to_vec();
            a[i] += step;
            b[i] -= step;
            (e.point(&a) - e.point(&b)) / (2.0 * step)
        };
        let (xu, xv) = (d(0), d(1));
        DMatrix::from_row_slice(2, 2, &[xu.dot(&xu), xu.dot(&xv), xv.dot(&xu), xv.dot(&xv)])
    }

    #[test]
    fn embedded_metrics_match_finite_differences() {
        let embeddings: Vec<Box<dyn Embedding>> = vec![
            Box::new(TorusOfRevolution { major: 2.0, minor: 1.0 }),
            Box::new(RoundSphere::new(1.3)),
        ];
        for e in &embeddings {
            let model = ManifoldModel::embedded(Arc::from(dyn_clone(e.as_ref())));
            for i in 0..10 {
                for j in 0..10 {
                    let p = [0.15 + 0.28 * i as f64, 0.3 + 0.6 * j as f64];
                    let g = model.metric_at(&p).unwrap();
                    assert_eq!(g[(0, 1)], g[(1, 0)]);
                    assert!(min_symmetric_eigenvalue(&g) > 0.0);
                    let fd = fd_metric(e.as_ref(), &p, 1e-4);
                    let rel = (&g - &fd).norm() / g.norm();
                    assert!(rel < 1e-6, "{} at {:?}: {rel}", e.name(), p);
                }
            }
        }
    }

    fn dyn_clone(e: &dyn Embedding) -> Box<dyn Embedding> {
        match e.name() {
            "torus" => Box::new(TorusOfRevolution { major: 2.0, minor: 1.0 }),
            _ => Box::new(RoundSphere::new(1.3)),
        }
    }

    #[test]
    fn second_partials_match_finite_differences() {
        let e = RoundSphere::new(1.0);
        let t = TorusOfRevolution { major: 2.0, minor: 1.0 };
        for emb in [&e as &dyn Embedding, &t as &dyn Embedding] {
            let p = [0.7, 1.9];
            let h = 1e-5;
            let s = emb.second_partials(&p);
            let pu = |d: f64| emb.partials(&[p[0] + d, p[1]]);
            let pv = |d: f64| emb.partials(&[p[0], p[1] + d]);
            let uu = (pu(h)[0] - pu(-h)[0]) / (2.0 * h);
            let uv = (pv(h)[0] - pv(-h)[0]) / (2.0 * h);
            let vv = (pv(h)[1] - pv(-h)[1]) / (2.0 * h);
            assert!((uu - s[0]).norm() < 1e-8);
            assert!((uv - s[1]).norm() < 1e-8);
            assert!((vv - s[2]).norm() < 1e-8);
        }
    }

    #[test]
    fn sphere_degenerates_at_coordinate_pole() {
        let m = ManifoldModel::embedded(Arc::new(RoundSphere::new(1.0)));
        assert!(matches!(m.metric_at(&[0.0, 1.0]), Err(Error::DegenerateMetric { .. })));
    }

    #[test]
    fn sphere_canonicalization_preserves_the_point() {
        let s = RoundSphere::new(1.0);
        for p in [[4.0, 1.0], [-0.5, 7.0], [2.0, -3.0]] {
            let c = s.canonicalize(&p);
            assert!((s.point(&p) - s.point(&c)).norm() < 1e-12);
            assert!((0.0..=PI).contains(&c[0]));
        }
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(x in -50.0..50.0f64, y in -50.0..50.0f64) {
            let m = torus();
            let once = m.canonicalize(&[x, y]).unwrap();
            let twice = m.canonicalize(&once).unwrap();
            prop_assert_eq!(once, twice);
            let s = ManifoldModel::embedded(Arc::new(RoundSphere::new(1.0)));
            let once = s.canonicalize(&[x, y]).unwrap();
            let twice = s.canonicalize(&once).unwrap();
            prop_assert!((once[0] - twice[0]).abs() < 1e-12 && (once[1] - twice[1]).abs() < 1e-12);
        }
    }
}
