//! The model-box perturbation that makes stable and unstable manifolds
//! transversal: cutoff profiles, a regular value of the projection of `V⁺`,
//! the perturbed field and metric, and a numerical transversality
//! certificate.
//!
//! The box lives in `M₀ = R × S^{k−1}_ρ × R^{n−k}` with `h₀(s, p, ξ) = s`
//! and `Y₀ = −∂_s`. Points are stored as `[s, p_1..p_k, ξ_1..ξ_m]` with
//! `p ∈ R^k` on the sphere and `m = n − k`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{min_singular_value, min_symmetric_eigenvalue};
use crate::ode::{integrate, OdeConfig};
use crate::quadrature::composite_rule;
use crate::{Error, Result};

/// Smallest singular value a Jacobian must exceed to count as full rank.
pub const SV_FLOOR: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Bump profile.

/// Coefficients (ascending) of the polynomials `P_j` with
/// `φ^{(j)}(u) = φ(u) P_j(u) / (1 − u²)^{2j}` for `φ(u) = exp(−1/(1 − u²))`.
fn bump_polynomials(max_order: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![1.0]];
    for j in 0..max_order {
        let p = &out[j];
        let mut next = vec![0.0; p.len() + 3];
        // −2u P
        for (i, c) in p.iter().enumerate() {
            next[i + 1] -= 2.0 * c;
        }
        // (1 − u²)² P' = (1 − 2u² + u⁴) P'
        for (i, c) in p.iter().enumerate().skip(1) {
            let d = i as f64 * c;
            next[i - 1] += d;
            next[i + 1] -= 2.0 * d;
            next[i + 3] += d;
        }
        // 4j u (1 − u²) P
        let jj = 4.0 * j as f64;
        for (i, c) in p.iter().enumerate() {
            next[i + 1] += jj * c;
            next[i + 3] -= jj * c;
        }
        while next.len() > 1 && next.last() == Some(&0.0) {
            next.pop();
        }
        out.push(next);
    }
    out
}

fn horner(p: &[f64], u: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * u + c)
}

/// `j`-th derivative of `φ(u) = exp(−1/(1 − u²))` on `(−1, 1)`, zero outside.
fn bump_derivative(polys: &[Vec<f64>], j: usize, u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let q = 1.0 - u * u;
    let phi = (-1.0 / q).exp();
    if phi == 0.0 {
        return 0.0;
    }
    phi * horner(&polys[j], u) / q.powi(2 * j as i32)
}

/// The normalized bump `ζ(s) = φ(s/s₀) / (s₀ ∫φ)` with `∫ζ = 1` and
/// support `(−s₀, s₀)`, together with its `C^ℓ` norm.
#[derive(Debug, Clone)]
pub struct Bump {
    pub s0: f64,
    pub ell: usize,
    /// `∫_{−1}^{1} φ`.
    pub phi_integral: f64,
    /// `sup_{j ≤ ℓ, s} |d^j ζ|`.
    pub c_ell_norm: f64,
    polys: Vec<Vec<f64>>,
}

impl Bump {
    pub fn new(s0: f64, ell: usize) -> Result<Self> {
        if !(s0 > 0.0) || !s0.is_finite() {
            return Err(Error::Precondition(format!("strip half-width must be positive, got {s0}")));
        }
        if ell > 12 {
            return Err(Error::Precondition(format!("derivative order {ell} is above the supported 12")));
        }
        let polys = bump_polynomials(ell);
        let phi_integral: f64 = composite_rule(-1.0, 1.0, 64, 16).iter().map(|(u, w)| w * bump_derivative(&polys, 0, *u)).sum();
        let mut b = Self { s0, ell, phi_integral, c_ell_norm: 0.0, polys };
        let samples = 20_001;
        let mut norm: f64 = 0.0;
        for j in 0..=ell {
            for i in 1..samples - 1 {
                let s = s0 * (-1.0 + 2.0 * i as f64 / (samples - 1) as f64);
                norm = norm.max(b.derivative(j, s).abs());
            }
        }
        b.c_ell_norm = norm;
        Ok(b)
    }

    pub fn derivative(&self, j: usize, s: f64) -> f64 {
        let scale = 1.0 / (self.s0 * self.phi_integral) / self.s0.powi(j as i32);
        scale * bump_derivative(&self.polys, j, s / self.s0)
    }

    pub fn value(&self, s: f64) -> f64 {
        self.derivative(0, s)
    }
}

/// `β = α ζ`: supported in `(−s₀, s₀)`, `0 ≤ β ≤ η`, `|d^j β| ≤ η` for
/// `j ≤ ℓ`, and `∫β = α`.
#[derive(Debug, Clone)]
pub struct BetaCutoff {
    pub alpha: f64,
    pub eta: f64,
    /// Largest admissible `α`: `η / (1 + ‖ζ‖_{C^ℓ})`.
    pub delta: f64,
    pub bump: Bump,
}

impl BetaCutoff {
    pub fn value(&self, s: f64) -> f64 {
        self.alpha * self.bump.value(s)
    }

    pub fn derivative(&self, j: usize, s: f64) -> f64 {
        self.alpha * self.bump.derivative(j, s)
    }

    /// `∫_{−s₀}^{s₀} β` by composite Gauss–Legendre quadrature.
    pub fn integral(&self) -> f64 {
        let s0 = self.bump.s0;
        composite_rule(-s0, s0, 64, 16).iter().map(|(s, w)| w * self.value(*s)).sum()
    }
}

/// Largest admissible amplitude for the given strip and bound.
pub fn beta_delta(s0: f64, eta: f64, ell: usize) -> Result<f64> {
    Ok(eta / (1.0 + Bump::new(s0, ell)?.c_ell_norm))
}

pub fn cutoff_beta(s0: f64, eta: f64, ell: usize, alpha: f64) -> Result<BetaCutoff> {
    if !(eta >= 0.0) {
        return Err(Error::Precondition(format!("perturbation bound must be non-negative, got {eta}")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Precondition(format!("amplitude must be non-negative, got {alpha}")));
    }
    let bump = Bump::new(s0, ell)?;
    let delta = eta / (1.0 + bump.c_ell_norm);
    if alpha > delta {
        return Err(Error::AlphaTooLarge { alpha, delta });
    }
    Ok(BetaCutoff { alpha, eta, delta, bump })
}

/// The standard smooth step: 0 for `t ≤ 0`, 1 for `t ≥ 1`.
fn smooth_step(t: f64) -> (f64, f64) {
    let g = |x: f64| if x > 0.0 { (-1.0 / x).exp() } else { 0.0 };
    let dg = |x: f64| if x > 0.0 { (-1.0 / x).exp() / (x * x) } else { 0.0 };
    let (a, b) = (g(t), g(1.0 - t));
    let sum = a + b;
    let value = a / sum;
    let slope = (dg(t) * b + a * dg(1.0 - t)) / (sum * sum);
    (value, slope)
}

/// Even cutoff with values in `[0, 1]`: `γ ≡ 1` on `|t| ≤ 5ρ/12 ⊃ [−ρ/3, ρ/3]`
/// and `γ ≡ 0` for `|t| ≥ 11ρ/12`, built as `f((2/ρ)(11ρ/12 − |t|))`.
#[derive(Debug, Clone, Copy)]
pub struct GammaCutoff {
    pub rho: f64,
    pub ell: usize,
}

impl GammaCutoff {
    pub fn value(&self, t: f64) -> f64 {
        smooth_step((2.0 / self.rho) * (11.0 * self.rho / 12.0 - t.abs())).0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        -t.signum() * (2.0 / self.rho) * smooth_step((2.0 / self.rho) * (11.0 * self.rho / 12.0 - t.abs())).1
    }
}

pub fn cutoff_gamma(rho: f64, ell: usize) -> Result<GammaCutoff> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Precondition(format!("sphere radius must be positive, got {rho}")));
    }
    Ok(GammaCutoff { rho, ell })
}

// ---------------------------------------------------------------------------
// Sampled submanifolds of S^{k−1}_ρ × R^m.

type PointMap = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type TangentMap = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A parametrized submanifold of `S^{k−1}_ρ × R^m` given by a parameter
/// grid, a point map into `R^{k+m}` and its analytic tangent columns.
#[derive(Clone)]
pub struct SampledSubmanifold {
    pub label: String,
    pub k: usize,
    pub m: usize,
    pub dim: usize,
    pub grid: Vec<Vec<f64>>,
    point: PointMap,
    tangent: TangentMap,
}

impl fmt::Debug for SampledSubmanifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SampledSubmanifold")
            .field("label", &self.label)
            .field("k", &self.k)
            .field("m", &self.m)
            .field("dim", &self.dim)
            .field("samples", &self.grid.len())
            .finish()
    }
}

/// Hyperspherical coordinates on `S^{k−1}_ρ`.
fn sphere_point(rho: f64, angles: &[f64], k: usize) -> DVector<f64> {
    let mut x = DVector::zeros(k);
    let mut prod = rho;
    for i in 0..k {
        if i + 1 < k {
            x[i] = prod * angles[i].cos();
            prod *= angles[i].sin();
        } else {
            x[i] = prod;
        }
    }
    x
}

fn sphere_tangent(rho: f64, angles: &[f64], k: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(k, k - 1);
    for l in 0..k - 1 {
        for i in l..k {
            let mut v = rho;
            for (j, a) in angles.iter().enumerate().take(i.min(k - 1)) {
                v *= if j == l { a.cos() } else { a.sin() };
            }
            if i + 1 < k {
                v *= if i == l { -angles[i].sin() } else { angles[i].cos() };
            }
            t[(i, l)] = v;
        }
    }
    t
}

fn sphere_grid(k: usize, resolution: usize) -> Vec<Vec<f64>> {
    let mut grid = vec![Vec::new()];
    for axis in 0..k - 1 {
        let last = axis + 2 == k;
        let count = if last { 2 * resolution } else { resolution };
        let span = if last { 2.0 * std::f64::consts::PI } else { std::f64::consts::PI };
        let mut next = Vec::with_capacity(grid.len() * count);
        for g in &grid {
            for i in 0..count {
                let mut h = g.clone();
                h.push(span * (i as f64 + 0.5) / count as f64);
                next.push(h);
            }
        }
        grid = next;
    }
    grid
}

impl SampledSubmanifold {
    pub fn point(&self, q: &[f64]) -> DVector<f64> {
        (self.point)(q)
    }

    /// Tangent columns `∂/∂q_j` in `R^{k+m}`.
    pub fn tangent(&self, q: &[f64]) -> DMatrix<f64> {
        (self.tangent)(q)
    }

    /// `S^{k−1}_ρ × {center}`.
    pub fn sphere_slice(k: usize, rho: f64, center: &[f64], resolution: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Precondition("sampled spheres need k ≥ 2".into()));
        }
        let m = center.len();
        let c = center.to_vec();
        Ok(Self {
            label: "sphere_slice".into(),
            k,
            m,
            dim: k - 1,
            grid: sphere_grid(k, resolution),
            point: Arc::new(move |q| {
                let p = sphere_point(rho, q, k);
                DVector::from_iterator(k + m, p.iter().copied().chain(c.iter().copied()))
            }),
            tangent: Arc::new(move |q| {
                let mut t = DMatrix::zeros(k + m, k - 1);
                t.view_mut((0, 0), (k, k - 1)).copy_from(&sphere_tangent(rho, q, k));
                t
            }),
        })
    }

    /// The graph `ξ = f(p)` over `S^{k−1}_ρ`, with `df` the `m × k`
    /// Jacobian of `f` in ambient coordinates.
    pub fn graph(
        k: usize,
        m: usize,
        rho: f64,
        resolution: usize,
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        df: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::Precondition("sampled spheres need k ≥ 2".into()));
        }
        let f = Arc::new(f);
        let f2 = f.clone();
        Ok(Self {
            label: "graph".into(),
            k,
            m,
            dim: k - 1,
            grid: sphere_grid(k, resolution),
            point: Arc::new(move |q| {
                let p = sphere_point(rho, q, k);
                let xi = f2(&p);
                DVector::from_iterator(k + m, p.iter().copied().chain(xi.iter().copied()))
            }),
            tangent: Arc::new(move |q| {
                let p = sphere_point(rho, q, k);
                let tp = sphere_tangent(rho, q, k);
                let mut t = DMatrix::zeros(k + m, k - 1);
                t.view_mut((0, 0), (k, k - 1)).copy_from(&tp);
                t.view_mut((k, 0), (m, k - 1)).copy_from(&(df(&p) * &tp));
                t
            }),
        })
    }

    /// `{(ρ(cos θ, sin θ, 0, …), (b sin²θ, t₂, …, t_m))}`: an `m`-dimensional
    /// sheet that touches `S^{k−1}_ρ × {0}` tangentially along `θ ∈ {0, π}`
    /// and meets `S^{k−1}_ρ × {a}` transversally for `0 < a₁ < b`.
    pub fn folded_sheet(k: usize, m: usize, rho: f64, b: f64, width: f64, resolution: usize) -> Result<Self> {
        if k < 2 || m < 1 {
            return Err(Error::Precondition("the folded sheet needs k ≥ 2 and m ≥ 1".into()));
        }
        let mut grid = Vec::new();
        let free = m - 1;
        let per_axis: usize = if free == 0 { 1 } else { 5 };
        let total = per_axis.pow(free as u32);
        for i in 0..2 * resolution {
            let theta = std::f64::consts::PI * (i as f64 + 0.5) / resolution as f64;
            for c in 0..total {
                let mut q = vec![theta];
                let mut rest = c;
                for _ in 0..free {
                    let idx = rest % per_axis;
                    rest /= per_axis;
                    q.push(width * (idx as f64 / (per_axis - 1).max(1) as f64 * 2.0 - 1.0));
                }
                grid.push(q);
            }
        }
        Ok(Self {
            label: "folded_sheet".into(),
            k,
            m,
            dim: m,
            grid,
            point: Arc::new(move |q| {
                let mut x = DVector::zeros(k + m);
                x[0] = rho * q[0].cos();
                x[1] = rho * q[0].sin();
                x[k] = b * q[0].sin().powi(2);
                for j in 1..m {
                    x[k + j] = q[j];
                }
                x
            }),
            tangent: Arc::new(move |q| {
                let mut t = DMatrix::zeros(k + m, m);
                t[(0, 0)] = -rho * q[0].sin();
                t[(1, 0)] = rho * q[0].cos();
                t[(k, 0)] = 2.0 * b * q[0].sin() * q[0].cos();
                for j in 1..m {
                    t[(k + j, j)] = 1.0;
                }
                t
            }),
        })
    }

    /// `π(q)`: the `R^m` component.
    fn projection(&self, q: &[f64]) -> DVector<f64> {
        self.point(q).rows(self.k, self.m).into_owned()
    }

    fn projection_jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        self.tangent(q).rows(self.k, self.m).into_owned()
    }

    /// Parameters of sampled points of `π^{-1}(a)`, refined by Gauss–Newton
    /// from the grid points whose projection is closest to `a`.
    pub fn preimages(&self, a: &DVector<f64>) -> Vec<Vec<f64>> {
        let mut seeds: Vec<(f64, usize)> =
            self.grid.iter().enumerate().map(|(i, q)| ((self.projection(q) - a).norm(), i)).collect();
        seeds.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let tol = 1e-14 * (1.0 + a.norm());
        let mut found: Vec<(Vec<f64>, DVector<f64>)> = Vec::new();
        for (_, i) in seeds.into_iter().take(64) {
            let mut q = self.grid[i].clone();
            let mut converged = false;
            for _ in 0..200 {
                let r = self.projection(&q) - a;
                if r.norm() <= tol {
                    converged = true;
                    break;
                }
                let jac = self.projection_jacobian(&q);
                let Ok(step) = jac.svd(true, true).solve(&r, 1e-300) else { break };
                if !step.iter().all(|x| x.is_finite()) {
                    break;
                }
                q.iter_mut().zip(step.iter()).for_each(|(x, d)| *x -= d);
            }
            if !converged {
                continue;
            }
            let x = self.point(&q);
            if found.iter().all(|(_, y)| (y - &x).norm() > 1e-8) {
                found.push((q, x));
            }
        }
        found.into_iter().map(|(q, _)| q).collect()
    }

    /// Smallest singular value of `dπ` over the sampled preimages of `a`
    /// (`+∞` when the preimage is empty).
    pub fn regularity_margin(&self, a: &DVector<f64>) -> f64 {
        self.preimages(a)
            .iter()
            .map(|q| {
                let j = self.projection_jacobian(q);
                if j.ncols() < j.nrows() {
                    0.0
                } else {
                    min_singular_value(&j)
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// The box.

/// `B = (−s₀, s₀) × S^{k−1}_ρ × B^{n−k}_ρ` inside `M₀`.
#[derive(Debug, Clone)]
pub struct ModelBox {
    pub n: usize,
    pub k: usize,
    pub rho: f64,
    pub s0: f64,
    pub eta: f64,
    /// Derivative order controlled by the cutoff bounds.
    pub ell: usize,
    pub v_plus: Option<SampledSubmanifold>,
}

impl ModelBox {
    pub fn new(n: usize, k: usize, rho: f64, s0: f64, eta: f64, v_plus: Option<SampledSubmanifold>) -> Result<Self> {
        let b = Self { n, k, rho, s0, eta, ell: 4, v_plus };
        b.validate()?;
        Ok(b)
    }

    pub fn m(&self) -> usize {
        self.n - self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n {
            return Err(Error::Precondition(format!("need 1 ≤ k ≤ n, got k = {}, n = {}", self.k, self.n)));
        }
        if !(self.rho > 0.0) || !(self.s0 > 0.0) {
            return Err(Error::Precondition("box radius and strip half-width must be positive".into()));
        }
        let eta0 = self.estimate_eta0();
        if !(self.eta >= 0.0) || self.eta > eta0 {
            return Err(Error::Precondition(format!("η = {} must lie in [0, η₀ = {eta0}]", self.eta)));
        }
        if let Some(v) = &self.v_plus {
            if v.k != self.k || v.m != self.m() {
                return Err(Error::DimensionMismatch { expected: self.k + self.m(), got: v.k + v.m });
            }
        }
        Ok(())
    }

    /// Largest `t` keeping `g₀^{ij} + t (E₁₂ + E₂₁)` positive definite at
    /// every sampled point of the box (with a relative safety margin of 1%).
    pub fn estimate_eta0(&self) -> f64 {
        if self.m() == 0 {
            return f64::INFINITY;
        }
        let mut worst = f64::INFINITY;
        for (s, r) in box_grid(self.s0, self.rho) {
            let base = background_inverse_metric(self.n, s, r);
            let mut lo = 0.0;
            let mut hi = 1e6;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let mut g = base.clone();
                g[(0, 1)] += mid;
                g[(1, 0)] += mid;
                if min_symmetric_eigenvalue(&g) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            worst = worst.min(lo);
        }
        0.99 * worst
    }

    /// `δ` of the amplitude bound for this box.
    pub fn delta(&self) -> Result<f64> {
        beta_delta(self.s0, self.eta, self.ell)
    }
}

/// `g₀^{ij}` in the reordered coordinates `ζ = (s, ξ₁, …, ξ_m, tangent
/// coordinates of the sphere)`: the product metric is the identity in an
/// orthonormal frame.
fn background_inverse_metric(n: usize, _s: f64, _r: f64) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// `(s, ‖ξ‖)` samples covering the box and a margin around it.
fn box_grid(s0: f64, rho: f64) -> Vec<(f64, f64)> {
    let mut g = Vec::new();
    for i in 0..41 {
        let s = s0 * (-1.2 + 2.4 * i as f64 / 40.0);
        for j in 0..25 {
            g.push((s, rho * 1.2 * j as f64 / 24.0));
        }
    }
    g
}

/// A regular value `a⁺` of `π: V⁺ → R^m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularValue {
    pub a_plus: Vec<f64>,
    /// Smallest singular value of `dπ` over the preimage (`None` if empty).
    pub margin: Option<f64>,
    pub trials: usize,
}

/// Draw candidates `a` with `bound/2 ≤ ‖a‖ ≤ bound` until one is regular.
pub fn sard_regular_value(bx: &ModelBox, bound: f64, trials: usize, seed: u64) -> Result<RegularValue> {
    let m = bx.m();
    let limit = bx.delta()?.min(bx.rho / 3.0);
    if !(bound > 0.0) || bound > limit * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!("bound {bound} must lie in (0, min(δ, ρ/3) = {limit}]")));
    }
    if m == 0 {
        return Err(Error::Precondition("the box has no normal directions (n = k)".into()));
    }
    let v = bx.v_plus.as_ref().ok_or_else(|| Error::Precondition("the box carries no sampled V⁺".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for t in 0..trials {
        let dir = loop {
            let d = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let norm = d.norm();
            if norm > 1e-3 && norm <= 1.0 {
                break d / norm;
            }
        };
        let radius = bound * rng.gen_range(0.5..=1.0);
        let a = dir * radius;
        let margin = v.regularity_margin(&a);
        if margin > SV_FLOOR {
            return Ok(RegularValue {
                a_plus: a.iter().copied().collect(),
                margin: margin.is_finite().then_some(margin),
                trials: t + 1,
            });
        }
        best = best.max(margin);
    }
    Err(Error::NoRegularValueFound { trials, best_margin: best })
}

/// `Y′₀ = −∂_s − β(s)γ(‖ξ‖)∂_{ξ₁}` and the metric `g′₀` whose inverse is
/// `g₀^{ij} + βγ(E₁₂ + E₂₁)`, with `ξ₁` the coordinate along `−a⁺`.
#[derive(Debug, Clone)]
pub struct PerturbedSystem {
    pub n: usize,
    pub k: usize,
    pub beta: BetaCutoff,
    pub gamma: GammaCutoff,
    /// Orthonormal frame of `R^m` whose first column is `−a⁺/‖a⁺‖`.
    pub frame: DMatrix<f64>,
}

/// Orthonormal frame (a Householder reflection) with first column `u`.
fn frame_with_first(u: &DVector<f64>) -> DMatrix<f64> {
    let m = u.len();
    let mut e1 = DVector::zeros(m);
    e1[0] = 1.0;
    let v = &e1 - u;
    if v.norm() < 1e-14 {
        return DMatrix::identity(m, m);
    }
    DMatrix::identity(m, m) - (&v * v.transpose()) * (2.0 / v.norm_squared())
}

pub fn perturbed_system(bx: &ModelBox, beta: BetaCutoff, gamma: GammaCutoff, a_plus: &[f64]) -> Result<PerturbedSystem> {
    let m = bx.m();
    if a_plus.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: a_plus.len() });
    }
    let a = DVector::from_column_slice(a_plus);
    if (a.norm() - beta.alpha).abs() > 1e-12 * (1.0 + beta.alpha) {
        return Err(Error::Precondition(format!("‖a⁺‖ = {} differs from the cutoff amplitude {}", a.norm(), beta.alpha)));
    }
    // The field lowers ξ₁ by ∫β = α across the strip, so ξ₁ points along
    // −a⁺ for the flow to land on a⁺.
    let frame = if a.norm() > 0.0 {
        frame_with_first(&(-&a / a.norm()))
    } else {
        DMatrix::identity(m, m)
    };
    let sys = PerturbedSystem { n: bx.n, k: bx.k, beta, gamma, frame };
    if m > 0 {
        for (s, r) in box_grid(bx.s0, bx.rho) {
            let g = sys.inverse_metric(s, r);
            let min = min_symmetric_eigenvalue(&g);
            if !(min > 0.0) {
                return Err(Error::PositivityLost { min_eigenvalue: min });
            }
        }
    }
    Ok(sys)
}

impl PerturbedSystem {
    pub fn m(&self) -> usize {
        self.n - self.k
    }

    fn bump(&self, s: f64, xi_norm: f64) -> f64 {
        self.beta.value(s) * self.gamma.value(xi_norm)
    }

    /// `Y′₀` at the point `[s, p, ξ]`.
    pub fn field(&self, x: &[f64]) -> Vec<f64> {
        let (k, m) = (self.k, self.m());
        let xi = DVector::from_column_slice(&x[1 + k..1 + k + m]);
        let b = self.bump(x[0], xi.norm());
        let mut out = vec![0.0; 1 + k + m];
        out[0] = -1.0;
        if m > 0 {
            for j in 0..m {
                out[1 + k + j] = -b * self.frame[(j, 0)];
            }
        }
        out
    }

    /// `g′₀^{ij}` in `ζ = (s, ξ₁, …, ξ_m, sphere)` at `(s, ‖ξ‖)`.
    pub fn inverse_metric(&self, s: f64, xi_norm: f64) -> DMatrix<f64> {
        let mut g = background_inverse_metric(self.n, s, xi_norm);
        if self.m() > 0 {
            let b = self.bump(s, xi_norm);
            g[(0, 1)] += b;
            g[(1, 0)] += b;
        }
        g
    }

    /// `g′₀` (lower indices).
    pub fn metric(&self, s: f64, xi_norm: f64) -> DMatrix<f64> {
        self.inverse_metric(s, xi_norm).try_inverse().expect("positive definite inverse metric")
    }

    /// `−grad_{g′₀} h₀` in `ζ` coordinates, obtained by solving
    /// `g′₀ v = −dh₀` with the lower-index metric.
    pub fn negative_gradient(&self, s: f64, xi_norm: f64) -> DVector<f64> {
        let g = self.metric(s, xi_norm);
        let mut dh = DVector::zeros(self.n);
        dh[0] = -1.0;
        g.lu().solve(&dh).expect("invertible metric")
    }

    /// `Y′₀` in `ζ` coordinates.
    pub fn field_zeta(&self, s: f64, xi_norm: f64) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        y[0] = -1.0;
        if self.m() > 0 {
            y[1] = -self.bump(s, xi_norm);
        }
        y
    }

    /// Flow `Y′₀` from `x` for time `t`.
    pub fn flow(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let cfg = OdeConfig { rel_tol: 1e-13, abs_tol: 1e-14, max_step: self.beta.bump.s0 / 64.0, max_steps: 1_000_000 };
        let sol = integrate(|_, y, dy| dy.copy_from_slice(&self.field(y)), 0.0, x, t, &cfg)?;
        Ok(sol.y_end)
    }

    /// `max |g′₀ − g₀|` and `max |∂(g′₀ − g₀)|` (finite differences in `s`
    /// and `‖ξ‖`) over the sample grid.
    pub fn deviation(&self, s0: f64, rho: f64) -> (f64, f64) {
        let h = 1e-6 * s0.min(rho);
        let diff = |s: f64, r: f64| self.metric(s, r) - DMatrix::<f64>::identity(self.n, self.n);
        let mut c0: f64 = 0.0;
        let mut c1: f64 = 0.0;
        for (s, r) in box_grid(s0, rho) {
            let d = diff(s, r);
            c0 = c0.max(d.amax());
            let ds = (diff(s + h, r) - diff(s - h, r)) / (2.0 * h);
            let dr = (diff(s, r + h) - diff(s, (r - h).abs())) / (r + h - (r - h).abs());
            c1 = c1.max(ds.amax()).max(dr.amax());
        }
        (c0, c1)
    }
}

/// Outcome of the transversality check at the level `{−s₀}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub transversal: bool,
    /// Smallest singular value of the combined tangent matrix; `None`
    /// stands for `+∞` (no intersection).
    pub margin: Option<f64>,
    /// Intersection points `[p, ξ]` of `S^{k−1}_ρ × {a}` with `V⁺`.
    pub intersections: Vec<Vec<f64>>,
}

impl Certificate {
    pub fn margin_value(&self) -> f64 {
        self.margin.unwrap_or(f64::INFINITY)
    }
}

/// Orthonormal basis of the column span of `t`.
fn span_basis(t: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = t.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cols: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-12 * top.max(1e-300)).collect();
    DMatrix::from_fn(t.nrows(), cols.len(), |r, c| u[(r, cols[c])])
}

/// Orthonormal basis of `T_p S^{k−1}_ρ` in `R^k`.
fn sphere_tangent_basis(p: &DVector<f64>) -> DMatrix<f64> {
    let k = p.len();
    let unit = p / p.norm();
    let proj = DMatrix::identity(k, k) - &unit * unit.transpose();
    span_basis(&proj)
}

/// `W⁻ ∩ {−s₀} = S^{k−1}_ρ × {a}` against `W⁺ ∩ {−s₀} = V⁺`: at every
/// intersection point the tangent spaces must together span
/// `T(S^{k−1}_ρ × R^m)`; the margin is the smallest singular value of the
/// combined orthonormal bases. `a = 0` describes the unperturbed box.
pub fn transversality_certificate(bx: &ModelBox, a: &[f64], tol: f64) -> Result<Certificate> {
    let (k, m) = (bx.k, bx.m());
    let v = bx.v_plus.as_ref().ok_or_else(|| Error::Precondition("the box carries no sampled V⁺".into()))?;
    if a.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: a.len() });
    }
    let target = DVector::from_column_slice(a);
    let mut margin = f64::INFINITY;
    let mut intersections = Vec::new();
    for q in v.preimages(&target) {
        let x = v.point(&q);
        let p = x.rows(0, k).into_owned();
        let sphere = sphere_tangent_basis(&p);
        // Ambient basis of T(S^{k−1} × R^m) and of the W⁻ slice.
        let mut level = DMatrix::zeros(k + m, k - 1 + m);
        level.view_mut((0, 0), (k, k - 1)).copy_from(&sphere);
        level.view_mut((k, k - 1), (m, m)).copy_from(&DMatrix::identity(m, m));
        let mut unstable = DMatrix::zeros(k + m, k - 1);
        unstable.view_mut((0, 0), (k, k - 1)).copy_from(&sphere);
        let stable = span_basis(&v.tangent(&q));
        let combined = {
            let mut c = DMatrix::zeros(k + m, unstable.ncols() + stable.ncols());
            c.view_mut((0, 0), (k + m, unstable.ncols())).copy_from(&unstable);
            c.view_mut((0, unstable.ncols()), (k + m, stable.ncols())).copy_from(&stable);
            level.transpose() * c
        };
        let sigma = if combined.ncols() < combined.nrows() { 0.0 } else { min_singular_value(&combined) };
        margin = margin.min(sigma);
        intersections.push(x.iter().copied().collect());
    }
    Ok(Certificate { transversal: margin > tol, margin: margin.is_finite().then_some(margin), intersections })
}

// ---------------------------------------------------------------------------
// End-to-end demonstration.

/// Parameters of the perturbation demonstration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DemoParams {
    pub k: usize,
    pub n: usize,
    pub rho: f64,
    pub s0: f64,
    pub eta: f64,
    /// Bound for `‖a⁺‖`; defaults to `min(δ, ρ/3)`.
    pub alpha: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbReport {
    pub params: DemoParams,
    pub eta0: f64,
    pub delta: f64,
    pub bound: f64,
    pub regular_value: RegularValue,
    pub alpha: f64,
    pub beta_integral: f64,
    /// `ξ` after flowing `(s₀, p, 0)` for time `2s₀`, minus `a⁺` (max over samples of `p`).
    pub displacement_error: f64,
    /// `max |−grad_{g′₀}h₀ − Y′₀|` over the sample grid.
    pub gradient_identity_error: f64,
    pub c0_deviation: f64,
    pub c1_deviation: f64,
    pub unperturbed: Certificate,
    pub perturbed: Certificate,
}

/// The folded sheet used as `V⁺` by the demonstration.
pub fn demo_v_plus(k: usize, n: usize, rho: f64) -> Result<SampledSubmanifold> {
    SampledSubmanifold::folded_sheet(k, n - k, rho, rho / 2.0, rho, 64)
}

pub fn perturb_demo(params: DemoParams) -> Result<PerturbReport> {
    let DemoParams { k, n, rho, s0, eta, alpha, seed } = params;
    if k < 2 || n <= k {
        return Err(Error::Precondition(format!("the demonstration needs 2 ≤ k < n, got k = {k}, n = {n}")));
    }
    let bx = ModelBox::new(n, k, rho, s0, eta, Some(demo_v_plus(k, n, rho)?))?;
    let eta0 = bx.estimate_eta0();
    let delta = bx.delta()?;
    let bound = match alpha {
        Some(a) if a > delta => return Err(Error::AlphaTooLarge { alpha: a, delta }),
        Some(a) => a.min(rho / 3.0),
        None => delta.min(rho / 3.0),
    };
    let regular_value = sard_regular_value(&bx, bound, 64, seed)?;
    let a = DVector::from_column_slice(&regular_value.a_plus);
    let beta = cutoff_beta(s0, eta, bx.ell, a.norm())?;
    let gamma = cutoff_gamma(rho, bx.ell)?;
    let sys = perturbed_system(&bx, beta, gamma, &regular_value.a_plus)?;
    let beta_integral = sys.beta.integral();

    let mut displacement_error: f64 = 0.0;
    for j in 0..8 {
        let theta = 2.0 * std::f64::consts::PI * j as f64 / 8.0;
        let mut x = vec![0.0; 1 + n];
        x[0] = s0;
        x[1] = rho * theta.cos();
        x[2] = rho * theta.sin();
        let y = sys.flow(&x, 2.0 * s0)?;
        let xi = DVector::from_column_slice(&y[1 + k..]);
        displacement_error = displacement_error.max((xi - &a).amax()).max((y[0] + s0).abs());
    }
    let mut gradient_identity_error: f64 = 0.0;
    for i in 0..10 {
        for j in 0..10 {
            for l in 0..10 {
                let s = s0 * (-1.1 + 2.2 * i as f64 / 9.0);
                let r = rho * 1.1 * j as f64 / 9.0 + 1e-3 * l as f64 * rho;
                let diff = sys.negative_gradient(s, r) - sys.field_zeta(s, r);
                gradient_identity_error = gradient_identity_error.max(diff.amax());
            }
        }
    }
    let (c0_deviation, c1_deviation) = sys.deviation(s0, rho);
    let tol = 1e-3;
    let unperturbed = transversality_certificate(&bx, &vec![0.0; n - k], tol)?;
    let perturbed = transversality_certificate(&bx, &regular_value.a_plus, tol)?;
    Ok(PerturbReport {
        params,
        eta0,
        delta,
        bound,
        alpha: a.norm(),
        regular_value,
        beta_integral,
        displacement_error,
        gradient_identity_error,
        c0_deviation,
        c1_deviation,
        unperturbed,
        perturbed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let b = Bump::new(1.3, 4).unwrap();
        assert!((b.phi_integral - 0.443_993_816_168_079_4).abs() < 1e-14);
        for j in 0..4 {
            for i in 1..40 {
                let s = -1.25 + 2.5 * i as f64 / 40.0;
                let h = 1e-5;
                let fd = (b.derivative(j, s + h) - b.derivative(j, s - h)) / (2.0 * h);
                let exact = b.derivative(j + 1, s);
                assert!((fd - exact).abs() < 1e-5 * (1.0 + exact.abs()), "j={j} s={s}: {fd} vs {exact}");
            }
        }
    }

    #[test]
    fn beta_has_the_required_shape() {
        let eta = 0.5;
        let delta = beta_delta(1.0, eta, 4).unwrap();
        let beta = cutoff_beta(1.0, eta, 4, 0.01_f64.min(delta)).unwrap();
        assert!((beta.integral() - beta.alpha).abs() < 1e-10);
        assert_eq!(beta.value(1.0), 0.0);
        assert_eq!(beta.value(-1.0), 0.0);
        for i in 0..=400 {
            let s = -1.0 + 2.0 * i as f64 / 400.0;
            let v = beta.value(s);
            assert!((0.0..=eta).contains(&v));
            for j in 1..=4 {
                assert!(beta.derivative(j, s).abs() <= eta);
            }
        }
        let zero = cutoff_beta(1.0, eta, 4, 0.0).unwrap();
        assert_eq!(zero.value(0.3), 0.0);
        let err = cutoff_beta(1.0, eta, 4, 2.0 * delta).unwrap_err();
        assert!(matches!(err, Error::AlphaTooLarge { .. }));
    }

    #[test]
    fn gamma_has_the_required_shape() {
        let rho = 0.8;
        let g = cutoff_gamma(rho, 4).unwrap();
        assert_eq!(g.value(0.0), 1.0);
        assert_eq!(g.value(rho), 0.0);
        assert_eq!(g.value(-rho), 0.0);
        let f_slope = (0..=1000).map(|i| smooth_step(i as f64 / 1000.0).1.abs()).fold(0.0, f64::max);
        for i in 0..=200 {
            let t = -1.2 * rho + 2.4 * rho * i as f64 / 200.0;
            let v = g.value(t);
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v, g.value(-t));
            if t.abs() <= rho / 3.0 {
                assert_eq!(v, 1.0);
            }
            assert!(g.derivative(t).abs() <= f_slope * 1.01 * 2.0 / rho);
            let h = 1e-6;
            let fd = (g.value(t + h) - g.value(t - h)) / (2.0 * h);
            assert!((fd - g.derivative(t)).abs() < 1e-5);
        }
    }

    fn circle_box(eta: f64, v: SampledSubmanifold) -> ModelBox {
        ModelBox::new(3, 2, 1.0, 1.0, eta, Some(v)).unwrap()
    }

    #[test]
    fn eta0_is_sampled_from_the_metric() {
        let bx = circle_box(0.5, demo_v_plus(2, 3, 1.0).unwrap());
        assert!((bx.estimate_eta0() - 0.99).abs() < 1e-9);
        assert!(ModelBox::new(3, 2, 1.0, 1.0, 2.0, None).is_err());
    }

    #[test]
    fn flat_slice_has_empty_preimage() {
        let v = SampledSubmanifold::sphere_slice(2, 1.0, &[0.0], 32).unwrap();
        let bx = circle_box(0.5, v);
        let bound = bx.delta().unwrap().min(1.0 / 3.0);
        let rv = sard_regular_value(&bx, bound, 5, 7).unwrap();
        assert_eq!(rv.trials, 1);
        assert!(rv.margin.is_none());
        let a = DVector::from_vec(rv.a_plus.clone());
        assert!(a.norm() > 0.0 && a.norm() <= bound);
        assert!(matches!(sard_regular_value(&bx, 0.0, 5, 7), Err(Error::Precondition(_))));
        let cert = transversality_certificate(&bx, &rv.a_plus, 1e-3).unwrap();
        assert!(cert.transversal && cert.margin.is_none());
    }

    #[test]
    fn regular_value_avoids_critical_values_of_a_graph() {
        // ξ = c·x₁x₂/ρ² on the circle of radius ρ = 1 in R³ (k = 3, m = 1):
        // critical values ±c/2 and 0 (at the poles x₃ = ±1).
        let c = 0.01;
        let f = move |p: &DVector<f64>| DVector::from_vec(vec![c * p[0] * p[1]]);
        let df = move |p: &DVector<f64>| DMatrix::from_row_slice(1, 3, &[c * p[1], c * p[0], 0.0]);
        let v = SampledSubmanifold::graph(3, 1, 1.0, 24, f, df).unwrap();
        let bx = ModelBox::new(4, 3, 1.0, 1.0, 0.9, Some(v.clone())).unwrap();
        let bound = bx.delta().unwrap().min(1.0 / 3.0);
        let rv = sard_regular_value(&bx, bound, 20, 3).unwrap();
        let a = rv.a_plus[0];
        // Oracle: dense sampling of the critical values of f on the sphere.
        let mut critical = Vec::new();
        let n = 400;
        for i in 0..n {
            for j in 0..2 * n {
                let q = [std::f64::consts::PI * (i as f64 + 0.5) / n as f64, std::f64::consts::PI * j as f64 / n as f64];
                let t = v.tangent(&q);
                let grad = t.rows(3, 1).into_owned();
                if grad.amax() < 0.02 * c {
                    critical.push(v.point(&q)[3]);
                }
            }
        }
        assert!(!critical.is_empty());
        for cv in critical {
            assert!((a - cv).abs() > 1e-6, "a = {a} hits critical value {cv}");
        }
        assert!(rv.margin.map_or(true, |m| m > SV_FLOOR));
    }

    #[test]
    fn tangential_slice_is_not_transversal() {
        let a = [0.004];
        let v = SampledSubmanifold::sphere_slice(2, 1.0, &a, 32).unwrap();
        let bx = circle_box(0.5, v);
        let cert = transversality_certificate(&bx, &a, 1e-3).unwrap();
        assert!(!cert.transversal);
        assert!(cert.margin.unwrap() < 1e-6);
        let moved = transversality_certificate(&bx, &[0.002], 1e-3).unwrap();
        assert!(moved.transversal && moved.intersections.is_empty());
    }

    #[test]
    fn folded_sheet_certificate_flips() {
        let v = demo_v_plus(2, 3, 1.0).unwrap();
        let bx = circle_box(0.5, v.clone());
        let before = transversality_certificate(&bx, &[0.0], 1e-3).unwrap();
        assert!(!before.transversal && before.margin.unwrap() < 1e-6);
        let a = 0.004;
        let after = transversality_certificate(&bx, &[a], 1e-3).unwrap();
        assert!(after.transversal && after.margin.unwrap() > 1e-3);
        // Oracle: sign changes of b sin²θ − a on a fine circle grid.
        let b = 0.5;
        let n = 100_000;
        let g = |i: usize| b * (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin().powi(2) - a;
        let roots = (0..n).filter(|&i| g(i).signum() != g(i + 1).signum()).count();
        assert_eq!(after.intersections.len(), roots);
    }

    #[test]
    fn perturbed_flow_and_metric() {
        let report = perturb_demo(DemoParams { k: 2, n: 3, rho: 1.0, s0: 1.0, eta: 0.5, alpha: None, seed: 11 }).unwrap();
        assert!((report.beta_integral - report.alpha).abs() < 1e-10);
        assert!(report.displacement_error < 1e-8, "{}", report.displacement_error);
        assert!(report.gradient_identity_error < 1e-10);
        assert!(!report.unperturbed.transversal);
        assert!(report.perturbed.transversal && report.perturbed.margin_value() > 1e-3);
        let c0 = |eta: f64| {
            let bx = circle_box(eta, demo_v_plus(2, 3, 1.0).unwrap());
            let alpha = bx.delta().unwrap();
            let sys = perturbed_system(&bx, cutoff_beta(1.0, eta, 4, alpha).unwrap(), cutoff_gamma(1.0, 4).unwrap(), &[alpha]).unwrap();
            sys.deviation(1.0, 1.0).0
        };
        let ratio = c0(0.5) / c0(0.25);
        assert!((ratio / 2.0 - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn field_is_unperturbed_outside_the_box() {
        let bx = circle_box(0.5, demo_v_plus(2, 3, 1.0).unwrap());
        let alpha = bx.delta().unwrap().min(1.0 / 3.0);
        let sys = perturbed_system(&bx, cutoff_beta(1.0, 0.5, 4, alpha).unwrap(), cutoff_gamma(1.0, 4).unwrap(), &[alpha]).unwrap();
        for x in [[1.5, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.2], [-1.0, 1.0, 0.0, 0.1]] {
            assert_eq!(sys.field(&x), vec![-1.0, 0.0, 0.0, 0.0]);
        }
        let g = sys.metric(1.5, 0.0);
        assert_eq!(g, DMatrix::identity(3, 3));
        let zero = perturbed_system(&bx, cutoff_beta(1.0, 0.0, 4, 0.0).unwrap(), cutoff_gamma(1.0, 4).unwrap(), &[0.0]).unwrap();
        assert_eq!(zero.field(&[0.0, 1.0, 0.0, 0.0]), vec![-1.0, 0.0, 0.0, 0.0]);
        assert_eq!(zero.metric(0.0, 0.0), DMatrix::identity(3, 3));
    }

    #[test]
    fn positivity_is_lost_for_oversized_bounds() {
        let mut bx = circle_box(0.5, demo_v_plus(2, 3, 1.0).unwrap());
        bx.eta = 200.0;
        bx.s0 = 10.0;
        bx.ell = 1;
        let alpha = beta_delta(10.0, 200.0, 1).unwrap();
        let beta = cutoff_beta(10.0, 200.0, 1, alpha).unwrap();
        let err = perturbed_system(&bx, beta, cutoff_gamma(1.0, 1).unwrap(), &[alpha]).unwrap_err();
        assert!(matches!(err, Error::PositivityLost { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn beta_integrates_to_alpha(frac in 0.0f64..=1.0, s0 in 0.3f64..3.0) {
            let delta = beta_delta(s0, 0.5, 4).unwrap();
            let beta = cutoff_beta(s0, 0.5, 4, frac * delta).unwrap();
            prop_assert!((beta.integral() - beta.alpha).abs() < 1e-10);
        }

        #[test]
        fn gamma_is_even(t in -2.0f64..2.0, rho in 0.1f64..3.0) {
            let g = cutoff_gamma(rho, 4).unwrap();
            prop_assert_eq!(g.value(t), g.value(-t));
        }
    }
}
