//! Gauss–Legendre rules, endpoint-grading transforms and compensated sums.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Newton on `P_n`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on `[a, b]`: `panels` panels of `order`
/// points each.
pub fn composite_rule(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(order);
    let mut out = Vec::with_capacity(panels * order);
    let hw = (b - a) / panels as f64;
    for p in 0..panels {
        let lo = a + hw * p as f64;
        for (xi, wi) in x.iter().zip(&w) {
            out.push((lo + 0.5 * hw * (xi + 1.0), 0.5 * hw * wi));
        }
    }
    out
}

/// Grading map `[0,1] → [0,1]` with `ψ(t) ~ t⁴` at both ends:
/// `ψ(t) = 35t⁴ − 84t⁵ + 70t⁶ − 20t⁷`.
pub fn grade(t: f64) -> (f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let psi = t4 * (35.0 - 84.0 * t + 70.0 * t2 - 20.0 * t3);
    let dpsi = 140.0 * t3 * (1.0 - t).powi(3);
    (psi, dpsi)
}

/// Nodes and weights on `[a, b]` after the endpoint grading; `n` points.
pub fn graded_rule(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let order = 8.min(n.max(1));
    let panels = (n / order).max(1);
    composite_rule(0.0, 1.0, panels, order)
        .into_iter()
        .map(|(t, w)| {
            let (psi, dpsi) = grade(t);
            (a + (b - a) * psi, (b - a) * dpsi * w)
        })
        .collect()
}

/// Kahan–Babuška compensated accumulator.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
