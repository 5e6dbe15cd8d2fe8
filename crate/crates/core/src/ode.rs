//! Dormand–Prince 5(4) integrator with continuous (dense) output.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { rel_tol: 1e-11, abs_tol: 1e-11, max_step: 0.25, max_steps: 200_000 }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step with its interpolation coefficients.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn start(&self) -> &[f64] {
        &self.rcont[0]
    }

    pub fn end(&self) -> Vec<f64> {
        self.rcont[0].iter().zip(&self.rcont[1]).map(|(a, b)| a + b).collect()
    }

    /// Fourth-order interpolant at `t` inside the step.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        let [r1, r2, r3, r4, r5] = &self.rcont;
        (0..r1.len())
            .map(|i| r1[i] + th * (r2[i] + th1 * (r3[i] + th * (r4[i] + th1 * r5[i]))))
            .collect()
    }
}

/// Accepted steps covering `[t_start, t_end]` (or the reverse interval).
#[derive(Debug, Clone)]
pub struct Solution {
    pub t_start: f64,
    pub t_end: f64,
    pub y_end: Vec<f64>,
    pub steps: Vec<DenseStep>,
}

impl Solution {
    /// Dense output at any `t` between `t_start` and `t_end`.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        if self.steps.is_empty() {
            return self.y_end.clone();
        }
        let forward = self.t_end >= self.t_start;
        let idx = self.steps.partition_point(|s| {
            if forward {
                s.t1() < t
            } else {
                s.t1() > t
            }
        });
        let step = &self.steps[idx.min(self.steps.len() - 1)];
        step.eval(t)
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Integrate `y' = f(t, y)` from `t0` to `t1` (either direction).
///
/// `f` writes the derivative into its output slice. Non-finite derivatives
/// reject the step; a collapsing step size reports [`Error::StepUnderflow`].
pub fn integrate<F>(mut f: F, t0: f64, y0: &[f64], t1: f64, cfg: &OdeConfig) -> Result<Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut sol = Solution { t_start: t0, t_end: t1, y_end: y0.to_vec(), steps: Vec::new() };
    if span == 0.0 {
        return Ok(sol);
    }
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    f(t, &y, &mut k1);
    if !all_finite(&k1) {
        return Err(Error::StepUnderflow { time: t, point: y });
    }
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    // Initial step guess from the derivative scale.
    let scale: f64 = y.iter().map(|v| v.abs()).fold(0.0, f64::max) * cfg.rel_tol + cfg.abs_tol;
    let dnorm: f64 = k1.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut h = if dnorm > 0.0 { (0.01 * (scale / cfg.rel_tol.max(1e-16)).max(1e-3) / dnorm).min(span) } else { span };
    h = h.min(cfg.max_step).min(span).max(1e-12 * span);
    let mut steps = 0usize;
    let min_h = 1e-14 * (1.0 + t0.abs().max(t1.abs()));
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        let last = h >= remaining;
        let hs = if last { remaining } else { h };
        if hs < min_h && !last {
            return Err(Error::StepUnderflow { time: t, point: y });
        }
        steps += 1;
        if steps > cfg.max_steps {
            return Err(Error::StepUnderflow { time: t, point: y });
        }
        let hd = hs * dir;
        for i in 0..n {
            tmp[i] = y[i] + hd * A21 * k1[i];
        }
        f(t + C2 * hd, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + hd * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * hd, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + hd * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * hd, &tmp, &mut k4);
        for i in 0..n {
            tmp[i] = y[i] + hd * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * hd, &tmp, &mut k5);
        for i in 0..n {
            tmp[i] = y[i]
                + hd * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + hd, &tmp, &mut k6);
        for i in 0..n {
            y1[i] = y[i]
                + hd * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t + hd, &y1, &mut k7);
        let finite = all_finite(&y1) && all_finite(&k7) && all_finite(&k2) && all_finite(&k6);
        let mut err = 0.0;
        if finite {
            for i in 0..n {
                let e = hd
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y1[i].abs());
                err += (e / sc).powi(2);
            }
            err = (err / n as f64).sqrt();
        }
        if !finite || !err.is_finite() {
            h = hs * 0.1;
            if h < min_h {
                return Err(Error::StepUnderflow { time: t, point: y });
            }
            continue;
        }
        if err <= 1.0 {
            let ydiff: Vec<f64> = (0..n).map(|i| y1[i] - y[i]).collect();
            let bspl: Vec<f64> = (0..n).map(|i| hd * k1[i] - ydiff[i]).collect();
            let r4: Vec<f64> = (0..n).map(|i| ydiff[i] - hd * k7[i] - bspl[i]).collect();
            let r5: Vec<f64> = (0..n)
                .map(|i| {
                    hd * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i])
                })
                .collect();
            sol.steps.push(DenseStep { t0: t, h: hd, rcont: [y.clone(), ydiff, bspl, r4, r5] });
            t = if last { t1 } else { t + hd };
            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut k1, &mut k7);
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (hs * fac).min(cfg.max_step);
            if last {
                break;
            }
        } else {
            h = hs * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            if h < min_h {
                return Err(Error::StepUnderflow { time: t, point: y });
            }
        }
    }
    sol.y_end = y;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth_and_decay() {
        let cfg = OdeConfig::default();
        let sol = integrate(|_, y, d| {
            d[0] = y[0];
            d[1] = -y[1];
        }, 0.0, &[1.0, 1.0], 2.0, &cfg)
        .unwrap();
        assert!((sol.y_end[0] - 2f64.exp()).abs() < 1e-9);
        assert!((sol.y_end[1] - (-2f64).exp()).abs() < 1e-11);
        // dense output in the middle
        let mid = sol.eval(1.3);
        assert!((mid[0] - 1.3f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn backward_integration() {
        let sol = integrate(|_, y, d| d[0] = -y[0], 1.0, &[1.0], -1.0, &OdeConfig::default()).unwrap();
        assert!((sol.y_end[0] - 2f64.exp()).abs() < 1e-9);
        let v = sol.eval(0.0);
        assert!((v[0] - 1f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn zero_span_is_identity() {
        let sol = integrate(|_, _, d| d[0] = 1.0, 0.0, &[3.0], 0.0, &OdeConfig::default()).unwrap();
        assert_eq!(sol.y_end, vec![3.0]);
    }

    #[test]
    fn blow_up_underflows() {
        // y' = y^2 from y=1 blows up at t = 1.
        let r = integrate(|_, y, d| d[0] = y[0] * y[0], 0.0, &[1.0], 2.0, &OdeConfig::default());
        assert!(matches!(r, Err(Error::StepUnderflow { .. })));
    }
}
