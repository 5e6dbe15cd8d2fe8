//! Exact arithmetic in `Q` and in cyclotomic fields `Q(ζ_d)`, with rank by
//! Gaussian elimination over either.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

/// The operations Gaussian elimination needs.
pub trait Field: Clone + PartialEq + fmt::Debug {
    fn zero_like(&self) -> Self;
    fn is_zero(&self) -> bool;
    fn add(&self, other: &Self) -> Self;
    fn sub(&self, other: &Self) -> Self;
    fn mul(&self, other: &Self) -> Self;
    /// Multiplicative inverse; only called on nonzero elements.
    fn inv(&self) -> Self;
}

impl Field for BigRational {
    fn zero_like(&self) -> Self {
        BigRational::zero()
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn inv(&self) -> Self {
        self.recip()
    }
}

/// Rank of a matrix given as rows.
pub fn rank<F: Field>(mut rows: Vec<Vec<F>>) -> usize {
    let ncols = rows.first().map_or(0, |r| r.len());
    let mut rank = 0;
    for col in 0..ncols {
        let Some(pivot) = (rank..rows.len()).find(|&r| !rows[r][col].is_zero()) else { continue };
        rows.swap(rank, pivot);
        let inv = rows[rank][col].inv();
        let prow: Vec<F> = rows[rank].iter().map(|x| x.mul(&inv)).collect();
        for r in 0..rows.len() {
            if r != rank && !rows[r][col].is_zero() {
                let f = rows[r][col].clone();
                for c in col..ncols {
                    rows[r][c] = rows[r][c].sub(&f.mul(&prow[c]));
                }
            }
        }
        rows[rank] = prow;
        rank += 1;
    }
    rank
}

fn int_poly_divide(num: &[BigInt], den: &[BigInt]) -> Vec<BigInt> {
    // Monic divisor, exact division.
    let mut rem = num.to_vec();
    let dd = den.len() - 1;
    let mut quot = vec![BigInt::zero(); num.len().saturating_sub(dd)];
    for i in (0..quot.len()).rev() {
        let c = rem[i + dd].clone();
        if c.is_zero() {
            continue;
        }
        for (j, dj) in den.iter().enumerate() {
            rem[i + j] -= &c * dj;
        }
        quot[i] = c;
    }
    debug_assert!(rem.iter().all(|c| c.is_zero()));
    quot
}

/// Coefficients (ascending) of the cyclotomic polynomial `Φ_d`.
pub fn cyclotomic_polynomial(d: u32) -> Vec<BigInt> {
    assert!(d >= 1);
    let mut num = vec![BigInt::zero(); d as usize + 1];
    num[0] = -BigInt::one();
    num[d as usize] = BigInt::one();
    for e in 1..d {
        if d % e == 0 {
            num = int_poly_divide(&num, &cyclotomic_polynomial(e));
        }
    }
    num
}

/// An element of `Q(ζ_d)` as a polynomial in `ζ_d` of degree below `φ(d)`.
#[derive(Clone, PartialEq, Eq)]
pub struct Cyclotomic {
    order: u32,
    modulus: std::sync::Arc<Vec<BigInt>>,
    coeffs: Vec<BigRational>,
}

impl fmt::Debug for Cyclotomic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<String> = self
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| !Zero::is_zero(*c))
            .map(|(i, c)| format!("({c})ζ^{i}"))
            .collect();
        if terms.is_empty() {
            write!(f, "0")
        } else {
            write!(f, "{}", terms.join(" + "))
        }
    }
}

/// Field context for `Q(ζ_d)`.
#[derive(Debug, Clone)]
pub struct CyclotomicField {
    order: u32,
    modulus: std::sync::Arc<Vec<BigInt>>,
}

impl CyclotomicField {
    pub fn new(order: u32) -> Self {
        Self { order, modulus: std::sync::Arc::new(cyclotomic_polynomial(order)) }
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn degree(&self) -> usize {
        self.modulus.len() - 1
    }

    pub fn from_poly(&self, poly: Vec<BigRational>) -> Cyclotomic {
        let mut c = Cyclotomic { order: self.order, modulus: self.modulus.clone(), coeffs: poly };
        c.reduce();
        c
    }

    pub fn zero(&self) -> Cyclotomic {
        self.from_poly(vec![])
    }

    pub fn integer(&self, n: i64) -> Cyclotomic {
        self.from_poly(vec![BigRational::from_integer(n.into())])
    }

    /// `ζ_d^k` for any integer `k`.
    pub fn zeta_pow(&self, k: i64) -> Cyclotomic {
        let e = k.rem_euclid(self.order as i64) as usize;
        let mut p = vec![BigRational::zero(); e + 1];
        p[e] = BigRational::one();
        self.from_poly(p)
    }
}

impl Cyclotomic {
    fn degree(&self) -> usize {
        self.modulus.len() - 1
    }

    fn reduce(&mut self) {
        let n = self.degree();
        let m = &self.modulus;
        while self.coeffs.len() > n {
            let top = self.coeffs.pop().unwrap();
            if Zero::is_zero(&top) {
                continue;
            }
            let shift = self.coeffs.len() - n;
            // x^{shift+n} = −Σ_{j<n} m_j x^{shift+j}  (monic modulus)
            for j in 0..n {
                let mj = BigRational::from_integer(m[j].clone());
                self.coeffs[shift + j] -= &top * mj;
            }
        }
        self.coeffs.resize(n, BigRational::zero());
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn coefficients(&self) -> &[BigRational] {
        &self.coeffs
    }

    /// Numerical value as `(re, im)`.
    pub fn to_complex(&self) -> (f64, f64) {
        let t = 2.0 * std::f64::consts::PI / self.order as f64;
        self.coeffs.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, c)| {
            let v = rational_to_f64(c);
            (re + v * (t * i as f64).cos(), im + v * (t * i as f64).sin())
        })
    }

    fn mul_matrix(&self) -> Vec<Vec<BigRational>> {
        // Column j = self · ζ^j.
        let n = self.degree();
        let field = CyclotomicField { order: self.order, modulus: self.modulus.clone() };
        let cols: Vec<Cyclotomic> = (0..n).map(|j| Field::mul(self, &field.zeta_pow(j as i64))).collect();
        (0..n).map(|i| (0..n).map(|j| cols[j].coeffs[i].clone()).collect()).collect()
    }
}

pub fn rational_to_f64(c: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    c.to_f64().unwrap_or_else(|| if c.is_negative() { f64::NEG_INFINITY } else { f64::INFINITY })
}

impl Field for Cyclotomic {
    fn zero_like(&self) -> Self {
        Cyclotomic { order: self.order, modulus: self.modulus.clone(), coeffs: vec![BigRational::zero(); self.degree()] }
    }
    fn is_zero(&self) -> bool {
        self.coeffs.iter().all(Zero::is_zero)
    }
    fn add(&self, o: &Self) -> Self {
        let mut r = self.clone();
        for (a, b) in r.coeffs.iter_mut().zip(&o.coeffs) {
            *a += b;
        }
        r
    }
    fn sub(&self, o: &Self) -> Self {
        let mut r = self.clone();
        for (a, b) in r.coeffs.iter_mut().zip(&o.coeffs) {
            *a -= b;
        }
        r
    }
    fn mul(&self, o: &Self) -> Self {
        let n = self.degree();
        let mut prod = vec![BigRational::zero(); (2 * n).max(1)];
        for (i, a) in self.coeffs.iter().enumerate() {
            if Zero::is_zero(a) {
                continue;
            }
            for (j, b) in o.coeffs.iter().enumerate() {
                prod[i + j] += a * b;
            }
        }
        let mut r = Cyclotomic { order: self.order, modulus: self.modulus.clone(), coeffs: prod };
        r.reduce();
        r
    }
    fn inv(&self) -> Self {
        // Solve M x = 1 where M is multiplication by self.
        let n = self.degree();
        let m = self.mul_matrix();
        let mut aug: Vec<Vec<BigRational>> = m
            .into_iter()
            .enumerate()
            .map(|(i, mut row)| {
                row.push(if i == 0 { BigRational::one() } else { BigRational::zero() });
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n).find(|&r| !Zero::is_zero(&aug[r][col])).expect("nonzero element is invertible");
            aug.swap(col, pivot);
            let inv = aug[col][col].recip();
            for c in col..=n {
                aug[col][c] = &aug[col][c] * &inv;
            }
            for r in 0..n {
                if r != col && !Zero::is_zero(&aug[r][col]) {
                    let f = aug[r][col].clone();
                    for c in col..=n {
                        let t = &f * &aug[col][c];
                        aug[r][c] -= t;
                    }
                }
            }
        }
        Cyclotomic { order: self.order, modulus: self.modulus.clone(), coeffs: aug.into_iter().map(|r| r[n].clone()).collect() }
    }
}
