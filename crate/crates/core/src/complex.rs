//! The geometric cochain complex: incidence numbers from signed trajectory
//! counts, `δ² = 0`, Betti numbers, and complexes twisted by a character of
//! a finite cyclic covering.

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::connections::ConnectionDb;
use crate::cyclotomic::{rank, Cyclotomic, CyclotomicField, Field};
use crate::morse::Landscape;
use crate::{Error, Result};

/// Integer matrix, row-major.
pub type IntMatrix = Vec<Vec<i64>>;

/// A one-dimensional character `g ↦ exp(2πi κ g/m)` of the deck group `Z_m`
/// of the cyclic covering along `coordinate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representation {
    pub m: u32,
    pub kappa: u32,
    pub coordinate: usize,
}

impl Representation {
    /// Order `d = m / gcd(κ, m)` of `ρ(1)` and the exponent `κ'` with
    /// `ρ(g) = ζ_d^{κ' g}`.
    pub fn reduced(&self) -> (u32, i64) {
        let g = gcd(self.kappa, self.m);
        (self.m / g, (self.kappa / g) as i64)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometricComplex {
    /// `X_q`: ids of index-`q` critical points, `q = 0..=n`.
    pub generators: Vec<Vec<String>>,
    /// `incidence[q]` is `I_q` (rows `X_q`, columns `X_{q−1}`); `incidence[0]` is empty.
    pub incidence: Vec<IntMatrix>,
}

impl GeometricComplex {
    pub fn top_degree(&self) -> usize {
        self.generators.len() - 1
    }

    /// Matrix of `δ^q : C^q → C^{q+1}`, which is `I_{q+1}`.
    pub fn differential(&self, q: usize) -> IntMatrix {
        if q + 1 > self.top_degree() {
            return Vec::new();
        }
        self.incidence[q + 1].clone()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.generators.iter().enumerate().map(|(q, g)| sign(q) * g.len() as i64).sum()
    }
}

fn sign(q: usize) -> i64 {
    if q % 2 == 0 {
        1
    } else {
        -1
    }
}

/// Assemble `I_q(v, w) = Σ_γ ε(γ)` over the connection database.
pub fn build_complex(land: &Landscape, db: &ConnectionDb) -> Result<GeometricComplex> {
    let n = land.sys.dim();
    let generators: Vec<Vec<String>> = (0..=n)
        .map(|q| land.points.iter().filter(|p| p.index == q).map(|p| p.id.clone()).collect())
        .collect();
    let mut incidence = vec![Vec::new()];
    for q in 1..=n {
        let mut m = Vec::with_capacity(generators[q].len());
        for v in &generators[q] {
            let mut row = Vec::with_capacity(generators[q - 1].len());
            for w in &generators[q - 1] {
                if !db.was_searched(v, w) {
                    return Err(Error::MissingPair { from: v.clone(), to: w.clone() });
                }
                row.push(db.trajectories(v, w).iter().map(|t| t.sign as i64).sum());
            }
            m.push(row);
        }
        incidence.push(m);
    }
    Ok(GeometricComplex { generators, incidence })
}

fn int_matmul(a: &IntMatrix, b: &IntMatrix, inner: usize) -> IntMatrix {
    a.iter()
        .map(|row| {
            let cols = b.first().map_or(0, |r| r.len());
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

/// Largest absolute entry of `δ^{q+1} δ^q` over all `q`.
pub fn verify_d2(c: &GeometricComplex) -> i64 {
    let mut worst = 0;
    for q in 0..c.top_degree().saturating_sub(1) {
        let prod = int_matmul(&c.differential(q + 1), &c.differential(q), c.generators[q + 1].len());
        for row in prod {
            for x in row {
                worst = worst.max(x.abs());
            }
        }
    }
    worst
}

fn rational_rows(m: &IntMatrix) -> Vec<Vec<BigRational>> {
    m.iter().map(|r| r.iter().map(|x| BigRational::from_integer((*x).into())).collect()).collect()
}

fn betti_from_ranks(dims: &[usize], ranks: &[usize]) -> Vec<usize> {
    // ranks[q] = rank δ^q.
    (0..dims.len())
        .map(|q| dims[q] - ranks[q] - if q > 0 { ranks[q - 1] } else { 0 })
        .collect()
}

/// `b_q = dim C^q − rank δ^q − rank δ^{q−1}` over `Q`.
pub fn betti(c: &GeometricComplex) -> Vec<usize> {
    let dims: Vec<usize> = c.generators.iter().map(|g| g.len()).collect();
    let ranks: Vec<usize> = (0..dims.len()).map(|q| rank(rational_rows(&c.differential(q)))).collect();
    betti_from_ranks(&dims, &ranks)
}

/// A complex with coefficients in `Q(ζ_d)`.
#[derive(Debug, Clone)]
pub struct TwistedComplex {
    pub generators: Vec<Vec<String>>,
    pub representation: Representation,
    pub field: CyclotomicField,
    /// `incidence[q]`: twisted `I^ρ_q`, rows `X_q`, columns `X_{q−1}`.
    pub incidence: Vec<Vec<Vec<Cyclotomic>>>,
}

impl TwistedComplex {
    pub fn differential(&self, q: usize) -> Vec<Vec<Cyclotomic>> {
        if q + 1 >= self.generators.len() {
            return Vec::new();
        }
        self.incidence[q + 1].clone()
    }
}

/// Twisted complex `I^ρ_q(v, w) = Σ_γ ε(γ) ρ(deck(γ))`.
pub fn build_cover_complex(
    db: &ConnectionDb,
    base: &GeometricComplex,
    rep: Representation,
) -> Result<TwistedComplex> {
    if rep.m == 0 || rep.kappa >= rep.m {
        return Err(Error::Precondition(format!("character κ = {} invalid for m = {}", rep.kappa, rep.m)));
    }
    let (d, k) = rep.reduced();
    let field = CyclotomicField::new(d);
    let n = base.top_degree();
    let mut incidence = vec![Vec::new()];
    for q in 1..=n {
        let mut m = Vec::new();
        for v in &base.generators[q] {
            let mut row = Vec::new();
            for w in &base.generators[q - 1] {
                let mut entry = field.zero();
                for t in db.trajectories(v, w) {
                    let g = *t
                        .deck
                        .get(rep.coordinate)
                        .ok_or_else(|| Error::MissingDeck { from: v.clone(), to: w.clone() })?;
                    entry = entry.add(&Field::mul(&field.integer(t.sign as i64), &field.zeta_pow(k * g)));
                }
                row.push(entry);
            }
            m.push(row);
        }
        incidence.push(m);
    }
    Ok(TwistedComplex { generators: base.generators.clone(), representation: rep, field, incidence })
}

fn cyc_matmul(a: &[Vec<Cyclotomic>], b: &[Vec<Cyclotomic>], zero: &Cyclotomic) -> Vec<Vec<Cyclotomic>> {
    let cols = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| row.iter().zip(b).fold(zero.clone(), |acc, (x, brow)| acc.add(&Field::mul(x, &brow[j]))))
                .collect()
        })
        .collect()
}

/// Number of nonzero entries of the twisted `δ^{q+1} δ^q`, over all `q`.
pub fn verify_d2_twisted(c: &TwistedComplex) -> usize {
    let zero = c.field.zero();
    let mut bad = 0;
    for q in 0..c.generators.len().saturating_sub(2) {
        let prod = cyc_matmul(&c.differential(q + 1), &c.differential(q), &zero);
        bad += prod.iter().flatten().filter(|x| !x.is_zero()).count();
    }
    bad
}

/// Betti numbers over `Q(ζ_d)`.
pub fn betti_twisted(c: &TwistedComplex) -> Vec<usize> {
    let dims: Vec<usize> = c.generators.iter().map(|g| g.len()).collect();
    let ranks: Vec<usize> = (0..dims.len()).map(|q| rank(c.differential(q))).collect();
    betti_from_ranks(&dims, &ranks)
}

/// The complex of the `m`-fold cyclic cover with lifted critical points
/// `(v, j)`, `j ∈ Z_m`. Each base point is lifted from its canonical
/// coordinates in the fundamental domain; a trajectory with deck element `g`
/// joins `(v, j)` to `(w, j + g)`.
#[derive(Debug, Clone)]
pub struct LiftedComplex {
    pub m: u32,
    pub generators: Vec<Vec<(String, u32)>>,
    pub incidence: Vec<IntMatrix>,
}

pub fn lift_complex(db: &ConnectionDb, base: &GeometricComplex, m: u32, coordinate: usize) -> Result<LiftedComplex> {
    let generators: Vec<Vec<(String, u32)>> = base
        .generators
        .iter()
        .map(|g| g.iter().flat_map(|id| (0..m).map(move |j| (id.clone(), j))).collect())
        .collect();
    let mut incidence = vec![Vec::new()];
    for q in 1..generators.len() {
        let mut mat = vec![vec![0i64; generators[q - 1].len()]; generators[q].len()];
        for (a, (v, j)) in generators[q].iter().enumerate() {
            for (b, (w, k)) in generators[q - 1].iter().enumerate() {
                for t in db.trajectories(v, w) {
                    let g = *t.deck.get(coordinate).ok_or_else(|| Error::MissingDeck { from: v.clone(), to: w.clone() })?;
                    if (*j as i64 + g).rem_euclid(m as i64) == *k as i64 {
                        mat[a][b] += t.sign as i64;
                    }
                }
            }
        }
        incidence.push(mat);
    }
    Ok(LiftedComplex { m, generators, incidence })
}

impl LiftedComplex {
    fn as_complex(&self) -> GeometricComplex {
        GeometricComplex {
            generators: self.generators.iter().map(|g| g.iter().map(|(id, j)| format!("{id}~{j}")).collect()).collect(),
            incidence: self.incidence.clone(),
        }
    }

    pub fn d2_residual(&self) -> i64 {
        verify_d2(&self.as_complex())
    }

    pub fn betti(&self) -> Vec<usize> {
        betti(&self.as_complex())
    }

    /// Deck equivariance `Ĩ(g ṽ, g w̃) = Ĩ(ṽ, w̃)` for the generator `g = 1`.
    pub fn is_equivariant(&self) -> bool {
        let m = self.m as usize;
        (1..self.incidence.len()).all(|q| {
            let mat = &self.incidence[q];
            (0..mat.len()).all(|a| {
                (0..mat[a].len()).all(|b| {
                    let (ga, gb) = (shift(a, m), shift(b, m));
                    mat[ga][gb] == mat[a][b]
                })
            })
        })
    }

    /// Summing lifted incidences over the target lifts reproduces the base
    /// incidence (for every source lift).
    pub fn sums_to_base(&self, base: &GeometricComplex) -> bool {
        let m = self.m as usize;
        (1..self.incidence.len()).all(|q| {
            base.incidence[q].iter().enumerate().all(|(i, row)| {
                row.iter().enumerate().all(|(k, &val)| {
                    (0..m).all(|j| (0..m).map(|l| self.incidence[q][i * m + j][k * m + l]).sum::<i64>() == val)
                })
            })
        })
    }
}

fn shift(a: usize, m: usize) -> usize {
    (a / m) * m + (a % m + 1) % m
}

/// Twisted incidence recomputed from the lifted complex:
/// `I^ρ(v, w) = Σ_k Ĩ((v, 0), (w, k)) ρ(k)`.
pub fn twisted_from_lift(lift: &LiftedComplex, base: &GeometricComplex, rep: Representation) -> Vec<Vec<Vec<Cyclotomic>>> {
    let (d, kp) = rep.reduced();
    let field = CyclotomicField::new(d);
    let m = lift.m as usize;
    let mut out = vec![Vec::new()];
    for q in 1..lift.incidence.len() {
        let rows = base.generators[q].len();
        let cols = base.generators[q - 1].len();
        let mat: Vec<Vec<Cyclotomic>> = (0..rows)
            .map(|i| {
                (0..cols)
                    .map(|k| {
                        (0..m).fold(field.zero(), |acc, l| {
                            let e = lift.incidence[q][i * m][k * m + l];
                            acc.add(&Field::mul(&field.integer(e), &field.zeta_pow(kp * l as i64)))
                        })
                    })
                    .collect()
            })
            .collect();
        out.push(mat);
    }
    out
}
