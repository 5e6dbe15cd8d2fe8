//! Combinatorial face lattices of the compactified trajectory spaces
//! `B(v, w)` and of the compactified unstable manifolds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::connections::ConnectionDb;
use crate::morse::Landscape;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stratum {
    pub codim: usize,
    pub label: String,
    pub dim: i64,
}

/// Strata with the covering relation: `[i, j]` means stratum `i` (codim
/// `k + 1`) lies in the closure of stratum `j` (codim `k`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceLattice {
    pub strata: Vec<Stratum>,
    pub incidence: Vec<[usize; 2]>,
}

impl FaceLattice {
    /// A point: one codim-0 stratum of dimension 0.
    pub fn point() -> Self {
        Self::cell("pt", 0)
    }

    /// An open cell of dimension `dim` with no boundary.
    pub fn cell(label: &str, dim: i64) -> Self {
        Self { strata: vec![Stratum { codim: 0, label: label.into(), dim }], incidence: vec![] }
    }

    /// The interval `[0, 1]`.
    pub fn interval() -> Self {
        Self {
            strata: vec![
                Stratum { codim: 0, label: "(0,1)".into(), dim: 1 },
                Stratum { codim: 1, label: "0".into(), dim: 0 },
                Stratum { codim: 1, label: "1".into(), dim: 0 },
            ],
            incidence: vec![[1, 0], [2, 0]],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    /// Number of strata per codimension.
    pub fn codim_histogram(&self) -> Vec<usize> {
        let top = self.strata.iter().map(|s| s.codim).max().map_or(0, |c| c + 1);
        let mut h = vec![0; top];
        for s in &self.strata {
            h[s.codim] += 1;
        }
        h
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lattice: FaceLattice =
            serde_json::from_str(text).map_err(|e| Error::InvalidScenario(e.to_string()))?;
        lattice.validate()?;
        Ok(lattice)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("face lattice serializes")
    }

    /// Structural checks: incidence indices in range and one codimension
    /// apart, dimensions dropping by one per codimension within each
    /// component, exactly one codim-0 stratum per component, and every
    /// boundary stratum below some stratum of one lower codimension.
    pub fn validate(&self) -> Result<()> {
        let n = self.strata.len();
        let bad = |m: String| Err(Error::InvalidScenario(m));
        for [i, j] in &self.incidence {
            if *i >= n || *j >= n {
                return bad(format!("incidence [{i}, {j}] out of range"));
            }
            if self.strata[*i].codim != self.strata[*j].codim + 1 {
                return bad(format!("incidence [{i}, {j}] does not step one codimension"));
            }
            if self.strata[*i].dim + 1 != self.strata[*j].dim {
                return bad(format!("incidence [{i}, {j}] does not step one dimension"));
            }
        }
        for (i, s) in self.strata.iter().enumerate() {
            if s.codim > 0 && !self.incidence.iter().any(|[a, _]| *a == i) {
                return bad(format!("stratum {i} lies below no stratum"));
            }
            if s.dim < 0 {
                return bad(format!("stratum {i} has negative dimension"));
            }
        }
        for comp in self.components() {
            let tops: Vec<usize> = comp.iter().copied().filter(|i| self.strata[*i].codim == 0).collect();
            if tops.len() != 1 {
                return bad(format!("component with {} codim-0 strata", tops.len()));
            }
            let d0 = self.strata[tops[0]].dim;
            for i in comp {
                let s = &self.strata[i];
                if s.dim != d0 - s.codim as i64 {
                    return bad(format!("stratum {} has dim {} at codim {}", s.label, s.dim, s.codim));
                }
            }
        }
        Ok(())
    }

    /// Connected components of the incidence graph.
    fn components(&self) -> Vec<Vec<usize>> {
        let n = self.strata.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for [i, j] in &self.incidence {
            let (a, b) = (find(&mut parent, *i), find(&mut parent, *j));
            parent[a] = b;
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    fn shifted(&self, codim_shift: usize, dim_shift: i64, prefix: &str) -> Self {
        Self {
            strata: self
                .strata
                .iter()
                .map(|s| Stratum {
                    codim: s.codim + codim_shift,
                    label: format!("{prefix}{}", s.label),
                    dim: s.dim + dim_shift,
                })
                .collect(),
            incidence: self.incidence.clone(),
        }
    }
}

/// Faces of a product: pairs of strata, codimensions and dimensions add.
pub fn product_faces(a: &FaceLattice, b: &FaceLattice) -> FaceLattice {
    let nb = b.strata.len();
    let idx = |i: usize, j: usize| i * nb + j;
    let mut strata = Vec::with_capacity(a.strata.len() * nb);
    for sa in &a.strata {
        for sb in &b.strata {
            strata.push(Stratum {
                codim: sa.codim + sb.codim,
                label: format!("{}×{}", sa.label, sb.label),
                dim: sa.dim + sb.dim,
            });
        }
    }
    let mut incidence = Vec::new();
    for [i, k] in &a.incidence {
        for j in 0..nb {
            incidence.push([idx(*i, j), idx(*k, j)]);
        }
    }
    for [j, k] in &b.incidence {
        for i in 0..a.strata.len() {
            incidence.push([idx(i, *j), idx(i, *k)]);
        }
    }
    incidence.sort_unstable();
    FaceLattice { strata, incidence }
}

/// Discrete convolution of two codim histograms.
pub fn convolve(a: &[usize], b: &[usize]) -> Vec<usize> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Which trajectory spaces are nonempty: adjacent pairs from the database,
/// larger index gaps when some broken chain joins them.
struct Reach<'a> {
    land: &'a Landscape,
    db: &'a ConnectionDb,
    memo: BTreeMap<(usize, usize), bool>,
}

impl Reach<'_> {
    fn nonempty(&mut self, a: usize, b: usize) -> bool {
        if let Some(r) = self.memo.get(&(a, b)) {
            return *r;
        }
        let (pa, pb) = (&self.land.points[a], &self.land.points[b]);
        let r = if pa.index <= pb.index || pa.value <= pb.value {
            false
        } else if pa.index == pb.index + 1 {
            !self.db.trajectories(&pa.id, &pb.id).is_empty()
        } else {
            (0..self.land.points.len()).any(|u| {
                let pu = &self.land.points[u];
                pu.index < pa.index && pu.index > pb.index && self.nonempty(a, u) && self.nonempty(u, b)
            })
        };
        self.memo.insert((a, b), r);
        r
    }
}

/// Chains `v > v₁ > … > v_k > w` of nonempty trajectory spaces.
fn chains(reach: &mut Reach, v: usize, w: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![vec![v]];
    while let Some(chain) = stack.pop() {
        let last = *chain.last().unwrap();
        if reach.nonempty(last, w) {
            let mut done = chain.clone();
            done.push(w);
            out.push(done);
        }
        for u in 0..reach.land.points.len() {
            let (pl, pu, pw) = (&reach.land.points[last], &reach.land.points[u], &reach.land.points[w]);
            if pu.index < pl.index && pu.index > pw.index && reach.nonempty(last, u) {
                let mut next = chain.clone();
                next.push(u);
                stack.push(next);
            }
        }
    }
    out.sort_by_key(|c| (c.len(), c.clone()));
    out
}

fn chain_label(land: &Landscape, chain: &[usize]) -> String {
    chain.iter().map(|i| land.points[*i].id.as_str()).collect::<Vec<_>>().join(">")
}

/// Face lattice of `B(v, w)`: codim-`k` strata are chains with `k`
/// intermediate critical points.
pub fn enumerate_broken(land: &Landscape, db: &ConnectionDb, v: &str, w: &str) -> Result<FaceLattice> {
    let pos = |id: &str| land.position(id).ok_or_else(|| Error::Precondition(format!("unknown critical point {id}")));
    let (a, b) = (pos(v)?, pos(w)?);
    let mut reach = Reach { land, db, memo: BTreeMap::new() };
    if !reach.nonempty(a, b) {
        return Ok(FaceLattice::default());
    }
    let dim0 = land.points[a].index as i64 - land.points[b].index as i64 - 1;
    let all = chains(&mut reach, a, b);
    let index_of: BTreeMap<Vec<usize>, usize> = all.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
    let strata = all
        .iter()
        .map(|c| {
            let k = c.len() - 2;
            Stratum { codim: k, label: chain_label(land, c), dim: dim0 - k as i64 }
        })
        .collect();
    let mut incidence = Vec::new();
    for (i, c) in all.iter().enumerate() {
        for drop in 1..c.len() - 1 {
            let mut parent = c.clone();
            parent.remove(drop);
            if let Some(j) = index_of.get(&parent) {
                incidence.push([i, *j]);
            }
        }
    }
    incidence.sort_unstable();
    incidence.dedup();
    Ok(FaceLattice { strata, incidence })
}

/// Face lattice of the compactified unstable manifold `Ŵ⁻_v`:
/// `∂_k Ŵ⁻_v = ⊔_w ∂_{k−1} B(v, w) × W⁻_w`.
pub fn unstable_faces(land: &Landscape, db: &ConnectionDb, v: &str) -> Result<FaceLattice> {
    let pv = land.point(v).ok_or_else(|| Error::Precondition(format!("unknown critical point {v}")))?;
    let mut out = FaceLattice::cell(&format!("W-({v})"), pv.index as i64);
    let mut offsets: Vec<(String, usize, FaceLattice)> = Vec::new();
    for w in &land.points {
        if w.index >= pv.index {
            continue;
        }
        let b = enumerate_broken(land, db, v, &w.id)?;
        if b.is_empty() {
            continue;
        }
        let piece = product_faces(&b, &FaceLattice::cell(&format!("W-({})", w.id), w.index as i64)).shifted(1, 0, "");
        let base = out.strata.len();
        out.strata.extend(piece.strata.iter().cloned());
        out.incidence.extend(piece.incidence.iter().map(|[i, j]| [i + base, j + base]));
        offsets.push((w.id.clone(), base, piece));
    }
    // Codim-1 pieces close up into the open cell. Deeper pieces attach to the
    // faces obtained by deleting the last intermediate point.
    for (_, base, piece) in &offsets {
        for (i, s) in piece.strata.iter().enumerate() {
            if s.codim == 1 {
                out.incidence.push([base + i, 0]);
            }
        }
    }
    for (wid, base, piece) in &offsets {
        for (i, s) in piece.strata.iter().enumerate() {
            // Label of a piece stratum: "v>…>u>w×W-(w)". A chain v>…>u>w also
            // lies in the closure of B(v, u) × W⁻_u.
            let chain = s.label.split('×').next().unwrap_or_default();
            let ids: Vec<&str> = chain.split('>').collect();
            if ids.len() < 3 {
                continue;
            }
            let u = ids[ids.len() - 2];
            let head = ids[..ids.len() - 1].join(">");
            let target = format!("{head}×W-({u})");
            if let Some(j) = out.strata.iter().position(|t| t.label == target) {
                out.incidence.push([base + i, j]);
            }
            let _ = wid;
        }
    }
    out.incidence.sort_unstable();
    out.incidence.dedup();
    Ok(out)
}

/// `Σ_v I(u, v) I(v, w)` over intermediate points of index `i(u) − 1`.
pub fn boundary_pairing_check(land: &Landscape, db: &ConnectionDb, u: &str, w: &str) -> i64 {
    let (Some(pu), Some(pw)) = (land.point(u), land.point(w)) else { return 0 };
    if pu.index != pw.index + 2 {
        return 0;
    }
    let incidence = |a: &str, b: &str| db.pair(a, b).map_or(0, |p| p.incidence());
    land.points
        .iter()
        .filter(|v| v.index + 1 == pu.index)
        .map(|v| incidence(u, &v.id) * incidence(&v.id, w))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interval_squared() {
        let sq = product_faces(&FaceLattice::interval(), &FaceLattice::interval());
        assert_eq!(sq.codim_histogram(), vec![1, 4, 4]);
        sq.validate().unwrap();
        assert_eq!(
            sq.codim_histogram(),
            convolve(&FaceLattice::interval().codim_histogram(), &FaceLattice::interval().codim_histogram())
        );
    }

    #[test]
    fn point_is_the_product_identity() {
        let i = FaceLattice::interval();
        let p = product_faces(&i, &FaceLattice::point());
        assert_eq!(p.codim_histogram(), i.codim_histogram());
        assert_eq!(p.incidence, i.incidence);
        assert_eq!(p.strata.iter().map(|s| s.dim).collect::<Vec<_>>(), vec![1, 0, 0]);
    }

    #[test]
    fn json_round_trip() {
        let i = FaceLattice::interval();
        let back = FaceLattice::from_json(&i.to_json()).unwrap();
        assert_eq!(back, i);
        assert!(FaceLattice::from_json(r#"{"strata":[],"incidence":[[0,1]]}"#).is_err());
        assert!(FaceLattice::from_json(
            r#"{"strata":[{"codim":0,"label":"a","dim":1},{"codim":1,"label":"b","dim":3}],"incidence":[[1,0]]}"#
        )
        .is_err());
    }

    fn cube(d: usize) -> FaceLattice {
        (0..d).fold(FaceLattice::point(), |acc, _| product_faces(&acc, &FaceLattice::interval()))
    }

    proptest! {
        #[test]
        fn product_histogram_is_convolution(a in 0usize..4, b in 0usize..4) {
            let (x, y) = (cube(a), cube(b));
            let p = product_faces(&x, &y);
            prop_assert_eq!(p.codim_histogram(), convolve(&x.codim_histogram(), &y.codim_histogram()));
            prop_assert!(p.validate().is_ok());
        }
    }
}
