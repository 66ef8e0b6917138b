//! Unitary duals of the factor groups (tori and SU(2)): representation
//! indices, Laplace weights, dimensions, and the flattened tensor index
//! used for coefficient blocks on a product group.

use crate::numeric::HalfInt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DualsError {
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("unsupported group: {0}")]
    UnsupportedGroup(String),
}

/// Which factor group a representation index lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupTag {
    /// The d-dimensional torus; d = 1 covers every worked example.
    Torus(u8),
    Su2,
}

impl GroupTag {
    pub fn dim(self) -> u32 {
        match self {
            GroupTag::Torus(d) => d as u32,
            GroupTag::Su2 => 3,
        }
    }
}

/// One equivalence class of irreducible unitary representations.
///
/// For Torus(d) the class is a lattice point k with dimension 1 and
/// Laplace eigenvalue |k|^2; for SU(2) it is a spin l in (1/2)N_0 with
/// dimension 2l+1 and eigenvalue l(l+1). The weight is (1 + nu)^(1/2).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RepIndex {
    Torus(Vec<i64>),
    Su2(HalfInt),
}

impl RepIndex {
    pub fn torus1(k: i64) -> Self {
        RepIndex::Torus(vec![k])
    }

    pub fn su2(two_l: i64) -> Self {
        assert!(two_l >= 0, "spin must be nonnegative");
        RepIndex::Su2(HalfInt(two_l))
    }

    pub fn group(&self) -> GroupTag {
        match self {
            RepIndex::Torus(k) => GroupTag::Torus(k.len() as u8),
            RepIndex::Su2(_) => GroupTag::Su2,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            RepIndex::Torus(_) => 1,
            RepIndex::Su2(l) => (l.0 + 1) as usize,
        }
    }

    /// Laplace eigenvalue nu >= 0.
    pub fn laplace_eigenvalue(&self) -> f64 {
        match self {
            RepIndex::Torus(k) => k.iter().map(|&ki| (ki as f64) * (ki as f64)).sum(),
            RepIndex::Su2(l) => {
                let lf = l.as_f64();
                lf * (lf + 1.0)
            }
        }
    }

    /// The weight <xi> = (1 + nu)^(1/2); always >= 1, equal to 1 exactly
    /// on the trivial representation.
    pub fn weight(&self) -> f64 {
        (1.0 + self.laplace_eigenvalue()).sqrt()
    }

    pub fn is_trivial(&self) -> bool {
        match self {
            RepIndex::Torus(k) => k.iter().all(|&ki| ki == 0),
            RepIndex::Su2(l) => l.0 == 0,
        }
    }

    /// Row values of the diagonalized symbol index, i.e. the half-integer
    /// labels -l..l for SU(2) and the single label 0 for a torus class.
    pub fn row_labels(&self) -> Vec<HalfInt> {
        match self {
            RepIndex::Torus(_) => vec![HalfInt::ZERO],
            RepIndex::Su2(l) => (0..=l.0).map(|j| HalfInt(2 * j - l.0)).collect(),
        }
    }
}

/// All classes with weight <= w, sorted by (weight, canonical tie-break):
/// tori ascend in k, SU(2) ascends in l.
pub fn enumerate_dual(group: GroupTag, w: f64) -> Result<Vec<RepIndex>, DualsError> {
    if w < 1.0 {
        return Err(DualsError::OutOfRange(format!(
            "weight cutoff must be >= 1, got {w}"
        )));
    }
    let nu_max = w * w - 1.0;
    let mut out = Vec::new();
    match group {
        GroupTag::Torus(1) => {
            let kmax = nu_max.sqrt().floor() as i64;
            for k in -kmax..=kmax {
                out.push(RepIndex::torus1(k));
            }
        }
        GroupTag::Torus(d) if (2..=3).contains(&d) => {
            let kmax = nu_max.sqrt().floor() as i64;
            let mut stack = vec![Vec::<i64>::new()];
            for _ in 0..d {
                let mut next = Vec::new();
                for prefix in &stack {
                    let used: f64 = prefix.iter().map(|&x| (x * x) as f64).sum();
                    let rem = (nu_max - used).max(-1.0).sqrt();
                    if rem.is_nan() {
                        continue;
                    }
                    let cap = rem.floor() as i64;
                    for k in -cap.min(kmax)..=cap.min(kmax) {
                        let mut p = prefix.clone();
                        p.push(k);
                        next.push(p);
                    }
                }
                stack = next;
            }
            out.extend(
                stack
                    .into_iter()
                    .filter(|k| {
                        k.iter().map(|&x| (x * x) as f64).sum::<f64>() <= nu_max + 1e-9
                    })
                    .map(RepIndex::Torus),
            );
        }
        GroupTag::Torus(d) => {
            return Err(DualsError::UnsupportedGroup(format!("Torus({d})")));
        }
        GroupTag::Su2 => {
            // 1 + l(l+1) <= w^2 over half-integers.
            let mut two_l = 0i64;
            loop {
                let lf = two_l as f64 / 2.0;
                if lf * (lf + 1.0) > nu_max + 1e-12 {
                    break;
                }
                out.push(RepIndex::su2(two_l));
                two_l += 1;
            }
        }
    }
    out.sort_by(|a, b| {
        let wa = a.weight();
        let wb = b.weight();
        wa.partial_cmp(&wb).unwrap().then_with(|| match (a, b) {
            (RepIndex::Torus(x), RepIndex::Torus(y)) => x.cmp(y),
            (RepIndex::Su2(x), RepIndex::Su2(y)) => x.cmp(y),
            _ => std::cmp::Ordering::Equal,
        })
    });
    Ok(out)
}

/// Smallest C with d_phi <= C <phi>^(dim G / 2) over the given classes.
pub fn dimension_bound_constant(classes: &[RepIndex]) -> f64 {
    assert!(!classes.is_empty(), "need at least one class");
    classes
        .iter()
        .map(|c| {
            let half_dim = c.group().dim() as f64 / 2.0;
            c.dimension() as f64 / c.weight().powf(half_dim)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// One spectral slot on the product dual: a pair of classes plus the row
/// indices (m into the first symbol, r into the second), 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductFrequency {
    pub xi: RepIndex,
    pub eta: RepIndex,
    pub m: usize,
    pub r: usize,
}

impl ProductFrequency {
    pub fn weight(&self) -> f64 {
        self.xi.weight() + self.eta.weight()
    }
}

/// Flattened tensor index i = d_eta (m - 1) + r (1-based everywhere).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatIndex {
    pub i: usize,
    pub j: usize,
}

pub fn flatten(
    m: usize,
    n: usize,
    r: usize,
    s: usize,
    d_xi: usize,
    d_eta: usize,
) -> Result<FlatIndex, DualsError> {
    for (name, v, cap) in [
        ("m", m, d_xi),
        ("n", n, d_xi),
        ("r", r, d_eta),
        ("s", s, d_eta),
    ] {
        if v < 1 || v > cap {
            return Err(DualsError::OutOfRange(format!(
                "{name}={v} outside 1..={cap}"
            )));
        }
    }
    Ok(FlatIndex {
        i: d_eta * (m - 1) + r,
        j: d_eta * (n - 1) + s,
    })
}

pub fn unflatten(
    idx: FlatIndex,
    d_xi: usize,
    d_eta: usize,
) -> Result<(usize, usize, usize, usize), DualsError> {
    let max = d_xi * d_eta;
    if idx.i < 1 || idx.i > max || idx.j < 1 || idx.j > max {
        return Err(DualsError::OutOfRange(format!(
            "flat index {:?} outside 1..={max}",
            idx
        )));
    }
    let m = (idx.i - 1) / d_eta + 1;
    let r = (idx.i - 1) % d_eta + 1;
    let n = (idx.j - 1) / d_eta + 1;
    let s = (idx.j - 1) % d_eta + 1;
    Ok((m, n, r, s))
}
