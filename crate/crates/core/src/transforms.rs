//! Band-limited functions on T^1 x SU(2) (and T^1 x T^1) as blocks of
//! partial Fourier coefficients, with synthesis, quadrature analysis and
//! the Plancherel norm.
//!
//! Conventions, validated against the trace closed forms in the tests:
//! torus characters e^{ikt}; SU(2) matrix elements in Euler angles
//! t^l_{mn}(phi, theta, psi) = e^{-i(m phi + n psi)} d^l_{mn}(theta) with
//! labels ascending -l..l; normalized Haar measure; coefficient blocks
//! B(k,l)_{rs} = integral of f e^{-ikt} conj(t^l_{sr}). Quadrature grids
//! are uniform in t, phi/2 and psi/2 and Gauss-Legendre in cos theta,
//! which is exact for band-limited integrands once the Nyquist bounds
//! below are met; phi and psi run over the double cover so half-integer
//! spins sample cleanly.

#![allow(clippy::needless_range_loop)] // grid loops mirror the index math

use crate::duals::{GroupTag, RepIndex};
use crate::numeric::HalfInt;
use crate::wigner;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("band mismatch: {0}")]
    BandMismatch(String),
    #[error("grid below the Nyquist bound: {0}")]
    Aliasing(String),
    #[error("unsupported factor pair for transforms: {0:?}")]
    Unsupported((GroupTag, GroupTag)),
    #[error("malformed field data: {0}")]
    Parse(String),
}

/// Band limit of one factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorBand {
    /// |k| <= kmax on the circle.
    Torus { kmax: i64 },
    /// 2l <= two_lmax on SU(2).
    Su2 { two_lmax: i64 },
}

impl FactorBand {
    pub fn group(self) -> GroupTag {
        match self {
            FactorBand::Torus { .. } => GroupTag::Torus(1),
            FactorBand::Su2 { .. } => GroupTag::Su2,
        }
    }

    fn contains(self, key: &FreqKey) -> bool {
        match (self, key) {
            (FactorBand::Torus { kmax }, FreqKey::Torus(k)) => k.abs() <= kmax,
            (FactorBand::Su2 { two_lmax }, FreqKey::Su2(tl)) => *tl <= two_lmax,
            _ => false,
        }
    }

    /// Band of a pointwise product of two functions with these bands.
    pub fn sum(self, other: FactorBand) -> FactorBand {
        match (self, other) {
            (FactorBand::Torus { kmax: a }, FactorBand::Torus { kmax: b }) => {
                FactorBand::Torus { kmax: a + b }
            }
            (FactorBand::Su2 { two_lmax: a }, FactorBand::Su2 { two_lmax: b }) => {
                FactorBand::Su2 { two_lmax: a + b }
            }
            _ => panic!("mismatched factor kinds"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductBand {
    pub first: FactorBand,
    pub second: FactorBand,
}

impl ProductBand {
    pub fn t1_su2(kmax: i64, two_lmax: i64) -> Self {
        ProductBand {
            first: FactorBand::Torus { kmax },
            second: FactorBand::Su2 { two_lmax },
        }
    }

    pub fn t2(kmax: i64, jmax: i64) -> Self {
        ProductBand {
            first: FactorBand::Torus { kmax },
            second: FactorBand::Torus { kmax: jmax },
        }
    }

    pub fn sum(self, other: ProductBand) -> ProductBand {
        ProductBand {
            first: self.first.sum(other.first),
            second: self.second.sum(other.second),
        }
    }
}

/// Frequency key of one factor class, orderable for block maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FreqKey {
    Torus(i64),
    Su2(i64),
}

impl FreqKey {
    pub fn rep(self) -> RepIndex {
        match self {
            FreqKey::Torus(k) => RepIndex::torus1(k),
            FreqKey::Su2(two_l) => RepIndex::su2(two_l),
        }
    }

    pub fn dimension(self) -> usize {
        match self {
            FreqKey::Torus(_) => 1,
            FreqKey::Su2(two_l) => (two_l + 1) as usize,
        }
    }

    pub fn weight(self) -> f64 {
        self.rep().weight()
    }

    /// Symbol row labels, ascending.
    pub fn row_labels(self) -> Vec<HalfInt> {
        self.rep().row_labels()
    }
}

/// One coefficient block: the (d1 d2) x (d1 d2) matrix over the flattened
/// tensor index i = d2 (m - 1) + r, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub d1: usize,
    pub d2: usize,
    pub entries: Vec<Complex64>,
}

impl Block {
    pub fn zeros(d1: usize, d2: usize) -> Self {
        Block {
            d1,
            d2,
            entries: vec![Complex64::new(0.0, 0.0); (d1 * d2) * (d1 * d2)],
        }
    }

    pub fn dim(&self) -> usize {
        self.d1 * self.d2
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[(i - 1) * self.dim() + (j - 1)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        let d = self.dim();
        self.entries[(i - 1) * d + (j - 1)] = v;
    }

    pub fn hs_norm_sq(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// A band-limited field of partial Fourier coefficients on a product of
/// two factor groups. Immutable in spirit: every operation returns a new
/// field, so concurrent readers need no locking.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    pub band: ProductBand,
    pub blocks: BTreeMap<(FreqKey, FreqKey), Block>,
}

impl CoefficientField {
    pub fn zero(band: ProductBand) -> Self {
        CoefficientField {
            band,
            blocks: BTreeMap::new(),
        }
    }

    pub fn block_mut(&mut self, xi: FreqKey, eta: FreqKey) -> &mut Block {
        let d1 = xi.dimension();
        let d2 = eta.dimension();
        self.blocks
            .entry((xi, eta))
            .or_insert_with(|| Block::zeros(d1, d2))
    }

    /// Sets the single entry of a scalar (torus x torus) block.
    pub fn set_scalar(&mut self, k: i64, j: i64, v: Complex64) {
        self.block_mut(FreqKey::Torus(k), FreqKey::Torus(j))
            .set(1, 1, v);
    }

    pub fn in_band(&self, xi: &FreqKey, eta: &FreqKey) -> bool {
        self.band.first.contains(xi) && self.band.second.contains(eta)
    }

    /// sqrt(sum dim1 dim2 ||B||_HS^2): the L^2 norm by Plancherel.
    pub fn plancherel_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|((xi, eta), b)| {
                (xi.dimension() * eta.dimension()) as f64 * b.hs_norm_sq()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .values()
            .flat_map(|b| b.entries.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Largest entrywise difference against another field (missing blocks
    /// count as zero).
    pub fn max_block_diff(&self, other: &CoefficientField) -> f64 {
        let mut worst: f64 = 0.0;
        let keys: std::collections::BTreeSet<_> = self
            .blocks
            .keys()
            .chain(other.blocks.keys())
            .cloned()
            .collect();
        for key in keys {
            match (self.blocks.get(&key), other.blocks.get(&key)) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.entries.iter().zip(b.entries.iter()) {
                        worst = worst.max((x - y).norm());
                    }
                }
                (Some(a), None) | (None, Some(a)) => {
                    worst = worst.max(a.entries.iter().map(|z| z.norm()).fold(0.0, f64::max));
                }
                (None, None) => {}
            }
        }
        worst
    }

    pub fn scale(&self, c: Complex64) -> CoefficientField {
        let mut out = self.clone();
        for b in out.blocks.values_mut() {
            for e in &mut b.entries {
                *e *= c;
            }
        }
        out
    }

    pub fn add(&self, other: &CoefficientField) -> CoefficientField {
        let mut out = self.clone();
        out.band = ProductBand {
            first: widest(self.band.first, other.band.first),
            second: widest(self.band.second, other.band.second),
        };
        for ((xi, eta), b) in &other.blocks {
            let target = out.block_mut(*xi, *eta);
            for (t, s) in target.entries.iter_mut().zip(b.entries.iter()) {
                *t += s;
            }
        }
        out
    }

    /// Drops blocks whose largest entry is below `eps` and shrinks the
    /// band to the hull of what survives.
    pub fn trimmed(&self, eps: f64) -> CoefficientField {
        let mut k1 = 0i64;
        let mut k2 = 0i64;
        let mut blocks = BTreeMap::new();
        for ((xi, eta), b) in &self.blocks {
            let peak = b.entries.iter().map(|z| z.norm()).fold(0.0, f64::max);
            if peak < eps {
                continue;
            }
            match xi {
                FreqKey::Torus(k) => k1 = k1.max(k.abs()),
                FreqKey::Su2(tl) => k1 = k1.max(*tl),
            }
            match eta {
                FreqKey::Torus(k) => k2 = k2.max(k.abs()),
                FreqKey::Su2(tl) => k2 = k2.max(*tl),
            }
            blocks.insert((*xi, *eta), b.clone());
        }
        let first = match self.band.first {
            FactorBand::Torus { .. } => FactorBand::Torus { kmax: k1 },
            FactorBand::Su2 { .. } => FactorBand::Su2 { two_lmax: k1 },
        };
        let second = match self.band.second {
            FactorBand::Torus { .. } => FactorBand::Torus { kmax: k2 },
            FactorBand::Su2 { .. } => FactorBand::Su2 { two_lmax: k2 },
        };
        CoefficientField {
            band: ProductBand { first, second },
            blocks,
        }
    }

    /// Drops blocks outside `band` (truncation to a comparison window).
    pub fn truncated(&self, band: ProductBand) -> CoefficientField {
        let mut out = CoefficientField::zero(band);
        for ((xi, eta), b) in &self.blocks {
            if band.first.contains(xi) && band.second.contains(eta) {
                out.blocks.insert((*xi, *eta), b.clone());
            }
        }
        out
    }

    /// Deterministic pseudo-random filler: every in-band entry gets a
    /// complex value with |z| <= amp(weight); good enough for round-trip
    /// and linearity tests without an RNG dependency.
    pub fn random(band: ProductBand, seed: u64, amp: impl Fn(f64) -> f64) -> CoefficientField {
        let mut out = CoefficientField::zero(band);
        let mut state = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut next = move || {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z = z ^ (z >> 31);
            (z as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        for xi in factor_keys(band.first) {
            for eta in factor_keys(band.second) {
                let w = xi.weight() + eta.weight();
                let a = amp(w);
                if a == 0.0 {
                    continue;
                }
                let block = out.block_mut(xi, eta);
                for e in block.entries.iter_mut() {
                    *e = Complex64::new(next() * a, next() * a);
                }
            }
        }
        out
    }
}

fn widest(a: FactorBand, b: FactorBand) -> FactorBand {
    match (a, b) {
        (FactorBand::Torus { kmax: x }, FactorBand::Torus { kmax: y }) => {
            FactorBand::Torus { kmax: x.max(y) }
        }
        (FactorBand::Su2 { two_lmax: x }, FactorBand::Su2 { two_lmax: y }) => {
            FactorBand::Su2 { two_lmax: x.max(y) }
        }
        _ => panic!("mismatched factor kinds"),
    }
}

/// All frequency keys inside a factor band, canonical order.
pub fn factor_keys(band: FactorBand) -> Vec<FreqKey> {
    match band {
        FactorBand::Torus { kmax } => (-kmax..=kmax).map(FreqKey::Torus).collect(),
        FactorBand::Su2 { two_lmax } => (0..=two_lmax).map(FreqKey::Su2).collect(),
    }
}

/// Evaluation point: t on the circle, and either Euler angles on SU(2)
/// (phi in [0,2pi), theta in [0,pi], psi in [0,4pi)) or a second circle
/// coordinate.
#[derive(Clone, Copy, Debug)]
pub struct EulerPoint {
    pub t: f64,
    pub x2: FactorPoint,
}

#[derive(Clone, Copy, Debug)]
pub enum FactorPoint {
    Su2 { phi: f64, theta: f64, psi: f64 },
    Torus { t2: f64 },
}

impl EulerPoint {
    pub fn t1_su2(t: f64, phi: f64, theta: f64, psi: f64) -> Self {
        EulerPoint {
            t,
            x2: FactorPoint::Su2 { phi, theta, psi },
        }
    }

    pub fn t2(t: f64, t2: f64) -> Self {
        EulerPoint {
            t,
            x2: FactorPoint::Torus { t2 },
        }
    }
}

/// Pointwise synthesis f(x) = sum d1 d2 Tr((xi (x) eta)(x) B).
pub fn synthesize(field: &CoefficientField, p: &EulerPoint) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for ((xi, eta), block) in &field.blocks {
        let k = match xi {
            FreqKey::Torus(k) => *k,
            FreqKey::Su2(_) => unreachable!("first factor is a circle in transforms"),
        };
        let torus_phase = Complex64::from_polar(1.0, k as f64 * p.t);
        match (eta, p.x2) {
            (FreqKey::Torus(j), FactorPoint::Torus { t2 }) => {
                let phase = Complex64::from_polar(1.0, *j as f64 * t2);
                acc += torus_phase * phase * block.get(1, 1);
            }
            (FreqKey::Su2(two_l), FactorPoint::Su2 { phi, theta, psi }) => {
                let dim = (*two_l + 1) as usize;
                let d = wigner::matrix(*two_l, theta);
                let mut tr = Complex64::new(0.0, 0.0);
                for r in 0..dim {
                    let rho_r = (2 * r as i64 - two_l) as f64 / 2.0;
                    for s in 0..dim {
                        let rho_s = (2 * s as i64 - two_l) as f64 / 2.0;
                        let phase =
                            Complex64::from_polar(1.0, -(rho_r * phi + rho_s * psi));
                        tr += phase * d[r * dim + s] * block.get(s + 1, r + 1);
                    }
                }
                acc += torus_phase * tr * (dim as f64);
            }
            _ => {}
        }
    }
    acc
}

/// Quadrature grid for one product kind, sized so analysis of a band-f
/// integrand against band-out test elements is exact.
#[derive(Clone, Debug)]
pub struct Grid {
    pub second_is_su2: bool,
    /// Uniform t nodes.
    pub n_t: usize,
    /// Second-factor nodes: SU(2) -> (n_u, n_gl, n_v); torus -> (n_t2, 1, 1).
    pub n_u: usize,
    pub n_gl: usize,
    pub n_v: usize,
    pub gl_nodes: Vec<f64>,
    pub gl_weights: Vec<f64>,
    /// Documented Nyquist bounds the sizes satisfy.
    pub nyquist_note: String,
}

impl Grid {
    /// Grid exact for analyzing a band-`f_band` function against test
    /// elements of band `out_band`.
    pub fn for_bands(f_band: ProductBand, out_band: ProductBand) -> Result<Grid, TransformError> {
        let n_t = match (f_band.first, out_band.first) {
            (FactorBand::Torus { kmax: a }, FactorBand::Torus { kmax: b }) => (a + b + 1) as usize,
            _ => {
                return Err(TransformError::Unsupported((
                    f_band.first.group(),
                    out_band.first.group(),
                )))
            }
        };
        match (f_band.second, out_band.second) {
            (FactorBand::Su2 { two_lmax: a }, FactorBand::Su2 { two_lmax: b }) => {
                let n_u = (a + b + 1) as usize;
                let deg = ((a + b) / 2) as usize;
                let n_gl = deg / 2 + 1;
                let (gl_nodes, gl_weights) = gauss_legendre(n_gl);
                Ok(Grid {
                    second_is_su2: true,
                    n_t,
                    n_u,
                    n_gl,
                    n_v: n_u,
                    gl_nodes,
                    gl_weights,
                    nyquist_note: format!(
                        "n_t >= kf+ko+1 = {n_t}; n_u = n_v >= 2(lf+lo)+1 = {n_u}; \
                         gauss-legendre exact to degree {} >= lf+lo",
                        2 * n_gl - 1
                    ),
                })
            }
            (FactorBand::Torus { kmax: a }, FactorBand::Torus { kmax: b }) => {
                let n2 = (a + b + 1) as usize;
                Ok(Grid {
                    second_is_su2: false,
                    n_t,
                    n_u: n2,
                    n_gl: 1,
                    n_v: 1,
                    gl_nodes: vec![0.0],
                    gl_weights: vec![2.0],
                    nyquist_note: format!("n_t >= {n_t}; n_t2 >= {n2}"),
                })
            }
            _ => Err(TransformError::Unsupported((
                f_band.second.group(),
                out_band.second.group(),
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_u * self.n_gl * self.n_v
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened index order: ((t, u), gl), v.
    #[inline]
    pub fn index(&self, a: usize, p: usize, b: usize, q: usize) -> usize {
        ((a * self.n_u + p) * self.n_gl + b) * self.n_v + q
    }

    pub fn point(&self, a: usize, p: usize, b: usize, q: usize) -> EulerPoint {
        let t = std::f64::consts::TAU * a as f64 / self.n_t as f64;
        if self.second_is_su2 {
            // phi = 2u, psi = 2v with u, v uniform on [0, 2pi): the grid
            // walks the double cover so half-integer spins sample cleanly.
            let phi = 2.0 * std::f64::consts::TAU * p as f64 / self.n_u as f64;
            let psi = 2.0 * std::f64::consts::TAU * q as f64 / self.n_v as f64;
            let theta = self.gl_nodes[b].acos();
            EulerPoint::t1_su2(t, phi, theta, psi)
        } else {
            let t2 = std::f64::consts::TAU * p as f64 / self.n_u as f64;
            EulerPoint::t2(t, t2)
        }
    }

    /// Quadrature weight of node (.., b, ..) under normalized Haar measure.
    #[inline]
    pub fn haar_weight(&self, b: usize) -> f64 {
        if self.second_is_su2 {
            0.5 * self.gl_weights[b] / (self.n_t * self.n_u * self.n_v) as f64
        } else {
            1.0 / (self.n_t * self.n_u) as f64
        }
    }
}

/// Nodes and weights of n-point Gauss-Legendre on [-1, 1] by Newton on
/// the recurrence; plenty accurate for n up to a few hundred.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Samples the field on every grid node (factorized; the workhorse for
/// pointwise products and residual checks).
pub fn synthesize_on_grid(field: &CoefficientField, grid: &Grid) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); grid.len()];
    if grid.second_is_su2 {
        synth_su2_grid(field, grid, &mut out);
    } else {
        synth_t2_grid(field, grid, &mut out);
    }
    out
}

fn torus_phases(n: usize, kmax: i64, sign: f64) -> Vec<Vec<Complex64>> {
    // phases[a][k + kmax] = exp(sign i k t_a)
    (0..n)
        .map(|a| {
            let t = std::f64::consts::TAU * a as f64 / n as f64;
            (-kmax..=kmax)
                .map(|k| Complex64::from_polar(1.0, sign * k as f64 * t))
                .collect()
        })
        .collect()
}

/// phases[p][w + wmax] = exp(sign i w u_p) for integer frequencies w
/// (these are the doubled spin labels on the half-angle grid).
fn half_angle_phases(n: usize, wmax: i64, sign: f64) -> Vec<Vec<Complex64>> {
    (0..n)
        .map(|p| {
            let u = std::f64::consts::TAU * p as f64 / n as f64;
            (-wmax..=wmax)
                .map(|w| Complex64::from_polar(1.0, sign * w as f64 * u))
                .collect()
        })
        .collect()
}

fn band_kmax(b: FactorBand) -> i64 {
    match b {
        FactorBand::Torus { kmax } => kmax,
        FactorBand::Su2 { two_lmax } => two_lmax,
    }
}

fn synth_su2_grid(field: &CoefficientField, grid: &Grid, out: &mut [Complex64]) {
    use rayon::prelude::*;
    let kmax = band_kmax(field.band.first);
    let two_lmax = band_kmax(field.band.second);
    let m = (2 * two_lmax + 1) as usize; // doubled-label slots
    let phase_t = torus_phases(grid.n_t, kmax, 1.0);
    let phase_u = half_angle_phases(grid.n_u, two_lmax, -1.0);
    let phase_v = half_angle_phases(grid.n_v, two_lmax, -1.0);

    // Group blocks by k for the inner loops.
    let mut by_k: BTreeMap<i64, Vec<(i64, &Block)>> = BTreeMap::new();
    for ((xi, eta), b) in &field.blocks {
        if let (FreqKey::Torus(k), FreqKey::Su2(tl)) = (xi, eta) {
            by_k.entry(*k).or_default().push((*tl, b));
        }
    }
    let slices: Vec<Vec<Complex64>> = (0..grid.n_gl)
        .into_par_iter()
        .map(|b| {
            let theta = grid.gl_nodes[b].acos();
            let dmats = wigner::matrices_up_to(two_lmax, theta);
            let mut slice =
                vec![Complex64::new(0.0, 0.0); grid.n_t * grid.n_u * grid.n_v];
            let mut w = vec![Complex64::new(0.0, 0.0); m * m];
            let mut t1 = vec![Complex64::new(0.0, 0.0); grid.n_u * m];
            let mut g = vec![Complex64::new(0.0, 0.0); grid.n_u * grid.n_v];
            for (k, blocks) in &by_k {
                // W[rho_r][rho_s] = sum_l (2l+1) d^l_{rs} B_{sr}; labels are
                // offset so index = (2 rho + two_lmax) / 2... stored densely
                // by label slot (two_rho + two_lmax)/2 over step-1 slots.
                w.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                for (tl, block) in blocks {
                    let dim = (*tl + 1) as usize;
                    let d = &dmats[*tl as usize];
                    let scale = dim as f64;
                    for r in 0..dim {
                        let slot_r = slot(two_lmax, *tl, r);
                        for s in 0..dim {
                            let slot_s = slot(two_lmax, *tl, s);
                            let val = d[r * dim + s] * scale * block.get(s + 1, r + 1);
                            w[slot_r * m + slot_s] += val;
                        }
                    }
                }
                // t1[p][s'] = sum_r' phase_u[p][r'] W[r'][s']
                for p in 0..grid.n_u {
                    let pu = &phase_u[p];
                    for ss in 0..m {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for rr in 0..m {
                            let zw = w[rr * m + ss];
                            if zw.norm_sqr() > 0.0 {
                                acc += pu[rr] * zw;
                            }
                        }
                        t1[p * m + ss] = acc;
                    }
                }
                // g[p][q] = sum_s' t1[p][s'] phase_v[q][s']
                for p in 0..grid.n_u {
                    for q in 0..grid.n_v {
                        let pv = &phase_v[q];
                        let mut acc = Complex64::new(0.0, 0.0);
                        for ss in 0..m {
                            let z = t1[p * m + ss];
                            if z.norm_sqr() > 0.0 {
                                acc += z * pv[ss];
                            }
                        }
                        g[p * grid.n_v + q] = acc;
                    }
                }
                // out[a][p][q] += e^{ikt_a} g[p][q]
                let kcol = (k + kmax) as usize;
                for a in 0..grid.n_t {
                    let ph = phase_t[a][kcol];
                    let base = a * grid.n_u * grid.n_v;
                    for (dst, src) in slice[base..base + grid.n_u * grid.n_v]
                        .iter_mut()
                        .zip(g.iter())
                    {
                        *dst += ph * src;
                    }
                }
            }
            slice
        })
        .collect();
    for b in 0..grid.n_gl {
        let slice = &slices[b];
        for a in 0..grid.n_t {
            for p in 0..grid.n_u {
                for q in 0..grid.n_v {
                    out[grid.index(a, p, b, q)] =
                        slice[(a * grid.n_u + p) * grid.n_v + q];
                }
            }
        }
    }
}

/// Dense slot of a row label: one slot per doubled label two_rho =
/// 2r - two_l, shifted to 0..=2*two_lmax. The phase tables are indexed by
/// the same shift, so slot doubles as the phase column.
#[inline]
fn slot(two_lmax: i64, two_l: i64, r: usize) -> usize {
    ((2 * r as i64 - two_l) + two_lmax) as usize
}

fn synth_t2_grid(field: &CoefficientField, grid: &Grid, out: &mut [Complex64]) {
    let kmax = band_kmax(field.band.first);
    let jmax = band_kmax(field.band.second);
    let phase_t = torus_phases(grid.n_t, kmax, 1.0);
    let phase_2 = torus_phases(grid.n_u, jmax, 1.0);
    for ((xi, eta), block) in &field.blocks {
        if let (FreqKey::Torus(k), FreqKey::Torus(j)) = (xi, eta) {
            let v = block.get(1, 1);
            if v.norm_sqr() == 0.0 {
                continue;
            }
            let kcol = (k + kmax) as usize;
            let jcol = (j + jmax) as usize;
            for a in 0..grid.n_t {
                let ph = phase_t[a][kcol] * v;
                for p in 0..grid.n_u {
                    out[grid.index(a, p, 0, 0)] += ph * phase_2[p][jcol];
                }
            }
        }
    }
}

/// Quadrature analysis of grid samples into coefficients of band
/// `out_band`. Exact when the samples come from a field whose band the
/// grid was sized for.
pub fn analyze_on_grid(
    values: &[Complex64],
    grid: &Grid,
    out_band: ProductBand,
) -> Result<CoefficientField, TransformError> {
    let k_out = band_kmax(out_band.first);
    if grid.n_t < (k_out + 1) as usize {
        return Err(TransformError::Aliasing(format!(
            "n_t = {} cannot resolve torus band {k_out}",
            grid.n_t
        )));
    }
    let mut field = CoefficientField::zero(out_band);
    if grid.second_is_su2 {
        analyze_su2_grid(values, grid, &mut field);
    } else {
        analyze_t2_grid(values, grid, &mut field);
    }
    Ok(field)
}

fn analyze_su2_grid(values: &[Complex64], grid: &Grid, field: &mut CoefficientField) {
    use rayon::prelude::*;
    let k_out = band_kmax(field.band.first);
    let two_lout = band_kmax(field.band.second);
    let m = (2 * two_lout + 1) as usize;
    let phase_t = torus_phases(grid.n_t, k_out, -1.0);
    let phase_u = half_angle_phases(grid.n_u, two_lout, 1.0);
    let phase_v = half_angle_phases(grid.n_v, two_lout, 1.0);
    let kcount = (2 * k_out + 1) as usize;

    let partials: Vec<Vec<Complex64>> = (0..grid.n_gl)
        .into_par_iter()
        .map(|b| {
            let theta = grid.gl_nodes[b].acos();
            let dmats = wigner::matrices_up_to(two_lout, theta);
            let wq = 0.5 * grid.gl_weights[b] / (grid.n_t * grid.n_u * grid.n_v) as f64;
            // s1[k][p][q] = sum_a e^{-ik t_a} f[a,p,b,q]
            let mut s1 =
                vec![Complex64::new(0.0, 0.0); kcount * grid.n_u * grid.n_v];
            for a in 0..grid.n_t {
                let pt = &phase_t[a];
                for p in 0..grid.n_u {
                    for q in 0..grid.n_v {
                        let f = values[grid.index(a, p, b, q)];
                        if f.norm_sqr() == 0.0 {
                            continue;
                        }
                        for (kc, ph) in pt.iter().enumerate() {
                            s1[(kc * grid.n_u + p) * grid.n_v + q] += ph * f;
                        }
                    }
                }
            }
            // s2[k][sigma][q] = sum_p e^{+i sigma 2u_p} s1; sigma = s-label.
            let mut s2 = vec![Complex64::new(0.0, 0.0); kcount * m * grid.n_v];
            for kc in 0..kcount {
                for p in 0..grid.n_u {
                    let pu = &phase_u[p];
                    for q in 0..grid.n_v {
                        let z = s1[(kc * grid.n_u + p) * grid.n_v + q];
                        if z.norm_sqr() == 0.0 {
                            continue;
                        }
                        for ss in 0..m {
                            s2[(kc * m + ss) * grid.n_v + q] += pu[ss] * z;
                        }
                    }
                }
            }
            // s3[k][sigma][rho] = sum_q e^{+i rho 2v_q} s2; rho = r-label.
            let mut s3 = vec![Complex64::new(0.0, 0.0); kcount * m * m];
            for kc in 0..kcount {
                for ss in 0..m {
                    for q in 0..grid.n_v {
                        let z = s2[(kc * m + ss) * grid.n_v + q];
                        if z.norm_sqr() == 0.0 {
                            continue;
                        }
                        let pv = &phase_v[q];
                        for rr in 0..m {
                            s3[(kc * m + ss) * m + rr] += pv[rr] * z;
                        }
                    }
                }
            }
            // Deposit into blocks: B(k,l)_{rs} += wq d^l_{sr} s3[k][s][r].
            let mut out = vec![Complex64::new(0.0, 0.0); kcount * block_arena(two_lout)];
            for tl in 0..=two_lout {
                let dim = (tl + 1) as usize;
                let d = &dmats[tl as usize];
                let base = block_offset(tl);
                for kc in 0..kcount {
                    let arena = &mut out[kc * block_arena(two_lout)..];
                    for r in 0..dim {
                        let slot_r = slot(two_lout, tl, r);
                        for s in 0..dim {
                            let slot_s = slot(two_lout, tl, s);
                            let val = d[s * dim + r]
                                * s3[(kc * m + slot_s) * m + slot_r]
                                * wq;
                            arena[base + r * dim + s] += val;
                        }
                    }
                }
            }
            out
        })
        .collect();

    // Sum the per-node partials and write blocks.
    let arena_len = block_arena(two_lout);
    let mut total = vec![Complex64::new(0.0, 0.0); kcount * arena_len];
    for part in partials {
        for (t, s) in total.iter_mut().zip(part.iter()) {
            *t += s;
        }
    }
    for kc in 0..kcount {
        let k = kc as i64 - k_out;
        for tl in 0..=two_lout {
            let dim = (tl + 1) as usize;
            let base = kc * arena_len + block_offset(tl);
            let slice = &total[base..base + dim * dim];
            if slice.iter().all(|z| z.norm_sqr() == 0.0) {
                continue;
            }
            let block = field.block_mut(FreqKey::Torus(k), FreqKey::Su2(tl));
            block.entries.copy_from_slice(slice);
        }
    }
}

/// Flat arena layout for all blocks l = 0..=two_lmax of one k.
fn block_arena(two_lmax: i64) -> usize {
    (0..=two_lmax).map(|tl| ((tl + 1) * (tl + 1)) as usize).sum()
}

fn block_offset(two_l: i64) -> usize {
    (0..two_l).map(|tl| ((tl + 1) * (tl + 1)) as usize).sum()
}

fn analyze_t2_grid(values: &[Complex64], grid: &Grid, field: &mut CoefficientField) {
    let k_out = band_kmax(field.band.first);
    let j_out = band_kmax(field.band.second);
    let phase_t = torus_phases(grid.n_t, k_out, -1.0);
    let phase_2 = torus_phases(grid.n_u, j_out, -1.0);
    let norm = 1.0 / (grid.n_t * grid.n_u) as f64;
    for kc in 0..(2 * k_out + 1) as usize {
        for jc in 0..(2 * j_out + 1) as usize {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..grid.n_t {
                let pk = phase_t[a][kc];
                for p in 0..grid.n_u {
                    acc += pk * phase_2[p][jc] * values[grid.index(a, p, 0, 0)];
                }
            }
            let v = acc * norm;
            if v.norm_sqr() > 1e-300 {
                field.set_scalar(kc as i64 - k_out, jc as i64 - j_out, v);
            }
        }
    }
}

/// Analyzes a closed-form function: samples it on a grid sized for
/// `assumed_band` (the caller asserts the function is band-limited within
/// it) and projects onto `out_band`.
pub fn analyze_function(
    f: impl Fn(&EulerPoint) -> Complex64,
    assumed_band: ProductBand,
    out_band: ProductBand,
) -> Result<CoefficientField, TransformError> {
    let grid = Grid::for_bands(assumed_band, out_band)?;
    let mut values = vec![Complex64::new(0.0, 0.0); grid.len()];
    for a in 0..grid.n_t {
        for p in 0..grid.n_u {
            for b in 0..grid.n_gl {
                for q in 0..grid.n_v {
                    values[grid.index(a, p, b, q)] = f(&grid.point(a, p, b, q));
                }
            }
        }
    }
    analyze_on_grid(&values, &grid, out_band)
}

/// Pointwise product of two band-limited fields, computed by synthesis on
/// a grid sized for the sum of the bands (exact for band-limited factors).
pub fn pointwise_product(
    a: &CoefficientField,
    b: &CoefficientField,
) -> Result<CoefficientField, TransformError> {
    let band = a.band.sum(b.band);
    let grid = Grid::for_bands(band, band)?;
    let va = synthesize_on_grid(a, &grid);
    let vb = synthesize_on_grid(b, &grid);
    let prod: Vec<Complex64> = va.iter().zip(vb.iter()).map(|(x, y)| x * y).collect();
    analyze_on_grid(&prod, &grid, band)
}

/// L^2 norm of grid samples under the normalized Haar quadrature.
pub fn l2_norm_on_grid(values: &[Complex64], grid: &Grid) -> f64 {
    let mut acc = 0.0;
    for a in 0..grid.n_t {
        for p in 0..grid.n_u {
            for b in 0..grid.n_gl {
                let wq = grid.haar_weight(b);
                for q in 0..grid.n_v {
                    acc += wq * values[grid.index(a, p, b, q)].norm_sqr();
                }
            }
        }
    }
    acc.sqrt()
}

/// Trace of the spin-1/2 representation: 2 cos(theta/2) cos((phi+psi)/2).
pub fn trace_fn(p: &EulerPoint) -> Complex64 {
    match p.x2 {
        FactorPoint::Su2 { phi, theta, psi } => {
            Complex64::new(2.0 * (theta / 2.0).cos() * ((phi + psi) / 2.0).cos(), 0.0)
        }
        FactorPoint::Torus { .. } => Complex64::new(0.0, 0.0),
    }
}

/// The derivative of the trace along psi: -cos(theta/2) sin((phi+psi)/2).
pub fn h_fn(p: &EulerPoint) -> Complex64 {
    match p.x2 {
        FactorPoint::Su2 { phi, theta, psi } => {
            Complex64::new(-((theta / 2.0).cos()) * ((phi + psi) / 2.0).sin(), 0.0)
        }
        FactorPoint::Torus { .. } => Complex64::new(0.0, 0.0),
    }
}

/// Coefficient field of the trace function (one spin-1/2 block, I/2).
pub fn trace_field() -> CoefficientField {
    let mut f = CoefficientField::zero(ProductBand::t1_su2(0, 1));
    let b = f.block_mut(FreqKey::Torus(0), FreqKey::Su2(1));
    b.set(1, 1, Complex64::new(0.5, 0.0));
    b.set(2, 2, Complex64::new(0.5, 0.0));
    f
}

/// Coefficient field of h = d(tr)/d(psi): diag(+i/4 at -1/2, -i/4 at +1/2)
/// in ascending labels, times the dimension convention of `trace_field`.
pub fn h_field() -> CoefficientField {
    let mut f = CoefficientField::zero(ProductBand::t1_su2(0, 1));
    let b = f.block_mut(FreqKey::Torus(0), FreqKey::Su2(1));
    b.set(1, 1, Complex64::new(0.0, 0.25));
    b.set(2, 2, Complex64::new(0.0, -0.25));
    f
}

/// CSV export: one row per entry, columns k, l, m, n, r, s, re, im
/// (1-based tensor indices; l in half-integer steps; for a second torus
/// factor the l column carries the integer frequency).
pub fn to_csv(field: &CoefficientField) -> String {
    let mut out = String::from("k,l,m,n,r,s,re,im\n");
    for ((xi, eta), block) in &field.blocks {
        let k = match xi {
            FreqKey::Torus(k) => *k,
            FreqKey::Su2(tl) => *tl,
        };
        let lcol = match eta {
            FreqKey::Torus(j) => *j as f64,
            FreqKey::Su2(tl) => *tl as f64 / 2.0,
        };
        let d = block.dim();
        for i in 1..=d {
            for j in 1..=d {
                let v = block.get(i, j);
                if v.norm_sqr() == 0.0 {
                    continue;
                }
                let (m, n, r, s) =
                    crate::duals::unflatten(crate::duals::FlatIndex { i, j }, block.d1, block.d2)
                        .expect("in-range");
                let _ = writeln!(
                    out,
                    "{k},{lcol},{m},{n},{r},{s},{:e},{:e}",
                    v.re, v.im
                );
            }
        }
    }
    out
}

/// Reads a coefficient CSV inferring the band from the data.
pub fn from_csv_infer(text: &str, second_is_su2: bool) -> Result<CoefficientField, TransformError> {
    let mut kmax = 0i64;
    let mut lmax = 0i64;
    for (lineno, line) in text.lines().enumerate() {
        if (lineno == 0 && line.starts_with('k')) || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(TransformError::Parse(format!(
                "line {}: expected 8 columns",
                lineno + 1
            )));
        }
        let k: i64 = cols[0]
            .parse()
            .map_err(|e: std::num::ParseIntError| TransformError::Parse(e.to_string()))?;
        let l: f64 = cols[1]
            .parse()
            .map_err(|e: std::num::ParseFloatError| TransformError::Parse(e.to_string()))?;
        kmax = kmax.max(k.abs());
        lmax = lmax.max(if second_is_su2 {
            (2.0 * l).round() as i64
        } else {
            (l as i64).abs()
        });
    }
    let band = ProductBand {
        first: FactorBand::Torus { kmax },
        second: if second_is_su2 {
            FactorBand::Su2 { two_lmax: lmax }
        } else {
            FactorBand::Torus { kmax: lmax }
        },
    };
    from_csv(text, band)
}

/// Inverse of `to_csv`; the caller provides the band and factor kinds.
pub fn from_csv(text: &str, band: ProductBand) -> Result<CoefficientField, TransformError> {
    let mut field = CoefficientField::zero(band);
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && line.starts_with('k') {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(TransformError::Parse(format!(
                "line {}: expected 8 columns",
                lineno + 1
            )));
        }
        let bad = |e: std::num::ParseFloatError| TransformError::Parse(e.to_string());
        let badi = |e: std::num::ParseIntError| TransformError::Parse(e.to_string());
        let k: i64 = cols[0].parse().map_err(badi)?;
        let l: f64 = cols[1].parse().map_err(bad)?;
        let m: usize = cols[2].parse().map_err(badi)?;
        let n: usize = cols[3].parse().map_err(badi)?;
        let r: usize = cols[4].parse().map_err(badi)?;
        let s: usize = cols[5].parse().map_err(badi)?;
        let re: f64 = cols[6].parse().map_err(bad)?;
        let im: f64 = cols[7].parse().map_err(bad)?;
        let eta = match band.second {
            FactorBand::Torus { .. } => FreqKey::Torus(l as i64),
            FactorBand::Su2 { .. } => FreqKey::Su2((2.0 * l).round() as i64),
        };
        let xi = FreqKey::Torus(k);
        let block = field.block_mut(xi, eta);
        let idx = crate::duals::flatten(m, n, r, s, block.d1, block.d2)
            .map_err(|e| TransformError::Parse(e.to_string()))?;
        block.set(idx.i, idx.j, Complex64::new(re, im));
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_points(n: usize, seed: u64) -> Vec<EulerPoint> {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..n)
            .map(|_| {
                EulerPoint::t1_su2(
                    next() * std::f64::consts::TAU,
                    next() * std::f64::consts::TAU,
                    next() * std::f64::consts::PI,
                    next() * 2.0 * std::f64::consts::TAU,
                )
            })
            .collect()
    }

    #[test]
    fn constant_field_synthesizes_to_one() {
        let mut f = CoefficientField::zero(ProductBand::t1_su2(0, 0));
        f.block_mut(FreqKey::Torus(0), FreqKey::Su2(0))
            .set(1, 1, Complex64::new(1.0, 0.0));
        for p in rng_points(20, 7) {
            let v = synthesize(&f, &p);
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn trace_field_matches_closed_form() {
        let f = trace_field();
        for p in rng_points(100, 13) {
            let got = synthesize(&f, &p);
            assert!((got - trace_fn(&p)).norm() < 1e-12, "at {:?}", p);
        }
    }

    #[test]
    fn h_field_matches_closed_form() {
        let f = h_field();
        for p in rng_points(100, 17) {
            let got = synthesize(&f, &p);
            assert!((got - h_fn(&p)).norm() < 1e-12);
        }
    }

    #[test]
    fn analyze_constant_gives_trivial_block_only() {
        let band = ProductBand::t1_su2(2, 4);
        let f = analyze_function(|_| Complex64::new(1.0, 0.0), band, band).unwrap();
        for ((xi, eta), b) in &f.blocks {
            for (idx, v) in b.entries.iter().enumerate() {
                let trivial =
                    *xi == FreqKey::Torus(0) && *eta == FreqKey::Su2(0) && idx == 0;
                if trivial {
                    assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn analyze_trace_round_trip() {
        let band = ProductBand::t1_su2(1, 3);
        let got = analyze_function(trace_fn, band, band).unwrap();
        let want = trace_field();
        assert!(got.max_block_diff(&want) < 1e-10);
    }

    #[test]
    fn product_structure_cos_t_times_trace() {
        let band = ProductBand::t1_su2(2, 3);
        let f = analyze_function(
            |p| Complex64::new(p.t.cos(), 0.0) * trace_fn(p),
            band,
            band,
        )
        .unwrap();
        for ((xi, eta), b) in &f.blocks {
            let expected = matches!(xi, FreqKey::Torus(k) if k.abs() == 1)
                && *eta == FreqKey::Su2(1);
            let sz = b.hs_norm_sq().sqrt();
            if expected {
                assert!(sz > 0.1);
            } else {
                assert!(sz < 1e-12, "unexpected block at {:?}", (xi, eta));
            }
        }
    }

    #[test]
    fn round_trip_random_field_su2() {
        let band = ProductBand::t1_su2(3, 5);
        let f = CoefficientField::random(band, 42, |w| (-0.3 * w).exp());
        let grid = Grid::for_bands(band, band).unwrap();
        let vals = synthesize_on_grid(&f, &grid);
        let back = analyze_on_grid(&vals, &grid, band).unwrap();
        assert!(f.max_block_diff(&back) < 1e-10);
    }

    #[test]
    fn round_trip_random_field_t2() {
        let band = ProductBand::t2(4, 5);
        let f = CoefficientField::random(band, 1, |_| 1.0);
        let grid = Grid::for_bands(band, band).unwrap();
        let vals = synthesize_on_grid(&f, &grid);
        let back = analyze_on_grid(&vals, &grid, band).unwrap();
        assert!(f.max_block_diff(&back) < 1e-11);
    }

    #[test]
    fn grid_synthesis_matches_pointwise() {
        let band = ProductBand::t1_su2(2, 3);
        let f = CoefficientField::random(band, 5, |_| 1.0);
        let grid = Grid::for_bands(band, band).unwrap();
        let vals = synthesize_on_grid(&f, &grid);
        for (a, p, b, q) in [(0, 0, 0, 0), (1, 2, 1, 3), (3, 4, 1, 1)] {
            let pt = grid.point(a, p, b, q);
            let direct = synthesize(&f, &pt);
            assert!((vals[grid.index(a, p, b, q)] - direct).norm() < 1e-11);
        }
    }

    #[test]
    fn plancherel_identities() {
        assert_eq!(
            CoefficientField::zero(ProductBand::t1_su2(1, 1)).plancherel_norm(),
            0.0
        );
        // f = 1: norm 1 under normalized Haar measure.
        let mut one = CoefficientField::zero(ProductBand::t1_su2(0, 0));
        one.block_mut(FreqKey::Torus(0), FreqKey::Su2(0))
            .set(1, 1, Complex64::new(1.0, 0.0));
        assert!((one.plancherel_norm() - 1.0).abs() < 1e-14);
        // Trace function: coefficient side vs quadrature side.
        let f = trace_field();
        assert!((f.plancherel_norm() - 1.0).abs() < 1e-12);
        let band = ProductBand::t1_su2(1, 2);
        let grid = Grid::for_bands(band, band).unwrap();
        let vals = synthesize_on_grid(&f.truncated(band), &grid);
        let l2 = l2_norm_on_grid(&vals, &grid);
        assert!(
            (l2 - f.plancherel_norm()).abs() <= 1e-8 * f.plancherel_norm(),
            "{l2}"
        );
    }

    #[test]
    fn plancherel_unitarity_on_random_fields() {
        for seed in 0..20u64 {
            let band = ProductBand::t1_su2(2, 4);
            let f = CoefficientField::random(band, seed, |w| 1.0 / (1.0 + w));
            let grid = Grid::for_bands(band, band).unwrap();
            let vals = synthesize_on_grid(&f, &grid);
            let l2 = l2_norm_on_grid(&vals, &grid);
            let pl = f.plancherel_norm();
            assert!((l2 - pl).abs() <= 1e-8 * pl.max(1e-12), "seed {seed}: {l2} vs {pl}");
        }
    }

    #[test]
    fn wigner_orthogonality_under_quadrature() {
        // <t^l_{mn}, t^l'_{m'n'}> = delta / (2l+1) for l, l' <= 3.
        let band = ProductBand::t1_su2(0, 6);
        let grid = Grid::for_bands(band, band).unwrap();
        for tl in [1i64, 2, 4, 6] {
            for tlp in [1i64, 3, 6] {
                let dim = (tl + 1) as usize;
                let dimp = (tlp + 1) as usize;
                for (r, s, rp, sp) in [(0, 0, 0, 0), (0, 1, 0, 1), (1, 0, 0, 1)] {
                    if r >= dim || s >= dim || rp >= dimp || sp >= dimp {
                        continue;
                    }
                    let mut acc = Complex64::new(0.0, 0.0);
                    for p in 0..grid.n_u {
                        for b in 0..grid.n_gl {
                            let wq = grid.haar_weight(b) * grid.n_t as f64;
                            for q in 0..grid.n_v {
                                let pt = grid.point(0, p, b, q);
                                let (phi, theta, psi) = match pt.x2 {
                                    FactorPoint::Su2 { phi, theta, psi } => (phi, theta, psi),
                                    _ => unreachable!(),
                                };
                                let el = |tlx: i64, rx: usize, sx: usize| {
                                    let rho_r = (2 * rx as i64 - tlx) as f64 / 2.0;
                                    let rho_s = (2 * sx as i64 - tlx) as f64 / 2.0;
                                    Complex64::from_polar(
                                        wigner::element(
                                            tlx,
                                            2 * rx as i64 - tlx,
                                            2 * sx as i64 - tlx,
                                            theta,
                                        ),
                                        -(rho_r * phi + rho_s * psi),
                                    )
                                };
                                acc += wq * el(tl, r, s) * el(tlp, rp, sp).conj();
                            }
                        }
                    }
                    let want = if tl == tlp && r == rp && s == sp {
                        1.0 / (tl + 1) as f64
                    } else {
                        0.0
                    };
                    assert!(
                        (acc - Complex64::new(want, 0.0)).norm() < 1e-10,
                        "2l={tl} 2l'={tlp} ({r},{s},{rp},{sp}): {acc}"
                    );
                }
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let band = ProductBand::t1_su2(2, 3);
        let f = CoefficientField::random(band, 9, |_| 1.0);
        let text = to_csv(&f);
        let back = from_csv(&text, band).unwrap();
        assert!(f.max_block_diff(&back) < 1e-12);
    }
}
