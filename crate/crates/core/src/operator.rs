//! The vector field L = X1 + a X2 (+ constant q) as a spectral multiplier:
//! divisor values lambda + a mu - i q over the truncated product dual, the
//! kernel set N of exact zeros, and the Roumieu/Beurling small-divisor
//! condition checkers.
//!
//! Divisor reality: the real part always has the shape RAT + alpha * COEF
//! with RAT, COEF exact rationals and alpha either rational or a continued
//! fraction enclosure. Membership in N is therefore decided exactly: for
//! irrational alpha a zero forces COEF = 0 and RAT = 0. Magnitudes go
//! through an error-compensated float pair, with an exact rational interval
//! fallback for candidates below 1e-4; nothing is ever silently rounded
//! to zero.
//!
//! Scan scale: fits stream over a reduced spectrum (SU(2) factors emit one
//! hit per distinct row label at the minimal class, re-emitted at decade
//! boundaries its copies cross; minima are unchanged because the fit
//! integrands increase with the weight at fixed |D|). The hot loop is pure
//! float compares against precomputed thresholds; logs and associated-
//! function values are only taken for the rare survivors.

use crate::diophantine::{CfError, CfPattern, ContinuedFraction};
use crate::duals::{GroupTag, ProductFrequency, RepIndex};
use crate::numeric::{ln_rational, rational_to_f64, TwoFloat};
use crate::weights::AssociatedFunction;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("continued fraction: {0}")]
    Cf(#[from] CfError),
    #[error("invalid operator spec: {0}")]
    Invalid(String),
    #[error("truncation too large to materialize ({0} records); use the streaming fits")]
    TooLarge(u64),
    #[error("empty nonzero spectrum")]
    EmptySpectrum,
}

/// Symbol rule of one factor: how the diagonal eigenvalues depend on the
/// representation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SymbolRule {
    /// lambda(k) = dir * k on the circle.
    TorusDir { dir: BigRational },
    /// Row eigenvalues -l..l on SU(2) (the psi-derivative symbol).
    Su2,
}

impl SymbolRule {
    pub fn group(&self) -> GroupTag {
        match self {
            SymbolRule::TorusDir { .. } => GroupTag::Torus(1),
            SymbolRule::Su2 => GroupTag::Su2,
        }
    }
}

/// Real coupling value: exact rational or a continued-fraction enclosure.
#[derive(Clone, Debug)]
pub enum Coupling {
    Rational(BigRational),
    Cf(CfPattern),
}

impl Coupling {
    pub fn one() -> Self {
        Coupling::Rational(BigRational::from_integer(BigInt::from(1)))
    }
}

/// Constant zeroth-order term q = re + i (im + im_alpha * alpha); the
/// alpha multiple makes shifts like q = alpha i expressible exactly.
#[derive(Clone, Debug, Default)]
pub struct Shift {
    pub re: BigRational,
    pub im: BigRational,
    pub im_alpha: BigRational,
}

impl Shift {
    pub fn half_i() -> Self {
        Shift {
            re: BigRational::zero(),
            im: BigRational::new(BigInt::from(1), BigInt::from(2)),
            im_alpha: BigRational::zero(),
        }
    }

    pub fn alpha_i() -> Self {
        Shift {
            re: BigRational::zero(),
            im: BigRational::zero(),
            im_alpha: BigRational::from_integer(BigInt::from(1)),
        }
    }
}

/// L = X1 + a X2 + q as data. The divisor at a spectral slot is
/// lambda + a mu - i q.
#[derive(Clone, Debug)]
pub struct VectorFieldSpec {
    pub g1: SymbolRule,
    pub g2: SymbolRule,
    pub coupling: Coupling,
    /// Imaginary part of the coupling (rational; every worked example has
    /// a real coupling).
    pub coupling_im: BigRational,
    pub shift: Shift,
}

impl VectorFieldSpec {
    /// d/dt + a d/dpsi + q on T^1 x SU(2).
    pub fn t1_su2(coupling: Coupling, shift: Shift) -> Self {
        VectorFieldSpec {
            g1: SymbolRule::TorusDir {
                dir: BigRational::from_integer(BigInt::from(1)),
            },
            g2: SymbolRule::Su2,
            coupling,
            coupling_im: BigRational::zero(),
            shift,
        }
    }

    /// d/dt + a d/dx + q on T^2.
    pub fn t2(coupling: Coupling, shift: Shift) -> Self {
        VectorFieldSpec {
            g1: SymbolRule::TorusDir {
                dir: BigRational::from_integer(BigInt::from(1)),
            },
            g2: SymbolRule::TorusDir {
                dir: BigRational::from_integer(BigInt::from(1)),
            },
            coupling,
            coupling_im: BigRational::zero(),
            shift,
        }
    }

    /// Norm bound certificate: |lambda| <= ||X1|| <xi> on every class.
    pub fn norm_x1(&self) -> f64 {
        match &self.g1 {
            SymbolRule::TorusDir { dir } => rational_to_f64(dir).abs().max(f64::MIN_POSITIVE),
            SymbolRule::Su2 => 1.0,
        }
    }

    pub fn norm_x2(&self) -> f64 {
        match &self.g2 {
            SymbolRule::TorusDir { dir } => rational_to_f64(dir).abs().max(f64::MIN_POSITIVE),
            SymbolRule::Su2 => 1.0,
        }
    }
}

/// Truncation of the product dual: torus factors keep |k| <= limit, SU(2)
/// factors keep 2l <= limit.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Truncation {
    pub g1_limit: i64,
    pub g2_limit: i64,
}

/// Coupling with its enclosure pinned to the working precision.
#[derive(Clone, Debug)]
pub struct PreparedCoupling {
    pub exact: Option<BigRational>,
    pub lo: BigRational,
    pub hi: BigRational,
    pub mid: TwoFloat,
    pub achieved_bits: f64,
    /// Refined expansion, kept for the convergent-sandwich fallback.
    cf: Option<ContinuedFraction>,
}

impl PreparedCoupling {
    pub fn prepare(c: &Coupling, precision_bits: u64) -> Result<Self, OperatorError> {
        match c {
            Coupling::Rational(r) => Ok(PreparedCoupling {
                exact: Some(r.clone()),
                lo: r.clone(),
                hi: r.clone(),
                mid: TwoFloat::from_rational(r),
                achieved_bits: f64::INFINITY,
                cf: None,
            }),
            Coupling::Cf(pattern) => {
                let mut cf = ContinuedFraction::new(pattern.clone())?;
                // The requested precision is a target with margin; fast
                // patterns exceed it in a few steps. When the generator
                // exhausts first (tower growth), the achieved width is
                // recorded and divisors the enclosure cannot separate get
                // flagged ambiguous instead of silently rounded.
                let achieved = match cf.refine_to_bits(precision_bits + 64) {
                    Ok(b) => b,
                    Err(_) => cf.enclosure_bits(),
                };
                let (lo, hi) = cf.enclosure();
                let mid = TwoFloat::from_rational(
                    &((&lo + &hi) / BigRational::from_integer(BigInt::from(2))),
                );
                Ok(PreparedCoupling {
                    exact: if cf.is_rational() { Some(lo.clone()) } else { None },
                    lo,
                    hi,
                    mid,
                    achieved_bits: achieved,
                    cf: Some(cf),
                })
            }
        }
    }
}

/// One divisor sample. `abs_log` is ln |D|, -inf only for exact zeros.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DivisorRecord {
    pub freq: ProductFrequency,
    pub lambda: f64,
    pub mu: f64,
    pub divisor_re: f64,
    pub divisor_im: f64,
    pub abs: f64,
    pub abs_log: f64,
    pub weight: f64,
    pub exact_zero: bool,
    /// |D| below resolution with the coupling enclosure exhausted; the
    /// value is provably nonzero but its size is undecided.
    pub ambiguous: bool,
}

/// Candidates below this go through the exact rational interval.
const REFINE_BELOW: f64 = 1e-4;

/// The spectrum handle: operator + truncation + prepared coupling.
pub struct DivisorSpectrum {
    pub spec: VectorFieldSpec,
    pub trunc: Truncation,
    pub coupling: PreparedCoupling,
    pub precision_bits: u64,
}

impl DivisorSpectrum {
    pub fn new(
        spec: VectorFieldSpec,
        trunc: Truncation,
        precision_bits: u64,
    ) -> Result<Self, OperatorError> {
        if !spec.shift.im_alpha.is_zero() && matches!(spec.coupling, Coupling::Rational(_)) {
            return Err(OperatorError::Invalid(
                "alpha-proportional shift needs a continued-fraction coupling".into(),
            ));
        }
        let coupling = PreparedCoupling::prepare(&spec.coupling, precision_bits)?;
        Ok(DivisorSpectrum {
            spec,
            trunc,
            coupling,
            precision_bits,
        })
    }

    /// Number of full (xi, eta, m, r) slots in the truncation.
    pub fn full_record_count(&self) -> u64 {
        factor_slot_count(&self.spec.g1, self.trunc.g1_limit)
            .saturating_mul(factor_slot_count(&self.spec.g2, self.trunc.g2_limit))
    }

    /// Materializes every record in deterministic order; guarded.
    pub fn records(&self) -> Result<Vec<DivisorRecord>, OperatorError> {
        const CAP: u64 = 20_000_000;
        let n = self.full_record_count();
        if n > CAP {
            return Err(OperatorError::TooLarge(n));
        }
        let g2 = factor_slots(&self.spec.g2, self.trunc.g2_limit);
        let mut out = Vec::with_capacity(n as usize);
        for (xi, m_row, lambda) in factor_slots(&self.spec.g1, self.trunc.g1_limit) {
            for (eta, r_row, mu) in &g2 {
                out.push(self.record_at(&xi, m_row, &lambda, eta, *r_row, mu));
            }
        }
        Ok(out)
    }

    /// The divisor at one explicit slot, fully refined.
    pub fn record_at(
        &self,
        xi: &RepIndex,
        m_row: usize,
        lambda: &BigRational,
        eta: &RepIndex,
        r_row: usize,
        mu: &BigRational,
    ) -> DivisorRecord {
        let (rat, coef) = self.re_parts(lambda, mu);
        let im = self.im_value(mu);
        let im_f64 = rational_to_f64(&im);
        let exact_zero = coef.is_zero() && rat.is_zero() && im.is_zero();
        let (re_approx, abs, abs_log, ambiguous) = self.magnitude(&rat, &coef, im_f64);
        DivisorRecord {
            freq: ProductFrequency {
                xi: xi.clone(),
                eta: eta.clone(),
                m: m_row,
                r: r_row,
            },
            lambda: rational_to_f64(lambda),
            mu: rational_to_f64(mu),
            divisor_re: re_approx,
            divisor_im: im_f64,
            abs: if exact_zero { 0.0 } else { abs },
            abs_log: if exact_zero { f64::NEG_INFINITY } else { abs_log },
            weight: xi.weight() + eta.weight(),
            exact_zero,
            ambiguous,
        }
    }

    /// re = RAT + alpha * COEF with RAT = lambda + shift_im (+ a mu when
    /// the coupling is exact) and COEF = mu + shift_im_alpha otherwise.
    fn re_parts(&self, lambda: &BigRational, mu: &BigRational) -> (BigRational, BigRational) {
        if let Some(a) = &self.coupling.exact {
            (lambda + a * mu + &self.spec.shift.im, BigRational::zero())
        } else {
            (lambda + &self.spec.shift.im, mu + &self.spec.shift.im_alpha)
        }
    }

    fn im_value(&self, mu: &BigRational) -> BigRational {
        &self.spec.coupling_im * mu - &self.spec.shift.re
    }

    /// (re approx, |D|, ln|D|, ambiguous); exact-rational interval fallback
    /// below the refinement threshold.
    fn magnitude(&self, rat: &BigRational, coef: &BigRational, im: f64) -> (f64, f64, f64, bool) {
        if coef.is_zero() {
            let re = rational_to_f64(rat);
            if rat.is_zero() && im == 0.0 {
                return (0.0, 0.0, f64::NEG_INFINITY, false);
            }
            if im == 0.0 {
                // Exact rational magnitude; log from the rational so tiny
                // values keep their scale even past f64 underflow.
                return (re, re.abs(), ln_rational(&rat.abs()), false);
            }
            let abs = re.hypot(im);
            return (re, abs, abs.ln(), false);
        }
        let coef_f = rational_to_f64(coef);
        let approx = self.coupling.mid.hi * coef_f
            + (self.coupling.mid.lo * coef_f + rational_to_f64(rat));
        if approx.abs() >= REFINE_BELOW {
            let abs = approx.hypot(im);
            return (approx, abs, abs.ln(), false);
        }
        // Exact interval endpoints from the coupling enclosure.
        let e1 = rat + &self.coupling.lo * coef;
        let e2 = rat + &self.coupling.hi * coef;
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        if lo.is_positive() || hi.is_negative() {
            let mag_lo = lo.abs().min(hi.abs());
            let mag_hi = lo.abs().max(hi.abs());
            let re_log = 0.5 * (ln_rational(&mag_lo) + ln_rational(&mag_hi));
            let re_f = rational_to_f64(&mag_lo) * approx.signum();
            if im == 0.0 {
                return (re_f, re_f.abs(), re_log, false);
            }
            let abs = re_f.hypot(im);
            return (re_f, abs, abs.ln(), false);
        }
        // The enclosure cannot separate the value from zero. That happens
        // exactly when -RAT/COEF is (a multiple of) one of the deepest
        // convergents p_n/q_n; then |D| = |COEF/q_n| |q_n a - p_n| and the
        // convergent sandwich gives rigorous two-sided log bounds even
        // though the enclosure itself ends at p_n/q_n.
        if let Some((g_lo, g_hi)) = self.convergent_gap_log(rat, coef) {
            let re_log = 0.5 * (g_lo + g_hi);
            let re_f = re_log.exp() * approx.signum();
            if im == 0.0 {
                return (re_f, re_f.abs(), re_log, false);
            }
            let abs = re_f.hypot(im);
            return (re_f, abs, abs.ln().max(im.abs().ln()), false);
        }
        // Provably nonzero (alpha irrational, COEF != 0) but of undecided
        // size; flagged, never silently zeroed.
        let width = rational_to_f64(&(hi - lo));
        (approx, width, width.ln(), true)
    }

    /// ln|RAT + a COEF| bounds when -RAT/COEF reduces to a convergent of
    /// the coupling.
    fn convergent_gap_log(&self, rat: &BigRational, coef: &BigRational) -> Option<(f64, f64)> {
        let cf = self.coupling.cf.as_ref()?;
        let target = -(rat / coef);
        for n in 0..cf.depth() {
            let (p, q) = cf.convergent(n);
            if BigRational::new(p.clone(), q.clone()) == target {
                let (g_lo, g_hi) = cf.gap_log_bounds(n)?;
                let scale = ln_rational(&coef.abs()) - crate::numeric::ln_bigint(q);
                return Some((scale + g_lo, scale + g_hi));
            }
        }
        None
    }
}

fn factor_slot_count(rule: &SymbolRule, limit: i64) -> u64 {
    match rule {
        SymbolRule::TorusDir { .. } => (2 * limit + 1) as u64,
        SymbolRule::Su2 => {
            let n = (limit + 1) as u64;
            n * (n + 1) / 2
        }
    }
}

/// Full slot list of one factor: (class, 1-based row, eigenvalue).
fn factor_slots(rule: &SymbolRule, limit: i64) -> Vec<(RepIndex, usize, BigRational)> {
    let mut out = Vec::new();
    match rule {
        SymbolRule::TorusDir { dir } => {
            for k in -limit..=limit {
                out.push((
                    RepIndex::torus1(k),
                    1,
                    dir * BigRational::from_integer(BigInt::from(k)),
                ));
            }
        }
        SymbolRule::Su2 => {
            for two_l in 0..=limit {
                let rep = RepIndex::su2(two_l);
                for (row0, rho) in rep.row_labels().into_iter().enumerate() {
                    // The symbol acts on the row index with eigenvalue
                    // mu = -rho under t_{mn} = e^{-i(m phi + n psi)} d_{mn}.
                    out.push((rep.clone(), row0 + 1, -rho.to_rational()));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Kernel census
// ---------------------------------------------------------------------------

/// All exact zeros in the truncation, as ([xi],[eta]) class pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelCensus {
    pub pairs: Vec<(RepIndex, RepIndex)>,
    pub count: u64,
    /// New elements appeared in the outer 20% of the truncation.
    pub still_growing: bool,
    pub empty: bool,
    pub truncated_note: String,
}

/// Exact kernel scan: solves RAT + alpha COEF = 0 per second-factor slot
/// instead of testing every first-factor class, so the census covers the
/// whole truncation at negligible cost.
pub fn kernel_census(sp: &DivisorSpectrum) -> KernelCensus {
    let mut pairs: Vec<(RepIndex, RepIndex)> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (eta, _r_row, mu) in factor_slots(&sp.spec.g2, sp.trunc.g2_limit) {
        if !sp.im_value(&mu).is_zero() {
            continue;
        }
        let (rat0, coef) = sp.re_parts(&BigRational::zero(), &mu);
        if !coef.is_zero() {
            // alpha irrational: no rational lambda can cancel it.
            continue;
        }
        match &sp.spec.g1 {
            SymbolRule::TorusDir { dir } => {
                let k_rat = -&rat0 / dir;
                if k_rat.is_integer() {
                    if let Ok(k) = i64::try_from(k_rat.to_integer()) {
                        if k.abs() <= sp.trunc.g1_limit {
                            let key = format!("{k}|{eta:?}");
                            if seen.insert(key) {
                                pairs.push((RepIndex::torus1(k), eta.clone()));
                            }
                        }
                    }
                }
            }
            SymbolRule::Su2 => {
                for (xi, _m, lambda) in factor_slots(&sp.spec.g1, sp.trunc.g1_limit) {
                    if (&lambda + &rat0).is_zero() {
                        let key = format!("{xi:?}|{eta:?}");
                        if seen.insert(key) {
                            pairs.push((xi.clone(), eta.clone()));
                        }
                    }
                }
            }
        }
    }
    let w_max = trunc_max_weight(sp);
    // Growing heuristic per factor: a zero whose class sits in the outer
    // 20% of either enumeration suggests the census is truncation-bound.
    // A factor with a single class offers no growth evidence.
    let w1_max = factor_max_weight(&sp.spec.g1, sp.trunc.g1_limit);
    let w2_max = factor_max_weight(&sp.spec.g2, sp.trunc.g2_limit);
    let growing = pairs.iter().any(|(a, b)| {
        (w1_max > 1.0 && a.weight() > 0.8 * w1_max)
            || (w2_max > 1.0 && b.weight() > 0.8 * w2_max)
    });
    KernelCensus {
        count: pairs.len() as u64,
        empty: pairs.is_empty(),
        still_growing: growing,
        truncated_note: format!(
            "exact zeros over g1 limit {} x g2 limit {} (weights up to {:.1})",
            sp.trunc.g1_limit, sp.trunc.g2_limit, w_max
        ),
        pairs,
    }
}

fn factor_max_weight(rule: &SymbolRule, limit: i64) -> f64 {
    match rule {
        SymbolRule::TorusDir { .. } => RepIndex::torus1(limit).weight(),
        SymbolRule::Su2 => RepIndex::su2(limit).weight(),
    }
}

fn trunc_max_weight(sp: &DivisorSpectrum) -> f64 {
    factor_max_weight(&sp.spec.g1, sp.trunc.g1_limit)
        + factor_max_weight(&sp.spec.g2, sp.trunc.g2_limit)
}

// ---------------------------------------------------------------------------
// Reduced streaming scan
// ---------------------------------------------------------------------------

/// Second-factor slot with everything the hot loop needs precomputed.
struct PreparedEta {
    /// alpha * COEF + RAT0 at compensated precision (RAT0 = shift part;
    /// for exact couplings this is a mu + shift, fully exact).
    base: TwoFloat,
    coef_zero: bool,
    /// Exact-zero solution in k for torus first factors (None = no zero).
    k_zero: Option<i64>,
    im: f64,
    w_eta: f64,
    /// (extra copies at larger classes, weight gain up to the largest).
    copies: Option<(u64, f64)>,
    g2_class: FreqShort,
    g2_row: usize,
    mu_rat: BigRational,
}

#[derive(Clone, Copy, Debug)]
enum FreqShort {
    Torus(i64),
    Su2(i64),
}

impl FreqShort {
    fn rep(self) -> RepIndex {
        match self {
            FreqShort::Torus(k) => RepIndex::torus1(k),
            FreqShort::Su2(tl) => RepIndex::su2(tl),
        }
    }
}

/// Reduced second-factor slots: torus slots verbatim; SU(2) one per row
/// label at the minimal class.
fn prepare_g2(sp: &DivisorSpectrum) -> Vec<PreparedEta> {
    let torus_dir_g1 = match &sp.spec.g1 {
        SymbolRule::TorusDir { dir } => Some(dir.clone()),
        SymbolRule::Su2 => None,
    };
    let mut out = Vec::new();
    let mut push = |eta: RepIndex, row: usize, mu: BigRational, copies: Option<(u64, f64)>| {
        let (rat0, coef) = sp.re_parts(&BigRational::zero(), &mu);
        let base = if coef.is_zero() {
            TwoFloat::from_rational(&rat0)
        } else {
            let coef_f = rational_to_f64(&coef);
            let hi = sp.coupling.mid.hi * coef_f;
            let err = sp.coupling.mid.hi.mul_add(coef_f, -hi);
            TwoFloat::new(hi, err + sp.coupling.mid.lo * coef_f)
                .add_f64(rational_to_f64(&rat0))
        };
        let k_zero = if coef.is_zero() {
            torus_dir_g1.as_ref().and_then(|dir| {
                let k_rat = -&rat0 / dir;
                if k_rat.is_integer() {
                    i64::try_from(k_rat.to_integer()).ok()
                } else {
                    None
                }
            })
        } else {
            None
        };
        out.push(PreparedEta {
            base,
            coef_zero: coef.is_zero(),
            k_zero,
            im: rational_to_f64(&sp.im_value(&mu)),
            w_eta: eta.weight(),
            copies,
            g2_class: match &eta {
                RepIndex::Torus(k) => FreqShort::Torus(k[0]),
                RepIndex::Su2(l) => FreqShort::Su2(l.0),
            },
            g2_row: row,
            mu_rat: mu,
        });
    };
    match &sp.spec.g2 {
        SymbolRule::TorusDir { dir } => {
            for j in -sp.trunc.g2_limit..=sp.trunc.g2_limit {
                let mu = dir * BigRational::from_integer(BigInt::from(j));
                push(RepIndex::torus1(j), 1, mu, None);
            }
        }
        SymbolRule::Su2 => {
            let two_lmax = sp.trunc.g2_limit;
            for two_rho in -two_lmax..=two_lmax {
                let two_l = two_rho.abs();
                let rep = RepIndex::su2(two_l);
                let row = ((two_rho + two_l) / 2) as usize + 1;
                let mu = BigRational::new(BigInt::from(-two_rho), BigInt::from(2));
                let copies = ((two_lmax - two_l) / 2) as u64;
                let top = two_l + 2 * copies as i64;
                let dw = RepIndex::su2(top).weight() - rep.weight();
                push(rep, row, mu, Some((copies, dw)));
            }
        }
    }
    out
}

/// First-factor slot: (short class, row, eigenvalue f64, weight, exact
/// eigenvalue).
fn prepare_g1(sp: &DivisorSpectrum) -> Vec<(FreqShort, usize, f64, f64, BigRational)> {
    factor_slots(&sp.spec.g1, sp.trunc.g1_limit)
        .into_iter()
        .map(|(rep, row, lam)| {
            let short = match &rep {
                RepIndex::Torus(k) => FreqShort::Torus(k[0]),
                RepIndex::Su2(l) => FreqShort::Su2(l.0),
            };
            let w = rep.weight();
            (short, row, rational_to_f64(&lam), w, lam)
        })
        .collect()
}

/// Full record for a (g1 slot, g2 slot) pair of the reduced scan.
fn resolve_record(
    sp: &DivisorSpectrum,
    g1: &(FreqShort, usize, f64, f64, BigRational),
    eta: &PreparedEta,
) -> DivisorRecord {
    sp.record_at(
        &g1.0.rep(),
        g1.1,
        &g1.4,
        &eta.g2_class.rep(),
        eta.g2_row,
        &eta.mu_rat,
    )
}

/// Decade index of a weight (decade d covers [2*10^d, 2*10^{d+1})).
fn decade_index(w: f64) -> usize {
    ((w / 2.0).log10().floor().max(0.0)) as usize
}

/// Upper boundaries of each decade, for branch-cheap lookup in hot loops.
fn decade_bounds(decades: usize) -> Vec<f64> {
    (0..decades).map(|d| decade_start(d + 1)).collect()
}

#[inline]
fn decade_of(bounds: &[f64], w: f64) -> usize {
    let mut d = 0;
    while d + 1 < bounds.len() && w >= bounds[d] {
        d += 1;
    }
    d
}

fn decade_start(d: usize) -> f64 {
    2.0 * 10f64.powi(d as i32)
}

const CRASH_FACTOR_LOG: f64 = 6.907_755_278_982_137; // ln(1000)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitMode {
    /// Lower bound demanded for every N (grid-sampled).
    Roumieu,
    /// Lower bound demanded for some N.
    Beurling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consistency {
    ConditionConsistent,
    Violated,
}

/// A record that dropped the running fit by the crash factor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WitnessRecord {
    pub record: DivisorRecord,
    pub n: f64,
    pub log_value: f64,
    pub log_before: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NFit {
    pub n: f64,
    /// ln C_N = min over nonzero divisors of ln|D| + M(N w).
    pub log_c: f64,
    /// Running minimum sampled at decade checkpoints of w.
    pub checkpoints: Vec<(f64, f64)>,
    /// Final C within 10x of its value two decades earlier.
    pub stable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiophantineVerdict {
    pub mode: FitMode,
    pub n_grid: Vec<f64>,
    pub fits: Vec<NFit>,
    pub verdict: Consistency,
    pub witnesses: Vec<WitnessRecord>,
    pub kernel: KernelCensus,
    pub ambiguous_records: u64,
    pub saturated_evaluations: bool,
    pub truncation_note: String,
}

impl DiophantineVerdict {
    /// Hypoellipticity shape: finite kernel census and lower-bound
    /// consistency on this truncation.
    pub fn hypoelliptic_consistent(&self) -> bool {
        self.verdict == Consistency::ConditionConsistent && !self.kernel.still_growing
    }

    pub fn solvable_consistent(&self) -> bool {
        self.verdict == Consistency::ConditionConsistent
    }
}

pub fn default_n_grid() -> Vec<f64> {
    (-4..=4).map(|j| 2f64.powi(j)).collect()
}

/// Per-(N, decade) minimum tracker with a squared-magnitude fast filter.
struct MinGrid {
    n_count: usize,
    decades: usize,
    /// min of ln|D| + penalty(n, w) per (n, d).
    min_log: Vec<f64>,
    arg: Vec<Option<(usize, usize)>>, // (g1 index, eta index)
    /// Squared |D| threshold per decade: a hit with |D|^2 above it cannot
    /// improve any slot of that decade.
    thr2: Vec<f64>,
    /// Penalty floor per (n, d): penalty at the decade's left edge.
    floor: Vec<f64>,
}

impl MinGrid {
    fn new(n_count: usize, decades: usize, floor: Vec<f64>) -> Self {
        MinGrid {
            n_count,
            decades,
            min_log: vec![f64::INFINITY; n_count * decades],
            arg: vec![None; n_count * decades],
            thr2: vec![f64::INFINITY; decades],
            floor,
        }
    }

    fn refresh_thr(&mut self, d: usize) {
        let mut best = f64::NEG_INFINITY;
        for n in 0..self.n_count {
            let m = self.min_log[n * self.decades + d];
            if m.is_finite() {
                best = best.max(m - self.floor[n * self.decades + d]);
            } else {
                best = f64::INFINITY;
                break;
            }
        }
        self.thr2[d] = if best.is_finite() {
            (2.0 * best).exp()
        } else {
            f64::INFINITY
        };
    }

    fn merge(&mut self, other: &MinGrid) {
        for i in 0..self.min_log.len() {
            if other.min_log[i] < self.min_log[i] {
                self.min_log[i] = other.min_log[i];
                self.arg[i] = other.arg[i];
            }
        }
        for d in 0..self.decades {
            self.refresh_thr(d);
        }
    }
}

/// Turns per-decade minima into a fit with cumulative checkpoints.
fn finish_fit(
    n: f64,
    n_idx: usize,
    grid: &MinGrid,
    w_max: f64,
    resolve: &dyn Fn(usize, usize) -> DivisorRecord,
) -> (NFit, Vec<WitnessRecord>) {
    let mut checkpoints = Vec::new();
    let mut witnesses = Vec::new();
    let mut running = f64::INFINITY;
    for d in 0..grid.decades {
        let v = grid.min_log[n_idx * grid.decades + d];
        if v < running - CRASH_FACTOR_LOG && running.is_finite() {
            if let Some((i1, i2)) = grid.arg[n_idx * grid.decades + d] {
                witnesses.push(WitnessRecord {
                    record: resolve(i1, i2),
                    n,
                    log_value: v,
                    log_before: running,
                });
            }
        }
        running = running.min(v);
        if running.is_finite() {
            checkpoints.push((decade_start(d + 1).min(w_max), running));
        }
    }
    let stable = if checkpoints.len() < 2 {
        true
    } else {
        let last = checkpoints[checkpoints.len() - 1].1;
        let prior = checkpoints[checkpoints.len().saturating_sub(3)].1;
        last >= prior - std::f64::consts::LN_10
    };
    (
        NFit {
            n,
            log_c: running,
            checkpoints,
            stable,
        },
        witnesses,
    )
}

/// Shared scan driver: streams the reduced spectrum into a MinGrid with
/// penalty(n, w) supplied by the caller.
///
/// Torus first factors take the chunked fast path: for each second-factor
/// slot the divisor is linear in k, so the k axis is swept in fixed-size
/// chunks whose squared-|D| rejection threshold is anchored at the chunk's
/// smallest weight (penalties grow with w, so the anchor over-accepts but
/// never misses a minimum; survivors are rare and get the exact treatment).
/// SU(2) first factors (small embedded scans) use the plain double loop.
fn scan_minima(
    sp: &DivisorSpectrum,
    penalties: &[f64],
    penalty: &(dyn Fn(usize, f64) -> f64 + Sync),
    floor: &[f64],
    decades: usize,
) -> (MinGrid, u64, u64, bool) {
    let g1 = prepare_g1(sp);
    let g2 = prepare_g2(sp);
    let n_count = penalties.len();
    let w_max = trunc_max_weight(sp);
    let bounds = decade_bounds(decades);

    let torus_first = matches!(sp.spec.g1, SymbolRule::TorusDir { .. });
    if !torus_first {
        return scan_minima_generic(sp, &g1, &g2, penalties, penalty, floor, decades, &bounds);
    }
    let kmax = sp.trunc.g1_limit;
    let dir = match &sp.spec.g1 {
        SymbolRule::TorusDir { dir } => rational_to_f64(dir),
        _ => unreachable!(),
    };

    // Process second-factor slots by ascending weight so the per-worker
    // thresholds tighten early.
    let mut order: Vec<usize> = (0..g2.len()).collect();
    order.sort_by(|&a, &b| g2[a].w_eta.partial_cmp(&g2[b].w_eta).unwrap());

    let handle_candidate = |grid: &mut MinGrid,
                            ambiguous: &mut u64,
                            saturated: &mut bool,
                            i2: usize,
                            eta: &PreparedEta,
                            k: i64| {
        if eta.coef_zero && eta.k_zero == Some(k) && eta.im == 0.0 {
            return;
        }
        let re = eta.base.add_f64(dir * k as f64);
        let re_v = re.value();
        let coarse = !eta.coef_zero && re_v.abs() < REFINE_BELOW;
        let w_min = (1.0 + (k as f64) * (k as f64)).sqrt() + eta.w_eta;
        let d0 = decade_of(&bounds, w_min);
        let d1 = match eta.copies {
            Some((c, dw)) if c > 0 => decade_of(&bounds, (w_min + dw).min(w_max)),
            _ => d0,
        };
        let abs_log = if coarse {
            let slot1 = g1_slot_for_k(sp, k);
            let rec = resolve_record(sp, &slot1, eta);
            if rec.ambiguous {
                *ambiguous += 1;
                return;
            }
            rec.abs_log
        } else {
            let a2 = re_v * re_v + eta.im * eta.im;
            if a2 == 0.0 {
                return; // exact zero with rational coupling, skipped above
            }
            0.5 * a2.ln()
        };
        for d in d0..=d1 {
            let w_eff = if d == d0 { w_min } else { decade_start(d) };
            if w_eff > w_max {
                break;
            }
            for n in 0..n_count {
                let pen = if d == d0 {
                    penalty(n, w_eff)
                } else {
                    floor[n * decades + d]
                };
                if pen == f64::INFINITY {
                    *saturated = true;
                    continue;
                }
                let v = abs_log + pen;
                let idx = n * decades + d;
                if v < grid.min_log[idx] {
                    grid.min_log[idx] = v;
                    grid.arg[idx] = Some((k_to_g1_index(kmax, k), i2));
                    grid.refresh_thr(d);
                }
            }
        }
    };

    let (grid, ambiguous, saturated) = order
        .par_iter()
        .fold(
            || (MinGrid::new(n_count, decades, floor.to_vec()), 0u64, false),
            |(mut grid, mut ambiguous, mut saturated), &i2| {
                let eta = &g2[i2];
                let im2 = eta.im * eta.im;
                // Sweep the k axis in chunks. Each chunk gets a conservative
                // squared-|D| rejection threshold from the penalty at the
                // chunk start (the penalty only grows with w, so a hit
                // rejected at the start penalty cannot improve any slot).
                const CHUNK: i64 = 1024;
                for sign in [1i64, -1] {
                    let mut k_lo: i64 = if sign > 0 { 0 } else { 1 };
                    while k_lo <= kmax {
                        let k_end = (k_lo + CHUNK - 1).min(kmax);
                        let w_lo = (1.0 + (k_lo as f64) * (k_lo as f64)).sqrt() + eta.w_eta;
                        // Weight range this chunk (plus copies) can touch.
                        let w_hi = ((1.0 + (k_end as f64) * (k_end as f64)).sqrt()
                            + eta.w_eta
                            + eta.copies.map_or(0.0, |(c, dw)| if c > 0 { dw } else { 0.0 }))
                        .min(w_max);
                        let d_lo = decade_of(&bounds, w_lo);
                        let d_hi = decade_of(&bounds, w_hi);
                        // Acceptance bound: exists (n, d) with
                        // ln|D| < min_log[n][d] - penalty_at(n, chunk/decade start).
                        let mut thr2 = 0f64;
                        for d in d_lo..=d_hi {
                            for n in 0..n_count {
                                let m = grid.min_log[n * decades + d];
                                if m == f64::INFINITY {
                                    thr2 = f64::INFINITY;
                                    break;
                                }
                                // Tightest valid anchor: within the chunk's
                                // own decade the penalty at w_lo applies;
                                // re-emissions at later decades use their
                                // constant floor.
                                let pen = if d == d_lo {
                                    penalty(n, w_lo)
                                } else {
                                    floor[n * decades + d]
                                };
                                if pen == f64::INFINITY {
                                    continue;
                                }
                                let bound = (2.0 * (m - pen)).exp();
                                if bound > thr2 {
                                    thr2 = bound;
                                }
                            }
                            if thr2 == f64::INFINITY {
                                break;
                            }
                        }
                        if im2 < thr2 || im2 < REFINE_BELOW * REFINE_BELOW {
                            let base = eta.base.hi + eta.base.lo;
                            let mut re = base + dir * (sign * k_lo) as f64;
                            let step = dir * sign as f64;
                            for k in k_lo..=k_end {
                                let a2 = re * re + im2;
                                if a2 < thr2 || a2 < REFINE_BELOW * REFINE_BELOW {
                                    handle_candidate(
                                        &mut grid,
                                        &mut ambiguous,
                                        &mut saturated,
                                        i2,
                                        eta,
                                        sign * k,
                                    );
                                }
                                re += step;
                            }
                        }
                        k_lo = k_end + 1;
                    }
                }
                (grid, ambiguous, saturated)
            },
        )
        .reduce(
            || (MinGrid::new(n_count, decades, floor.to_vec()), 0u64, false),
            |(mut a, aa, sa), (b, ab, sb)| {
                a.merge(&b);
                (a, aa + ab, sa || sb)
            },
        );
    // Nonzero detection only needs existence: count the reduced zero rows.
    let zero_rows: u64 = g2
        .iter()
        .filter(|eta| {
            eta.coef_zero
                && eta.im == 0.0
                && matches!(eta.k_zero, Some(kz) if kz.abs() <= kmax)
        })
        .count() as u64;
    let reduced_total = (2 * kmax + 1) as u64 * g2.len() as u64;
    let nonzero = reduced_total.saturating_sub(zero_rows);
    (grid, nonzero, ambiguous, saturated)
}

/// k index within the g1 slot list (torus ordering -kmax..=kmax).
fn k_to_g1_index(kmax: i64, k: i64) -> usize {
    (k + kmax) as usize
}

/// Materializes the g1 slot tuple for one torus frequency.
fn g1_slot_for_k(sp: &DivisorSpectrum, k: i64) -> (FreqShort, usize, f64, f64, BigRational) {
    let dir = match &sp.spec.g1 {
        SymbolRule::TorusDir { dir } => dir.clone(),
        _ => unreachable!(),
    };
    let lam = &dir * BigRational::from_integer(BigInt::from(k));
    let rep = RepIndex::torus1(k);
    (
        FreqShort::Torus(k),
        1,
        rational_to_f64(&lam),
        rep.weight(),
        lam,
    )
}

/// Plain double loop for SU(2) first factors (kept for the small embedded
/// single-group scans).
#[allow(clippy::too_many_arguments)]
fn scan_minima_generic(
    sp: &DivisorSpectrum,
    g1: &[(FreqShort, usize, f64, f64, BigRational)],
    g2: &[PreparedEta],
    penalties: &[f64],
    penalty: &(dyn Fn(usize, f64) -> f64 + Sync),
    floor: &[f64],
    decades: usize,
    bounds: &[f64],
) -> (MinGrid, u64, u64, bool) {
    let n_count = penalties.len();
    let w_max = trunc_max_weight(sp);
    g1.par_iter()
        .enumerate()
        .fold(
            || (MinGrid::new(n_count, decades, floor.to_vec()), 0u64, 0u64, false),
            |(mut grid, mut nonzero, mut ambiguous, mut saturated), (i1, slot1)| {
                let (_g1_short, _row, lam_f, w1, _lam) = slot1;
                for (i2, eta) in g2.iter().enumerate() {
                    let zero = eta.coef_zero
                        && eta.im == 0.0
                        && (lam_f + eta.base.value()).abs() < 1e-9
                        && exact_zero_slow(sp, slot1, eta);
                    if zero {
                        continue;
                    }
                    nonzero += 1;
                    let re = eta.base.add_f64(*lam_f);
                    let re_v = re.value();
                    let a2 = re_v * re_v + eta.im * eta.im;
                    let w_min = w1 + eta.w_eta;
                    let d0 = decade_of(bounds, w_min);
                    let d1 = match eta.copies {
                        Some((c, dw)) if c > 0 => decade_of(bounds, (w_min + dw).min(w_max)),
                        _ => d0,
                    };
                    let coarse = !eta.coef_zero && re_v.abs() < REFINE_BELOW;
                    let mut interesting = coarse && eta.im == 0.0;
                    if !interesting {
                        for d in d0..=d1 {
                            if a2 < grid.thr2[d] {
                                interesting = true;
                                break;
                            }
                        }
                    }
                    if !interesting {
                        continue;
                    }
                    let abs_log = if coarse {
                        let rec = resolve_record(sp, slot1, eta);
                        if rec.ambiguous {
                            ambiguous += 1;
                            continue;
                        }
                        rec.abs_log
                    } else {
                        0.5 * a2.ln()
                    };
                    for d in d0..=d1 {
                        let w_eff = if d == d0 { w_min } else { decade_start(d) };
                        if w_eff > w_max {
                            break;
                        }
                        for n in 0..n_count {
                            let pen = if d == d0 {
                                penalty(n, w_eff)
                            } else {
                                floor[n * decades + d]
                            };
                            if pen == f64::INFINITY {
                                saturated = true;
                                continue;
                            }
                            let v = abs_log + pen;
                            let idx = n * decades + d;
                            if v < grid.min_log[idx] {
                                grid.min_log[idx] = v;
                                grid.arg[idx] = Some((i1, i2));
                                grid.refresh_thr(d);
                            }
                        }
                    }
                }
                (grid, nonzero, ambiguous, saturated)
            },
        )
        .reduce(
            || (MinGrid::new(n_count, decades, floor.to_vec()), 0u64, 0u64, false),
            |(mut a, na, aa, sa), (b, nb, ab, sb)| {
                a.merge(&b);
                (a, na + nb, aa + ab, sa || sb)
            },
        )
}

/// Slow exact-zero check for non-torus first factors.
fn exact_zero_slow(
    sp: &DivisorSpectrum,
    slot1: &(FreqShort, usize, f64, f64, BigRational),
    eta: &PreparedEta,
) -> bool {
    let (rat, coef) = sp.re_parts(&slot1.4, &eta.mu_rat);
    coef.is_zero() && rat.is_zero()
}

/// Roumieu/Beurling lower-bound fit over the truncated spectrum.
pub fn diophantine_fit(
    sp: &DivisorSpectrum,
    weights: &AssociatedFunction,
    mode: FitMode,
    n_grid: &[f64],
) -> Result<DiophantineVerdict, OperatorError> {
    let w_max = trunc_max_weight(sp);
    let decades = decade_index(w_max) + 1;
    let sat_radius = weights.saturation_radius();
    let mut floor = vec![0.0; n_grid.len() * decades];
    for (i, &n) in n_grid.iter().enumerate() {
        for d in 0..decades {
            let r = n * decade_start(d);
            floor[i * decades + d] = if r >= sat_radius {
                f64::INFINITY
            } else {
                weights.value(r)
            };
        }
    }
    let penalty = |n_idx: usize, w: f64| -> f64 {
        let r = n_grid[n_idx] * w;
        if r >= sat_radius {
            f64::INFINITY
        } else {
            weights.value(r)
        }
    };
    let (grid, nonzero, ambiguous, saturated) =
        scan_minima(sp, n_grid, &penalty, &floor, decades);
    if nonzero == 0 {
        return Err(OperatorError::EmptySpectrum);
    }
    let g1 = prepare_g1(sp);
    let g2 = prepare_g2(sp);
    let resolve = |i1: usize, i2: usize| resolve_record(sp, &g1[i1], &g2[i2]);
    let mut fits = Vec::new();
    let mut witnesses = Vec::new();
    for (i, &n) in n_grid.iter().enumerate() {
        let (fit, mut w) = finish_fit(n, i, &grid, w_max, &resolve);
        fits.push(fit);
        witnesses.append(&mut w);
    }
    let consistent = match mode {
        FitMode::Roumieu => fits.iter().all(|f| f.stable),
        FitMode::Beurling => fits.iter().any(|f| f.stable),
    };
    Ok(DiophantineVerdict {
        mode,
        n_grid: n_grid.to_vec(),
        fits,
        verdict: if consistent {
            Consistency::ConditionConsistent
        } else {
            Consistency::Violated
        },
        witnesses,
        kernel: kernel_census(sp),
        ambiguous_records: ambiguous,
        saturated_evaluations: saturated,
        truncation_note: format!(
            "verdict up to truncation (g1 limit {}, g2 limit {}, w <= {:.1})",
            sp.trunc.g1_limit, sp.trunc.g2_limit, w_max
        ),
    })
}

// ---------------------------------------------------------------------------
// Polynomial (smooth-class) fit
// ---------------------------------------------------------------------------

/// A divisor sitting >= 3 orders below the generic polynomial constant of
/// its own scale bin.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollapseWitness {
    pub record: DivisorRecord,
    pub n_prime: f64,
    /// ln(|D| w^N') at the witness.
    pub log_value: f64,
    /// The generic constant at the same scale: min of |D| w^N' over the
    /// bin's records with |D| >= the generic floor — what the fit looked
    /// like before this divisor undercut it.
    pub log_initial_c: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmoothnessVerdict {
    pub n_prime_grid: Vec<f64>,
    pub fits: Vec<NFit>,
    pub verdict: Consistency,
    pub collapse_witnesses: Vec<CollapseWitness>,
    pub generic_divisor_floor: f64,
    pub truncation_note: String,
}

const BIN_RATIO_LOG: f64 = 0.182_321_556_793_954_6; // ln(1.2)
const GENERIC_FLOOR: f64 = 1e-3;

/// Polynomial lower-bound fit |D| >= C w^{-N'}, with per-decade trend and
/// the scale-local collapse diagnostic at the last N' of the grid.
pub fn smoothness_fit(
    sp: &DivisorSpectrum,
    n_prime_grid: &[f64],
) -> Result<SmoothnessVerdict, OperatorError> {
    let w_max = trunc_max_weight(sp);
    let decades = decade_index(w_max) + 1;
    let mut floor = vec![0.0; n_prime_grid.len() * decades];
    for (i, &np) in n_prime_grid.iter().enumerate() {
        for d in 0..decades {
            floor[i * decades + d] = np * decade_start(d).ln();
        }
    }
    let npg = n_prime_grid.to_vec();
    let penalty = move |n_idx: usize, w: f64| -> f64 { npg[n_idx] * w.ln() };
    let (grid, nonzero, _ambiguous, _sat) =
        scan_minima(sp, n_prime_grid, &penalty, &floor, decades);
    if nonzero == 0 {
        return Err(OperatorError::EmptySpectrum);
    }
    let g1 = prepare_g1(sp);
    let g2 = prepare_g2(sp);
    let resolve = |i1: usize, i2: usize| resolve_record(sp, &g1[i1], &g2[i2]);
    let mut fits = Vec::new();
    for (i, &n) in n_prime_grid.iter().enumerate() {
        let (fit, _) = finish_fit(n, i, &grid, w_max, &resolve);
        fits.push(fit);
    }

    // Scale-local pass at the last N': per 1.2-ratio bin of w, the generic
    // constant over |D| >= GENERIC_FLOOR vs the best small divisor.
    let np_last = *n_prime_grid.last().expect("nonempty N' grid");
    let bins = (w_max.ln() / BIN_RATIO_LOG).ceil() as usize + 2;
    // Upper w boundary of each 1.2-ratio bin, for per-hit lookup without a
    // logarithm.
    let bin_hi: Vec<f64> = (0..bins)
        .map(|b| ((b + 1) as f64 * BIN_RATIO_LOG).exp())
        .collect();
    /// Candidates kept per scale bin; the convergent witnesses come in
    /// +/- pairs per scale, so keep a few.
    const PER_BIN: usize = 4;
    struct BinAcc {
        generic: Vec<f64>,
        /// Squared |D| threshold implied by `generic` at the bin floor.
        gen_thr2: Vec<f64>,
        candidate: Vec<Vec<(f64, usize, usize)>>,
    }
    impl BinAcc {
        fn new(bins: usize) -> Self {
            BinAcc {
                generic: vec![f64::INFINITY; bins],
                gen_thr2: vec![f64::INFINITY; bins],
                candidate: vec![Vec::new(); bins],
            }
        }
        fn offer(&mut self, bin: usize, v: f64, i1: usize, i2: usize) {
            let c = &mut self.candidate[bin];
            if c.len() == PER_BIN && v >= c.last().unwrap().0 {
                return;
            }
            let pos = c.partition_point(|(x, _, _)| *x < v);
            c.insert(pos, (v, i1, i2));
            c.truncate(PER_BIN);
        }
        fn update_generic(&mut self, bin: usize, v: f64, np: f64) {
            if v < self.generic[bin] {
                self.generic[bin] = v;
                let lw_lo = bin as f64 * BIN_RATIO_LOG;
                self.gen_thr2[bin] = (2.0 * (v - np * lw_lo)).exp();
            }
        }
    }
    let (bin_acc, _) = {
        let acc = g1
            .par_iter()
            .enumerate()
            .fold(
                || BinAcc::new(bins),
                |mut acc, (i1, slot1)| {
                    let (g1_short, _row, lam_f, w1, _lam) = slot1;
                    let torus_k = match g1_short {
                        FreqShort::Torus(k) => Some(*k),
                        FreqShort::Su2(_) => None,
                    };
                    for (i2, eta) in g2.iter().enumerate() {
                        let zero = if eta.coef_zero {
                            match (torus_k, eta.k_zero) {
                                (Some(k), Some(kz)) => k == kz && eta.im == 0.0,
                                _ => {
                                    eta.im == 0.0
                                        && (lam_f + eta.base.value()).abs() < 1e-9
                                        && exact_zero_slow(sp, slot1, eta)
                                }
                            }
                        } else {
                            false
                        };
                        if zero {
                            continue;
                        }
                        let re = eta.base.add_f64(*lam_f).value();
                        let a2 = re * re + eta.im * eta.im;
                        let w_min = w1 + eta.w_eta;
                        let bin = bin_hi.partition_point(|hi| w_min >= *hi);
                        if a2 >= GENERIC_FLOOR * GENERIC_FLOOR {
                            // Squared-threshold reject: no logs unless the
                            // bin minimum can actually move.
                            if a2 >= acc.gen_thr2[bin] {
                                continue;
                            }
                            let v = 0.5 * a2.ln() + np_last * w_min.ln();
                            acc.update_generic(bin, v, np_last);
                        } else {
                            let abs_log = {
                                let coarse = !eta.coef_zero && re.abs() < REFINE_BELOW;
                                if coarse {
                                    let rec = resolve_record(sp, slot1, eta);
                                    if rec.ambiguous {
                                        continue;
                                    }
                                    rec.abs_log
                                } else {
                                    0.5 * a2.ln()
                                }
                            };
                            let v = abs_log + np_last * w_min.ln();
                            acc.offer(bin, v, i1, i2);
                        }
                    }
                    acc
                },
            )
            .reduce(
                || BinAcc::new(bins),
                |mut a, b| {
                    for i in 0..bins {
                        if b.generic[i] < a.generic[i] {
                            a.update_generic(i, b.generic[i], np_last);
                        }
                        for (v, x, y) in &b.candidate[i] {
                            a.offer(i, *v, *x, *y);
                        }
                    }
                    a
                },
            );
        (acc, ())
    };
    let mut collapse = Vec::new();
    for bin in 0..bins {
        let generic = bin_acc.generic[bin];
        if !generic.is_finite() {
            continue;
        }
        for (v, i1, i2) in &bin_acc.candidate[bin] {
            if *v < generic - CRASH_FACTOR_LOG {
                collapse.push(CollapseWitness {
                    record: resolve(*i1, *i2),
                    n_prime: np_last,
                    log_value: *v,
                    log_initial_c: generic,
                });
            }
        }
    }
    let verdict = if fits.iter().all(|f| f.stable) && collapse.is_empty() {
        Consistency::ConditionConsistent
    } else {
        Consistency::Violated
    };
    Ok(SmoothnessVerdict {
        n_prime_grid: n_prime_grid.to_vec(),
        fits,
        verdict,
        collapse_witnesses: collapse,
        generic_divisor_floor: GENERIC_FLOOR,
        truncation_note: format!("truncated at w <= {w_max:.1}"),
    })
}


// ---------------------------------------------------------------------------
// On-disk operator description
// ---------------------------------------------------------------------------

/// Parses "p/q", integers, or plain decimal strings into an exact rational.
pub fn parse_rational(s: &str) -> Result<BigRational, OperatorError> {
    let s = s.trim();
    let bad = || OperatorError::Invalid(format!("cannot parse rational from {s:?}"));
    if let Some((num, den)) = s.split_once('/') {
        let n: BigInt = num.trim().parse().map_err(|_| bad())?;
        let d: BigInt = den.trim().parse().map_err(|_| bad())?;
        if d.is_zero() {
            return Err(bad());
        }
        return Ok(BigRational::new(n, d));
    }
    if let Some((int, frac)) = s.split_once('.') {
        let neg = int.trim_start().starts_with('-');
        let i: BigInt = if int.is_empty() || int == "-" {
            BigInt::zero()
        } else {
            int.parse().map_err(|_| bad())?
        };
        let scale = BigInt::from(10u32).pow(frac.len() as u32);
        let f: BigInt = if frac.is_empty() {
            BigInt::zero()
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let f = if neg { -f } else { f };
        return Ok(BigRational::new(i * &scale + f, scale));
    }
    let n: BigInt = s.parse().map_err(|_| bad())?;
    Ok(BigRational::from_integer(n))
}

/// JSON description of an operator: groups, coupling, constant shift.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorSpecFile {
    /// Factor tags, e.g. ["t1", "su2"] or ["t1", "t1"].
    pub groups: [String; 2],
    pub coupling: CouplingFile,
    #[serde(default)]
    pub shift: ShiftFile,
    /// Direction coefficient for torus symbols (default 1).
    #[serde(default)]
    pub torus_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingFile {
    /// Exact rational or decimal string.
    Rational(String),
    Decimal(String),
    /// Named continued-fraction pattern: "factorial-pow10", "sqrt-tower",
    /// "sqrt2", "golden".
    Cf(String),
    /// Explicit partial quotients.
    CfDigits(Vec<u64>),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ShiftFile {
    #[serde(default)]
    pub re: Option<String>,
    #[serde(default)]
    pub im: Option<String>,
    #[serde(default)]
    pub im_alpha: Option<String>,
}

impl OperatorSpecFile {
    pub fn from_json(text: &str) -> Result<Self, OperatorError> {
        serde_json::from_str(text).map_err(|e| OperatorError::Invalid(e.to_string()))
    }

    pub fn build(&self) -> Result<VectorFieldSpec, OperatorError> {
        let rule = |tag: &str| -> Result<SymbolRule, OperatorError> {
            match tag {
                "t1" | "torus" => Ok(SymbolRule::TorusDir {
                    dir: match &self.torus_dir {
                        Some(d) => parse_rational(d)?,
                        None => BigRational::from_integer(BigInt::from(1)),
                    },
                }),
                "su2" | "s3" => Ok(SymbolRule::Su2),
                other => Err(OperatorError::Invalid(format!("unknown group {other:?}"))),
            }
        };
        let coupling = match &self.coupling {
            CouplingFile::Rational(s) | CouplingFile::Decimal(s) => {
                Coupling::Rational(parse_rational(s)?)
            }
            CouplingFile::Cf(name) => Coupling::Cf(match name.as_str() {
                "factorial-pow10" => CfPattern::FactorialPow10,
                "sqrt-tower" => CfPattern::SqrtTower,
                "sqrt2" => CfPattern::Periodic {
                    head: vec![1],
                    cycle: vec![2],
                },
                "golden" => CfPattern::Periodic {
                    head: vec![1],
                    cycle: vec![1],
                },
                other => {
                    return Err(OperatorError::Invalid(format!(
                        "unknown cf pattern {other:?}"
                    )))
                }
            }),
            CouplingFile::CfDigits(digits) => Coupling::Cf(CfPattern::Explicit(
                digits.iter().map(|&d| BigInt::from(d)).collect(),
            )),
        };
        let parse_opt = |o: &Option<String>| -> Result<BigRational, OperatorError> {
            match o {
                Some(s) => parse_rational(s),
                None => Ok(BigRational::zero()),
            }
        };
        Ok(VectorFieldSpec {
            g1: rule(&self.groups[0])?,
            g2: rule(&self.groups[1])?,
            coupling,
            coupling_im: BigRational::zero(),
            shift: Shift {
                re: parse_opt(&self.shift.re)?,
                im: parse_opt(&self.shift.im)?,
                im_alpha: parse_opt(&self.shift.im_alpha)?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::WeightSequence;
    use std::sync::Arc;

    fn rational(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn gevrey2() -> AssociatedFunction {
        AssociatedFunction::new(Arc::new(WeightSequence::gevrey(2.0, 128).unwrap()))
    }

    #[test]
    fn t2_integer_coupling_has_growing_kernel() {
        // divisor k + 2j: zeros along k = -2j.
        let spec = VectorFieldSpec::t2(Coupling::Rational(rational(2, 1)), Shift::default());
        let sp =
            DivisorSpectrum::new(spec, Truncation { g1_limit: 40, g2_limit: 20 }, 128).unwrap();
        let census = kernel_census(&sp);
        assert_eq!(census.count, 41); // j = -20..=20
        assert!(census.still_growing);
    }

    #[test]
    fn t2_irrational_coupling_kernel_is_origin_only() {
        let spec = VectorFieldSpec::t2(Coupling::Cf(CfPattern::SqrtTower), Shift::default());
        let sp =
            DivisorSpectrum::new(spec, Truncation { g1_limit: 50, g2_limit: 50 }, 128).unwrap();
        let census = kernel_census(&sp);
        assert_eq!(census.count, 1);
        assert!(census.pairs[0].0.is_trivial() && census.pairs[0].1.is_trivial());
        assert!(!census.still_growing);
    }

    #[test]
    fn s3_example_kernel_empty_with_half_i_shift() {
        // divisor k + alpha m + 1/2: never zero for irrational alpha.
        let spec =
            VectorFieldSpec::t1_su2(Coupling::Cf(CfPattern::FactorialPow10), Shift::half_i());
        let sp = DivisorSpectrum::new(spec, Truncation { g1_limit: 200, g2_limit: 60 }, 256)
            .unwrap();
        let census = kernel_census(&sp);
        assert!(census.empty);
    }

    #[test]
    fn s3_example_alpha_shift_kernel_is_infinite_family() {
        // divisor k + alpha (m + 1): zero at k = 0, m = -1, any integer l >= 1.
        let spec =
            VectorFieldSpec::t1_su2(Coupling::Cf(CfPattern::FactorialPow10), Shift::alpha_i());
        let sp = DivisorSpectrum::new(spec, Truncation { g1_limit: 50, g2_limit: 40 }, 256)
            .unwrap();
        let census = kernel_census(&sp);
        // integer l = 1..=20 (two_l = 2..=40 even).
        assert_eq!(census.count, 20);
        assert!(census.still_growing);
        for (xi, eta) in &census.pairs {
            assert!(xi.is_trivial());
            assert!(matches!(eta, RepIndex::Su2(l) if l.0 % 2 == 0 && l.0 >= 2));
        }
    }

    #[test]
    fn records_materialize_with_symbol_bound() {
        let spec =
            VectorFieldSpec::t1_su2(Coupling::Cf(CfPattern::FactorialPow10), Shift::half_i());
        let sp =
            DivisorSpectrum::new(spec, Truncation { g1_limit: 6, g2_limit: 5 }, 256).unwrap();
        let recs = sp.records().unwrap();
        assert_eq!(recs.len() as u64, sp.full_record_count());
        for r in &recs {
            assert!(r.lambda.abs() <= sp.spec.norm_x1() * r.freq.xi.weight() + 1e-12);
            assert!(r.mu.abs() <= sp.spec.norm_x2() * r.freq.eta.weight() + 1e-12);
            assert!(!r.exact_zero);
            assert!(r.abs > 0.0);
        }
    }

    #[test]
    fn divisor_values_match_direct_formula_small_scan() {
        let spec = VectorFieldSpec::t2(
            Coupling::Rational(rational(5, 3)),
            Shift {
                re: BigRational::zero(),
                im: rational(1, 2),
                im_alpha: BigRational::zero(),
            },
        );
        let sp =
            DivisorSpectrum::new(spec, Truncation { g1_limit: 10, g2_limit: 10 }, 128).unwrap();
        for r in sp.records().unwrap() {
            let k = match &r.freq.xi {
                RepIndex::Torus(k) => k[0] as f64,
                _ => unreachable!(),
            };
            let j = match &r.freq.eta {
                RepIndex::Torus(j) => j[0] as f64,
                _ => unreachable!(),
            };
            let want = k + 5.0 / 3.0 * j + 0.5;
            assert!((r.divisor_re - want).abs() < 1e-9, "{r:?}");
            assert_eq!(r.divisor_im, 0.0);
        }
    }

    #[test]
    fn complex_shift_bounds_divisor_below() {
        // q real nonzero: |D| >= |q| everywhere.
        let spec = VectorFieldSpec::t2(
            Coupling::Cf(CfPattern::SqrtTower),
            Shift {
                re: rational(3, 4),
                im: BigRational::zero(),
                im_alpha: BigRational::zero(),
            },
        );
        let sp =
            DivisorSpectrum::new(spec, Truncation { g1_limit: 20, g2_limit: 20 }, 128).unwrap();
        assert!(kernel_census(&sp).empty);
        for r in sp.records().unwrap() {
            assert!(r.abs >= 0.75 - 1e-12);
        }
    }

    #[test]
    fn sqrt2_t2_is_condition_consistent() {
        let spec = VectorFieldSpec::t2(
            Coupling::Cf(CfPattern::Periodic { head: vec![1], cycle: vec![2] }),
            Shift::default(),
        );
        let sp = DivisorSpectrum::new(spec, Truncation { g1_limit: 300, g2_limit: 200 }, 128)
            .unwrap();
        let verdict =
            diophantine_fit(&sp, &gevrey2(), FitMode::Roumieu, &default_n_grid()).unwrap();
        assert_eq!(verdict.verdict, Consistency::ConditionConsistent);
        // Roumieu-consistent ==> Beurling-consistent on the same data.
        let beu =
            diophantine_fit(&sp, &gevrey2(), FitMode::Beurling, &default_n_grid()).unwrap();
        assert_eq!(beu.verdict, Consistency::ConditionConsistent);
        // Hypoellipticity shape ==> solvability shape.
        assert!(verdict.hypoelliptic_consistent());
        assert!(verdict.solvable_consistent());
    }

    #[test]
    fn sqrt2_t2_polynomial_fit_is_stable() {
        // |k + sqrt(2) j| >= c / |j|: N' = 2 gives a stable constant.
        let spec = VectorFieldSpec::t2(
            Coupling::Cf(CfPattern::Periodic { head: vec![1], cycle: vec![2] }),
            Shift::default(),
        );
        let sp = DivisorSpectrum::new(spec, Truncation { g1_limit: 500, g2_limit: 300 }, 128)
            .unwrap();
        let v = smoothness_fit(&sp, &[2.0]).unwrap();
        assert_eq!(v.verdict, Consistency::ConditionConsistent);
        assert!(v.collapse_witnesses.is_empty());
        assert!(v.fits[0].log_c.is_finite());
    }

    #[test]
    fn tower_liouville_t2_violates_roumieu_gevrey2() {
        let spec = VectorFieldSpec::t2(Coupling::Cf(CfPattern::SqrtTower), Shift::default());
        let sp = DivisorSpectrum::new(
            spec,
            Truncation { g1_limit: 17_000, g2_limit: 38_000 },
            256,
        )
        .unwrap();
        let verdict =
            diophantine_fit(&sp, &gevrey2(), FitMode::Roumieu, &default_n_grid()).unwrap();
        assert_eq!(verdict.verdict, Consistency::Violated);
        // Witnesses should reach the deep convergent denominator 37897.
        let has = |j_want: i64| {
            verdict.witnesses.iter().any(|w| {
                matches!(&w.record.freq.eta, RepIndex::Torus(j) if j[0].abs() == j_want)
            })
        };
        assert!(has(37897), "deep convergent witness missing");
    }

    #[test]
    fn smoothness_fit_trivial_single_point() {
        let spec = VectorFieldSpec::t2(Coupling::Rational(rational(1, 2)), Shift::default());
        let sp =
            DivisorSpectrum::new(spec, Truncation { g1_limit: 0, g2_limit: 1 }, 64).unwrap();
        // Records: k = 0, j in {-1, 0, 1}: divisors j/2, zero at the origin.
        let v = smoothness_fit(&sp, &[2.0]).unwrap();
        let w = RepIndex::torus1(0).weight() + RepIndex::torus1(1).weight();
        let want = (0.5 * w * w).ln();
        assert!((v.fits[0].log_c - want).abs() < 1e-9, "{}", v.fits[0].log_c);
    }

    #[test]
    fn c_n_monotone_under_truncation_growth() {
        let af = gevrey2();
        let spec = VectorFieldSpec::t2(Coupling::Cf(CfPattern::SqrtTower), Shift::default());
        let mut prev = f64::INFINITY;
        for lim in [50i64, 200, 800] {
            let sp = DivisorSpectrum::new(
                spec.clone(),
                Truncation { g1_limit: lim, g2_limit: lim },
                128,
            )
            .unwrap();
            let v = diophantine_fit(&sp, &af, FitMode::Roumieu, &[1.0]).unwrap();
            assert!(v.fits[0].log_c <= prev + 1e-12);
            prev = v.fits[0].log_c;
        }
    }

    #[test]
    fn single_group_constant_shift_census() {
        // X on SU(2) with q = i/2: divisor m + 1/2 vanishes at m = -1/2,
        // i.e. every half-odd l; embedded as a product with a trivial
        // circle factor.
        let spec = VectorFieldSpec {
            g1: SymbolRule::Su2,
            g2: SymbolRule::TorusDir {
                dir: BigRational::from_integer(BigInt::from(1)),
            },
            coupling: Coupling::Rational(BigRational::zero()),
            coupling_im: BigRational::zero(),
            shift: Shift::half_i(),
        };
        let sp =
            DivisorSpectrum::new(spec, Truncation { g1_limit: 40, g2_limit: 0 }, 128).unwrap();
        let census = kernel_census(&sp);
        // l = 1/2, 3/2, ..., 39/2: two_l odd <= 40.
        assert_eq!(census.count, 20);
        assert!(census.still_growing);
    }
}
