//! Spectral solution of Lu = f by divisor division, admissibility against
//! the kernel frequencies, decay classification of coefficient fields, and
//! the adversarial fields built from the necessity arguments.

use crate::duals::RepIndex;
use crate::operator::{DivisorRecord, DivisorSpectrum, SymbolRule, WitnessRecord};
use crate::transforms::{CoefficientField, FactorBand, FreqKey, ProductBand};
use crate::weights::AssociatedFunction;
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("field band exceeds the operator truncation: {0}")]
    TruncationMismatch(String),
    #[error("inadmissible right-hand side: {0} offending kernel entries")]
    Inadmissible(usize),
    #[error("classification needs >= {need} nonzero coefficients spanning a weight ratio >= {ratio}; got {got} over {span:.2}")]
    InsufficientSpan {
        need: usize,
        ratio: f64,
        got: usize,
        span: f64,
    },
    #[error("no violation witnesses to build an adversarial field from")]
    NoWitnesses,
}

/// Divisor at one flattened block row, with the exact-zero flag.
pub fn row_divisor(
    sp: &DivisorSpectrum,
    xi: &FreqKey,
    eta: &FreqKey,
    m_row: usize,
    r_row: usize,
) -> DivisorRecord {
    let xi_rep = xi.rep();
    let eta_rep = eta.rep();
    let lambda = eigenvalue(&sp.spec.g1, &xi_rep, m_row);
    let mu = eigenvalue(&sp.spec.g2, &eta_rep, r_row);
    sp.record_at(&xi_rep, m_row, &lambda, &eta_rep, r_row, &mu)
}

fn eigenvalue(rule: &SymbolRule, rep: &RepIndex, row: usize) -> BigRational {
    match (rule, rep) {
        (SymbolRule::TorusDir { dir }, RepIndex::Torus(k)) => {
            dir * BigRational::from_integer(BigInt::from(k[0]))
        }
        (SymbolRule::Su2, RepIndex::Su2(_)) => {
            let rho = rep.row_labels()[row - 1];
            -rho.to_rational()
        }
        _ => panic!("symbol rule does not match the representation"),
    }
}

fn check_band(sp: &DivisorSpectrum, band: ProductBand) -> Result<(), SolverError> {
    let ok1 = match band.first {
        FactorBand::Torus { kmax } => {
            matches!(sp.spec.g1, SymbolRule::TorusDir { .. }) && kmax <= sp.trunc.g1_limit
        }
        FactorBand::Su2 { two_lmax } => {
            matches!(sp.spec.g1, SymbolRule::Su2) && two_lmax <= sp.trunc.g1_limit
        }
    };
    let ok2 = match band.second {
        FactorBand::Torus { kmax } => {
            matches!(sp.spec.g2, SymbolRule::TorusDir { .. }) && kmax <= sp.trunc.g2_limit
        }
        FactorBand::Su2 { two_lmax } => {
            matches!(sp.spec.g2, SymbolRule::Su2) && two_lmax <= sp.trunc.g2_limit
        }
    };
    if ok1 && ok2 {
        Ok(())
    } else {
        Err(SolverError::TruncationMismatch(format!(
            "band {band:?} vs truncation {:?}",
            sp.trunc
        )))
    }
}

/// One kernel entry carrying a nonzero coefficient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OffendingEntry {
    pub xi: RepIndex,
    pub eta: RepIndex,
    pub i: usize,
    pub j: usize,
    pub magnitude: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub offending: Vec<OffendingEntry>,
    pub max_offending: f64,
    pub admissible: bool,
    pub tolerance: f64,
}

/// Scans kernel rows for nonzero coefficients. The tolerance for "zero"
/// is 1e-13 of the field's Plancherel norm.
pub fn check_admissible(
    f: &CoefficientField,
    sp: &DivisorSpectrum,
) -> Result<AdmissibilityReport, SolverError> {
    check_band(sp, f.band)?;
    let tol = 1e-13 * f.plancherel_norm();
    let mut offending = Vec::new();
    let mut max_off: f64 = 0.0;
    for ((xi, eta), block) in &f.blocks {
        let dim = block.dim();
        for i in 1..=dim {
            let (m, r) = row_of(i, block.d2);
            let rec = row_divisor(sp, xi, eta, m, r);
            if !rec.exact_zero {
                continue;
            }
            for j in 1..=dim {
                let v = block.get(i, j).norm();
                if v > tol {
                    max_off = max_off.max(v);
                    offending.push(OffendingEntry {
                        xi: xi.rep(),
                        eta: eta.rep(),
                        i,
                        j,
                        magnitude: v,
                    });
                }
            }
        }
    }
    Ok(AdmissibilityReport {
        admissible: offending.is_empty(),
        max_offending: max_off,
        offending,
        tolerance: tol,
    })
}

#[inline]
fn row_of(i: usize, d2: usize) -> (usize, usize) {
    ((i - 1) / d2 + 1, (i - 1) % d2 + 1)
}

/// The canonical solution of Lu = f: u-hat = -i f-hat / (lambda + a mu)
/// off the kernel, zero on it.
pub fn solve(f: &CoefficientField, sp: &DivisorSpectrum) -> Result<CoefficientField, SolverError> {
    let report = check_admissible(f, sp)?;
    if !report.admissible {
        return Err(SolverError::Inadmissible(report.offending.len()));
    }
    let mut out = f.clone();
    for ((xi, eta), block) in &mut out.blocks {
        let dim = block.dim();
        for i in 1..=dim {
            let (m, r) = row_of(i, block.d2);
            let rec = row_divisor(sp, xi, eta, m, r);
            if rec.exact_zero {
                for j in 1..=dim {
                    block.set(i, j, Complex64::new(0.0, 0.0));
                }
                continue;
            }
            let inv = Complex64::new(0.0, -1.0) / Complex64::new(rec.divisor_re, rec.divisor_im);
            for j in 1..=dim {
                let v = block.get(i, j);
                if v.norm_sqr() != 0.0 {
                    block.set(i, j, v * inv);
                }
            }
        }
    }
    Ok(out)
}

/// The multiplier action: (Lu)-hat = i (lambda + a mu) u-hat, row-wise.
pub fn apply(sp: &DivisorSpectrum, u: &CoefficientField) -> Result<CoefficientField, SolverError> {
    check_band(sp, u.band)?;
    let mut out = u.clone();
    for ((xi, eta), block) in &mut out.blocks {
        let dim = block.dim();
        for i in 1..=dim {
            let (m, r) = row_of(i, block.d2);
            let rec = row_divisor(sp, xi, eta, m, r);
            let mult = Complex64::new(0.0, 1.0) * Complex64::new(rec.divisor_re, rec.divisor_im);
            for j in 1..=dim {
                let v = block.get(i, j);
                if v.norm_sqr() != 0.0 {
                    block.set(i, j, v * mult);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decay classification
// ---------------------------------------------------------------------------

/// Regularity classes ordered from strongest to weakest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecayLabel {
    BeurlingFunction,
    RoumieuFunction,
    Smooth,
    FiniteOrderDistribution,
    RoumieuUltradistribution,
    BeurlingUltradistribution,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CharacterizationFit {
    pub n: f64,
    /// ln of the fitted constant (max over entries of the tested bound).
    pub log_c: f64,
    /// Constant at the 10%-of-top-weight checkpoint, for the trend test.
    pub log_c_at_checkpoint: f64,
    /// C grew by < 10x across the top weight decade.
    pub stable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SideFits {
    pub fits: Vec<CharacterizationFit>,
    pub any_stable: bool,
    pub all_stable: bool,
    /// Strongest stable parameter: largest N on decay sides, smallest on
    /// growth sides.
    pub best_n: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayVerdict {
    pub label: DecayLabel,
    /// Upward-closed set of classes the data is consistent with.
    pub passing: Vec<DecayLabel>,
    /// |c| <= C exp(-M(N w)) fits per N.
    pub function_side: SideFits,
    /// |c| <= C exp(+M(N w)) fits per N.
    pub distribution_side: SideFits,
    /// |c| <= C w^(-s) fits per s.
    pub smooth_side: SideFits,
    /// |c| <= C w^(+s) fits per s.
    pub order_side: SideFits,
    /// (w, ln|c| + M(N* w), ln|c| - M(N* w)) at the best function-side N
    /// (or the first grid N when none is stable); subsampled.
    pub residual_curve: Vec<(f64, f64, f64)>,
    pub points: usize,
    pub span_ratio: f64,
}

/// Minimum data the classifier accepts.
const MIN_POINTS: usize = 30;
const MIN_SPAN: f64 = 10.0;

/// Classifies the decay of a coefficient field against the Komatsu bound
/// shapes. Every verdict is a fit at finite truncation: "stable" means the
/// fitted constant moved by less than 10x across the top weight decade.
pub fn classify_decay(
    c: &CoefficientField,
    weights: &AssociatedFunction,
    n_grid: &[f64],
) -> Result<DecayVerdict, SolverError> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for ((xi, eta), block) in &c.blocks {
        let w = xi.weight() + eta.weight();
        for v in &block.entries {
            let a = v.norm();
            if a > 0.0 {
                pts.push((w, a.ln()));
            }
        }
    }
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let span = if pts.is_empty() {
        0.0
    } else {
        pts.last().unwrap().0 / pts[0].0
    };
    if pts.len() < MIN_POINTS || span < MIN_SPAN {
        return Err(SolverError::InsufficientSpan {
            need: MIN_POINTS,
            ratio: MIN_SPAN,
            got: pts.len(),
            span,
        });
    }
    let w_max = pts.last().unwrap().0;
    let checkpoint_w = w_max / MIN_SPAN;

    let fit = |penalty: &dyn Fn(f64, f64) -> f64, n: f64| -> CharacterizationFit {
        let mut log_c = f64::NEG_INFINITY;
        let mut at_cp = f64::NEG_INFINITY;
        for &(w, la) in &pts {
            let v = la + penalty(n, w);
            log_c = log_c.max(v);
            if w <= checkpoint_w {
                at_cp = at_cp.max(v);
            }
        }
        CharacterizationFit {
            n,
            log_c,
            log_c_at_checkpoint: at_cp,
            stable: log_c <= at_cp + std::f64::consts::LN_10,
        }
    };
    let side = |penalty: &dyn Fn(f64, f64) -> f64, grid: &[f64], strongest_large: bool| {
        let fits: Vec<CharacterizationFit> = grid.iter().map(|&n| fit(penalty, n)).collect();
        let any = fits.iter().any(|f| f.stable);
        let all = fits.iter().all(|f| f.stable);
        let best = if strongest_large {
            fits.iter().rev().find(|f| f.stable).map(|f| f.n)
        } else {
            fits.iter().find(|f| f.stable).map(|f| f.n)
        };
        SideFits {
            fits,
            any_stable: any,
            all_stable: all,
            best_n: best,
        }
    };

    let s_grid = [1.0, 2.0, 4.0, 10.0];
    let function_side = side(&|n, w| weights.value(n * w), n_grid, true);
    let distribution_side = side(&|n, w| -weights.value(n * w), n_grid, false);
    let smooth_side = side(&|s, w| s * w.ln(), &s_grid, true);
    let order_side = side(&|s, w| -s * w.ln(), &s_grid, false);

    // Labels close upward along the inclusion chain.
    let beurling_fn = function_side.all_stable;
    let roumieu_fn = function_side.any_stable || beurling_fn;
    let smooth = smooth_side.all_stable || roumieu_fn;
    let finite_order = order_side.any_stable || smooth;
    let roumieu_ultra = distribution_side.all_stable || finite_order;
    let beurling_ultra = distribution_side.any_stable || roumieu_ultra;
    let chain = [
        (DecayLabel::BeurlingFunction, beurling_fn),
        (DecayLabel::RoumieuFunction, roumieu_fn),
        (DecayLabel::Smooth, smooth),
        (DecayLabel::FiniteOrderDistribution, finite_order),
        (DecayLabel::RoumieuUltradistribution, roumieu_ultra),
        (DecayLabel::BeurlingUltradistribution, beurling_ultra),
    ];
    let passing: Vec<DecayLabel> = chain.iter().filter(|(_, p)| *p).map(|(l, _)| *l).collect();
    let label = passing.first().copied().unwrap_or(DecayLabel::Inconclusive);

    let n_star = function_side.best_n.unwrap_or(n_grid[0]);
    let stride = (pts.len() / 512).max(1);
    let residual_curve = pts
        .iter()
        .step_by(stride)
        .map(|&(w, la)| {
            let m = weights.value(n_star * w);
            (w, la + m, la - m)
        })
        .collect();
    Ok(DecayVerdict {
        label,
        passing,
        function_side,
        distribution_side,
        smooth_side,
        order_side,
        residual_curve,
        points: pts.len(),
        span_ratio: span,
    })
}

// ---------------------------------------------------------------------------
// Adversarial constructions
// ---------------------------------------------------------------------------

/// Which necessity construction to build from the witness list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversarialMode {
    /// f-hat = (lambda + a mu)(<xi> + <eta>) at the witnesses: a smooth-
    /// class right-hand side whose canonical preimage has |u-hat| = w.
    HypoRoumieu,
    /// f-hat = 1 at the witnesses: admissible data the solution bounds
    /// blow up on.
    SolvRoumieu,
    /// u-hat = 1 at the witnesses: a non-smooth kernel-side sequence.
    HypoBeurling,
}

/// Places the construction's entries at the witness frequencies (entry
/// (m,1),(r,1) of each block). The field band is the witness hull.
pub fn adversarial_field(
    sp: &DivisorSpectrum,
    witnesses: &[WitnessRecord],
    mode: AdversarialMode,
) -> Result<CoefficientField, SolverError> {
    if witnesses.is_empty() {
        return Err(SolverError::NoWitnesses);
    }
    let band = witness_hull(sp, witnesses);
    let mut out = CoefficientField::zero(band);
    for w in witnesses {
        let rec = &w.record;
        let xi = freq_key(&rec.freq.xi);
        let eta = freq_key(&rec.freq.eta);
        let value = match mode {
            AdversarialMode::HypoRoumieu => {
                Complex64::new(rec.divisor_re, rec.divisor_im) * rec.weight
            }
            AdversarialMode::SolvRoumieu | AdversarialMode::HypoBeurling => {
                Complex64::new(1.0, 0.0)
            }
        };
        let block = out.block_mut(xi, eta);
        let idx = crate::duals::flatten(rec.freq.m, 1, rec.freq.r, 1, block.d1, block.d2)
            .expect("witness rows are in range");
        block.set(idx.i, idx.j, value);
    }
    Ok(out)
}

fn freq_key(rep: &RepIndex) -> FreqKey {
    match rep {
        RepIndex::Torus(k) => FreqKey::Torus(k[0]),
        RepIndex::Su2(l) => FreqKey::Su2(l.0),
    }
}

fn witness_hull(sp: &DivisorSpectrum, witnesses: &[WitnessRecord]) -> ProductBand {
    let mut k1 = 0i64;
    let mut k2 = 0i64;
    for w in witnesses {
        match &w.record.freq.xi {
            RepIndex::Torus(k) => k1 = k1.max(k[0].abs()),
            RepIndex::Su2(l) => k1 = k1.max(l.0),
        }
        match &w.record.freq.eta {
            RepIndex::Torus(k) => k2 = k2.max(k[0].abs()),
            RepIndex::Su2(l) => k2 = k2.max(l.0),
        }
    }
    let first = match sp.spec.g1 {
        SymbolRule::TorusDir { .. } => FactorBand::Torus { kmax: k1 },
        SymbolRule::Su2 => FactorBand::Su2 { two_lmax: k1 },
    };
    let second = match sp.spec.g2 {
        SymbolRule::TorusDir { .. } => FactorBand::Torus { kmax: k2 },
        SymbolRule::Su2 => FactorBand::Su2 { two_lmax: k2 },
    };
    ProductBand { first, second }
}
