//! Continued fractions with exact big-integer convergents, rigorous value
//! enclosures, and Liouville / exponential-Liouville classification of the
//! approximation speed.
//!
//! Irrational couplings are never stored as floats: every consumer works
//! from convergent pairs (p_n, q_n) and the two-sided bracket
//! 1/(q_n (q_n + q_{n+1})) < |q_n a - p_n| < 1/q_{n+1}.

use crate::numeric::ln_bigint;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CfError {
    #[error("continued fraction needs at least one partial quotient")]
    Empty,
    #[error("partial quotients after a_0 must be >= 1 (index {0})")]
    NonPositiveQuotient(usize),
    #[error(
        "insufficient precision: pattern cannot extend past depth {reached} \
         (next quotient needs ~{next_bits} bits)"
    )]
    InsufficientPrecision { reached: usize, next_bits: u64 },
    #[error("profile needs depth >= 2, got {0}")]
    TooShallow(usize),
}

/// Rule generating the partial quotients a_0, a_1, ...
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CfPattern {
    /// A finite, explicitly listed expansion (rational value).
    Explicit(Vec<BigInt>),
    /// a_n = 10^{(n+1)!}; the classical Liouville-type example.
    FactorialPow10,
    /// a_0 = 0, a_1 = 2, a_{n+1} = 2^{ceil(sqrt(q_n))}. The convergent
    /// gaps obey log(1/|q_n a - p_n|) >= sqrt(q_n) log 2, i.e. the value
    /// approximates at an exponential-Liouville rate of order 2.
    SqrtTower,
    /// Eventually periodic quotients (quadratic irrationals).
    Periodic { head: Vec<u64>, cycle: Vec<u64> },
}

/// Cap on the bit size of a single partial quotient; generators that would
/// exceed it return an explicit precision error instead of rounding.
const MAX_QUOTIENT_BITS: u64 = 4_000_000;

#[derive(Clone, Debug)]
pub struct ContinuedFraction {
    pattern: CfPattern,
    quotients: Vec<BigInt>,
    /// p[n], q[n] with seeds p_{-1} = 1, p_{-2} = 0, q_{-1} = 0, q_{-2} = 1.
    p: Vec<BigInt>,
    q: Vec<BigInt>,
    /// Generator refused to extend past this depth (tower growth).
    exhausted: bool,
}

impl ContinuedFraction {
    pub fn new(pattern: CfPattern) -> Result<Self, CfError> {
        if let CfPattern::Explicit(qs) = &pattern {
            if qs.is_empty() {
                return Err(CfError::Empty);
            }
            for (i, a) in qs.iter().enumerate().skip(1) {
                if *a < BigInt::one() {
                    return Err(CfError::NonPositiveQuotient(i));
                }
            }
        }
        let mut cf = ContinuedFraction {
            pattern,
            quotients: Vec::new(),
            p: Vec::new(),
            q: Vec::new(),
            exhausted: false,
        };
        cf.extend_to(0)?;
        Ok(cf)
    }

    pub fn sqrt2() -> Self {
        Self::new(CfPattern::Periodic {
            head: vec![1],
            cycle: vec![2],
        })
        .expect("static pattern")
    }

    pub fn golden_ratio() -> Self {
        Self::new(CfPattern::Periodic {
            head: vec![1],
            cycle: vec![1],
        })
        .expect("static pattern")
    }

    pub fn is_rational(&self) -> bool {
        matches!(&self.pattern, CfPattern::Explicit(_))
    }

    /// Largest depth the generator can reach (None = only memory-bound).
    pub fn depth_limit(&self) -> Option<usize> {
        match &self.pattern {
            CfPattern::Explicit(qs) => Some(qs.len() - 1),
            _ => None,
        }
    }

    fn next_quotient(&self, n: usize) -> Result<BigInt, CfError> {
        match &self.pattern {
            CfPattern::Explicit(qs) => qs.get(n).cloned().ok_or(CfError::InsufficientPrecision {
                reached: n.saturating_sub(1),
                next_bits: 0,
            }),
            CfPattern::FactorialPow10 => {
                let mut fact = 1u64;
                for i in 2..=(n as u64 + 1) {
                    fact = fact.saturating_mul(i);
                }
                let bits_needed = (fact as f64 * 10f64.log2()).ceil() as u64;
                if bits_needed > MAX_QUOTIENT_BITS {
                    return Err(CfError::InsufficientPrecision {
                        reached: n - 1,
                        next_bits: bits_needed,
                    });
                }
                Ok(BigInt::from(10u32).pow(fact as u32))
            }
            CfPattern::SqrtTower => {
                if n == 0 {
                    return Ok(BigInt::zero());
                }
                if n == 1 {
                    return Ok(BigInt::from(2));
                }
                let qn = &self.q[n - 1];
                let mut root = qn.sqrt();
                if &root * &root < *qn {
                    root += 1u32; // ceil
                }
                let bits: u64 = (&root).try_into().unwrap_or(u64::MAX);
                if bits > MAX_QUOTIENT_BITS {
                    return Err(CfError::InsufficientPrecision {
                        reached: n - 1,
                        next_bits: bits,
                    });
                }
                Ok(BigInt::one() << bits)
            }
            CfPattern::Periodic { head, cycle } => {
                let a = if n < head.len() {
                    head[n]
                } else {
                    cycle[(n - head.len()) % cycle.len()]
                };
                Ok(BigInt::from(a))
            }
        }
    }

    /// Ensures convergents up to index n exist; errors when the generator
    /// cannot reach that depth.
    pub fn extend_to(&mut self, n: usize) -> Result<(), CfError> {
        while self.quotients.len() <= n {
            let idx = self.quotients.len();
            let a = match self.next_quotient(idx) {
                Ok(a) => a,
                Err(e) => {
                    self.exhausted = true;
                    return Err(e);
                }
            };
            let (p_prev, p_prev2) = match idx {
                0 => (BigInt::one(), BigInt::zero()),
                1 => (self.p[0].clone(), BigInt::one()),
                _ => (self.p[idx - 1].clone(), self.p[idx - 2].clone()),
            };
            let (q_prev, q_prev2) = match idx {
                0 => (BigInt::zero(), BigInt::one()),
                1 => (self.q[0].clone(), BigInt::zero()),
                _ => (self.q[idx - 1].clone(), self.q[idx - 2].clone()),
            };
            self.p.push(&a * &p_prev + p_prev2);
            self.q.push(&a * &q_prev + q_prev2);
            self.quotients.push(a);
        }
        Ok(())
    }

    /// Deepest convergent index currently available.
    pub fn depth(&self) -> usize {
        self.quotients.len() - 1
    }

    pub fn partial_quotient(&self, n: usize) -> &BigInt {
        &self.quotients[n]
    }

    /// Exact convergents p_0/q_0 .. p_n/q_n.
    pub fn convergents(&mut self, n: usize) -> Result<Vec<(BigInt, BigInt)>, CfError> {
        self.extend_to(n)?;
        Ok((0..=n).map(|i| (self.p[i].clone(), self.q[i].clone())).collect())
    }

    pub fn convergent(&self, n: usize) -> (&BigInt, &BigInt) {
        (&self.p[n], &self.q[n])
    }

    /// Rational enclosure [lo, hi] of the value using the deepest two
    /// convergents currently computed (degenerate for rationals).
    pub fn enclosure(&self) -> (BigRational, BigRational) {
        let n = self.depth();
        let last = BigRational::new(self.p[n].clone(), self.q[n].clone());
        if self.is_rational() && Some(n) == self.depth_limit() {
            return (last.clone(), last);
        }
        if n == 0 {
            // a_0 < value < a_0 + 1.
            return (last.clone(), last + BigRational::one());
        }
        let prev = BigRational::new(self.p[n - 1].clone(), self.q[n - 1].clone());
        if last < prev {
            (last, prev)
        } else {
            (prev, last)
        }
    }

    /// Refines until the enclosure width drops below 2^-bits (absolute),
    /// or the generator gives out; returns the achieved width in bits.
    pub fn refine_to_bits(&mut self, bits: u64) -> Result<f64, CfError> {
        loop {
            let achieved = self.enclosure_bits();
            if achieved >= bits as f64 {
                return Ok(achieved);
            }
            if self.is_rational() && Some(self.depth()) == self.depth_limit() {
                return Ok(f64::INFINITY);
            }
            let next = self.depth() + 1;
            if let Err(e) = self.extend_to(next) {
                let achieved = self.enclosure_bits();
                if achieved >= bits as f64 {
                    return Ok(achieved);
                }
                return Err(e);
            }
        }
    }

    /// Width of the current enclosure, as -log2(hi - lo).
    pub fn enclosure_bits(&self) -> f64 {
        let n = self.depth();
        if n == 0 {
            return 0.0;
        }
        // |p_n/q_n - p_{n-1}/q_{n-1}| = 1/(q_n q_{n-1}).
        (ln_bigint(&self.q[n]) + ln_bigint(&self.q[n - 1])) / std::f64::consts::LN_2
    }

    /// Midpoint of the enclosure as f64 (for display and grid synthesis
    /// only; never used in divisor decisions).
    pub fn approx_f64(&self) -> f64 {
        let (lo, hi) = self.enclosure();
        let mid = (lo + hi) / BigRational::from_integer(BigInt::from(2));
        crate::numeric::rational_to_f64(&mid)
    }

    /// Rigorous bounds on ln |q_n a - p_n| from the convergent sandwich
    /// 1/(q_n (q_n + q_{n+1})) < |q_n a - p_n| < 1/q_{n+1}. None when
    /// q_{n+1} is not available.
    pub fn gap_log_bounds(&self, n: usize) -> Option<(f64, f64)> {
        if self.is_rational() && Some(n) >= self.depth_limit() {
            return None;
        }
        if n + 1 > self.depth() {
            return None;
        }
        let qn = &self.q[n];
        let qn1 = &self.q[n + 1];
        let lo = -(ln_bigint(qn) + ln_bigint(&(qn + qn1)));
        let hi = -ln_bigint(qn1);
        Some((lo, hi))
    }
}

/// Per-convergent approximation record with rigorous two-sided log bounds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapRecord {
    pub n: usize,
    pub log_q: f64,
    /// Bounds on ln |q_n a - p_n|.
    pub log_gap_lo: f64,
    pub log_gap_hi: f64,
    /// Implied Liouville exponent nu with |q a - p| ~ q^-nu (lower bound).
    pub liouville_exponent: f64,
    /// eps(s) = -ln|q a - p| / q^(1/s) for the order grid (s, eps) pairs;
    /// bounded away from 0 along n is the exponential-Liouville signature.
    pub exp_rate: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateVerdict {
    Consistent,
    Inconsistent,
    Rational,
    Undetermined,
}

/// Classification of how fast the convergents approach the value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApproximationProfile {
    pub records: Vec<GapRecord>,
    pub rational: bool,
    /// Liouville: the implied exponent keeps growing through the tail.
    pub liouville: RateVerdict,
    /// Per order s: does the value approximate at rate exp(-eps q^(1/s))?
    pub exp_liouville: Vec<(f64, RateVerdict)>,
    pub precision_bits: u64,
}

/// Builds the approximation profile down to convergent n (needs n >= 2).
pub fn approximation_profile(
    cf: &mut ContinuedFraction,
    n: usize,
    s_grid: &[f64],
    precision_bits: u64,
) -> Result<ApproximationProfile, CfError> {
    if cf.is_rational() {
        return Ok(ApproximationProfile {
            records: Vec::new(),
            rational: true,
            liouville: RateVerdict::Rational,
            exp_liouville: s_grid.iter().map(|&s| (s, RateVerdict::Rational)).collect(),
            precision_bits,
        });
    }
    if n < 2 {
        return Err(CfError::TooShallow(n));
    }
    // The record at index n needs q_{n+1}.
    let deepest = match cf.extend_to(n + 1) {
        Ok(()) => n,
        Err(_) => {
            let d = cf.depth();
            if d < 3 {
                return Err(CfError::InsufficientPrecision {
                    reached: d,
                    next_bits: 0,
                });
            }
            d - 1
        }
    };
    let mut records = Vec::new();
    for k in 1..=deepest {
        let qn = cf.convergent(k).1.clone();
        let qn1 = cf.convergent(k + 1).1.clone();
        let log_q = ln_bigint(&qn);
        let log_gap_hi = -ln_bigint(&qn1);
        let log_gap_lo = -(ln_bigint(&(&qn + &qn1)) + log_q);
        let nu = -log_gap_hi / log_q.max(f64::MIN_POSITIVE);
        let exp_rate = s_grid
            .iter()
            .map(|&s| (s, -log_gap_hi / (log_q / s).exp()))
            .collect();
        records.push(GapRecord {
            n: k,
            log_q,
            log_gap_lo,
            log_gap_hi,
            liouville_exponent: nu,
            exp_rate,
        });
    }
    // Gap sequence must fall strictly.
    for w in records.windows(2) {
        debug_assert!(w[1].log_gap_hi < w[0].log_gap_hi);
    }
    let liouville = trend_verdict(records.iter().map(|r| r.liouville_exponent), 4.0);
    let exp_liouville = s_grid
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let v = trend_verdict(records.iter().map(|r| r.exp_rate[j].1), 0.05);
            (s, v)
        })
        .collect();
    Ok(ApproximationProfile {
        records,
        rational: false,
        liouville,
        exp_liouville,
        precision_bits,
    })
}

/// Consistent when the series stays above `floor` at the tail and has not
/// collapsed an order of magnitude below its peak.
fn trend_verdict(series: impl Iterator<Item = f64>, floor: f64) -> RateVerdict {
    let vals: Vec<f64> = series.collect();
    if vals.len() < 2 {
        return RateVerdict::Undetermined;
    }
    let last = *vals.last().unwrap();
    let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if last >= floor && last >= peak / 10.0 {
        RateVerdict::Consistent
    } else {
        RateVerdict::Inconsistent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_integer::Integer;

    fn explicit(qs: &[u64]) -> ContinuedFraction {
        ContinuedFraction::new(CfPattern::Explicit(
            qs.iter().map(|&a| BigInt::from(a)).collect(),
        ))
        .unwrap()
    }

    #[test]
    fn convergent_recurrence_examples() {
        let mut cf = explicit(&[10]);
        assert_eq!(
            cf.convergents(0).unwrap(),
            vec![(BigInt::from(10), BigInt::from(1))]
        );
        let mut cf = explicit(&[10, 100]);
        let c = cf.convergents(1).unwrap();
        assert_eq!(c[1], (BigInt::from(1001), BigInt::from(100)));
        let mut cf = explicit(&[10, 100, 1_000_000]);
        let c = cf.convergents(2).unwrap();
        assert_eq!(c[2].1, BigInt::from(100_000_001u64));
        assert_eq!(c[2].0, BigInt::from(1_001_000_010u64));
    }

    #[test]
    fn convergents_are_reduced_and_alternating() {
        let mut cf = ContinuedFraction::new(CfPattern::FactorialPow10).unwrap();
        let conv = cf.convergents(4).unwrap();
        for (p, q) in &conv {
            assert!(p.gcd(q).is_one());
        }
        // Even convergents sit below the value, odd ones above.
        let (lo, hi) = cf.enclosure();
        for (i, (p, q)) in conv.iter().enumerate() {
            let c = BigRational::new(p.clone(), q.clone());
            if i % 2 == 0 {
                assert!(c <= hi);
            } else {
                assert!(c >= lo);
            }
        }
        assert!(lo < hi);
    }

    #[test]
    fn factorial_pattern_quotients() {
        let mut cf = ContinuedFraction::new(CfPattern::FactorialPow10).unwrap();
        cf.extend_to(3).unwrap();
        assert_eq!(cf.partial_quotient(0), &BigInt::from(10));
        assert_eq!(cf.partial_quotient(1), &BigInt::from(100));
        assert_eq!(cf.partial_quotient(2), &BigInt::from(10u64.pow(6)));
        assert_eq!(cf.partial_quotient(3), &BigInt::from(10).pow(24));
    }

    #[test]
    fn refine_reports_achieved_bits() {
        let mut cf = ContinuedFraction::new(CfPattern::FactorialPow10).unwrap();
        let achieved = cf.refine_to_bits(256).unwrap();
        assert!(achieved >= 256.0);
        // sqrt(2) needs many steps but each is cheap.
        let mut r2 = ContinuedFraction::sqrt2();
        let achieved = r2.refine_to_bits(512).unwrap();
        assert!(achieved >= 512.0);
        let v = r2.approx_f64();
        assert!((v - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tower_pattern_matches_hand_computation() {
        let mut cf = ContinuedFraction::new(CfPattern::SqrtTower).unwrap();
        cf.extend_to(4).unwrap();
        // q: 1, 2, 9, 74, 37897 with a = [0, 2, 4, 8, 512].
        assert_eq!(cf.convergent(1).1, &BigInt::from(2));
        assert_eq!(cf.convergent(2).1, &BigInt::from(9));
        assert_eq!(cf.convergent(3).1, &BigInt::from(74));
        assert_eq!(cf.convergent(4).1, &BigInt::from(37897));
        // Depth 5 is still exact (~211 bits); depth 6 must refuse loudly.
        cf.extend_to(5).unwrap();
        let err = cf.extend_to(6).unwrap_err();
        assert!(matches!(err, CfError::InsufficientPrecision { .. }));
    }

    #[test]
    fn factorial_alpha_profile_is_liouville_not_exp_liouville() {
        let mut cf = ContinuedFraction::new(CfPattern::FactorialPow10).unwrap();
        let prof = approximation_profile(&mut cf, 4, &[1.0, 2.0, 3.0], 256).unwrap();
        assert_eq!(prof.liouville, RateVerdict::Consistent);
        for (s, v) in &prof.exp_liouville {
            assert_eq!(
                *v,
                RateVerdict::Inconsistent,
                "alpha must not be exponential-Liouville of order {s}"
            );
        }
        // First record reproduces the sandwich |q_1 a - p_1| < 1/q_2 with
        // q_1 = 100, q_2 = 1e8 + 1, i.e. better than q_1^-4.
        let r1 = &prof.records[0];
        assert!(r1.log_gap_hi < -4.0 * r1.log_q);
        assert!(r1.log_gap_lo <= r1.log_gap_hi);
    }

    #[test]
    fn golden_ratio_is_not_liouville() {
        let mut cf = ContinuedFraction::golden_ratio();
        cf.extend_to(40).unwrap();
        let prof = approximation_profile(&mut cf, 38, &[2.0], 128).unwrap();
        assert_eq!(prof.liouville, RateVerdict::Inconsistent);
        // |q_n a - p_n| ~ c q_n^-1 for the worst-approximable number.
        let last = prof.records.last().unwrap();
        assert!((last.liouville_exponent - 1.0).abs() < 0.1);
    }

    #[test]
    fn tower_value_is_exp_liouville_order_two() {
        let mut cf = ContinuedFraction::new(CfPattern::SqrtTower).unwrap();
        cf.extend_to(5).unwrap();
        let prof = approximation_profile(&mut cf, 4, &[2.0], 256).unwrap();
        assert_eq!(prof.exp_liouville[0], (2.0, RateVerdict::Consistent));
    }

    #[test]
    fn rational_input_terminates() {
        let mut cf = explicit(&[3, 7]);
        let prof = approximation_profile(&mut cf, 5, &[2.0], 64).unwrap();
        assert!(prof.rational);
        assert!(prof.records.is_empty());
        let (lo, hi) = cf.enclosure();
        // [3; 7] = 22/7 exactly once fully expanded.
        let mut cf2 = explicit(&[3, 7]);
        cf2.extend_to(1).unwrap();
        let (lo2, hi2) = cf2.enclosure();
        assert_eq!(lo2, hi2);
        assert_eq!(lo2, BigRational::new(BigInt::from(22), BigInt::from(7)));
        let _ = (lo, hi);
    }
}
